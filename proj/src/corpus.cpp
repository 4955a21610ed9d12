#include "layertracer/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "layertracer/error.hpp"

namespace layertracer::corpus {

namespace {

constexpr std::string_view kExamplePrefix = "Example:";
constexpr std::string_view kFirstArrow = "->";
constexpr std::string_view kPairSeparator = ", ";
constexpr std::string_view kSecondArrow = "-";
constexpr std::string_view kContextTerminator = "; ";
constexpr std::string_view kQueryPrefix = "Query:";
constexpr std::string_view kQueryArrow = "->";

void check_word(std::string_view word) {
  require(!word.empty(), ErrorCode::InvalidInput, "prompt words must be nonempty");
  for (char c : word) {
    const auto u = static_cast<unsigned char>(c);
    require(u > 32 && u < 127 && c != ',' && c != ';' && c != '-' && c != '>' && c != ':',
            ErrorCode::InvalidInput,
            "word '" + std::string(word) + "' contains a character reserved by the prompt template");
  }
}

std::string decapitalize(std::string_view word) {
  std::string out(word);
  if (!out.empty()) {
    out[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(out[0])));
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
    ++b;
  }
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
    --e;
  }
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::string capitalize(std::string_view word) {
  std::string out(word);
  if (!out.empty()) {
    out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  }
  return out;
}

StructuredPrompt build_prompt(const WordPair& pair1, const WordPair& pair2, std::string_view query_word) {
  for (auto w : {std::string_view(pair1.first), std::string_view(pair1.second),
                 std::string_view(pair2.first), std::string_view(pair2.second), query_word}) {
    check_word(w);
  }
  StructuredPrompt p;
  p.text.append(kExamplePrefix)
      .append(pair1.first)
      .append(kFirstArrow)
      .append(capitalize(pair1.second))
      .append(kPairSeparator)
      .append(pair2.first)
      .append(kSecondArrow)
      .append(capitalize(pair2.second))
      .append(kContextTerminator);
  p.context_span = {0, p.text.size()};
  p.text.append(kQueryPrefix).append(query_word).append(kQueryArrow);
  p.query_span = {p.context_span.end, p.text.size()};
  p.pairs = {pair1, pair2};
  p.query_word = std::string(query_word);
  return p;
}

StructuredPrompt parse_prompt(std::string_view text) {
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::InvalidInput, "not a structured prompt (" + why + "): " + std::string(text));
  };
  if (text.substr(0, kExamplePrefix.size()) != kExamplePrefix) {
    bad("missing 'Example:'");
  }
  const auto ctx_end = text.find(kContextTerminator);
  if (ctx_end == std::string_view::npos) {
    bad("missing '; '");
  }
  const std::string_view context = text.substr(kExamplePrefix.size(), ctx_end - kExamplePrefix.size());
  const std::string_view query = text.substr(ctx_end + kContextTerminator.size());
  const auto sep = context.find(kPairSeparator);
  if (sep == std::string_view::npos) {
    bad("missing ', '");
  }
  const std::string_view first = context.substr(0, sep);
  const std::string_view second = context.substr(sep + kPairSeparator.size());
  const auto a1 = first.find(kFirstArrow);
  const auto a2 = second.find(kSecondArrow);
  if (a1 == std::string_view::npos || a2 == std::string_view::npos) {
    bad("missing pair separator");
  }
  if (query.substr(0, kQueryPrefix.size()) != kQueryPrefix || query.size() < kQueryPrefix.size() + 2 ||
      query.substr(query.size() - kQueryArrow.size()) != kQueryArrow) {
    bad("malformed query segment");
  }
  WordPair p1{std::string(first.substr(0, a1)), decapitalize(first.substr(a1 + kFirstArrow.size()))};
  WordPair p2{std::string(second.substr(0, a2)), decapitalize(second.substr(a2 + kSecondArrow.size()))};
  const auto q = query.substr(kQueryPrefix.size(), query.size() - kQueryPrefix.size() - kQueryArrow.size());
  StructuredPrompt out = build_prompt(p1, p2, q);
  if (out.text != text) {
    bad("does not re-render identically");
  }
  return out;
}

Vocabulary Vocabulary::characters() {
  Vocabulary v;
  v.mode_ = TokenizerMode::Character;
  for (int c = 32; c < 127; ++c) {
    v.pieces_.emplace_back(1, static_cast<char>(c));
  }
  v.pieces_.emplace_back("\n");
  for (std::size_t i = 0; i < v.pieces_.size(); ++i) {
    v.index_.emplace(v.pieces_[i], static_cast<int>(i));
  }
  return v;
}

Vocabulary Vocabulary::words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.mode_ = TokenizerMode::Word;
  for (const auto& w : words) {
    require(!w.empty(), ErrorCode::InvalidInput, "empty word in vocabulary");
    if (v.index_.emplace(w, static_cast<int>(v.pieces_.size())).second) {
      v.pieces_.push_back(w);
    }
  }
  return v;
}

std::vector<Token> Vocabulary::encode(std::string_view text) const {
  std::vector<Token> out;
  if (mode_ == TokenizerMode::Character) {
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      auto it = index_.find(std::string(1, text[i]));
      if (it == index_.end()) {
        fail(ErrorCode::UnknownToken, "character code " +
                                          std::to_string(static_cast<unsigned char>(text[i])) +
                                          " at offset " + std::to_string(i) + " is not in the vocabulary");
      }
      out.push_back({it->second, {i, i + 1}});
    }
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) {
      ++j;
    }
    const std::string word(text.substr(i, j - i));
    auto it = index_.find(word);
    if (it == index_.end()) {
      fail(ErrorCode::UnknownToken, "word '" + word + "' is not in the vocabulary");
    }
    out.push_back({it->second, {i, j}});
    i = j;
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (mode_ == TokenizerMode::Word && i > 0) {
      out.push_back(' ');
    }
    out += piece(ids[i]);
  }
  return out;
}

TokenizedSample tokenize(const StructuredPrompt& prompt, const Vocabulary& vocab) {
  require(!prompt.query_word.empty(), ErrorCode::InvalidInput, "prompt has an empty query word");
  TokenizedSample s;
  s.text = prompt.text;
  s.context_span = prompt.context_span;
  s.query_span = prompt.query_span;
  for (const auto& tok : vocab.encode(prompt.text)) {
    const int index = static_cast<int>(s.token_ids.size());
    s.token_ids.push_back(tok.id);
    if (tok.span.intersects(prompt.context_span)) {
      s.context_indices.push_back(index);
    } else {
      s.query_indices.push_back(index);
    }
  }
  require(!s.token_ids.empty(), ErrorCode::InvalidInput, "prompt produced no tokens");
  return s;
}

std::vector<std::vector<TokenizedSample>> group_samples(std::vector<TokenizedSample> samples, int n_groups) {
  require(n_groups > 0, ErrorCode::InvalidInput, "number of groups must be positive");
  require(!samples.empty() && samples.size() % static_cast<std::size_t>(n_groups) == 0,
          ErrorCode::InvalidInput,
          std::to_string(samples.size()) + " samples cannot be split evenly into " +
              std::to_string(n_groups) + " groups");
  const std::size_t per_group = samples.size() / static_cast<std::size_t>(n_groups);
  std::vector<std::vector<TokenizedSample>> groups(static_cast<std::size_t>(n_groups));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t g = i / per_group;
    samples[i].group_id = static_cast<int>(g) + 1;
    groups[g].push_back(std::move(samples[i]));
  }
  return groups;
}

std::vector<WordPair> parse_pairs(std::string_view text) {
  std::vector<WordPair> pairs;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') {
      continue;
    }
    const char delim = t.find('\t') != std::string::npos ? '\t' : ',';
    const auto first = t.find(delim);
    require(first != std::string::npos, ErrorCode::InvalidInput,
            "pairs line " + std::to_string(line_no) + " has no separator: " + t);
    auto second_end = t.find(delim, first + 1);
    if (second_end == std::string::npos) {
      second_end = t.size();
    }
    WordPair p{trim(t.substr(0, first)), trim(t.substr(first + 1, second_end - first - 1))};
    require(!p.first.empty() && !p.second.empty(), ErrorCode::InvalidInput,
            "pairs line " + std::to_string(line_no) + " has an empty word");
    pairs.push_back(std::move(p));
  }
  require(!pairs.empty(), ErrorCode::InvalidInput, "pairs input contains no pairs");
  return pairs;
}

std::vector<WordPair> read_pairs_file(const std::filesystem::path& path) {
  return parse_pairs(detail::read_text_file(path));
}

const std::vector<WordPair>& builtin_antonyms() {
  static const std::vector<WordPair> pairs = {
      {"good", "bad"},     {"no", "yes"},        {"hot", "cold"},      {"big", "small"},
      {"fast", "slow"},    {"light", "heavy"},   {"love", "hate"},     {"start", "end"},
      {"day", "night"},    {"up", "down"},       {"rich", "poor"},     {"win", "lose"},
      {"early", "late"},   {"high", "low"},      {"strong", "weak"},   {"loud", "quiet"},
      {"hard", "soft"},    {"dark", "bright"},   {"full", "empty"},    {"open", "close"},
      {"old", "new"},      {"young", "old"},     {"happy", "sad"},     {"long", "short"},
      {"wide", "narrow"},  {"thick", "thin"},    {"deep", "shallow"},  {"wet", "dry"},
      {"clean", "dirty"},  {"true", "false"},    {"in", "out"},        {"left", "right"},
      {"first", "last"},   {"push", "pull"},     {"buy", "sell"},      {"give", "take"},
      {"come", "go"},      {"rise", "fall"},     {"near", "far"},      {"above", "below"},
      {"inside", "outside"}, {"before", "after"}, {"always", "never"}, {"more", "less"},
      {"many", "few"},     {"max", "min"},       {"north", "south"},   {"east", "west"},
      {"top", "bottom"},   {"front", "back"},    {"sweet", "sour"},    {"cheap", "costly"},
      {"safe", "risky"},   {"calm", "angry"},    {"brave", "timid"},   {"kind", "cruel"},
      {"sharp", "dull"},   {"smooth", "rough"},  {"tight", "loose"},   {"tall", "short"},
      {"fat", "lean"},     {"awake", "asleep"},  {"alive", "dead"},    {"enter", "exit"},
      {"accept", "reject"}, {"add", "remove"},   {"arrive", "leave"},  {"ask", "answer"},
      {"begin", "finish"}, {"build", "destroy"}, {"catch", "throw"},   {"earn", "spend"},
      {"find", "lose"},    {"forget", "recall"}, {"friend", "enemy"},  {"gain", "loss"},
      {"hero", "villain"}, {"join", "split"},    {"laugh", "cry"},     {"lend", "borrow"},
      {"major", "minor"},  {"noisy", "silent"},  {"odd", "even"},      {"pass", "fail"},
      {"plus", "minus"},   {"public", "private"}, {"raw", "cooked"},   {"sink", "float"},
      {"teach", "learn"},  {"wild", "tame"},     {"wise", "foolish"},  {"work", "rest"},
  };
  return pairs;
}

const std::vector<WordPair>& builtin_synonyms() {
  static const std::vector<WordPair> pairs = {
      {"big", "large"},     {"fast", "quick"},     {"happy", "glad"},    {"sad", "unhappy"},
      {"small", "little"},  {"begin", "start"},    {"end", "finish"},    {"smart", "clever"},
      {"easy", "simple"},   {"hard", "tough"},     {"rich", "wealthy"},  {"angry", "mad"},
      {"shut", "close"},    {"buy", "purchase"},   {"help", "assist"},   {"speak", "talk"},
      {"look", "see"},      {"yell", "shout"},     {"fix", "repair"},    {"gift", "present"},
      {"car", "auto"},      {"home", "house"},     {"kid", "child"},     {"road", "street"},
      {"stone", "rock"},    {"sick", "ill"},       {"cold", "chilly"},   {"hot", "warm"},
      {"right", "correct"}, {"wrong", "false"},    {"odd", "strange"},   {"tiny", "minute"},
      {"huge", "giant"},    {"quiet", "silent"},   {"calm", "still"},    {"brave", "bold"},
      {"choose", "pick"},   {"grab", "seize"},     {"hide", "conceal"},  {"jump", "leap"},
      {"mend", "patch"},    {"rip", "tear"},       {"shy", "timid"},     {"wet", "damp"},
      {"job", "task"},      {"fear", "dread"},     {"aid", "help"},      {"cash", "money"},
      {"sum", "total"},     {"trip", "journey"},   {"rule", "law"},      {"idea", "notion"},
      {"area", "region"},   {"part", "piece"},     {"store", "shop"},    {"field", "meadow"},
      {"woods", "forest"},  {"sea", "ocean"},      {"hill", "mound"},    {"tidy", "neat"},
  };
  return pairs;
}

std::vector<StructuredPrompt> generate_prompts(const std::vector<WordPair>& pairs, std::size_t count,
                                               std::mt19937_64& rng) {
  require(!pairs.empty(), ErrorCode::InvalidInput, "no word pairs to build prompts from");
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<StructuredPrompt> prompts;
  prompts.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& a = pairs[pick(rng)];
    const auto& b = pairs[pick(rng)];
    const auto& q = pairs[pick(rng)];
    prompts.push_back(build_prompt(a, b, q.first));
  }
  return prompts;
}

std::string synthetic_text(TextDomain domain, std::size_t min_chars, std::mt19937_64& rng) {
  const auto& pairs = domain == TextDomain::Antonyms ? builtin_antonyms() : builtin_synonyms();
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::string out;
  while (out.size() < min_chars) {
    const auto& a = pairs[pick(rng)];
    const auto& b = pairs[pick(rng)];
    const auto& q = pairs[pick(rng)];
    if (domain == TextDomain::Antonyms) {
      out += build_prompt(a, b, q.first).text;
      out += capitalize(q.second);
    } else {
      out += "Similar:" + a.first + "=" + a.second + ", " + b.first + "=" +
             b.second + "; Ask:" + q.first + "=" + q.second;
    }
    out.push_back('\n');
  }
  return out;
}

std::string samples_to_json(const std::vector<TokenizedSample>& samples) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    arr.push_back({{"index", i},
                   {"text", s.text},
                   {"context_span", {s.context_span.begin, s.context_span.end}},
                   {"query_span", {s.query_span.begin, s.query_span.end}},
                   {"token_ids", s.token_ids},
                   {"context_indices", s.context_indices},
                   {"query_indices", s.query_indices},
                   {"group_id", s.group_id}});
  }
  return nlohmann::json{{"samples", arr}}.dump(2) + "\n";
}

std::vector<TokenizedSample> samples_from_json(const std::string& text) {
  std::vector<TokenizedSample> out;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& j : doc.at("samples")) {
      TokenizedSample s;
      s.text = j.at("text").get<std::string>();
      const auto cs = j.at("context_span").get<std::vector<std::size_t>>();
      const auto qs = j.at("query_span").get<std::vector<std::size_t>>();
      require(cs.size() == 2 && qs.size() == 2, ErrorCode::InvalidInput, "spans must be [begin, end]");
      s.context_span = {cs[0], cs[1]};
      s.query_span = {qs[0], qs[1]};
      s.token_ids = j.at("token_ids").get<std::vector<int>>();
      s.context_indices = j.at("context_indices").get<std::vector<int>>();
      s.query_indices = j.at("query_indices").get<std::vector<int>>();
      s.group_id = j.at("group_id").get<int>();
      std::vector<int> seen(s.token_ids.size(), 0);
      for (int idx : s.context_indices) {
        require(idx >= 0 && static_cast<std::size_t>(idx) < seen.size() && seen[idx]++ == 0,
                ErrorCode::InvalidInput, "context indices are not a valid position set");
      }
      for (int idx : s.query_indices) {
        require(idx >= 0 && static_cast<std::size_t>(idx) < seen.size() && seen[idx]++ == 0,
                ErrorCode::InvalidInput, "query indices overlap the context or fall out of range");
      }
      require(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }), ErrorCode::InvalidInput,
              "context and query indices do not cover every position");
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("sample JSON: ") + e.what());
  }
  return out;
}

}  // namespace layertracer::corpus
