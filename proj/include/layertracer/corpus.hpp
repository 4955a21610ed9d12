#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace layertracer::corpus {

// Half-open character range [begin, end).
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool intersects(const CharSpan& other) const { return begin < other.end && other.begin < end; }
  bool operator==(const CharSpan&) const = default;
};

struct WordPair {
  std::string first;
  std::string second;
  bool operator==(const WordPair&) const = default;
};

// "Example:a->B, c-D; Query:q->". The context span s1 runs through the "; "
// separator inclusive; the query span s2 is the rest.
struct StructuredPrompt {
  std::string text;
  CharSpan context_span;
  CharSpan query_span;
  std::vector<WordPair> pairs;
  std::string query_word;
};

StructuredPrompt build_prompt(const WordPair& pair1, const WordPair& pair2, std::string_view query_word);

// Inverse of build_prompt; capitalized second words come back lower-cased.
StructuredPrompt parse_prompt(std::string_view text);

enum class TokenizerMode { Character, Word };

struct Token {
  int id = 0;
  CharSpan span;
};

class Vocabulary {
 public:
  // Printable ASCII (32..126) plus '\n': 96 ids.
  static Vocabulary characters();
  // Whitespace-delimited words; ids follow the given order.
  static Vocabulary words(const std::vector<std::string>& words);

  TokenizerMode mode() const { return mode_; }
  int size() const { return static_cast<int>(pieces_.size()); }
  const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }

  // Throws UnknownToken naming the offending symbol.
  std::vector<Token> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  TokenizerMode mode_ = TokenizerMode::Character;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
};

struct TokenizedSample {
  std::string text;
  std::vector<int> token_ids;
  std::vector<int> context_indices;  // I_c, ascending
  std::vector<int> query_indices;    // I_q, ascending
  CharSpan context_span;
  CharSpan query_span;
  int group_id = 0;
};

// Tokens whose character span touches the context span go to I_c.
TokenizedSample tokenize(const StructuredPrompt& prompt, const Vocabulary& vocab);

// Contiguous equal-size groups, group ids 1..n_groups. InvalidInput when not divisible.
std::vector<std::vector<TokenizedSample>> group_samples(std::vector<TokenizedSample> samples, int n_groups);

// One pair per line, "word1,word2" (tab-separated with trailing relation labels also accepted).
std::vector<WordPair> parse_pairs(std::string_view text);
std::vector<WordPair> read_pairs_file(const std::filesystem::path& path);

const std::vector<WordPair>& builtin_antonyms();
const std::vector<WordPair>& builtin_synonyms();

// Each prompt draws two demonstration pairs and a query pair; the query word is
// the first word of the query pair.
std::vector<StructuredPrompt> generate_prompts(const std::vector<WordPair>& pairs, std::size_t count,
                                               std::mt19937_64& rng);

enum class TextDomain {
  Antonyms,  // prompts in the diagnostic template followed by their answers
  Synonyms,  // a shifted template over a different vocabulary
};

// Newline-separated synthetic text of at least min_chars characters.
std::string synthetic_text(TextDomain domain, std::size_t min_chars, std::mt19937_64& rng);

std::string capitalize(std::string_view word);

// JSON sample dump for inspection and for re-use by the diagnose command.
std::string samples_to_json(const std::vector<TokenizedSample>& samples);
std::vector<TokenizedSample> samples_from_json(const std::string& text);

}  // namespace layertracer::corpus
