#include "layertracer/trace_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "layertracer/error.hpp"
#include "layertracer/perturbation.hpp"

namespace layertracer::trace_io {

namespace fs = std::filesystem;
using nlohmann::json;

void TraceManifest::validate() const {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidInput, "trace manifest: " + what); };
  check(n_layers >= 1 && d_model >= 1 && vocab_size >= 1 && seq_len >= 1, "sizes must be positive");
  check(token_ids.size() == static_cast<std::size_t>(seq_len), "token_ids length differs from seq_len");
  for (int id : token_ids) {
    check(id >= 0 && id < vocab_size, "token id " + std::to_string(id) + " outside the vocabulary");
  }
  std::vector<int> seen(static_cast<std::size_t>(seq_len), 0);
  for (const auto* set : {&context_indices, &query_indices}) {
    for (int i : *set) {
      check(i >= 0 && i < seq_len, "index " + std::to_string(i) + " outside [0, seq_len)");
      check(seen[static_cast<std::size_t>(i)]++ == 0, "index " + std::to_string(i) + " appears twice");
    }
  }
  check(std::find(seen.begin(), seen.end(), 0) == seen.end(), "context and query indices must cover [0, seq_len)");
  check(has_hidden_states || has_layer_distributions || has_perturbed_distributions,
        "at least one of the has_* flags must be true");
  check(!top_k || *top_k >= 1, "top_k must be >= 1");
  check(lens_norm == "final" || lens_norm == "none", "lens_norm must be 'final' or 'none'");
}

std::string manifest_json(const TraceManifest& m) {
  json j{{"format_version", m.format_version},
         {"n_layers", m.n_layers},
         {"d_model", m.d_model},
         {"vocab_size", m.vocab_size},
         {"seq_len", m.seq_len},
         {"token_ids", m.token_ids},
         {"context_indices", m.context_indices},
         {"query_indices", m.query_indices},
         {"has_hidden_states", m.has_hidden_states},
         {"has_layer_distributions", m.has_layer_distributions},
         {"has_perturbed_distributions", m.has_perturbed_distributions},
         {"top_k", m.top_k ? json(*m.top_k) : json(nullptr)},
         {"endianness", "little"},
         {"lens_norm", m.lens_norm}};
  return j.dump(2) + "\n";
}

TraceManifest parse_manifest(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptTrace, origin + ": not valid JSON (" + e.what() + ")");
  }
  TraceManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    require(m.format_version >= 1, ErrorCode::CorruptTrace, origin + ": format_version must be >= 1");
    require(m.format_version <= kTraceFormatVersion, ErrorCode::UnsupportedVersion,
            origin + ": format_version " + std::to_string(m.format_version) + " is newer than supported version " +
                std::to_string(kTraceFormatVersion));
    m.n_layers = j.at("n_layers").get<int>();
    m.d_model = j.at("d_model").get<int>();
    m.vocab_size = j.at("vocab_size").get<int>();
    m.seq_len = j.at("seq_len").get<int>();
    m.token_ids = j.at("token_ids").get<std::vector<int>>();
    m.context_indices = j.at("context_indices").get<std::vector<int>>();
    m.query_indices = j.at("query_indices").get<std::vector<int>>();
    m.has_hidden_states = j.at("has_hidden_states").get<bool>();
    m.has_layer_distributions = j.at("has_layer_distributions").get<bool>();
    m.has_perturbed_distributions = j.at("has_perturbed_distributions").get<bool>();
    if (j.contains("top_k") && !j.at("top_k").is_null()) {
      m.top_k = j.at("top_k").get<int>();
    }
    if (j.contains("endianness")) {
      require(j.at("endianness").get<std::string>() == "little", ErrorCode::CorruptTrace,
              origin + ": only little-endian blobs are defined");
    }
    if (j.contains("lens_norm")) {
      m.lens_norm = j.at("lens_norm").get<std::string>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptTrace, origin + ": " + e.what());
  }
  m.validate();
  return m;
}

namespace {

StoredDistribution dense_of(const numerics::ProbabilityDistribution& d) {
  return {d.support(), d.probs()};
}

// Original probabilities at `ids` (sorted ascending on return).
StoredDistribution restrict(const numerics::ProbabilityDistribution& d, std::set<int> ids) {
  StoredDistribution out;
  for (int id : ids) {
    out.ids.push_back(id);
    out.probs.push_back(d.prob_of(id));
  }
  return out;
}

std::set<int> top_set(const numerics::ProbabilityDistribution& d, int k) {
  const auto ids = lens::top_k_ids(lens::view_of(d), k);
  return {ids.begin(), ids.end()};
}

std::string blob_name(const char* stem, int layer) { return std::string(stem) + "_" + std::to_string(layer) + ".f64"; }

void write_distribution(const fs::path& path, const StoredDistribution& d, bool sparse) {
  if (!sparse) {
    detail::write_f64_blob(path, d.probs);
    return;
  }
  std::vector<double> pairs;
  pairs.reserve(2 * d.ids.size());
  for (std::size_t i = 0; i < d.ids.size(); ++i) {
    pairs.push_back(static_cast<double>(d.ids[i]));
    pairs.push_back(d.probs[i]);
  }
  detail::write_f64_blob(path, pairs);
}

StoredDistribution read_distribution(const fs::path& path, const TraceManifest& m) {
  const auto values = detail::read_f64_blob(path);
  const std::string name = path.filename().string();
  StoredDistribution d;
  if (!m.top_k) {
    require(values.size() == static_cast<std::size_t>(m.vocab_size), ErrorCode::CorruptTrace,
            name + ": expected " + std::to_string(static_cast<std::size_t>(m.vocab_size) * 8) + " bytes, found " +
                std::to_string(values.size() * 8));
    d.ids.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      d.ids[i] = static_cast<int>(i);
    }
    d.probs = values;
  } else {
    require(values.size() % 2 == 0 && !values.empty() && values.size() / 2 <= static_cast<std::size_t>(m.vocab_size),
            ErrorCode::CorruptTrace,
            name + ": sparse blob must hold 1.." + std::to_string(m.vocab_size) + " (id, prob) pairs");
    for (std::size_t i = 0; i < values.size(); i += 2) {
      const double id = values[i];
      require(std::isfinite(id) && id == std::floor(id) && id >= 0 && id < m.vocab_size, ErrorCode::CorruptTrace,
              name + ": invalid token id at pair " + std::to_string(i / 2));
      const int as_int = static_cast<int>(id);
      require(d.ids.empty() || as_int > d.ids.back(), ErrorCode::CorruptTrace,
              name + ": token ids must be strictly ascending");
      d.ids.push_back(as_int);
      d.probs.push_back(values[i + 1]);
    }
  }
  double total = 0.0;
  for (double p : d.probs) {
    require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorCode::CorruptTrace, name + ": probability outside [0, 1]");
    total += p;
  }
  require(total <= 1.0 + 1e-9 && (m.top_k || std::abs(total - 1.0) <= 1e-9), ErrorCode::CorruptTrace,
          name + ": probabilities sum to " + detail::format_double(total));
  return d;
}

}  // namespace

ExternalTrace capture_trace(const model::Model& model, const corpus::TokenizedSample& sample,
                            const CaptureOptions& options) {
  require(!options.top_k || *options.top_k >= 1, ErrorCode::InvalidInput, "top_k must be >= 1");
  const auto trace = model.forward_with_trace(sample.token_ids);
  const int n = model.n_layers();
  ExternalTrace out;
  auto& m = out.manifest;
  m.n_layers = n;
  m.d_model = model.config().d_model;
  m.vocab_size = model.config().vocab_size;
  m.seq_len = static_cast<int>(sample.token_ids.size());
  m.token_ids = sample.token_ids;
  m.context_indices = sample.context_indices;
  m.query_indices = sample.query_indices;
  m.has_hidden_states = options.hidden_states;
  m.has_layer_distributions = options.layer_distributions;
  m.has_perturbed_distributions = options.perturbed_distributions;
  m.top_k = options.top_k;
  m.lens_norm = options.lens_norm == model::LensNorm::Final ? "final" : "none";
  m.validate();

  if (options.hidden_states) {
    out.hidden_states = trace.states;
  }
  const auto& final_dist = trace.final_distribution;
  const int target = lens::select_target(final_dist).token_id;

  std::vector<numerics::ProbabilityDistribution> q;
  if (options.perturbed_distributions) {
    for (const auto& o : perturbation::js_curve_from_trace(model, trace, sample.context_indices, {true, 1})) {
      q.push_back(o.q_dist);
    }
  }
  if (options.layer_distributions) {
    for (int l = 1; l <= n; ++l) {
      // Layer N is the model output itself, whatever the lens norm.
      const auto lens_dist = l == n ? final_dist : lens::project_layer(model, trace, l, target, options.lens_norm).dist;
      if (!options.top_k) {
        out.layer_distributions.push_back(dense_of(lens_dist));
        continue;
      }
      auto ids = top_set(lens_dist, *options.top_k);
      ids.insert(target);
      if (l == n) {
        // P_N doubles as the final distribution and must cover every Q's top-K.
        const auto p_top = top_set(final_dist, *options.top_k);
        ids.insert(p_top.begin(), p_top.end());
        for (const auto& ql : q) {
          const auto t = top_set(ql, *options.top_k);
          ids.insert(t.begin(), t.end());
        }
      }
      out.layer_distributions.push_back(restrict(lens_dist, ids));
    }
  }
  for (const auto& ql : q) {
    if (!options.top_k) {
      out.perturbed_distributions.push_back(dense_of(ql));
      continue;
    }
    auto ids = top_set(ql, *options.top_k);
    const auto p_top = top_set(final_dist, *options.top_k);
    ids.insert(p_top.begin(), p_top.end());
    out.perturbed_distributions.push_back(restrict(ql, ids));
  }
  return out;
}

void write_trace(const ExternalTrace& trace, const fs::path& dir) {
  const auto& m = trace.manifest;
  m.validate();
  const auto n = static_cast<std::size_t>(m.n_layers);
  require(!m.has_hidden_states || trace.hidden_states.size() == n, ErrorCode::InvalidInput,
          "trace has " + std::to_string(trace.hidden_states.size()) + " hidden states for " + std::to_string(n) +
              " layers");
  require(!m.has_layer_distributions || trace.layer_distributions.size() == n, ErrorCode::InvalidInput,
          "trace layer distribution count differs from n_layers");
  require(!m.has_perturbed_distributions || trace.perturbed_distributions.size() == n, ErrorCode::InvalidInput,
          "trace perturbed distribution count differs from n_layers");
  for (const auto& h : trace.hidden_states) {
    require(h.rows() == static_cast<std::size_t>(m.seq_len) && h.cols() == static_cast<std::size_t>(m.d_model),
            ErrorCode::InvalidInput, "hidden state shape differs from [seq_len, d_model]");
  }

  std::error_code ec;
  if (fs::exists(dir, ec)) {
    require(fs::is_directory(dir, ec) && (fs::is_empty(dir, ec) || fs::exists(dir / "manifest.json", ec)),
            ErrorCode::Io, dir.string() + " exists and is not a trace directory; refusing to replace it");
  }
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  fs::create_directories(parent, ec);
  require(!ec, ErrorCode::Io, "cannot create " + parent.string() + ": " + ec.message());
  fs::path tmp;
  std::random_device rd;
  do {
    tmp = parent / ("." + dir.filename().string() + ".tmp-" + std::to_string(rd()));
  } while (fs::exists(tmp));
  fs::create_directory(tmp, ec);
  require(!ec, ErrorCode::Io, "cannot create " + tmp.string() + ": " + ec.message());

  try {
    const bool sparse = m.top_k.has_value();
    for (std::size_t l = 0; l < trace.hidden_states.size() && m.has_hidden_states; ++l) {
      detail::write_f64_blob(tmp / blob_name("hidden", static_cast<int>(l) + 1), trace.hidden_states[l].storage());
    }
    for (std::size_t l = 0; l < trace.layer_distributions.size() && m.has_layer_distributions; ++l) {
      write_distribution(tmp / blob_name("layer_dist", static_cast<int>(l) + 1), trace.layer_distributions[l], sparse);
    }
    for (std::size_t l = 0; l < trace.perturbed_distributions.size() && m.has_perturbed_distributions; ++l) {
      write_distribution(tmp / blob_name("q_dist", static_cast<int>(l) + 1), trace.perturbed_distributions[l], sparse);
    }
    detail::write_text_file(tmp / "manifest.json", manifest_json(m));
    if (fs::exists(dir)) {
      fs::remove_all(dir);
    }
    fs::rename(tmp, dir);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    fail(ErrorCode::Io, std::string("writing trace ") + dir.string() + ": " + e.what());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

ExternalTrace read_trace(const fs::path& dir) {
  ExternalTrace t;
  const auto manifest_path = dir / "manifest.json";
  require(fs::exists(manifest_path), ErrorCode::Io, manifest_path.string() + " not found");
  t.manifest = parse_manifest(detail::read_text_file(manifest_path), manifest_path.string());
  const auto& m = t.manifest;
  auto need = [&](const fs::path& p) {
    require(fs::exists(p), ErrorCode::CorruptTrace, p.filename().string() + " is missing from " + dir.string());
    return p;
  };
  for (int l = 1; l <= m.n_layers; ++l) {
    if (m.has_hidden_states) {
      const auto path = need(dir / blob_name("hidden", l));
      const auto values = detail::read_f64_blob(path);
      const std::size_t expect = static_cast<std::size_t>(m.seq_len) * static_cast<std::size_t>(m.d_model);
      require(values.size() == expect, ErrorCode::CorruptTrace,
              path.filename().string() + ": expected " + std::to_string(expect * 8) + " bytes, found " +
                  std::to_string(values.size() * 8));
      Tensor h = Tensor::matrix(static_cast<std::size_t>(m.seq_len), static_cast<std::size_t>(m.d_model));
      h.storage() = values;
      t.hidden_states.push_back(std::move(h));
    }
    if (m.has_layer_distributions) {
      t.layer_distributions.push_back(read_distribution(need(dir / blob_name("layer_dist", l)), m));
    }
    if (m.has_perturbed_distributions) {
      t.perturbed_distributions.push_back(read_distribution(need(dir / blob_name("q_dist", l)), m));
    }
  }
  return t;
}

std::vector<fs::path> list_trace_dirs(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::Io, dir.string() + " is not a directory");
  if (fs::exists(dir / "manifest.json")) {
    return {dir};
  }
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorCode::InvalidInput, "no trace directories under " + dir.string());
  return out;
}

std::string describe_trace(const ExternalTrace& trace) {
  const auto& m = trace.manifest;
  std::ostringstream os;
  os << "format_version: " << m.format_version << "\n"
     << "n_layers: " << m.n_layers << "\n"
     << "d_model: " << m.d_model << "\n"
     << "vocab_size: " << m.vocab_size << "\n"
     << "seq_len: " << m.seq_len << "\n"
     << "context tokens: " << m.context_indices.size() << "\n"
     << "query tokens: " << m.query_indices.size() << "\n"
     << "hidden states: " << (m.has_hidden_states ? "yes" : "no") << "\n"
     << "layer distributions: " << (m.has_layer_distributions ? "yes" : "no") << "\n"
     << "perturbed distributions: " << (m.has_perturbed_distributions ? "yes" : "no") << "\n"
     << "storage: " << (m.top_k ? "top-" + std::to_string(*m.top_k) + " sparse" : std::string("dense")) << "\n"
     << "lens_norm: " << m.lens_norm << "\n";
  if (m.has_layer_distributions) {
    const auto& final_dist = trace.layer_distributions.back();
    const auto best = lens::top_k_ids(final_dist.view(), 1);
    os << "final argmax token id: " << best.front() << "\n";
  }
  return os.str();
}

}  // namespace layertracer::trace_io
