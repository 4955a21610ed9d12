#include "layertracer/report.hpp"

#include <json.hpp>

#include <atomic>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "binary_io.hpp"
#include "layertracer/error.hpp"
#include "layertracer/logit_lens.hpp"

namespace layertracer::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::pair<int, double>> top_candidates(lens::DistributionView d, int k) {
  std::vector<std::pair<int, double>> out;
  for (int id : lens::top_k_ids(d, k)) {
    const auto it = std::lower_bound(d.ids.begin(), d.ids.end(), id);
    out.emplace_back(id, d.probs[static_cast<std::size_t>(it - d.ids.begin())]);
  }
  return out;
}

double mass_of(const trace_io::StoredDistribution& d, int id, const std::string& what) {
  const auto it = std::lower_bound(d.ids.begin(), d.ids.end(), id);
  require(it != d.ids.end() && *it == id, ErrorCode::InvalidInput,
          what + " does not store token id " + std::to_string(id));
  return d.probs[static_cast<std::size_t>(it - d.ids.begin())];
}

// JS between stored P and Q under the configured support rule.
double stored_js(const trace_io::StoredDistribution& p, const trace_io::StoredDistribution& q,
                 const trace_io::TraceManifest& m, const perturbation::JsOptions& js, int layer) {
  if (js.full_vocab) {
    require(!m.top_k, ErrorCode::InvalidInput, "full-vocabulary JS needs dense distributions; trace stores top-" +
                                                    std::to_string(m.top_k.value_or(0)));
    return diagnostics::js_divergence(std::span<const double>(p.probs), std::span<const double>(q.probs));
  }
  require(!m.top_k || js.top_k <= *m.top_k, ErrorCode::InvalidInput,
          "JS top-" + std::to_string(js.top_k) + " exceeds the trace's stored top-" + std::to_string(*m.top_k));
  // Every id of the shared support must be stored on both sides.
  auto ids = lens::top_k_ids(p.view(), js.top_k);
  const auto from_q = lens::top_k_ids(q.view(), js.top_k);
  ids.insert(ids.end(), from_q.begin(), from_q.end());
  for (int id : ids) {
    mass_of(p, id, "layer_dist_" + std::to_string(m.n_layers) + ".f64");
    mass_of(q, id, "q_dist_" + std::to_string(layer) + ".f64");
  }
  const auto [pk, qk] = lens::truncate_top_k(p.view(), q.view(), js.top_k);
  return diagnostics::js_divergence(pk, qk);
}

void finish_profile(SampleProfile& s, const DiagnoseOptions& options) {
  const auto tp = diagnostics::task_particle(s.pt, options.epsilon, options.tau);
  s.ratio = tp.ratios;
  s.tp_interval = tp.interval;
  s.delta_js = diagnostics::sensitivity(s.js, options.epsilon).delta_js;
}

std::string lens_norm_name(model::LensNorm n) { return n == model::LensNorm::Final ? "final" : "none"; }

}  // namespace

SampleProfile profile_sample(const model::Model& model, const corpus::TokenizedSample& sample,
                             const DiagnoseOptions& options) {
  const auto trace = model.forward_with_trace(sample.token_ids);
  const int n = model.n_layers();
  SampleProfile s;
  s.text = sample.text;
  s.group_id = sample.group_id;
  const auto target = lens::select_target(trace.final_distribution);
  s.target_token = target.token_id;
  s.target_prob_final = target.prob_final;
  for (int l = 1; l <= n; ++l) {
    const auto dist = l == n ? trace.final_distribution
                             : lens::project_layer(model, trace, l, target.token_id, options.lens_norm).dist;
    s.pt.push_back(dist.prob_of(target.token_id));
    s.lens_top.push_back(top_candidates(lens::view_of(dist), options.lens_candidates));
  }
  for (const auto& o : perturbation::js_curve_from_trace(model, trace, sample.context_indices, options.js)) {
    s.js.push_back(o.js_to_original);
  }
  finish_profile(s, options);
  return s;
}

SampleProfile profile_trace(const trace_io::ExternalTrace& trace, const model::Model* model,
                            const DiagnoseOptions& options) {
  const auto& m = trace.manifest;
  const int n = m.n_layers;
  if (model != nullptr) {
    require(model->n_layers() == n && model->config().d_model == m.d_model &&
                model->config().vocab_size == m.vocab_size,
            ErrorCode::InvalidInput, "trace dimensions do not match the model");
  }
  const bool can_run = model != nullptr && m.has_hidden_states;
  require(m.has_layer_distributions || can_run, ErrorCode::InvalidInput,
          "trace lacks layer distributions; hidden states plus the producing model are needed instead");
  require(m.has_perturbed_distributions || can_run, ErrorCode::InvalidInput,
          "trace lacks perturbed distributions; hidden states plus the producing model are needed instead");

  std::vector<trace_io::StoredDistribution> layers = trace.layer_distributions;
  std::vector<trace_io::StoredDistribution> perturbed = trace.perturbed_distributions;
  trace_io::TraceManifest effective = m;
  if (!m.has_layer_distributions || !m.has_perturbed_distributions) {
    // Recompute the missing parts densely from the hidden states.
    model::HiddenStateTrace hs;
    hs.states = trace.hidden_states;
    hs.token_ids = m.token_ids;
    hs.final_distribution = model->forward_from_layer(hs.states.back(), n);
    const int target = lens::select_target(hs.final_distribution).token_id;
    if (!m.has_layer_distributions) {
      layers.clear();
      for (int l = 1; l <= n; ++l) {
        const auto d = l == n ? hs.final_distribution : lens::project_layer(*model, hs, l, target, options.lens_norm).dist;
        layers.push_back({d.support(), d.probs()});
      }
    }
    if (!m.has_perturbed_distributions) {
      perturbed.clear();
      for (const auto& o : perturbation::js_curve_from_trace(*model, hs, m.context_indices, {true, 1})) {
        perturbed.push_back({o.q_dist.support(), o.q_dist.probs()});
      }
    }
    if (m.top_k && (!m.has_layer_distributions || !m.has_perturbed_distributions)) {
      require(m.has_layer_distributions == m.has_perturbed_distributions, ErrorCode::InvalidInput,
              "cannot mix recomputed dense and stored sparse distributions");
    }
    if (!m.has_layer_distributions && !m.has_perturbed_distributions) {
      effective.top_k.reset();
    }
  }

  SampleProfile s;
  const auto& final_dist = layers.back();
  const int target = lens::top_k_ids(final_dist.view(), 1).front();
  s.target_token = target;
  s.target_prob_final = mass_of(final_dist, target, "layer_dist_" + std::to_string(n) + ".f64");
  for (int l = 1; l <= n; ++l) {
    const auto& d = layers[static_cast<std::size_t>(l - 1)];
    s.pt.push_back(mass_of(d, target, "layer_dist_" + std::to_string(l) + ".f64"));
    s.lens_top.push_back(top_candidates(d.view(), options.lens_candidates));
    s.js.push_back(stored_js(final_dist, perturbed[static_cast<std::size_t>(l - 1)], effective, options.js, l));
  }
  finish_profile(s, options);
  return s;
}

DiagnosticReport assemble(std::vector<SampleProfile> samples, Metadata metadata, const DiagnoseOptions& options) {
  require(!samples.empty(), ErrorCode::InvalidInput, "no samples to report");
  std::vector<std::vector<double>> ratios, deltas;
  std::vector<int> groups;
  for (const auto& s : samples) {
    ratios.push_back(s.ratio);
    deltas.push_back(s.delta_js);
    groups.push_back(s.group_id);
  }
  DiagnosticReport r;
  r.ratio_heatmap = diagnostics::group_heatmap(ratios, groups, options.n_groups, 2);
  r.delta_js_heatmap = diagnostics::group_heatmap(deltas, groups, options.n_groups, 2);
  r.mean_ratio = diagnostics::mean_profile(ratios);
  r.mean_delta_js = diagnostics::mean_profile(deltas);
  r.scan = diagnostics::scan_mean_profiles(r.mean_ratio, r.mean_delta_js, options.fractions, options.normalization);
  metadata.n_samples = static_cast<int>(samples.size());
  metadata.n_groups = options.n_groups;
  metadata.n_layers = static_cast<int>(samples.front().pt.size());
  r.metadata = std::move(metadata);
  r.samples = std::move(samples);
  return r;
}

namespace {

Metadata base_metadata(const DiagnoseOptions& options) {
  Metadata m;
  m.epsilon = options.epsilon;
  m.tau = options.tau;
  m.lens_norm = lens_norm_name(options.lens_norm);
  m.js_support = options.js.full_vocab ? "full" : "top-k";
  m.top_k = options.js.top_k;
  m.normalization = std::string(diagnostics::normalization_name(options.normalization));
  return m;
}

void check_grouping(std::size_t n, int groups) {
  require(groups >= 1, ErrorCode::InvalidInput, "need at least one group");
  require(n % static_cast<std::size_t>(groups) == 0 && n > 0, ErrorCode::InvalidInput,
          std::to_string(n) + " samples cannot be split into " + std::to_string(groups) + " equal groups");
}

template <typename F>
std::vector<SampleProfile> run_parallel(std::size_t n, int jobs, F&& work) {
  std::vector<SampleProfile> out(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = work(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) {
    pool.emplace_back(worker);
  }
  worker();
  for (auto& t : pool) {
    t.join();
  }
  for (const auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  return out;
}

}  // namespace

DiagnosticReport diagnose_model(const model::Model& model, const std::vector<corpus::TokenizedSample>& samples,
                                const DiagnoseOptions& options, std::uint64_t seed) {
  check_grouping(samples.size(), options.n_groups);
  const std::size_t per_group = samples.size() / static_cast<std::size_t>(options.n_groups);
  auto profiles = run_parallel(samples.size(), options.jobs, [&](std::size_t i) {
    auto s = profile_sample(model, samples[i], options);
    s.index = static_cast<int>(i);
    s.group_id = static_cast<int>(i / per_group) + 1;
    return s;
  });
  auto meta = base_metadata(options);
  meta.seed = seed;
  meta.source = "model";
  meta.model_digest = model::parameter_digest(model);
  return assemble(std::move(profiles), meta, options);
}

DiagnosticReport diagnose_traces(const std::vector<trace_io::ExternalTrace>& traces, const model::Model* model,
                                 const DiagnoseOptions& options) {
  check_grouping(traces.size(), options.n_groups);
  const int n = traces.front().manifest.n_layers;
  for (const auto& t : traces) {
    require(t.manifest.n_layers == n, ErrorCode::InvalidInput, "traces disagree on n_layers");
  }
  const std::size_t per_group = traces.size() / static_cast<std::size_t>(options.n_groups);
  auto profiles = run_parallel(traces.size(), options.jobs, [&](std::size_t i) {
    auto s = profile_trace(traces[i], model, options);
    s.index = static_cast<int>(i);
    s.group_id = static_cast<int>(i / per_group) + 1;
    return s;
  });
  auto meta = base_metadata(options);
  meta.source = "traces";
  if (model != nullptr) {
    meta.model_digest = model::parameter_digest(*model);
  }
  return assemble(std::move(profiles), meta, options);
}

namespace {

json heatmap_json(const diagnostics::Heatmap& h) {
  return json{{"groups", h.group_ids},
              {"first_layer", h.first_layer},
              {"values", h.values},
              {"log1p", diagnostics::log1p_scaled(h).values}};
}

diagnostics::Heatmap heatmap_from(const json& j) {
  diagnostics::Heatmap h;
  h.group_ids = j.at("groups").get<std::vector<int>>();
  h.first_layer = j.at("first_layer").get<int>();
  h.values = j.at("values").get<std::vector<std::vector<double>>>();
  return h;
}

json scan_to_json(const diagnostics::BoundaryScan& scan) {
  json rows = json::array();
  for (const auto& r : scan.rows) {
    rows.push_back(json{{"ratio", r.fraction.label()},
                        {"fraction", r.fraction.value()},
                        {"split_layer", r.split_layer},
                        {"score", r.score}});
  }
  return json{{"normalization", diagnostics::normalization_name(scan.normalization)},
              {"rows", rows},
              {"tp_hat", scan.tp_hat},
              {"ls_hat", scan.ls_hat},
              {"tp_degenerate", scan.tp_degenerate},
              {"ls_degenerate", scan.ls_degenerate}};
}

}  // namespace

std::string report_json(const DiagnosticReport& r) {
  const auto& m = r.metadata;
  json meta{{"epsilon", m.epsilon},       {"tau", m.tau},
            {"lens_norm", m.lens_norm},   {"js_support", m.js_support},
            {"top_k", m.top_k},           {"normalization", m.normalization},
            {"n_layers", m.n_layers},     {"n_samples", m.n_samples},
            {"n_groups", m.n_groups},     {"seed", m.seed},
            {"source", m.source},         {"model_digest", m.model_digest}};
  json samples = json::array();
  for (const auto& s : r.samples) {
    json lens_top = json::array();
    for (const auto& layer : s.lens_top) {
      json row = json::array();
      for (const auto& [id, p] : layer) {
        row.push_back(json{{"id", id}, {"prob", p}});
      }
      lens_top.push_back(row);
    }
    samples.push_back(json{{"index", s.index},
                           {"group_id", s.group_id},
                           {"text", s.text},
                           {"target_token", s.target_token},
                           {"target_prob_final", s.target_prob_final},
                           {"pt", s.pt},
                           {"ratio", s.ratio},
                           {"tp_interval", s.tp_interval},
                           {"js", s.js},
                           {"delta_js", s.delta_js},
                           {"lens_top", lens_top}});
  }
  json out{{"metadata", meta},
           {"samples", samples},
           {"heatmaps", {{"ratio", heatmap_json(r.ratio_heatmap)}, {"delta_js", heatmap_json(r.delta_js_heatmap)}}},
           {"mean_profiles", {{"ratio", r.mean_ratio}, {"delta_js", r.mean_delta_js}}},
           {"boundary_scan", scan_to_json(r.scan)}};
  return out.dump(1) + "\n";
}

DiagnosticReport report_from_json(const std::string& text) {
  DiagnosticReport r;
  try {
    const json j = json::parse(text);
    const auto& m = j.at("metadata");
    auto& md = r.metadata;
    md.epsilon = m.at("epsilon").get<double>();
    md.tau = m.at("tau").get<double>();
    md.lens_norm = m.at("lens_norm").get<std::string>();
    md.js_support = m.at("js_support").get<std::string>();
    md.top_k = m.at("top_k").get<int>();
    md.normalization = m.at("normalization").get<std::string>();
    md.n_layers = m.at("n_layers").get<int>();
    md.n_samples = m.at("n_samples").get<int>();
    md.n_groups = m.at("n_groups").get<int>();
    md.seed = m.at("seed").get<std::uint64_t>();
    md.source = m.at("source").get<std::string>();
    md.model_digest = m.value("model_digest", std::string());
    r.mean_ratio = j.at("mean_profiles").at("ratio").get<std::vector<double>>();
    r.mean_delta_js = j.at("mean_profiles").at("delta_js").get<std::vector<double>>();
    r.ratio_heatmap = heatmap_from(j.at("heatmaps").at("ratio"));
    r.delta_js_heatmap = heatmap_from(j.at("heatmaps").at("delta_js"));
    for (const auto& s : j.at("samples")) {
      SampleProfile p;
      p.index = s.at("index").get<int>();
      p.group_id = s.at("group_id").get<int>();
      p.text = s.at("text").get<std::string>();
      p.target_token = s.at("target_token").get<int>();
      p.target_prob_final = s.at("target_prob_final").get<double>();
      p.pt = s.at("pt").get<std::vector<double>>();
      p.ratio = s.at("ratio").get<std::vector<double>>();
      p.tp_interval = s.at("tp_interval").get<std::vector<int>>();
      p.js = s.at("js").get<std::vector<double>>();
      p.delta_js = s.at("delta_js").get<std::vector<double>>();
      for (const auto& layer : s.at("lens_top")) {
        std::vector<std::pair<int, double>> row;
        for (const auto& c : layer) {
          row.emplace_back(c.at("id").get<int>(), c.at("prob").get<double>());
        }
        p.lens_top.push_back(std::move(row));
      }
      r.samples.push_back(std::move(p));
    }
    const auto method = diagnostics::parse_normalization(md.normalization);
    std::vector<diagnostics::Fraction> fractions;
    for (const auto& row : j.at("boundary_scan").at("rows")) {
      fractions.push_back(diagnostics::Fraction::parse(row.at("ratio").get<std::string>()));
    }
    r.scan = diagnostics::scan_mean_profiles(r.mean_ratio, r.mean_delta_js, fractions, method);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("malformed report: ") + e.what());
  }
  require(r.mean_ratio.size() + 1 == static_cast<std::size_t>(r.metadata.n_layers) &&
              r.mean_delta_js.size() == r.mean_ratio.size(),
          ErrorCode::InvalidInput, "report mean profiles do not match n_layers");
  return r;
}

std::string heatmap_csv(const diagnostics::Heatmap& h) {
  require(!h.values.empty() && !h.values.front().empty(), ErrorCode::InvalidInput, "empty heatmap");
  std::string out = "group";
  for (std::size_t c = 0; c < h.values.front().size(); ++c) {
    out += ",layer_" + std::to_string(h.first_layer + static_cast<int>(c));
  }
  out += "\n";
  for (std::size_t g = 0; g < h.values.size(); ++g) {
    out += std::to_string(h.group_ids[g]);
    for (double v : h.values[g]) {
      out += "," + detail::format_double(v);
    }
    out += "\n";
  }
  return out;
}

std::string scan_csv(const diagnostics::BoundaryScan& scan) {
  std::string out = "ratio,fraction,split_layer,score\n";
  for (const auto& r : scan.rows) {
    out += r.fraction.label() + "," + detail::format_double(r.fraction.value()) + "," +
           std::to_string(r.split_layer) + "," + detail::format_double(r.score) + "\n";
  }
  return out;
}

std::string scan_json(const diagnostics::BoundaryScan& scan) { return scan_to_json(scan).dump(2) + "\n"; }

std::string scan_table(const diagnostics::BoundaryScan& scan) {
  std::ostringstream os;
  os << "| Ratio | Split layer | S(b) |\n|---|---|---|\n";
  for (const auto& r : scan.rows) {
    os << "| " << r.fraction.label() << " | " << r.split_layer << " | " << detail::format_double(r.score) << " |\n";
  }
  if (scan.tp_degenerate || scan.ls_degenerate) {
    os << "\nwarning: degenerate profile (" << (scan.tp_degenerate ? "TP" : "")
       << (scan.tp_degenerate && scan.ls_degenerate ? ", " : "") << (scan.ls_degenerate ? "LS" : "")
       << ") normalized to zeros\n";
  }
  return os.str();
}

void emit_report(const DiagnosticReport& report, const fs::path& dir, bool json_out, bool csv_out) {
  require(!report.samples.empty() || !report.mean_ratio.empty(), ErrorCode::InvalidInput, "empty report");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
  if (json_out) {
    detail::write_text_file(dir / "report.json", report_json(report));
  }
  if (csv_out) {
    detail::write_text_file(dir / "ratio_heatmap.csv", heatmap_csv(report.ratio_heatmap));
    detail::write_text_file(dir / "delta_js_heatmap.csv", heatmap_csv(report.delta_js_heatmap));
    detail::write_text_file(dir / "ratio_heatmap_log1p.csv", heatmap_csv(diagnostics::log1p_scaled(report.ratio_heatmap)));
    detail::write_text_file(dir / "delta_js_heatmap_log1p.csv",
                            heatmap_csv(diagnostics::log1p_scaled(report.delta_js_heatmap)));
    detail::write_text_file(dir / "scan.csv", scan_csv(report.scan));
  }
}

}  // namespace layertracer::report
