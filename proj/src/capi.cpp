#include "layertracer/layertracer.h"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <new>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "layertracer/corpus.hpp"
#include "layertracer/error.hpp"
#include "layertracer/model.hpp"
#include "layertracer/report.hpp"
#include "layertracer/trace_io.hpp"
#include "layertracer/trainer.hpp"

using namespace layertracer;

struct lt_model {
  model::Model model;
  std::string layout;
};

struct lt_corpus {
  std::vector<corpus::TokenizedSample> samples;
};

struct lt_report {
  report::DiagnosticReport report;
};

namespace {

thread_local std::string last_error;

template <typename F>
lt_status guard(F&& f) {
  try {
    f();
    last_error.clear();
    return LT_OK;
  } catch (const Error& e) {
    last_error = e.what();
    return static_cast<lt_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown failure";
  }
  return LT_INTERNAL;
}

void need(const void* p, const char* what) {
  require(p != nullptr, ErrorCode::InvalidInput, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) {
    throw std::bad_alloc();
  }
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

lt_model* wrap(model::Model m) {
  auto* h = new lt_model{std::move(m), {}};
  h->layout = model::format_layout(h->model.config().block_layout);
  return h;
}

trainer::TrainConfig to_cpp(const lt_train_config& c) {
  trainer::TrainConfig t;
  t.learning_rate = c.learning_rate;
  t.beta1 = c.beta1;
  t.beta2 = c.beta2;
  t.weight_decay = c.weight_decay;
  t.warmup_ratio = c.warmup_ratio;
  t.grad_clip = c.grad_clip;
  t.batch_size = c.batch_size;
  t.seq_len = c.seq_len;
  t.steps = c.steps;
  t.seed = c.seed;
  return t;
}

report::DiagnoseOptions to_cpp(const lt_diagnose_options& o) {
  report::DiagnoseOptions d;
  d.epsilon = o.epsilon;
  d.tau = o.tau;
  require(o.top_k >= 1, ErrorCode::InvalidConfig, "top_k must be >= 1");
  d.js.top_k = o.top_k;
  d.js.full_vocab = o.js_full_vocab != 0;
  d.lens_norm = o.lens_norm_final != 0 ? model::LensNorm::Final : model::LensNorm::None;
  d.n_groups = o.n_groups;
  require(o.jobs >= 1, ErrorCode::InvalidConfig, "jobs must be >= 1");
  d.jobs = o.jobs;
  d.normalization = diagnostics::parse_normalization(o.normalization != nullptr ? o.normalization : "minmax");
  if (o.fractions != nullptr) {
    d.fractions = diagnostics::parse_fractions(o.fractions);
  }
  require(std::isfinite(d.epsilon) && d.epsilon > 0.0, ErrorCode::InvalidConfig, "epsilon must be > 0");
  require(std::isfinite(d.tau), ErrorCode::InvalidConfig, "tau must be finite");
  return d;
}

std::vector<int> encode_ids(const std::string& text) {
  std::vector<int> ids;
  for (const auto& t : corpus::Vocabulary::characters().encode(text)) {
    ids.push_back(t.id);
  }
  return ids;
}

corpus::TokenizedSample prompt_sample(const char* prompt) {
  need(prompt, "prompt");
  return corpus::tokenize(corpus::parse_prompt(prompt), corpus::Vocabulary::characters());
}

struct ExperimentData {
  std::vector<int> train;
  std::vector<trainer::EvalSet> evals;
};

ExperimentData experiment_data(const lt_experiment_options& o) {
  std::mt19937_64 seeds(o.data_seed);
  std::mt19937_64 train_rng(seeds());
  std::mt19937_64 eval_a(seeds());
  std::mt19937_64 eval_b(seeds());
  ExperimentData d;
  d.train = encode_ids(corpus::synthetic_text(corpus::TextDomain::Synonyms, o.train_chars, train_rng));
  d.evals.push_back({"A", encode_ids(corpus::synthetic_text(corpus::TextDomain::Antonyms, o.eval_chars, eval_a))});
  d.evals.push_back({"B", encode_ids(corpus::synthetic_text(corpus::TextDomain::Synonyms, o.eval_chars, eval_b))});
  return d;
}

void write_experiment(const std::vector<trainer::RunRecord>& records, const lt_experiment_options& o,
                      const std::string& table) {
  if (o.out_dir == nullptr) {
    return;
  }
  const std::filesystem::path root(o.out_dir);
  for (const auto& r : records) {
    trainer::write_run_artifacts(r, root / r.label);
  }
  detail::write_text_file(root / "comparison.md", table);
}

std::optional<bool> tri_state(int v) {
  if (v < 0) {
    return std::nullopt;
  }
  return v != 0;
}

}  // namespace

extern "C" {

const char* lt_version(void) { return "0.1.0"; }

const char* lt_status_name(lt_status status) {
  if (status == LT_OK) {
    return "ok";
  }
  if (status < LT_OK || status > LT_INTERNAL) {
    return "unknown";
  }
  return error_code_name(static_cast<ErrorCode>(static_cast<int>(status)));
}

int lt_status_is_validation(lt_status status) {
  switch (status) {
    case LT_INVALID_INPUT:
    case LT_INVALID_CONFIG:
    case LT_INVALID_LAYER:
    case LT_UNKNOWN_TOKEN:
    case LT_UNSUPPORTED_VERSION:
    case LT_CORRUPT_TRACE:
      return 1;
    default:
      return 0;
  }
}

const char* lt_last_error(void) { return last_error.c_str(); }

void lt_string_free(char* s) { std::free(s); }

void lt_model_config_default(lt_model_config* config) {
  if (config == nullptr) {
    return;
  }
  const model::ModelConfig d;
  config->n_layers = d.n_layers;
  config->d_model = d.d_model;
  config->n_heads = d.n_heads;
  config->d_ff = d.d_ff;
  config->vocab_size = d.vocab_size;
  config->max_seq_len = d.max_seq_len;
  config->block_layout = nullptr;
  config->tie_lm_head = d.tie_lm_head ? 1 : 0;
}

lt_status lt_model_create(const lt_model_config* config, uint64_t seed, lt_model** out) {
  return guard([&] {
    need(config, "config");
    need(out, "out");
    model::ModelConfig c;
    c.n_layers = config->n_layers;
    c.d_model = config->d_model;
    c.n_heads = config->n_heads;
    c.d_ff = config->d_ff;
    c.vocab_size = config->vocab_size;
    c.max_seq_len = config->max_seq_len;
    c.tie_lm_head = config->tie_lm_head != 0;
    if (config->block_layout != nullptr && config->block_layout[0] != '\0') {
      c.block_layout = model::parse_layout(config->block_layout);
    }
    *out = wrap(model::Model::build(c, seed));
  });
}

lt_status lt_model_load(const char* dir, lt_model** out) {
  return guard([&] {
    need(dir, "dir");
    need(out, "out");
    *out = wrap(model::load_checkpoint(dir));
  });
}

lt_status lt_model_save(const lt_model* model, const char* dir) {
  return guard([&] {
    need(model, "model");
    need(dir, "dir");
    model::save_checkpoint(model->model, dir);
  });
}

lt_status lt_model_info(const lt_model* model, lt_model_config* out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    const auto& c = model->model.config();
    out->n_layers = c.n_layers;
    out->d_model = c.d_model;
    out->n_heads = c.n_heads;
    out->d_ff = c.ff_dim();
    out->vocab_size = c.vocab_size;
    out->max_seq_len = c.max_seq_len;
    out->block_layout = model->layout.c_str();
    out->tie_lm_head = c.tie_lm_head ? 1 : 0;
  });
}

lt_status lt_model_digest(const lt_model* model, int group, char** out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    require(group <= model->model.n_layers() + 1, ErrorCode::InvalidInput, "no parameter group " + std::to_string(group));
    *out = dup(model::parameter_digest(model->model, group));
  });
}

void lt_model_destroy(lt_model* model) { delete model; }

void lt_train_config_default(lt_train_config* config) {
  if (config == nullptr) {
    return;
  }
  const trainer::TrainConfig d;
  config->learning_rate = d.learning_rate;
  config->beta1 = d.beta1;
  config->beta2 = d.beta2;
  config->weight_decay = d.weight_decay;
  config->warmup_ratio = d.warmup_ratio;
  config->grad_clip = d.grad_clip;
  config->batch_size = d.batch_size;
  config->seq_len = d.seq_len;
  config->steps = d.steps;
  config->seed = d.seed;
}

lt_status lt_model_pretrain(lt_model* model, lt_text_domain domain, size_t chars, uint64_t data_seed,
                            const lt_train_config* config, double* final_loss) {
  return guard([&] {
    need(model, "model");
    need(config, "config");
    std::mt19937_64 rng(data_seed);
    const auto d = domain == LT_TEXT_SYNONYMS ? corpus::TextDomain::Synonyms : corpus::TextDomain::Antonyms;
    const auto ids = encode_ids(corpus::synthetic_text(d, chars, rng));
    const auto record = trainer::pretrain(model->model, ids, to_cpp(*config));
    if (final_loss != nullptr) {
      *final_loss = record.loss_curve.empty() ? 0.0 : record.loss_curve.back();
    }
  });
}

void lt_experiment_options_default(lt_experiment_options* options) {
  if (options == nullptr) {
    return;
  }
  options->out_dir = nullptr;
  options->split = "1/2";
  options->train_chars = 100000;
  options->eval_chars = 4000;
  options->data_seed = 0;
  options->freeze_shallow_donor = 0;
  options->hybrid_init_seed = 1;
  options->embeddings_trainable = -1;
  options->lm_head_trainable = -1;
}

lt_status lt_run_strategy_comparison(const lt_model* base, const lt_train_config* config,
                                     const lt_experiment_options* options, char** table) {
  return guard([&] {
    need(base, "base");
    need(config, "config");
    need(options, "options");
    const auto split = diagnostics::Fraction::parse(options->split != nullptr ? options->split : "1/2");
    std::vector<trainer::Strategy> strategies;
    for (auto kind : {trainer::StrategyKind::FullParameter, trainer::StrategyKind::TrainShallowFreezeDeep,
                      trainer::StrategyKind::FreezeShallowTrainDeep}) {
      strategies.push_back({kind, split, tri_state(options->embeddings_trainable),
                            tri_state(options->lm_head_trainable)});
    }
    const auto data = experiment_data(*options);
    const auto records =
        trainer::run_strategy_comparison(base->model, data.train, strategies, to_cpp(*config), data.evals);
    const auto text = trainer::comparison_table(records);
    write_experiment(records, *options, text);
    if (table != nullptr) {
      *table = dup(text);
    }
  });
}

lt_status lt_run_hybrid_placement(const lt_model* donor, const lt_train_config* config,
                                  const lt_experiment_options* options, char** table) {
  return guard([&] {
    need(donor, "donor");
    need(config, "config");
    need(options, "options");
    trainer::HybridOptions h;
    h.split = diagnostics::Fraction::parse(options->split != nullptr ? options->split : "1/2");
    h.freeze_shallow_donor = options->freeze_shallow_donor != 0;
    h.init_seed = options->hybrid_init_seed;
    const auto data = experiment_data(*options);
    const auto [a, b] = trainer::hybrid_placement_run(donor->model, data.train, to_cpp(*config), h, data.evals);
    const std::vector<trainer::RunRecord> records{a, b};
    const auto text = trainer::comparison_table(records);
    write_experiment(records, *options, text);
    if (table != nullptr) {
      *table = dup(text);
    }
  });
}

lt_status lt_corpus_generate(const char* pairs_path, size_t n_samples, uint64_t seed, lt_corpus** out) {
  return guard([&] {
    need(out, "out");
    require(n_samples >= 1, ErrorCode::InvalidInput, "at least one sample is required");
    const auto pairs = pairs_path != nullptr ? corpus::read_pairs_file(pairs_path) : corpus::builtin_antonyms();
    std::mt19937_64 rng(seed);
    auto* c = new lt_corpus;
    try {
      const auto vocab = corpus::Vocabulary::characters();
      for (const auto& p : corpus::generate_prompts(pairs, n_samples, rng)) {
        c->samples.push_back(corpus::tokenize(p, vocab));
      }
    } catch (...) {
      delete c;
      throw;
    }
    *out = c;
  });
}

lt_status lt_corpus_load(const char* path, lt_corpus** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    auto samples = corpus::samples_from_json(detail::read_text_file(path));
    *out = new lt_corpus{std::move(samples)};
  });
}

lt_status lt_corpus_save(const lt_corpus* corpus, const char* path) {
  return guard([&] {
    need(corpus, "corpus");
    need(path, "path");
    detail::write_text_file(path, corpus::samples_to_json(corpus->samples));
  });
}

size_t lt_corpus_size(const lt_corpus* corpus) { return corpus == nullptr ? 0 : corpus->samples.size(); }

void lt_corpus_destroy(lt_corpus* corpus) { delete corpus; }

void lt_diagnose_options_default(lt_diagnose_options* options) {
  if (options == nullptr) {
    return;
  }
  const report::DiagnoseOptions d;
  options->epsilon = d.epsilon;
  options->tau = d.tau;
  options->top_k = d.js.top_k;
  options->js_full_vocab = d.js.full_vocab ? 1 : 0;
  options->lens_norm_final = 1;
  options->n_groups = d.n_groups;
  options->jobs = d.jobs;
  options->normalization = "minmax";
  options->fractions = "1/3,1/2,2/3";
}

lt_status lt_diagnose_model(const lt_model* model, const lt_corpus* corpus, const lt_diagnose_options* options,
                            uint64_t seed, lt_report** out) {
  return guard([&] {
    need(model, "model");
    need(corpus, "corpus");
    need(options, "options");
    need(out, "out");
    auto r = report::diagnose_model(model->model, corpus->samples, to_cpp(*options), seed);
    *out = new lt_report{std::move(r)};
  });
}

lt_status lt_diagnose_traces(const char* dir, const lt_model* model, const lt_diagnose_options* options,
                             lt_report** out) {
  return guard([&] {
    need(dir, "dir");
    need(options, "options");
    need(out, "out");
    std::vector<trace_io::ExternalTrace> traces;
    for (const auto& d : trace_io::list_trace_dirs(dir)) {
      traces.push_back(trace_io::read_trace(d));
    }
    auto r = report::diagnose_traces(traces, model != nullptr ? &model->model : nullptr, to_cpp(*options));
    *out = new lt_report{std::move(r)};
  });
}

lt_status lt_profile_prompt(const lt_model* model, const char* prompt, const lt_diagnose_options* options,
                            char** json) {
  return guard([&] {
    need(model, "model");
    need(options, "options");
    need(json, "json");
    const auto sample = prompt_sample(prompt);
    const auto p = report::profile_sample(model->model, sample, to_cpp(*options));
    nlohmann::json lens_top = nlohmann::json::array();
    for (const auto& layer : p.lens_top) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& [id, prob] : layer) {
        row.push_back({{"id", id}, {"token", corpus::Vocabulary::characters().piece(id)}, {"prob", prob}});
      }
      lens_top.push_back(row);
    }
    const nlohmann::json j{{"text", sample.text},
                           {"target_token", p.target_token},
                           {"target_piece", corpus::Vocabulary::characters().piece(p.target_token)},
                           {"target_prob_final", p.target_prob_final},
                           {"context_indices", sample.context_indices},
                           {"query_indices", sample.query_indices},
                           {"pt", p.pt},
                           {"ratio", p.ratio},
                           {"tp_interval", p.tp_interval},
                           {"js", p.js},
                           {"delta_js", p.delta_js},
                           {"lens_top", lens_top}};
    *json = dup(j.dump(2) + "\n");
  });
}

lt_status lt_perturb_curve(const lt_model* model, const char* prompt, const lt_diagnose_options* options, double* js,
                           size_t capacity, size_t* n_layers) {
  return guard([&] {
    need(model, "model");
    need(options, "options");
    need(js, "js");
    const auto n = static_cast<size_t>(model->model.n_layers());
    if (n_layers != nullptr) {
      *n_layers = n;
    }
    require(capacity >= n, ErrorCode::InvalidInput, "output buffer holds fewer than n_layers values");
    const auto curve = perturbation::js_curve(model->model, prompt_sample(prompt), to_cpp(*options).js);
    std::copy(curve.begin(), curve.end(), js);
  });
}

lt_status lt_report_write(const lt_report* report, const char* dir, int json, int csv) {
  return guard([&] {
    need(report, "report");
    need(dir, "dir");
    report::emit_report(report->report, dir, json != 0, csv != 0);
  });
}

lt_status lt_report_load(const char* path, lt_report** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    auto r = report::report_from_json(detail::read_text_file(path));
    *out = new lt_report{std::move(r)};
  });
}

lt_status lt_report_rescan(lt_report* report, const char* fractions, const char* normalization) {
  return guard([&] {
    need(report, "report");
    auto& r = report->report;
    std::vector<diagnostics::Fraction> fs;
    if (fractions != nullptr) {
      fs = diagnostics::parse_fractions(fractions);
    } else {
      for (const auto& row : r.scan.rows) {
        fs.push_back(row.fraction);
      }
    }
    const auto method = normalization != nullptr ? diagnostics::parse_normalization(normalization) : r.scan.normalization;
    r.scan = diagnostics::scan_mean_profiles(r.mean_ratio, r.mean_delta_js, fs, method);
    r.metadata.normalization = std::string(diagnostics::normalization_name(method));
  });
}

lt_status lt_report_scan_text(const lt_report* report, const char* format, char** out) {
  return guard([&] {
    need(report, "report");
    need(format, "format");
    need(out, "out");
    const std::string f(format);
    if (f == "table") {
      *out = dup(report::scan_table(report->report.scan));
    } else if (f == "json") {
      *out = dup(report::scan_json(report->report.scan));
    } else if (f == "csv") {
      *out = dup(report::scan_csv(report->report.scan));
    } else {
      fail(ErrorCode::InvalidConfig, "unknown scan format '" + f + "'");
    }
  });
}

size_t lt_report_scan_rows(const lt_report* report) { return report == nullptr ? 0 : report->report.scan.rows.size(); }

lt_status lt_report_scan_row(const lt_report* report, size_t row, int* split_layer, double* score) {
  return guard([&] {
    need(report, "report");
    require(row < report->report.scan.rows.size(), ErrorCode::InvalidInput, "scan row out of range");
    const auto& r = report->report.scan.rows[row];
    if (split_layer != nullptr) {
      *split_layer = r.split_layer;
    }
    if (score != nullptr) {
      *score = r.score;
    }
  });
}

lt_status lt_report_heatmap_shape(const lt_report* report, int* rows, int* cols) {
  return guard([&] {
    need(report, "report");
    const auto& h = report->report.ratio_heatmap;
    if (rows != nullptr) {
      *rows = static_cast<int>(h.values.size());
    }
    if (cols != nullptr) {
      *cols = h.values.empty() ? 0 : static_cast<int>(h.values.front().size());
    }
  });
}

void lt_report_destroy(lt_report* report) { delete report; }

void lt_capture_options_default(lt_capture_options* options) {
  if (options == nullptr) {
    return;
  }
  options->hidden_states = 1;
  options->layer_distributions = 1;
  options->perturbed_distributions = 1;
  options->top_k = 0;
  options->lens_norm_final = 1;
}

namespace {

trace_io::CaptureOptions capture_options(const lt_capture_options& o) {
  trace_io::CaptureOptions c;
  c.hidden_states = o.hidden_states != 0;
  c.layer_distributions = o.layer_distributions != 0;
  c.perturbed_distributions = o.perturbed_distributions != 0;
  require(o.top_k >= 0, ErrorCode::InvalidConfig, "top_k must be >= 0");
  if (o.top_k > 0) {
    c.top_k = o.top_k;
  }
  c.lens_norm = o.lens_norm_final != 0 ? model::LensNorm::Final : model::LensNorm::None;
  return c;
}

}  // namespace

lt_status lt_trace_capture(const lt_model* model, const char* prompt, const lt_capture_options* options,
                           const char* dir) {
  return guard([&] {
    need(model, "model");
    need(options, "options");
    need(dir, "dir");
    trace_io::write_trace(trace_io::capture_trace(model->model, prompt_sample(prompt), capture_options(*options)), dir);
  });
}

lt_status lt_trace_capture_corpus(const lt_model* model, const lt_corpus* corpus, const lt_capture_options* options,
                                  const char* dir) {
  return guard([&] {
    need(model, "model");
    need(corpus, "corpus");
    need(options, "options");
    need(dir, "dir");
    const auto co = capture_options(*options);
    for (std::size_t i = 0; i < corpus->samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%05zu", i);
      trace_io::write_trace(trace_io::capture_trace(model->model, corpus->samples[i], co),
                            std::filesystem::path(dir) / name);
    }
  });
}

lt_status lt_trace_inspect(const char* dir, char** summary) {
  return guard([&] {
    need(dir, "dir");
    need(summary, "summary");
    *summary = dup(trace_io::describe_trace(trace_io::read_trace(dir)));
  });
}

}  // extern "C"
