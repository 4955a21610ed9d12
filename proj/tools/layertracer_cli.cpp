#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layertracer/layertracer.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

// Carries a C API failure up to main, which picks the exit code.
struct ApiFailure {
  lt_status status;
  std::string message;
};

void check(lt_status s) {
  if (s != LT_OK) {
    throw ApiFailure{s, lt_last_error()};
  }
}

void invalid(const std::string& message) { throw ApiFailure{LT_INVALID_CONFIG, message}; }

// Owns a string returned by the library.
struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { lt_string_free(p); }
  std::string str() const { return p != nullptr ? p : ""; }
};

template <typename T, void (*Destroy)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Destroy(p); }
};

using ModelHandle = Handle<lt_model, lt_model_destroy>;
using CorpusHandle = Handle<lt_corpus, lt_corpus_destroy>;
using ReportHandle = Handle<lt_report, lt_report_destroy>;

uint64_t default_seed() {
  const char* env = std::getenv("LAYERTRACER_SEED");
  if (env == nullptr || *env == '\0') {
    return 0;
  }
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || *end != '\0' || env[0] == '-') {
    invalid(std::string("LAYERTRACER_SEED is not an unsigned integer: '") + env + "'");
  }
  return v;
}

struct ModelOptions {
  std::string model_dir;
  int layers = 8;
  int d_model = 64;
  int heads = 4;
  std::string layout;
  int pretrain_steps = 300;
  double pretrain_lr = 3e-3;
  std::size_t pretrain_chars = 200000;
  int pretrain_batch = 8;
  int pretrain_seq = 48;
  std::string save_model;
};

void add_model_options(CLI::App* cmd, ModelOptions& o, bool with_layout) {
  cmd->add_option("--model", o.model_dir, "Load a saved model directory instead of building one");
  cmd->add_option("--layers", o.layers, "Layers N of a built model")->capture_default_str();
  cmd->add_option("--d-model", o.d_model, "Hidden width of a built model")->capture_default_str();
  cmd->add_option("--heads", o.heads, "Attention heads of a built model")->capture_default_str();
  if (with_layout) {
    cmd->add_option("--layout", o.layout, "Block layout, one letter per layer: F full, L linear (default all F)");
  }
  cmd->add_option("--pretrain-steps", o.pretrain_steps, "Pretraining steps for a built model")->capture_default_str();
  cmd->add_option("--pretrain-lr", o.pretrain_lr, "Pretraining learning rate")->capture_default_str();
  cmd->add_option("--pretrain-chars", o.pretrain_chars, "Characters of synthetic pretraining text")
      ->capture_default_str();
  cmd->add_option("--pretrain-batch", o.pretrain_batch, "Pretraining batch size")->capture_default_str();
  cmd->add_option("--pretrain-seq", o.pretrain_seq, "Pretraining sequence length")->capture_default_str();
  cmd->add_option("--save-model", o.save_model, "Save the built model to this directory");
}

// Loads --model, or builds and pretrains a fresh model from the seed.
void obtain_model(const ModelOptions& o, uint64_t seed, ModelHandle& out) {
  if (!o.model_dir.empty()) {
    check(lt_model_load(o.model_dir.c_str(), &out.p));
    return;
  }
  lt_model_config c;
  lt_model_config_default(&c);
  c.n_layers = o.layers;
  c.d_model = o.d_model;
  c.n_heads = o.heads;
  c.block_layout = o.layout.empty() ? nullptr : o.layout.c_str();
  check(lt_model_create(&c, seed, &out.p));
  if (o.pretrain_steps > 0) {
    lt_train_config t;
    lt_train_config_default(&t);
    t.learning_rate = o.pretrain_lr;
    t.steps = o.pretrain_steps;
    t.batch_size = o.pretrain_batch;
    t.seq_len = o.pretrain_seq;
    t.weight_decay = 0.0;
    t.seed = seed;
    double loss = 0.0;
    check(lt_model_pretrain(out.p, LT_TEXT_ANTONYMS, o.pretrain_chars, seed, &t, &loss));
    std::fprintf(stderr, "pretrained %d steps, final loss %.6f\n", o.pretrain_steps, loss);
  }
  if (!o.save_model.empty()) {
    check(lt_model_save(out.p, o.save_model.c_str()));
  }
}

struct DiagnoseFlags {
  double epsilon = 1e-6;
  double tau = 0.0;
  int top_k = 10;
  std::string js_support = "top-k";
  std::string lens_norm = "final";
  int groups = 10;
  int jobs = 1;
  std::string normalization = "minmax";
  std::string fractions = "1/3,1/2,2/3";
};

void add_diagnose_flags(CLI::App* cmd, DiagnoseFlags& f, bool with_report_flags) {
  cmd->add_option("--epsilon", f.epsilon, "Stabilizer in the Ratio and delta-JS denominators")->capture_default_str();
  cmd->add_option("--top-k", f.top_k, "Candidate tokens kept per distribution for JS (50 for the robustness mode)")
      ->capture_default_str();
  cmd->add_option("--js-support", f.js_support, "JS support: top-k (aligned union) or full vocabulary")
      ->check(CLI::IsMember({"top-k", "full"}))
      ->capture_default_str();
  cmd->add_option("--lens-norm", f.lens_norm, "Apply the final norm before the head in the logit lens")
      ->check(CLI::IsMember({"final", "none"}))
      ->capture_default_str();
  if (with_report_flags) {
    cmd->add_option("--tau", f.tau, "Ratio threshold for the task-particle interval")->capture_default_str();
    cmd->add_option("--groups", f.groups, "Contiguous sample groups (heatmap rows)")->capture_default_str();
    cmd->add_option("--jobs", f.jobs, "Worker threads for per-sample diagnosis")->capture_default_str();
    cmd->add_option("--normalization", f.normalization, "Profile normalization for the boundary scan")
        ->check(CLI::IsMember({"minmax", "zscore-clipped"}))
        ->capture_default_str();
    cmd->add_option("--fractions", f.fractions, "Split fractions for the boundary scan")->capture_default_str();
  }
}

lt_diagnose_options to_options(const DiagnoseFlags& f) {
  lt_diagnose_options o;
  lt_diagnose_options_default(&o);
  o.epsilon = f.epsilon;
  o.tau = f.tau;
  o.top_k = f.top_k;
  o.js_full_vocab = f.js_support == "full" ? 1 : 0;
  o.lens_norm_final = f.lens_norm == "final" ? 1 : 0;
  o.n_groups = f.groups;
  o.jobs = f.jobs;
  o.normalization = f.normalization.c_str();
  o.fractions = f.fractions.c_str();
  return o;
}

struct FormatSet {
  bool json = false;
  bool csv = false;
};

FormatSet parse_formats(const std::string& text) {
  FormatSet f;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item == "json") {
      f.json = true;
    } else if (item == "csv") {
      f.csv = true;
    } else {
      invalid("unknown output format '" + item + "' (expected json, csv)");
    }
    if (comma == std::string::npos) {
      break;
    }
    start = comma + 1;
  }
  return f;
}

void print_scan(const lt_report* report, const std::string& format) {
  OwnedString s;
  check(lt_report_scan_text(report, format.c_str(), &s.p));
  std::cout << s.str();
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise diagnostics, boundary scans and freeze/train experiments for small transformers",
               "layertracer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(lt_version()));

  std::optional<uint64_t> seed_flag;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed_flag, "Random seed (default: LAYERTRACER_SEED or 0)");
  };

  // build-corpus
  auto* corpus_cmd = app.add_subcommand("build-corpus", "Generate structured prompts and write the sample dump");
  std::string pairs_path;
  std::size_t n_samples = 500;
  std::string corpus_out;
  corpus_cmd->add_option("--pairs", pairs_path, "Word-pair file, one 'a,b' pair per line (default built-in antonyms)");
  corpus_cmd->add_option("--samples", n_samples, "Number of prompts")->capture_default_str();
  corpus_cmd->add_option("--out", corpus_out, "Output JSON sample dump")->required();
  add_seed(corpus_cmd);

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "Task particle and sensitivity profiles, heatmaps and boundary scan");
  ModelOptions model_opts;
  DiagnoseFlags diag;
  std::string corpus_in, report_out = "report", formats = "json,csv", traces_in, emit_traces;
  int trace_top_k = 0;
  add_model_options(diag_cmd, model_opts, true);
  add_diagnose_flags(diag_cmd, diag, true);
  diag_cmd->add_option("--corpus", corpus_in, "Sample dump from build-corpus (default: generate prompts)");
  diag_cmd->add_option("--pairs", pairs_path, "Word-pair file for generated prompts (default built-in antonyms)");
  diag_cmd->add_option("--samples", n_samples, "Number of generated prompts")->capture_default_str();
  diag_cmd->add_option("--traces", traces_in, "Diagnose trace directories under this path instead of a model");
  diag_cmd->add_option("--emit-traces", emit_traces, "Also write one trace directory per sample here");
  diag_cmd->add_option("--trace-top-k", trace_top_k, "Sparse top-K storage for emitted traces (0 = dense)")
      ->capture_default_str();
  diag_cmd->add_option("--out", report_out, "Report output directory")->capture_default_str();
  diag_cmd->add_option("--format", formats, "Report formats, comma-separated: json, csv")->capture_default_str();
  add_seed(diag_cmd);

  // perturb
  auto* perturb_cmd = app.add_subcommand("perturb", "Context-masking JS curve for one prompt");
  ModelOptions perturb_model;
  DiagnoseFlags perturb_flags;
  std::string prompt;
  bool perturb_json = false;
  add_model_options(perturb_cmd, perturb_model, true);
  add_diagnose_flags(perturb_cmd, perturb_flags, false);
  perturb_cmd->add_option("--prompt", prompt, "Prompt in the 'Example:a->B, c-D; Query:q->' template")->required();
  perturb_cmd->add_flag("--json", perturb_json, "Print the full per-sample profile as JSON");
  add_seed(perturb_cmd);

  // scan
  auto* scan_cmd = app.add_subcommand("scan", "Boundary alignment scan over a saved report");
  std::string scan_report, scan_fractions, scan_normalization, scan_format = "table";
  scan_cmd->add_option("--report", scan_report, "report.json from diagnose")->required();
  scan_cmd->add_option("--fractions", scan_fractions, "Split fractions (default: those stored in the report)");
  scan_cmd->add_option("--normalization", scan_normalization, "minmax or zscore-clipped (default: as stored)")
      ->check(CLI::IsMember({"minmax", "zscore-clipped"}));
  scan_cmd->add_option("--format", scan_format, "table, json or csv")
      ->check(CLI::IsMember({"table", "json", "csv"}))
      ->capture_default_str();
  add_seed(scan_cmd);

  // train / hybrid share the continued-pretraining configuration
  struct TrainFlags {
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double warmup = 0.1;
    double grad_clip = 0.0;
    int batch = 8;
    int seq_len = 32;
    int steps = 100;
    std::string split = "1/2";
    std::size_t train_chars = 100000;
    std::size_t eval_chars = 4000;
    std::string out = "runs";
    std::string run_name;
  };
  TrainFlags tf;
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--lr", tf.lr, "Peak learning rate")->capture_default_str();
    cmd->add_option("--beta1", tf.beta1, "AdamW beta1")->capture_default_str();
    cmd->add_option("--beta2", tf.beta2, "AdamW beta2")->capture_default_str();
    cmd->add_option("--weight-decay", tf.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    cmd->add_option("--warmup", tf.warmup, "Linear warmup as a fraction of steps")->capture_default_str();
    cmd->add_option("--grad-clip", tf.grad_clip, "Global gradient-norm clip (0 = off)")->capture_default_str();
    cmd->add_option("--batch", tf.batch, "Sequences per step")->capture_default_str();
    cmd->add_option("--seq-len", tf.seq_len, "Tokens per training sequence")->capture_default_str();
    cmd->add_option("--steps", tf.steps, "Continued-pretraining steps per run")->capture_default_str();
    cmd->add_option("--split", tf.split, "Shallow/deep split fraction")->capture_default_str();
    cmd->add_option("--train-chars", tf.train_chars, "Characters of continued-pretraining text (domain B)")
        ->capture_default_str();
    cmd->add_option("--eval-chars", tf.eval_chars, "Characters per held-out evaluation set")->capture_default_str();
    cmd->add_option("--out", tf.out, "Runs root; each invocation writes <out>/<timestamp>-seed<S>/")
        ->capture_default_str();
    cmd->add_option("--run-name", tf.run_name, "Use this directory name instead of <timestamp>-seed<S>");
  };

  auto* train_cmd = app.add_subcommand("train", "Full, train-shallow and train-deep continued pretraining");
  ModelOptions train_model;
  std::string embeddings_flag = "follow", head_flag = "follow";
  add_model_options(train_cmd, train_model, true);
  add_train_flags(train_cmd);
  train_cmd->add_option("--embeddings-trainable", embeddings_flag, "follow the shallow group, yes, or no")
      ->check(CLI::IsMember({"follow", "yes", "no"}))
      ->capture_default_str();
  train_cmd->add_option("--lm-head-trainable", head_flag, "follow the shallow group, yes, or no")
      ->check(CLI::IsMember({"follow", "yes", "no"}))
      ->capture_default_str();
  add_seed(train_cmd);

  auto* hybrid_cmd = app.add_subcommand("hybrid", "Paired placement of a full-attention donor in a hybrid model");
  ModelOptions hybrid_model;
  bool freeze_shallow_donor = false;
  uint64_t hybrid_init_seed = 1;
  add_model_options(hybrid_cmd, hybrid_model, false);
  add_train_flags(hybrid_cmd);
  hybrid_cmd->add_flag("--freeze-shallow-donor", freeze_shallow_donor,
                       "Also freeze donor blocks when they are placed shallow");
  hybrid_cmd->add_option("--init-seed", hybrid_init_seed, "Seed for the fresh linear-attention blocks")
      ->capture_default_str();
  add_seed(hybrid_cmd);

  auto* inspect_cmd = app.add_subcommand("inspect-trace", "Validate a trace directory and print its summary");
  std::string inspect_dir;
  inspect_cmd->add_option("dir", inspect_dir, "Trace directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const CLI::App* where = &app;
    for (const auto* sub : app.get_subcommands()) {
      where = sub;
    }
    std::cerr << "error: " << e.what() << "\n\n" << where->help();
    return kExitValidation;
  }

  try {
    const uint64_t seed = seed_flag ? *seed_flag : default_seed();

    if (corpus_cmd->parsed()) {
      CorpusHandle c;
      check(lt_corpus_generate(pairs_path.empty() ? nullptr : pairs_path.c_str(), n_samples, seed, &c.p));
      check(lt_corpus_save(c.p, corpus_out.c_str()));
      std::cout << "wrote " << lt_corpus_size(c.p) << " samples to " << corpus_out << "\n";
    } else if (diag_cmd->parsed()) {
      const auto fmt = parse_formats(formats);
      const auto options = to_options(diag);
      ReportHandle report;
      ModelHandle model;
      if (!traces_in.empty()) {
        if (!model_opts.model_dir.empty()) {
          obtain_model(model_opts, seed, model);
        }
        check(lt_diagnose_traces(traces_in.c_str(), model.p, &options, &report.p));
      } else {
        obtain_model(model_opts, seed, model);
        CorpusHandle c;
        if (!corpus_in.empty()) {
          check(lt_corpus_load(corpus_in.c_str(), &c.p));
        } else {
          check(lt_corpus_generate(pairs_path.empty() ? nullptr : pairs_path.c_str(), n_samples, seed, &c.p));
        }
        check(lt_diagnose_model(model.p, c.p, &options, seed, &report.p));
        if (!emit_traces.empty()) {
          lt_capture_options co;
          lt_capture_options_default(&co);
          co.top_k = trace_top_k;
          co.lens_norm_final = options.lens_norm_final;
          check(lt_trace_capture_corpus(model.p, c.p, &co, emit_traces.c_str()));
        }
      }
      check(lt_report_write(report.p, report_out.c_str(), fmt.json ? 1 : 0, fmt.csv ? 1 : 0));
      print_scan(report.p, "table");
    } else if (perturb_cmd->parsed()) {
      ModelHandle model;
      obtain_model(perturb_model, seed, model);
      const auto options = to_options(perturb_flags);
      if (perturb_json) {
        OwnedString s;
        check(lt_profile_prompt(model.p, prompt.c_str(), &options, &s.p));
        std::cout << s.str();
      } else {
        lt_model_config info;
        check(lt_model_info(model.p, &info));
        std::vector<double> js(static_cast<std::size_t>(info.n_layers));
        std::size_t n = 0;
        check(lt_perturb_curve(model.p, prompt.c_str(), &options, js.data(), js.size(), &n));
        std::cout << "layer,js\n";
        for (std::size_t l = 0; l < n; ++l) {
          char line[64];
          std::snprintf(line, sizeof(line), "%zu,%.17g\n", l + 1, js[l]);
          std::cout << line;
        }
      }
    } else if (scan_cmd->parsed()) {
      ReportHandle report;
      check(lt_report_load(scan_report.c_str(), &report.p));
      check(lt_report_rescan(report.p, scan_fractions.empty() ? nullptr : scan_fractions.c_str(),
                             scan_normalization.empty() ? nullptr : scan_normalization.c_str()));
      print_scan(report.p, scan_format);
    } else if (train_cmd->parsed() || hybrid_cmd->parsed()) {
      const bool hybrid = hybrid_cmd->parsed();
      ModelHandle model;
      obtain_model(hybrid ? hybrid_model : train_model, seed, model);
      lt_train_config t;
      lt_train_config_default(&t);
      t.learning_rate = tf.lr;
      t.beta1 = tf.beta1;
      t.beta2 = tf.beta2;
      t.weight_decay = tf.weight_decay;
      t.warmup_ratio = tf.warmup;
      t.grad_clip = tf.grad_clip;
      t.batch_size = tf.batch;
      t.seq_len = tf.seq_len;
      t.steps = tf.steps;
      t.seed = seed;
      const auto run_dir =
          fs::path(tf.out) / (tf.run_name.empty() ? timestamp() + "-seed" + std::to_string(seed) : tf.run_name);
      const std::string run_dir_str = run_dir.string();
      lt_experiment_options e;
      lt_experiment_options_default(&e);
      e.out_dir = run_dir_str.c_str();
      e.split = tf.split.c_str();
      e.train_chars = tf.train_chars;
      e.eval_chars = tf.eval_chars;
      e.data_seed = seed;
      auto tri = [](const std::string& v) { return v == "follow" ? -1 : (v == "yes" ? 1 : 0); };
      e.embeddings_trainable = tri(embeddings_flag);
      e.lm_head_trainable = tri(head_flag);
      e.freeze_shallow_donor = freeze_shallow_donor ? 1 : 0;
      e.hybrid_init_seed = hybrid_init_seed;
      OwnedString table;
      if (hybrid) {
        check(lt_run_hybrid_placement(model.p, &t, &e, &table.p));
      } else {
        check(lt_run_strategy_comparison(model.p, &t, &e, &table.p));
      }
      std::cout << table.str() << "\nruns written to " << run_dir_str << "\n";
    } else if (inspect_cmd->parsed()) {
      OwnedString s;
      check(lt_trace_inspect(inspect_dir.c_str(), &s.p));
      std::cout << s.str();
    }
  } catch (const ApiFailure& f) {
    std::cerr << "error (" << lt_status_name(f.status) << "): " << f.message << "\n";
    return lt_status_is_validation(f.status) ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
