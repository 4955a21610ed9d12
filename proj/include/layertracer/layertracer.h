#ifndef LAYERTRACER_LAYERTRACER_H
#define LAYERTRACER_LAYERTRACER_H

/* C interface to the layertracer library. Every call returns an lt_status;
 * on failure lt_last_error() describes the cause for the calling thread.
 * Strings returned through char** are owned by the caller and released with
 * lt_string_free. Handles are released with their *_destroy function. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define LT_API __declspec(dllexport)
#else
#define LT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum lt_status {
  LT_OK = 0,
  LT_INVALID_INPUT = 1,
  LT_INVALID_CONFIG = 2,
  LT_INVALID_LAYER = 3,
  LT_UNKNOWN_TOKEN = 4,
  LT_UNSUPPORTED_VERSION = 5,
  LT_CORRUPT_TRACE = 6,
  LT_IO = 7,
  LT_DIVERGED = 8,
  LT_INTERNAL = 9
} lt_status;

typedef struct lt_model lt_model;
typedef struct lt_corpus lt_corpus;
typedef struct lt_report lt_report;

LT_API const char* lt_version(void);
LT_API const char* lt_status_name(lt_status status);
/* Nonzero for caller errors (bad input, config, layer, token, version, trace). */
LT_API int lt_status_is_validation(lt_status status);
LT_API const char* lt_last_error(void);
LT_API void lt_string_free(char* s);

/* ---- models ---- */

typedef struct lt_model_config {
  int n_layers;
  int d_model;
  int n_heads;
  int d_ff; /* 0 selects 4 * d_model */
  int vocab_size;
  int max_seq_len;
  const char* block_layout; /* "F"/"L" per layer; NULL or "" for all full attention */
  int tie_lm_head;
} lt_model_config;

LT_API void lt_model_config_default(lt_model_config* config);
LT_API lt_status lt_model_create(const lt_model_config* config, uint64_t seed, lt_model** out);
LT_API lt_status lt_model_load(const char* dir, lt_model** out);
LT_API lt_status lt_model_save(const lt_model* model, const char* dir);
/* block_layout in `out` points into the model and lives as long as it does. */
LT_API lt_status lt_model_info(const lt_model* model, lt_model_config* out);
/* Hex SHA-256 of one parameter group (0 embeddings, 1..N layers, N+1 head) or all when group < 0. */
LT_API lt_status lt_model_digest(const lt_model* model, int group, char** out);
LT_API void lt_model_destroy(lt_model* model);

/* ---- training ---- */

typedef enum lt_text_domain { LT_TEXT_ANTONYMS = 0, LT_TEXT_SYNONYMS = 1 } lt_text_domain;

typedef struct lt_train_config {
  double learning_rate;
  double beta1;
  double beta2;
  double weight_decay;
  double warmup_ratio;
  double grad_clip; /* 0 disables */
  int batch_size;
  int seq_len;
  int steps;
  uint64_t seed;
} lt_train_config;

LT_API void lt_train_config_default(lt_train_config* config);

/* Trains every parameter on synthetic text of at least `chars` characters. */
LT_API lt_status lt_model_pretrain(lt_model* model, lt_text_domain domain, size_t chars, uint64_t data_seed,
                                   const lt_train_config* config, double* final_loss);

typedef struct lt_experiment_options {
  const char* out_dir;      /* run artifacts are written below this directory; NULL skips them */
  const char* split;        /* shallow fraction, e.g. "1/2" */
  size_t train_chars;       /* new-domain (synonym) training text */
  size_t eval_chars;        /* each held-out evaluation text */
  uint64_t data_seed;
  int freeze_shallow_donor; /* hybrid only */
  uint64_t hybrid_init_seed;
  int embeddings_trainable; /* -1 follows the shallow group, else 0/1 */
  int lm_head_trainable;    /* -1 follows the shallow group, else 0/1 */
} lt_experiment_options;

LT_API void lt_experiment_options_default(lt_experiment_options* options);

/* Full, train-shallow and train-deep continued pre-training from copies of `base`;
 * `table` receives a markdown comparison. */
LT_API lt_status lt_run_strategy_comparison(const lt_model* base, const lt_train_config* config,
                                            const lt_experiment_options* options, char** table);
/* Both mirror hybrid placements built from the full-attention `donor`. */
LT_API lt_status lt_run_hybrid_placement(const lt_model* donor, const lt_train_config* config,
                                         const lt_experiment_options* options, char** table);

/* ---- prompts ---- */

/* pairs_path NULL uses the built-in antonym list. */
LT_API lt_status lt_corpus_generate(const char* pairs_path, size_t n_samples, uint64_t seed, lt_corpus** out);
LT_API lt_status lt_corpus_load(const char* path, lt_corpus** out);
LT_API lt_status lt_corpus_save(const lt_corpus* corpus, const char* path);
LT_API size_t lt_corpus_size(const lt_corpus* corpus);
LT_API void lt_corpus_destroy(lt_corpus* corpus);

/* ---- diagnosis ---- */

typedef struct lt_diagnose_options {
  double epsilon;
  double tau;
  int top_k;
  int js_full_vocab;
  int lens_norm_final;
  int n_groups;
  int jobs;
  const char* normalization; /* "minmax" or "zscore-clipped" */
  const char* fractions;     /* comma-separated, e.g. "1/3,1/2,2/3" */
} lt_diagnose_options;

LT_API void lt_diagnose_options_default(lt_diagnose_options* options);

LT_API lt_status lt_diagnose_model(const lt_model* model, const lt_corpus* corpus, const lt_diagnose_options* options,
                                   uint64_t seed, lt_report** out);
/* `dir` is a trace or a directory of traces; `model` may be NULL unless traces lack distributions. */
LT_API lt_status lt_diagnose_traces(const char* dir, const lt_model* model, const lt_diagnose_options* options,
                                    lt_report** out);

/* Per-layer profile of one prompt as JSON (pt, ratio, js, delta_js, lens candidates). */
LT_API lt_status lt_profile_prompt(const lt_model* model, const char* prompt, const lt_diagnose_options* options,
                                   char** json);
/* JS(1..N) for one prompt; `capacity` must be at least N. */
LT_API lt_status lt_perturb_curve(const lt_model* model, const char* prompt, const lt_diagnose_options* options,
                                  double* js, size_t capacity, size_t* n_layers);

LT_API lt_status lt_report_write(const lt_report* report, const char* dir, int json, int csv);
LT_API lt_status lt_report_load(const char* path, lt_report** out);
/* Recomputes the boundary scan; NULL arguments keep the current setting. */
LT_API lt_status lt_report_rescan(lt_report* report, const char* fractions, const char* normalization);
/* format: "table", "json" or "csv". */
LT_API lt_status lt_report_scan_text(const lt_report* report, const char* format, char** out);
LT_API size_t lt_report_scan_rows(const lt_report* report);
LT_API lt_status lt_report_scan_row(const lt_report* report, size_t row, int* split_layer, double* score);
LT_API lt_status lt_report_heatmap_shape(const lt_report* report, int* rows, int* cols);
LT_API void lt_report_destroy(lt_report* report);

/* ---- traces ---- */

typedef struct lt_capture_options {
  int hidden_states;
  int layer_distributions;
  int perturbed_distributions;
  int top_k; /* 0 stores dense distributions */
  int lens_norm_final;
} lt_capture_options;

LT_API void lt_capture_options_default(lt_capture_options* options);
LT_API lt_status lt_trace_capture(const lt_model* model, const char* prompt, const lt_capture_options* options,
                                  const char* dir);
/* One trace per prompt under dir/sample_00000, dir/sample_00001, ... */
LT_API lt_status lt_trace_capture_corpus(const lt_model* model, const lt_corpus* corpus,
                                         const lt_capture_options* options, const char* dir);
LT_API lt_status lt_trace_inspect(const char* dir, char** summary);

#ifdef __cplusplus
}
#endif

#endif
