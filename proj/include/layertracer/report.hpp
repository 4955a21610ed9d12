#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "layertracer/corpus.hpp"
#include "layertracer/diagnostics.hpp"
#include "layertracer/model.hpp"
#include "layertracer/perturbation.hpp"
#include "layertracer/trace_io.hpp"

namespace layertracer::report {

struct DiagnoseOptions {
  double epsilon = diagnostics::kDefaultEpsilon;
  double tau = 0.0;
  perturbation::JsOptions js;
  model::LensNorm lens_norm = model::LensNorm::Final;
  int n_groups = 10;
  int jobs = 1;
  int lens_candidates = 5;  // top lens tokens kept per layer in the report
  diagnostics::Normalization normalization = diagnostics::Normalization::MinMax;
  std::vector<diagnostics::Fraction> fractions = diagnostics::default_fractions();
};

struct SampleProfile {
  int index = 0;
  int group_id = 0;
  std::string text;
  int target_token = 0;
  double target_prob_final = 0.0;
  std::vector<double> pt;        // P_t(1..N)
  std::vector<double> ratio;     // layers 2..N
  std::vector<int> tp_interval;
  std::vector<double> js;        // JS(1..N)
  std::vector<double> delta_js;  // layers 2..N
  std::vector<std::vector<std::pair<int, double>>> lens_top;  // per layer, highest first
};

struct Metadata {
  double epsilon = 0.0;
  double tau = 0.0;
  std::string lens_norm;
  std::string js_support;  // "top-k" or "full"
  int top_k = 0;
  std::string normalization;
  int n_layers = 0;
  int n_samples = 0;
  int n_groups = 0;
  std::uint64_t seed = 0;
  std::string source;        // "model" or "traces"
  std::string model_digest;  // empty for traces
};

struct DiagnosticReport {
  Metadata metadata;
  std::vector<SampleProfile> samples;
  diagnostics::Heatmap ratio_heatmap;
  diagnostics::Heatmap delta_js_heatmap;
  std::vector<double> mean_ratio;
  std::vector<double> mean_delta_js;
  diagnostics::BoundaryScan scan;
};

SampleProfile profile_sample(const model::Model& model, const corpus::TokenizedSample& sample,
                             const DiagnoseOptions& options);

// Uses stored distributions; hidden-state-only traces need `model` to re-run projections and resumptions.
SampleProfile profile_trace(const trace_io::ExternalTrace& trace, const model::Model* model,
                            const DiagnoseOptions& options);

// Samples are profiled in parallel (options.jobs); output order and bytes do not depend on the job count.
DiagnosticReport diagnose_model(const model::Model& model, const std::vector<corpus::TokenizedSample>& samples,
                                const DiagnoseOptions& options, std::uint64_t seed);

// Traces are grouped contiguously in the given order.
DiagnosticReport diagnose_traces(const std::vector<trace_io::ExternalTrace>& traces, const model::Model* model,
                                 const DiagnoseOptions& options);

// Heatmaps, mean profiles and scan from per-sample profiles with group ids already assigned.
DiagnosticReport assemble(std::vector<SampleProfile> samples, Metadata metadata, const DiagnoseOptions& options);

std::string report_json(const DiagnosticReport& report);
// Reads back the fields needed to rescan: metadata, mean profiles, heatmaps, samples.
DiagnosticReport report_from_json(const std::string& text);

std::string heatmap_csv(const diagnostics::Heatmap& heatmap);
std::string scan_csv(const diagnostics::BoundaryScan& scan);
std::string scan_json(const diagnostics::BoundaryScan& scan);
std::string scan_table(const diagnostics::BoundaryScan& scan);

// report.json and/or the CSV set under `dir`.
void emit_report(const DiagnosticReport& report, const std::filesystem::path& dir, bool json, bool csv);

}  // namespace layertracer::report
