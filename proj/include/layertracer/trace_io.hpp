#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "layertracer/corpus.hpp"
#include "layertracer/logit_lens.hpp"
#include "layertracer/model.hpp"
#include "layertracer/numerics.hpp"

namespace layertracer::trace_io {

using numerics::Tensor;

inline constexpr int kTraceFormatVersion = 1;

struct TraceManifest {
  int format_version = kTraceFormatVersion;
  int n_layers = 0;
  int d_model = 0;
  int vocab_size = 0;
  int seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> context_indices;
  std::vector<int> query_indices;
  bool has_hidden_states = false;
  bool has_layer_distributions = false;
  bool has_perturbed_distributions = false;
  std::optional<int> top_k;        // set when distribution blobs are sparse
  std::string lens_norm = "final";  // how layer distributions were projected

  // InvalidInput on broken invariants (index partition, flags, sizes).
  void validate() const;
};

// Dense: ids 0..V-1. Sparse: ascending ids with their full-vocabulary probabilities.
struct StoredDistribution {
  std::vector<int> ids;
  std::vector<double> probs;

  lens::DistributionView view() const { return {ids, probs}; }
  bool operator==(const StoredDistribution&) const = default;
};

struct ExternalTrace {
  TraceManifest manifest;
  std::vector<Tensor> hidden_states;                     // h_1..h_N when present
  std::vector<StoredDistribution> layer_distributions;   // lens P_1..P_N; P_N is the final distribution
  std::vector<StoredDistribution> perturbed_distributions;  // Q(1)..Q(N)
};

struct CaptureOptions {
  bool hidden_states = true;
  bool layer_distributions = true;
  bool perturbed_distributions = true;
  std::optional<int> top_k;
  model::LensNorm lens_norm = model::LensNorm::Final;
};

// Runs the model once with tracing and N masked resumptions as requested.
ExternalTrace capture_trace(const model::Model& model, const corpus::TokenizedSample& sample,
                            const CaptureOptions& options);

// Writes into a temporary sibling and renames it into place. An existing `dir`
// is replaced only when it is empty or holds a trace manifest.
void write_trace(const ExternalTrace& trace, const std::filesystem::path& dir);

// UnsupportedVersion for newer formats, CorruptTrace naming the file on size or content errors,
// InvalidInput on manifest invariant violations. Unknown keys and files are ignored.
ExternalTrace read_trace(const std::filesystem::path& dir);

// `dir` itself when it holds manifest.json, else its immediate subdirectories that do, sorted by name.
std::vector<std::filesystem::path> list_trace_dirs(const std::filesystem::path& dir);

std::string manifest_json(const TraceManifest& manifest);
TraceManifest parse_manifest(const std::string& text, const std::string& origin);

// Human-readable summary for inspect-trace.
std::string describe_trace(const ExternalTrace& trace);

}  // namespace layertracer::trace_io
