#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "layertracer/numerics.hpp"

namespace layertracer::diagnostics {

using numerics::ProbabilityDistribution;

inline constexpr double kDefaultEpsilon = 1e-6;

// Layers are 1-based throughout. Adjacent-layer profiles hold layers 2..N at index 0..N-2.

struct TaskParticleProfile {
  std::vector<double> ratios;  // Ratio(l) for l = 2..N
  double epsilon = kDefaultEpsilon;
  double tau = 0.0;
  // Layers l with Ratio(l) > tau, ascending. Empty when no layer exceeds tau.
  std::vector<int> interval;
};

// pt holds P_t(1..N). Throws InvalidInput on N < 2, probabilities outside [0, 1], or epsilon <= 0.
TaskParticleProfile task_particle(std::span<const double> pt, double epsilon = kDefaultEpsilon, double tau = 0.0);

// Natural-log JS divergence with 0 * log 0 = 0. Supports must match exactly.
double js_divergence(const ProbabilityDistribution& p, const ProbabilityDistribution& q);
double js_divergence(std::span<const double> p, std::span<const double> q);

struct SensitivityProfile {
  std::vector<double> js;        // JS(1..N)
  std::vector<double> delta_js;  // ΔJS(l) for l = 2..N
  double epsilon = kDefaultEpsilon;
};

SensitivityProfile sensitivity(std::span<const double> js, double epsilon = kDefaultEpsilon);

enum class Normalization { MinMax, ZScoreClipped };

std::string_view normalization_name(Normalization n);
Normalization parse_normalization(std::string_view name);

struct NormalizedProfile {
  std::vector<double> values;
  bool degenerate = false;  // all inputs equal; values are all zero
};

// Maps onto [0, 1]. ZScoreClipped clamps z-scores to [-2, 2] before rescaling.
NormalizedProfile normalize_profile(std::span<const double> values, Normalization method = Normalization::MinMax);

// Prepends 0 for layer 1 so an adjacent-layer profile spans all N layers.
std::vector<double> full_depth_profile(std::span<const double> adjacent);

// S(b) over normalized TP and LS profiles of length N; 1 <= b <= N-1.
double boundary_score(std::span<const double> tp_hat, std::span<const double> ls_hat, int b);

// Exact rational in (0, 1), e.g. "1/3", "0.66", "50%".
struct Fraction {
  long long num = 1;
  long long den = 2;

  static Fraction parse(std::string_view text);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string label() const;
  // round-half-up(r * N), clamped to 1..N-1.
  int split_layer(int n_layers) const;
};

std::vector<Fraction> parse_fractions(std::string_view comma_separated);
std::vector<Fraction> default_fractions();

struct ScanRow {
  Fraction fraction;
  int split_layer = 0;
  double score = 0.0;
};

struct BoundaryScan {
  std::vector<ScanRow> rows;
  std::vector<double> tp_hat, ls_hat;
  bool tp_degenerate = false;
  bool ls_degenerate = false;
  Normalization normalization = Normalization::MinMax;
};

// Profiles must already be normalized and of equal length N >= 2.
BoundaryScan scan_boundaries(std::span<const double> tp_hat, std::span<const double> ls_hat,
                             const std::vector<Fraction>& fractions);

// Pads, normalizes, then scans the mean adjacent-layer Ratio and ΔJS profiles (length N-1 each).
BoundaryScan scan_mean_profiles(std::span<const double> mean_ratio, std::span<const double> mean_delta_js,
                                const std::vector<Fraction>& fractions, Normalization method = Normalization::MinMax);

struct Heatmap {
  std::vector<int> group_ids;               // ascending, 1..G
  int first_layer = 2;                      // layer of column 0
  std::vector<std::vector<double>> values;  // [G][columns]
};

// Mean profile per group. Each group in 1..n_groups must be non-empty; profiles share one length.
Heatmap group_heatmap(const std::vector<std::vector<double>>& profiles, std::span<const int> group_of_sample,
                      int n_groups, int first_layer = 2);

Heatmap log1p_scaled(const Heatmap& h);

// Column-wise mean over samples.
std::vector<double> mean_profile(const std::vector<std::vector<double>>& profiles);

}  // namespace layertracer::diagnostics
