#include "layertracer/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "layertracer/error.hpp"

namespace layertracer::diagnostics {

namespace {

void check_epsilon(double epsilon) {
  require(std::isfinite(epsilon) && epsilon > 0.0, ErrorCode::InvalidInput, "epsilon must be finite and > 0");
}

double kl_to_mixture(std::span<const double> x, std::span<const double> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) {
      const double m = 0.5 * (x[i] + y[i]);
      total += x[i] * std::log(x[i] / m);
    }
  }
  return total;
}

}  // namespace

TaskParticleProfile task_particle(std::span<const double> pt, double epsilon, double tau) {
  check_epsilon(epsilon);
  require(pt.size() >= 2, ErrorCode::InvalidInput, "task particle needs at least two layers");
  for (double p : pt) {
    require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorCode::InvalidInput, "P_t values must lie in [0, 1]");
  }
  TaskParticleProfile out;
  out.epsilon = epsilon;
  out.tau = tau;
  for (std::size_t l = 1; l < pt.size(); ++l) {
    const double r = std::abs((pt[l] - pt[l - 1]) / (pt[l] + epsilon));
    out.ratios.push_back(r);
    if (r > tau) {
      out.interval.push_back(static_cast<int>(l) + 1);
    }
  }
  return out;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size() && !p.empty(), ErrorCode::InvalidInput, "JS divergence needs equal, non-empty supports");
  const double js = 0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p);
  return std::clamp(js, 0.0, std::numbers::ln2);
}

double js_divergence(const ProbabilityDistribution& p, const ProbabilityDistribution& q) {
  require(p.support() == q.support(), ErrorCode::InvalidInput, "JS divergence requires identical supports");
  return js_divergence(std::span<const double>(p.probs()), std::span<const double>(q.probs()));
}

SensitivityProfile sensitivity(std::span<const double> js, double epsilon) {
  check_epsilon(epsilon);
  require(js.size() >= 2, ErrorCode::InvalidInput, "sensitivity needs at least two layers");
  for (double v : js) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::InvalidInput, "JS values must be finite and nonnegative");
  }
  SensitivityProfile out;
  out.js.assign(js.begin(), js.end());
  out.epsilon = epsilon;
  for (std::size_t l = 1; l < js.size(); ++l) {
    out.delta_js.push_back(std::abs((js[l] - js[l - 1]) / (js[l - 1] + epsilon)));
  }
  return out;
}

std::string_view normalization_name(Normalization n) {
  return n == Normalization::MinMax ? "minmax" : "zscore-clipped";
}

Normalization parse_normalization(std::string_view name) {
  if (name == "minmax") {
    return Normalization::MinMax;
  }
  if (name == "zscore-clipped") {
    return Normalization::ZScoreClipped;
  }
  fail(ErrorCode::InvalidConfig, "unknown normalization '" + std::string(name) + "'");
}

NormalizedProfile normalize_profile(std::span<const double> values, Normalization method) {
  require(!values.empty(), ErrorCode::InvalidInput, "cannot normalize an empty profile");
  for (double v : values) {
    require(std::isfinite(v), ErrorCode::InvalidInput, "profile contains a non-finite value");
  }
  NormalizedProfile out;
  out.values.assign(values.size(), 0.0);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (lo == hi) {
    out.degenerate = true;
    return out;
  }
  if (method == Normalization::MinMax) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      out.values[i] = (values[i] - lo) / (hi - lo);
    }
    return out;
  }
  double mean = 0.0;
  for (double v : values) {
    mean += v;
  }
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) {
    var += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(var / static_cast<double>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double z = std::clamp((values[i] - mean) / sd, -2.0, 2.0);
    out.values[i] = (z + 2.0) / 4.0;
  }
  return out;
}

std::vector<double> full_depth_profile(std::span<const double> adjacent) {
  std::vector<double> out;
  out.reserve(adjacent.size() + 1);
  out.push_back(0.0);
  out.insert(out.end(), adjacent.begin(), adjacent.end());
  return out;
}

double boundary_score(std::span<const double> tp_hat, std::span<const double> ls_hat, int b) {
  require(tp_hat.size() == ls_hat.size() && tp_hat.size() >= 2, ErrorCode::InvalidInput,
          "boundary score needs equal-length profiles with N >= 2");
  const int n = static_cast<int>(tp_hat.size());
  require(b >= 1 && b <= n - 1, ErrorCode::InvalidInput,
          "split layer " + std::to_string(b) + " outside 1.." + std::to_string(n - 1));
  double ls_shallow = 0.0, tp_shallow = 0.0, ls_deep = 0.0, tp_deep = 0.0;
  for (int i = 0; i < b; ++i) {
    ls_shallow += ls_hat[static_cast<std::size_t>(i)];
    tp_shallow += tp_hat[static_cast<std::size_t>(i)];
  }
  for (int i = b; i < n; ++i) {
    ls_deep += ls_hat[static_cast<std::size_t>(i)];
    tp_deep += tp_hat[static_cast<std::size_t>(i)];
  }
  const double shallow = static_cast<double>(b);
  const double deep = static_cast<double>(n - b);
  // Grouped so that swapping the two profiles negates the score exactly.
  return (ls_shallow / shallow - tp_shallow / shallow) + (tp_deep / deep - ls_deep / deep);
}

namespace {

long long parse_digits(std::string_view s, std::string_view whole) {
  long long v = 0;
  require(!s.empty() && s.find_first_not_of("0123456789") == std::string_view::npos, ErrorCode::InvalidConfig, "malformed fraction '" + std::string(whole) + "'");
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size() && v >= 0, ErrorCode::InvalidConfig,
          "malformed fraction '" + std::string(whole) + "'");
  return v;
}

}  // namespace

Fraction Fraction::parse(std::string_view text) {
  while (!text.empty() && text.front() == ' ') {
    text.remove_prefix(1);
  }
  while (!text.empty() && text.back() == ' ') {
    text.remove_suffix(1);
  }
  Fraction f;
  if (const auto slash = text.find('/'); slash != std::string_view::npos) {
    f.num = parse_digits(text.substr(0, slash), text);
    f.den = parse_digits(text.substr(slash + 1), text);
  } else if (!text.empty() && text.back() == '%') {
    f.num = parse_digits(text.substr(0, text.size() - 1), text);
    f.den = 100;
  } else {
    const auto dot = text.find('.');
    const std::string_view int_part = text.substr(0, dot);
    const std::string_view frac_part = dot == std::string_view::npos ? std::string_view{} : text.substr(dot + 1);
    require(frac_part.size() <= 15, ErrorCode::InvalidConfig, "fraction '" + std::string(text) + "' is too precise");
    f.num = int_part.empty() ? 0 : parse_digits(int_part, text);
    f.den = 1;
    for (char c : frac_part) {
      require(c >= '0' && c <= '9', ErrorCode::InvalidConfig, "malformed fraction '" + std::string(text) + "'");
      f.num = f.num * 10 + (c - '0');
      f.den *= 10;
    }
    require(!(int_part.empty() && frac_part.empty()), ErrorCode::InvalidConfig, "empty fraction");
  }
  require(f.den > 0 && f.num > 0 && f.num < f.den, ErrorCode::InvalidConfig,
          "fraction '" + std::string(text) + "' must lie strictly between 0 and 1");
  return f;
}

std::string Fraction::label() const { return std::to_string(num) + "/" + std::to_string(den); }

int Fraction::split_layer(int n_layers) const {
  require(n_layers >= 2, ErrorCode::InvalidInput, "boundary scan needs N >= 2");
  const long long b = (2 * num * n_layers + den) / (2 * den);
  return static_cast<int>(std::clamp<long long>(b, 1, n_layers - 1));
}

std::vector<Fraction> parse_fractions(std::string_view comma_separated) {
  std::vector<Fraction> out;
  std::size_t start = 0;
  while (start <= comma_separated.size()) {
    const auto comma = comma_separated.find(',', start);
    const auto end = comma == std::string_view::npos ? comma_separated.size() : comma;
    out.push_back(Fraction::parse(comma_separated.substr(start, end - start)));
    if (comma == std::string_view::npos) {
      break;
    }
    start = comma + 1;
  }
  return out;
}

std::vector<Fraction> default_fractions() { return {{1, 3}, {1, 2}, {2, 3}}; }

BoundaryScan scan_boundaries(std::span<const double> tp_hat, std::span<const double> ls_hat,
                             const std::vector<Fraction>& fractions) {
  require(!fractions.empty(), ErrorCode::InvalidConfig, "no split fractions given");
  BoundaryScan scan;
  scan.tp_hat.assign(tp_hat.begin(), tp_hat.end());
  scan.ls_hat.assign(ls_hat.begin(), ls_hat.end());
  const int n = static_cast<int>(tp_hat.size());
  for (const auto& f : fractions) {
    const int b = f.split_layer(n);
    scan.rows.push_back({f, b, boundary_score(tp_hat, ls_hat, b)});
  }
  return scan;
}

BoundaryScan scan_mean_profiles(std::span<const double> mean_ratio, std::span<const double> mean_delta_js,
                                const std::vector<Fraction>& fractions, Normalization method) {
  const auto tp = normalize_profile(full_depth_profile(mean_ratio), method);
  const auto ls = normalize_profile(full_depth_profile(mean_delta_js), method);
  auto scan = scan_boundaries(tp.values, ls.values, fractions);
  scan.tp_degenerate = tp.degenerate;
  scan.ls_degenerate = ls.degenerate;
  scan.normalization = method;
  return scan;
}

Heatmap group_heatmap(const std::vector<std::vector<double>>& profiles, std::span<const int> group_of_sample,
                      int n_groups, int first_layer) {
  require(!profiles.empty(), ErrorCode::InvalidInput, "heatmap needs at least one profile");
  require(profiles.size() == group_of_sample.size(), ErrorCode::InvalidInput, "one group id per profile required");
  require(n_groups >= 1, ErrorCode::InvalidInput, "heatmap needs at least one group");
  const std::size_t cols = profiles.front().size();
  Heatmap h;
  h.first_layer = first_layer;
  h.values.assign(static_cast<std::size_t>(n_groups), std::vector<double>(cols, 0.0));
  std::vector<std::size_t> counts(static_cast<std::size_t>(n_groups), 0);
  for (std::size_t s = 0; s < profiles.size(); ++s) {
    require(profiles[s].size() == cols, ErrorCode::InvalidInput, "profiles differ in length");
    const int g = group_of_sample[s];
    require(g >= 1 && g <= n_groups, ErrorCode::InvalidInput, "group id " + std::to_string(g) + " out of range");
    auto& row = h.values[static_cast<std::size_t>(g - 1)];
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] += profiles[s][c];
    }
    ++counts[static_cast<std::size_t>(g - 1)];
  }
  for (int g = 1; g <= n_groups; ++g) {
    const auto count = counts[static_cast<std::size_t>(g - 1)];
    require(count > 0, ErrorCode::InvalidInput, "group " + std::to_string(g) + " has no samples");
    for (auto& v : h.values[static_cast<std::size_t>(g - 1)]) {
      v /= static_cast<double>(count);
    }
    h.group_ids.push_back(g);
  }
  return h;
}

Heatmap log1p_scaled(const Heatmap& h) {
  Heatmap out = h;
  for (auto& row : out.values) {
    for (auto& v : row) {
      v = std::log1p(v);
    }
  }
  return out;
}

std::vector<double> mean_profile(const std::vector<std::vector<double>>& profiles) {
  require(!profiles.empty(), ErrorCode::InvalidInput, "no profiles to average");
  std::vector<double> out(profiles.front().size(), 0.0);
  for (const auto& p : profiles) {
    require(p.size() == out.size(), ErrorCode::InvalidInput, "profiles differ in length");
    for (std::size_t i = 0; i < p.size(); ++i) {
      out[i] += p[i];
    }
  }
  for (auto& v : out) {
    v /= static_cast<double>(profiles.size());
  }
  return out;
}

}  // namespace layertracer::diagnostics
