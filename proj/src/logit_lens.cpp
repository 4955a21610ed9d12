#include "layertracer/logit_lens.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "layertracer/error.hpp"

namespace layertracer::lens {

TargetToken select_target(const ProbabilityDistribution& final_dist) {
  const auto& ids = final_dist.support();
  const auto& probs = final_dist.probs();
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best] || (probs[i] == probs[best] && ids[i] < ids[best])) {
      best = i;
    }
  }
  return {ids[best], probs[best]};
}

LayerDistribution project_layer(const model::Model& model, const model::HiddenStateTrace& trace, int layer,
                                int target_id, LensNorm norm) {
  require(layer >= 1 && layer <= model.n_layers() && static_cast<std::size_t>(layer) <= trace.states.size(),
          ErrorCode::InvalidLayer,
          "layer " + std::to_string(layer) + " outside 1.." + std::to_string(model.n_layers()));
  const auto& h = trace.states[static_cast<std::size_t>(layer - 1)];
  LayerDistribution out;
  out.layer = layer;
  out.dist = model.project(h.row(h.rows() - 1), norm);
  out.target_prob = out.dist.prob_of(target_id);
  return out;
}

std::vector<int> top_k_ids(DistributionView d, int k) {
  std::vector<std::size_t> order(d.ids.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t keep = std::min(order.size(), static_cast<std::size_t>(std::max(k, 0)));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (d.probs[a] != d.probs[b]) {
                        return d.probs[a] > d.probs[b];
                      }
                      return d.ids[a] < d.ids[b];
                    });
  std::vector<int> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.push_back(d.ids[order[i]]);
  }
  return out;
}

namespace {

double mass_at(DistributionView d, int id) {
  // Dense views index directly.
  if (static_cast<std::size_t>(id) < d.ids.size() && d.ids[static_cast<std::size_t>(id)] == id) {
    return d.probs[static_cast<std::size_t>(id)];
  }
  auto it = std::lower_bound(d.ids.begin(), d.ids.end(), id);
  if (it != d.ids.end() && *it == id) {
    return d.probs[static_cast<std::size_t>(it - d.ids.begin())];
  }
  for (std::size_t i = 0; i < d.ids.size(); ++i) {
    if (d.ids[i] == id) {
      return d.probs[i];
    }
  }
  return 0.0;
}

ProbabilityDistribution restrict_and_renormalize(DistributionView d, const std::vector<int>& support) {
  std::vector<double> probs(support.size());
  double total = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    probs[i] = mass_at(d, support[i]);
    total += probs[i];
  }
  require(total > 0.0, ErrorCode::InvalidInput, "truncated support carries no probability mass");
  for (auto& p : probs) {
    p /= total;
  }
  return ProbabilityDistribution(support, std::move(probs));
}

}  // namespace

std::pair<ProbabilityDistribution, ProbabilityDistribution> truncate_top_k(DistributionView p, DistributionView q,
                                                                           int k) {
  require(k >= 1, ErrorCode::InvalidInput, "top-K requires K >= 1");
  std::vector<int> support = top_k_ids(p, k);
  const auto from_q = top_k_ids(q, k);
  support.insert(support.end(), from_q.begin(), from_q.end());
  std::sort(support.begin(), support.end());
  support.erase(std::unique(support.begin(), support.end()), support.end());
  return {restrict_and_renormalize(p, support), restrict_and_renormalize(q, support)};
}

std::pair<ProbabilityDistribution, ProbabilityDistribution> truncate_top_k(const ProbabilityDistribution& p,
                                                                           const ProbabilityDistribution& q, int k) {
  return truncate_top_k(view_of(p), view_of(q), k);
}

}  // namespace layertracer::lens
