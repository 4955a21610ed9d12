#pragma once

#include <span>
#include <utility>
#include <vector>

#include "layertracer/model.hpp"
#include "layertracer/numerics.hpp"

namespace layertracer::lens {

using model::LensNorm;
using numerics::ProbabilityDistribution;

struct TargetToken {
  int token_id = 0;
  double prob_final = 0.0;
};

struct LayerDistribution {
  int layer = 0;
  ProbabilityDistribution dist;
  double target_prob = 0.0;  // P_t(l)
};

// Argmax of the final distribution; ties go to the lowest token id.
TargetToken select_target(const ProbabilityDistribution& final_dist);

// Projects h_l (1-based) at the last position through the shared LM head.
// `norm` selects whether the final RMSNorm runs first. InvalidLayer when l is outside 1..N.
LayerDistribution project_layer(const model::Model& model, const model::HiddenStateTrace& trace, int layer,
                                int target_id, LensNorm norm = LensNorm::Final);

// Possibly unnormalized mass over explicit ids (dense or stored top-K).
struct DistributionView {
  std::span<const int> ids;
  std::span<const double> probs;
};

inline DistributionView view_of(const ProbabilityDistribution& d) { return {d.support(), d.probs()}; }

// Ids of the k largest entries, ranked by probability then by lowest id.
std::vector<int> top_k_ids(DistributionView d, int k);

// Shared support = top-K(P) ∪ top-K(Q), ascending ids; both renormalized over it.
// K larger than the support is clamped. Ids absent from a view count as zero mass.
std::pair<ProbabilityDistribution, ProbabilityDistribution> truncate_top_k(DistributionView p, DistributionView q,
                                                                           int k);
std::pair<ProbabilityDistribution, ProbabilityDistribution> truncate_top_k(const ProbabilityDistribution& p,
                                                                           const ProbabilityDistribution& q, int k);

}  // namespace layertracer::lens
