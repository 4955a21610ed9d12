#pragma once

#include <span>
#include <vector>

#include "layertracer/corpus.hpp"
#include "layertracer/model.hpp"
#include "layertracer/numerics.hpp"

namespace layertracer::perturbation {

using numerics::ProbabilityDistribution;
using numerics::Tensor;

// Support used when comparing P and Q.
struct JsOptions {
  bool full_vocab = false;  // otherwise top-K(P) ∪ top-K(Q), renormalized
  int top_k = 10;
};

double compare(const ProbabilityDistribution& p, const ProbabilityDistribution& q, const JsOptions& opts);

// Copy of `hidden` with the listed rows zeroed. Out-of-range indices throw InvalidInput.
Tensor mask_context(const Tensor& hidden, std::span<const int> context_indices);

struct PerturbedOutcome {
  int layer = 0;
  ProbabilityDistribution q_dist;
  double js_to_original = 0.0;
};

// Masks I_c in h_l and resumes the forward pass from layer l+1.
PerturbedOutcome perturbed_final(const model::Model& model, const model::HiddenStateTrace& trace, int layer,
                                 std::span<const int> context_indices, const JsOptions& opts);

// JS(l) for l = 1..N from an existing trace: N resumptions, no extra full passes.
std::vector<PerturbedOutcome> js_curve_from_trace(const model::Model& model, const model::HiddenStateTrace& trace,
                                                  std::span<const int> context_indices, const JsOptions& opts);

// One traced forward pass plus N resumptions.
std::vector<double> js_curve(const model::Model& model, const corpus::TokenizedSample& sample,
                             const JsOptions& opts);

}  // namespace layertracer::perturbation
