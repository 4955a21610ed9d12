#include "layertracer/perturbation.hpp"

#include <string>

#include "layertracer/diagnostics.hpp"
#include "layertracer/error.hpp"
#include "layertracer/logit_lens.hpp"

namespace layertracer::perturbation {

double compare(const ProbabilityDistribution& p, const ProbabilityDistribution& q, const JsOptions& opts) {
  if (opts.full_vocab) {
    return diagnostics::js_divergence(p, q);
  }
  const auto [pk, qk] = lens::truncate_top_k(p, q, opts.top_k);
  return diagnostics::js_divergence(pk, qk);
}

Tensor mask_context(const Tensor& hidden, std::span<const int> context_indices) {
  Tensor out = hidden;
  for (int idx : context_indices) {
    require(idx >= 0 && static_cast<std::size_t>(idx) < hidden.rows(), ErrorCode::InvalidInput,
            "context index " + std::to_string(idx) + " outside the sequence");
    auto row = out.row(static_cast<std::size_t>(idx));
    std::fill(row.begin(), row.end(), 0.0);
  }
  return out;
}

PerturbedOutcome perturbed_final(const model::Model& model, const model::HiddenStateTrace& trace, int layer,
                                 std::span<const int> context_indices, const JsOptions& opts) {
  require(layer >= 1 && layer <= model.n_layers(), ErrorCode::InvalidLayer,
          "layer " + std::to_string(layer) + " outside 1.." + std::to_string(model.n_layers()));
  const auto masked = mask_context(trace.states[static_cast<std::size_t>(layer - 1)], context_indices);
  PerturbedOutcome out;
  out.layer = layer;
  out.q_dist = model.forward_from_layer(masked, layer);
  out.js_to_original = compare(trace.final_distribution, out.q_dist, opts);
  return out;
}

std::vector<PerturbedOutcome> js_curve_from_trace(const model::Model& model, const model::HiddenStateTrace& trace,
                                                  std::span<const int> context_indices, const JsOptions& opts) {
  std::vector<PerturbedOutcome> out;
  out.reserve(static_cast<std::size_t>(model.n_layers()));
  for (int l = 1; l <= model.n_layers(); ++l) {
    out.push_back(perturbed_final(model, trace, l, context_indices, opts));
  }
  return out;
}

std::vector<double> js_curve(const model::Model& model, const corpus::TokenizedSample& sample,
                             const JsOptions& opts) {
  const auto trace = model.forward_with_trace(sample.token_ids);
  std::vector<double> js;
  for (const auto& o : js_curve_from_trace(model, trace, sample.context_indices, opts)) {
    js.push_back(o.js_to_original);
  }
  return js;
}

}  // namespace layertracer::perturbation
