#include "layertracer/model.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "layertracer/error.hpp"

namespace layertracer::model {

namespace ad = autodiff;

std::vector<BlockKind> parse_layout(std::string_view layout) {
  std::vector<BlockKind> out;
  for (char c : layout) {
    if (c == 'F' || c == 'f') {
      out.push_back(BlockKind::FullAttention);
    } else if (c == 'L' || c == 'l') {
      out.push_back(BlockKind::LinearAttention);
    } else {
      fail(ErrorCode::InvalidConfig, std::string("block layout character '") + c +
                                         "' is not F (full attention) or L (linear attention)");
    }
  }
  return out;
}

std::string format_layout(const std::vector<BlockKind>& layout) {
  std::string out;
  for (auto kind : layout) {
    out.push_back(kind == BlockKind::FullAttention ? 'F' : 'L');
  }
  return out;
}

void ModelConfig::validate() const {
  require(n_layers > 0, ErrorCode::InvalidConfig, "n_layers must be positive");
  require(d_model > 0, ErrorCode::InvalidConfig, "d_model must be positive");
  require(n_heads > 0, ErrorCode::InvalidConfig, "n_heads must be positive");
  require(d_ff >= 0, ErrorCode::InvalidConfig, "d_ff must be nonnegative");
  require(vocab_size > 0, ErrorCode::InvalidConfig, "vocab_size must be positive");
  require(max_seq_len > 0, ErrorCode::InvalidConfig, "max_seq_len must be positive");
  require(d_model % n_heads == 0, ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
  require(block_layout.size() == static_cast<std::size_t>(n_layers), ErrorCode::InvalidConfig,
          "block_layout has " + std::to_string(block_layout.size()) + " entries for " +
              std::to_string(n_layers) + " layers");
}

FreezePlan FreezePlan::all_trainable(int n_layers) {
  FreezePlan plan;
  plan.trainable.assign(static_cast<std::size_t>(n_layers), true);
  return plan;
}

FreezePlan FreezePlan::all_frozen(int n_layers) {
  FreezePlan plan;
  plan.trainable.assign(static_cast<std::size_t>(n_layers), false);
  plan.embeddings_trainable = false;
  plan.lm_head_trainable = false;
  return plan;
}

Model Model::build(ModelConfig config, std::uint64_t seed) {
  if (config.block_layout.empty() && config.n_layers > 0) {
    config.block_layout.assign(static_cast<std::size_t>(config.n_layers), BlockKind::FullAttention);
  }
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto ff = static_cast<std::size_t>(config.ff_dim());

  Model m;
  m.config_ = config;
  m.seed_ = seed;
  m.tokens_ = Tensor::matrix(v, d);
  m.positions_ = Tensor::matrix(static_cast<std::size_t>(config.max_seq_len), d);
  for (auto kind : config.block_layout) {
    LayerParams p;
    p.kind = kind;
    p.attn_norm = Tensor::vector(d);
    p.attn_norm.fill(1.0);
    p.wq = Tensor::matrix(d, d);
    p.wk = Tensor::matrix(d, d);
    p.wv = Tensor::matrix(d, d);
    p.wo = Tensor::matrix(d, d);
    p.bo = Tensor::vector(d);
    p.mlp_norm = Tensor::vector(d);
    p.mlp_norm.fill(1.0);
    p.w1 = Tensor::matrix(d, ff);
    p.b1 = Tensor::vector(ff);
    p.w2 = Tensor::matrix(ff, d);
    p.b2 = Tensor::vector(d);
    m.layers_.push_back(std::move(p));
  }
  m.final_norm_ = Tensor::vector(d);
  m.final_norm_.fill(1.0);
  if (!config.tie_lm_head) {
    m.head_ = Tensor::matrix(v, d);
  }
  m.head_bias_ = Tensor::vector(v);
  m.freeze_plan_ = FreezePlan::all_trainable(config.n_layers);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& p : m.parameters()) {
    if (p.decays) {
      for (double& x : p.tensor->data()) {
        x = normal(rng);
      }
    }
  }
  return m;
}

std::vector<ParameterRef> Model::parameters() {
  std::vector<ParameterRef> out;
  const int head_group = config_.n_layers + 1;
  out.push_back({"embed.tokens", 0, &tokens_, true});
  out.push_back({"embed.positions", 0, &positions_, true});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const int g = static_cast<int>(i) + 1;
    const std::string prefix = "layers." + std::to_string(g) + ".";
    auto& p = layers_[i];
    out.push_back({prefix + "attn_norm", g, &p.attn_norm, false});
    out.push_back({prefix + "attn.wq", g, &p.wq, true});
    out.push_back({prefix + "attn.wk", g, &p.wk, true});
    out.push_back({prefix + "attn.wv", g, &p.wv, true});
    out.push_back({prefix + "attn.wo", g, &p.wo, true});
    out.push_back({prefix + "attn.bo", g, &p.bo, false});
    out.push_back({prefix + "mlp_norm", g, &p.mlp_norm, false});
    out.push_back({prefix + "mlp.w1", g, &p.w1, true});
    out.push_back({prefix + "mlp.b1", g, &p.b1, false});
    out.push_back({prefix + "mlp.w2", g, &p.w2, true});
    out.push_back({prefix + "mlp.b2", g, &p.b2, false});
  }
  out.push_back({"final_norm", head_group, &final_norm_, false});
  if (!config_.tie_lm_head) {
    out.push_back({"lm_head.weight", head_group, &head_, true});
  }
  out.push_back({"lm_head.bias", head_group, &head_bias_, false});
  return out;
}

std::vector<ConstParameterRef> Model::parameters() const {
  std::vector<ConstParameterRef> out;
  for (auto& p : const_cast<Model*>(this)->parameters()) {
    out.push_back({p.name, p.group, p.tensor, p.decays});
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    n += p.tensor->size();
  }
  return n;
}

std::size_t Model::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (group_trainable(p.group)) {
      n += p.tensor->size();
    }
  }
  return n;
}

bool Model::group_trainable(int group) const {
  if (group == 0) {
    return freeze_plan_.embeddings_trainable;
  }
  if (group == config_.n_layers + 1) {
    return freeze_plan_.lm_head_trainable;
  }
  return freeze_plan_.trainable.at(static_cast<std::size_t>(group - 1));
}

void Model::apply_freeze_plan(const FreezePlan& plan) {
  require(plan.trainable.size() == static_cast<std::size_t>(config_.n_layers), ErrorCode::InvalidInput,
          "freeze plan has " + std::to_string(plan.trainable.size()) + " entries for " +
              std::to_string(config_.n_layers) + " layers");
  freeze_plan_ = plan;
}

BoundModel Model::bind(Tape& tape) const {
  BoundModel b;
  const bool embeddings = group_trainable(0);
  b.tokens = tape.parameter(tokens_, embeddings);
  b.positions = tape.parameter(positions_, embeddings);
  b.all = {b.tokens, b.positions};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& p = layers_[i];
    const bool t = group_trainable(static_cast<int>(i) + 1);
    BoundLayer l{p.kind,
                 tape.parameter(p.attn_norm, t),
                 tape.parameter(p.wq, t),
                 tape.parameter(p.wk, t),
                 tape.parameter(p.wv, t),
                 tape.parameter(p.wo, t),
                 tape.parameter(p.bo, t),
                 tape.parameter(p.mlp_norm, t),
                 tape.parameter(p.w1, t),
                 tape.parameter(p.b1, t),
                 tape.parameter(p.w2, t),
                 tape.parameter(p.b2, t)};
    b.all.insert(b.all.end(), {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.bo, l.mlp_norm, l.w1, l.b1,
                               l.w2, l.b2});
    b.layers.push_back(l);
  }
  const bool head = group_trainable(config_.n_layers + 1);
  b.final_norm = tape.parameter(final_norm_, head);
  b.all.push_back(b.final_norm);
  if (config_.tie_lm_head) {
    b.head = b.tokens;
  } else {
    b.head = tape.parameter(head_, head);
    b.all.push_back(b.head);
  }
  b.head_bias = tape.parameter(head_bias_, head);
  b.all.push_back(b.head_bias);
  return b;
}

void Model::check_tokens(std::span<const int> token_ids) const {
  require(!token_ids.empty(), ErrorCode::InvalidInput, "empty token sequence");
  require(token_ids.size() <= static_cast<std::size_t>(config_.max_seq_len), ErrorCode::InvalidInput,
          "sequence length " + std::to_string(token_ids.size()) + " exceeds max_seq_len " +
              std::to_string(config_.max_seq_len));
  for (int id : token_ids) {
    require(id >= 0 && id < config_.vocab_size, ErrorCode::InvalidInput,
            "token id " + std::to_string(id) + " outside vocabulary of size " +
                std::to_string(config_.vocab_size));
  }
}

Var Model::embed(const BoundModel& bound, std::span<const int> token_ids) const {
  check_tokens(token_ids);
  std::vector<int> positions(token_ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  return ad::add(ad::embedding(bound.tokens, token_ids), ad::embedding(bound.positions, positions));
}

Var Model::run_block(const BoundLayer& layer, Var x) const {
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  Var h = ad::rmsnorm(x, layer.attn_norm);
  Var q = ad::matmul(h, layer.wq);
  Var k = ad::matmul(h, layer.wk);
  Var v = ad::matmul(h, layer.wv);
  Var mixed;
  if (layer.kind == BlockKind::FullAttention) {
    const std::size_t heads = static_cast<std::size_t>(config_.n_heads);
    const std::size_t hd = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    for (std::size_t i = 0; i < heads; ++i) {
      Var qh = ad::slice_cols(q, i * hd, (i + 1) * hd);
      Var kh = ad::slice_cols(k, i * hd, (i + 1) * hd);
      Var vh = ad::slice_cols(v, i * hd, (i + 1) * hd);
      Var weights = ad::causal_softmax(ad::matmul_nt(qh, kh), inv_sqrt);
      outs.push_back(ad::matmul(weights, vh));
    }
    mixed = heads == 1 ? outs.front() : ad::concat_cols(outs);
  } else {
    // Single-head kernelized attention with an elu+1 feature map.
    Var fq = ad::elu_plus_one(q);
    Var fk = ad::elu_plus_one(k);
    Var weights = ad::causal_row_normalize(ad::matmul_nt(fq, fk));
    mixed = ad::matmul(weights, v);
  }
  x = ad::add(x, ad::add_row(ad::matmul(mixed, layer.wo), layer.bo));
  Var h2 = ad::rmsnorm(x, layer.mlp_norm);
  Var hidden = ad::silu(ad::add_row(ad::matmul(h2, layer.w1), layer.b1));
  return ad::add(x, ad::add_row(ad::matmul(hidden, layer.w2), layer.b2));
}

Var Model::sequence_loss(const BoundModel& bound, std::span<const int> inputs,
                         std::span<const int> targets) const {
  Var x = embed(bound, inputs);
  for (const auto& layer : bound.layers) {
    x = run_block(layer, x);
  }
  Var normed = ad::rmsnorm(x, bound.final_norm);
  Var logits = ad::add_row(ad::matmul_nt(normed, bound.head), bound.head_bias);
  return ad::cross_entropy(logits, targets);
}

ProbabilityDistribution Model::project(std::span<const double> hidden_row, LensNorm norm) const {
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  require(hidden_row.size() == d, ErrorCode::InvalidInput, "hidden row width does not match d_model");
  std::vector<double> x(hidden_row.begin(), hidden_row.end());
  if (norm == LensNorm::Final) {
    numerics::rmsnorm_row(hidden_row, final_norm_.data(), numerics::kRmsNormEps, x);
  }
  const Tensor& head = config_.tie_lm_head ? tokens_ : head_;
  std::vector<double> logits(static_cast<std::size_t>(config_.vocab_size));
  for (std::size_t t = 0; t < logits.size(); ++t) {
    auto w = head.row(t);
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      acc += w[j] * x[j];
    }
    logits[t] = acc + head_bias_[t];
  }
  return numerics::softmax(logits);
}

HiddenStateTrace Model::forward_with_trace(std::span<const int> token_ids) const {
  trace_calls_.increment();
  Tape tape(false);
  BoundModel bound = bind(tape);
  Var x = embed(bound, token_ids);
  HiddenStateTrace trace;
  trace.token_ids.assign(token_ids.begin(), token_ids.end());
  for (const auto& layer : bound.layers) {
    x = run_block(layer, x);
    trace.states.push_back(x.value());
  }
  const Tensor& last = trace.states.back();
  trace.final_distribution = project(last.row(last.rows() - 1), LensNorm::Final);
  return trace;
}

ProbabilityDistribution Model::forward_from_layer(const Tensor& hidden, int start_layer) const {
  resume_calls_.increment();
  require(start_layer >= 0 && start_layer <= config_.n_layers, ErrorCode::InvalidInput,
          "start layer " + std::to_string(start_layer) + " outside [0, " +
              std::to_string(config_.n_layers) + "]");
  require(hidden.rank() == 2 && hidden.cols() == static_cast<std::size_t>(config_.d_model) &&
              hidden.rows() >= 1 && hidden.rows() <= static_cast<std::size_t>(config_.max_seq_len),
          ErrorCode::InvalidInput, "hidden state must be shaped [seq_len, d_model]");
  if (start_layer == config_.n_layers) {
    return project(hidden.row(hidden.rows() - 1), LensNorm::Final);
  }
  Tape tape(false);
  BoundModel bound = bind(tape);
  Var x = tape.parameter(hidden);
  for (int l = start_layer; l < config_.n_layers; ++l) {
    x = run_block(bound.layers[static_cast<std::size_t>(l)], x);
  }
  const Tensor& out = x.value();
  return project(out.row(out.rows() - 1), LensNorm::Final);
}

}  // namespace layertracer::model
