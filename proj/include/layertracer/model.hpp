#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "layertracer/autodiff.hpp"
#include "layertracer/numerics.hpp"

namespace layertracer::model {

using autodiff::Tape;
using autodiff::Var;
using numerics::ProbabilityDistribution;
using numerics::Tensor;

enum class BlockKind { FullAttention, LinearAttention };

// 'F' / 'L' per layer, e.g. "LLLLFFFF".
std::vector<BlockKind> parse_layout(std::string_view layout);
std::string format_layout(const std::vector<BlockKind>& layout);

struct ModelConfig {
  int n_layers = 4;
  int d_model = 32;
  int n_heads = 4;
  int d_ff = 0;  // 0 selects 4 * d_model
  int vocab_size = 96;
  int max_seq_len = 64;
  std::vector<BlockKind> block_layout;  // empty is filled with FullAttention by build()
  bool tie_lm_head = true;

  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  // Throws InvalidConfig.
  void validate() const;
};

struct HiddenStateTrace {
  std::vector<Tensor> states;  // h_1..h_N, each [seq_len, d_model]
  ProbabilityDistribution final_distribution;
  std::vector<int> token_ids;
};

struct FreezePlan {
  std::vector<bool> trainable;  // one entry per layer, index 0 is layer 1
  bool embeddings_trainable = true;
  bool lm_head_trainable = true;

  static FreezePlan all_trainable(int n_layers);
  static FreezePlan all_frozen(int n_layers);
};

enum class LensNorm { Final, None };

struct LayerParams {
  BlockKind kind = BlockKind::FullAttention;
  Tensor attn_norm, wq, wk, wv, wo, bo;
  Tensor mlp_norm, w1, b1, w2, b2;
};

// Parameter groups: 0 = embeddings, 1..N = transformer layers, N+1 = final norm and LM head.
struct ParameterRef {
  std::string name;
  int group = 0;
  Tensor* tensor = nullptr;
  bool decays = false;  // weight decay applies to matrices only
};

struct ConstParameterRef {
  std::string name;
  int group = 0;
  const Tensor* tensor = nullptr;
  bool decays = false;
};

struct BoundLayer {
  BlockKind kind;
  Var attn_norm, wq, wk, wv, wo, bo, mlp_norm, w1, b1, w2, b2;
};

// Tape leaves for every parameter, in parameters() order.
struct BoundModel {
  Var tokens, positions;
  std::vector<BoundLayer> layers;
  Var final_norm, head, head_bias;
  std::vector<Var> all;
};

class CallCounter {
 public:
  CallCounter() = default;
  CallCounter(const CallCounter& other) : value_(other.value_.load()) {}
  CallCounter& operator=(const CallCounter& other) {
    value_.store(other.value_.load());
    return *this;
  }
  void increment() const { value_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t value() const { return value_.load(); }
  void reset() const { value_.store(0); }

 private:
  mutable std::atomic<std::uint64_t> value_{0};
};

class Model {
 public:
  // Deterministic init: N(0, 0.02) for matrices and embeddings, zeros for biases,
  // ones for norm weights. Throws InvalidConfig.
  static Model build(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  int n_layers() const { return config_.n_layers; }

  // Residual stream after every block plus the final next-token distribution.
  HiddenStateTrace forward_with_trace(std::span<const int> token_ids) const;

  // Runs layers start_layer+1..N on `hidden`, then final norm + LM head at the last position.
  ProbabilityDistribution forward_from_layer(const Tensor& hidden, int start_layer) const;

  // Final norm (if requested) + LM head + softmax for one residual-stream row.
  ProbabilityDistribution project(std::span<const double> hidden_row, LensNorm norm) const;

  void apply_freeze_plan(const FreezePlan& plan);
  const FreezePlan& freeze_plan() const { return freeze_plan_; }
  bool group_trainable(int group) const;

  std::vector<ParameterRef> parameters();
  std::vector<ConstParameterRef> parameters() const;
  std::size_t parameter_count() const;
  std::size_t trainable_parameter_count() const;

  LayerParams& layer(int l) { return layers_.at(static_cast<std::size_t>(l - 1)); }
  const LayerParams& layer(int l) const { return layers_.at(static_cast<std::size_t>(l - 1)); }
  Tensor& token_embedding() { return tokens_; }
  Tensor& position_embedding() { return positions_; }
  Tensor& final_norm() { return final_norm_; }
  Tensor& head_bias() { return head_bias_; }
  const Tensor& head_bias() const { return head_bias_; }

  // Parameters of frozen groups are bound without gradients.
  BoundModel bind(Tape& tape) const;
  Var embed(const BoundModel& bound, std::span<const int> token_ids) const;
  Var run_block(const BoundLayer& layer, Var x) const;
  // Mean next-token cross-entropy over all positions of one sequence.
  Var sequence_loss(const BoundModel& bound, std::span<const int> inputs,
                    std::span<const int> targets) const;

  std::uint64_t trace_calls() const { return trace_calls_.value(); }
  std::uint64_t resume_calls() const { return resume_calls_.value(); }
  void reset_call_counters() const {
    trace_calls_.reset();
    resume_calls_.reset();
  }

 private:
  Model() = default;
  void check_tokens(std::span<const int> token_ids) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  Tensor tokens_, positions_;
  std::vector<LayerParams> layers_;
  Tensor final_norm_, head_, head_bias_;
  FreezePlan freeze_plan_;
  CallCounter trace_calls_;
  CallCounter resume_calls_;
};

// Canonical bytes: per parameter, name, NUL, rank and dims as u64 LE, then f64 LE data.
std::vector<unsigned char> canonical_bytes(const Model& model, int group = -1);
// Hex SHA-256 over canonical_bytes for one group (or all when group < 0).
std::string parameter_digest(const Model& model, int group = -1);

// Checkpoint: manifest.json (config, seed, parameter index) plus one raw
// little-endian f64 blob per named parameter.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace layertracer::model
