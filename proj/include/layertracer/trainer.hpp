#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "layertracer/diagnostics.hpp"
#include "layertracer/model.hpp"

namespace layertracer::trainer {

// AdamW with linear warmup then a constant rate. Steps and batch are desk-scale.
struct TrainConfig {
  double learning_rate = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double warmup_ratio = 0.1;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clipping; 0 disables
  int batch_size = 8;
  int seq_len = 32;
  int steps = 100;
  std::uint64_t seed = 0;

  void validate() const;  // InvalidConfig
};

int warmup_steps(const TrainConfig& config);
// Rate applied at 0-based step s.
double learning_rate_at(const TrainConfig& config, int step);

enum class StrategyKind { FullParameter, TrainShallowFreezeDeep, FreezeShallowTrainDeep };

std::string_view strategy_name(StrategyKind kind);
StrategyKind parse_strategy(std::string_view name);

struct Strategy {
  StrategyKind kind = StrategyKind::FullParameter;
  diagnostics::Fraction split{1, 2};
  // Unset: embeddings and the LM head follow the shallow group.
  std::optional<bool> embeddings_trainable;
  std::optional<bool> lm_head_trainable;
};

// Shallow block = layers 1..round-half-up(r·N).
model::FreezePlan freeze_plan(const Strategy& strategy, int n_layers);

struct EvalSet {
  std::string name;
  std::vector<int> tokens;
};

struct RunRecord {
  std::string label;
  TrainConfig config;
  std::vector<double> loss_curve;                           // mean batch loss per step
  std::vector<std::pair<std::string, double>> eval_losses;  // in EvalSet order
  std::vector<std::string> digests_before;                  // per parameter group 0..N+1
  std::vector<std::string> digests_after;
  std::vector<bool> group_trainable;
  std::size_t trainable_parameters = 0;
  std::string block_layout;

  // True when every frozen group kept its digest.
  bool frozen_groups_unchanged() const;
};

// Trains the parameters the model's current freeze plan leaves trainable.
// InvalidInput when the stream is shorter than batch·seq_len (or seq_len + 1); Diverged on a non-finite loss.
RunRecord train(model::Model& model, std::span<const int> tokens, const TrainConfig& config, std::string label);

// Teacher-forced mean next-token NLL in nats over consecutive windows of max_seq_len.
double evaluate_lm(const model::Model& model, std::span<const int> tokens);

RunRecord pretrain(model::Model& model, std::span<const int> tokens, const TrainConfig& config);

RunRecord continued_pretrain(model::Model& model, std::span<const int> tokens, const Strategy& strategy,
                             const TrainConfig& config, const std::vector<EvalSet>& evals);

// Each strategy starts from a copy of `base`.
std::vector<RunRecord> run_strategy_comparison(const model::Model& base, std::span<const int> tokens,
                                               const std::vector<Strategy>& strategies, const TrainConfig& config,
                                               const std::vector<EvalSet>& evals);

enum class Placement {
  LinearShallowDonorDeep,  // fresh linear blocks in 1..b, donor blocks in b+1..N
  DonorShallowLinearDeep,  // donor blocks in 1..b, fresh linear blocks in b+1..N
};

std::string_view placement_name(Placement p);

struct HybridOptions {
  diagnostics::Fraction split{1, 2};
  // Donor blocks placed shallow stay trainable unless this is set.
  bool freeze_shallow_donor = false;
  std::uint64_t init_seed = 0;
};

// Donor must be all full attention; layer i of the donor fills layer i of the hybrid.
// Embeddings, final norm and head are copied from the donor and stay trainable.
model::Model build_hybrid(const model::Model& donor, Placement placement, const HybridOptions& options);

std::pair<RunRecord, RunRecord> hybrid_placement_run(const model::Model& donor, std::span<const int> tokens,
                                                     const TrainConfig& config, const HybridOptions& options,
                                                     const std::vector<EvalSet>& evals);

// config.json, loss.csv, eval.json, digests.json under `dir`.
void write_run_artifacts(const RunRecord& record, const std::filesystem::path& dir);

// Markdown table: one row per run, final train loss then each eval loss.
std::string comparison_table(const std::vector<RunRecord>& records);

}  // namespace layertracer::trainer
