#include "layertracer/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "layertracer/autodiff.hpp"
#include "layertracer/error.hpp"

namespace layertracer::trainer {

using nlohmann::json;
using autodiff::Tape;
using autodiff::Var;
using numerics::Tensor;

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidConfig, what); };
  check(std::isfinite(learning_rate) && learning_rate > 0.0, "learning_rate must be > 0");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  check(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay must be >= 0");
  check(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, "warmup_ratio must lie in [0, 1]");
  check(adam_eps > 0.0, "adam_eps must be > 0");
  check(std::isfinite(grad_clip) && grad_clip >= 0.0, "grad_clip must be >= 0");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(seq_len >= 1, "seq_len must be >= 1");
  check(steps >= 0, "steps must be >= 0");
}

int warmup_steps(const TrainConfig& config) {
  return static_cast<int>(std::ceil(config.warmup_ratio * static_cast<double>(config.steps)));
}

double learning_rate_at(const TrainConfig& config, int step) {
  const int warmup = warmup_steps(config);
  if (step < warmup) {
    return config.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return config.learning_rate;
}

std::string_view strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FullParameter:
      return "full";
    case StrategyKind::TrainShallowFreezeDeep:
      return "train-shallow";
    case StrategyKind::FreezeShallowTrainDeep:
      return "train-deep";
  }
  return "full";
}

StrategyKind parse_strategy(std::string_view name) {
  for (auto k : {StrategyKind::FullParameter, StrategyKind::TrainShallowFreezeDeep,
                 StrategyKind::FreezeShallowTrainDeep}) {
    if (strategy_name(k) == name) {
      return k;
    }
  }
  fail(ErrorCode::InvalidConfig, "unknown strategy '" + std::string(name) + "'");
}

model::FreezePlan freeze_plan(const Strategy& strategy, int n_layers) {
  if (strategy.kind == StrategyKind::FullParameter) {
    auto plan = model::FreezePlan::all_trainable(n_layers);
    plan.embeddings_trainable = strategy.embeddings_trainable.value_or(true);
    plan.lm_head_trainable = strategy.lm_head_trainable.value_or(true);
    return plan;
  }
  const int b = strategy.split.split_layer(n_layers);
  const bool shallow = strategy.kind == StrategyKind::TrainShallowFreezeDeep;
  model::FreezePlan plan;
  plan.trainable.resize(static_cast<std::size_t>(n_layers));
  for (int l = 1; l <= n_layers; ++l) {
    plan.trainable[static_cast<std::size_t>(l - 1)] = (l <= b) == shallow;
  }
  plan.embeddings_trainable = strategy.embeddings_trainable.value_or(shallow);
  plan.lm_head_trainable = strategy.lm_head_trainable.value_or(shallow);
  return plan;
}

bool RunRecord::frozen_groups_unchanged() const {
  for (std::size_t g = 0; g < group_trainable.size(); ++g) {
    if (!group_trainable[g] && digests_before[g] != digests_after[g]) {
      return false;
    }
  }
  return true;
}

namespace {

std::vector<std::string> group_digests(const model::Model& m) {
  std::vector<std::string> out;
  for (int g = 0; g <= m.n_layers() + 1; ++g) {
    out.push_back(model::parameter_digest(m, g));
  }
  return out;
}

struct AdamState {
  Tensor m, v;
};

}  // namespace

RunRecord train(model::Model& model, std::span<const int> tokens, const TrainConfig& config, std::string label) {
  config.validate();
  require(config.seq_len <= model.config().max_seq_len, ErrorCode::InvalidConfig,
          "seq_len " + std::to_string(config.seq_len) + " exceeds max_seq_len " +
              std::to_string(model.config().max_seq_len));
  const std::size_t window = static_cast<std::size_t>(config.seq_len) + 1;
  const std::size_t needed =
      std::max(static_cast<std::size_t>(config.batch_size) * static_cast<std::size_t>(config.seq_len), window);
  require(tokens.size() >= needed, ErrorCode::InvalidInput,
          "corpus has " + std::to_string(tokens.size()) + " tokens; at least " + std::to_string(needed) +
              " required");

  RunRecord record;
  record.label = std::move(label);
  record.config = config;
  record.block_layout = model::format_layout(model.config().block_layout);
  record.digests_before = group_digests(model);
  for (int g = 0; g <= model.n_layers() + 1; ++g) {
    record.group_trainable.push_back(model.group_trainable(g));
  }
  record.trainable_parameters = model.trainable_parameter_count();

  auto params = model.parameters();
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (model.group_trainable(params[i].group)) {
      active.push_back(i);
    }
  }
  std::vector<AdamState> state(params.size());
  for (std::size_t i : active) {
    state[i].m = Tensor(params[i].tensor->shape());
    state[i].v = Tensor(params[i].tensor->shape());
  }

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> start_dist(0, tokens.size() - window);
  std::vector<Tensor> grads(params.size());

  for (int step = 0; step < config.steps; ++step) {
    for (std::size_t i : active) {
      grads[i] = Tensor(params[i].tensor->shape());
    }
    double batch_loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const std::size_t s = start_dist(rng);
      const auto inputs = tokens.subspan(s, window - 1);
      const auto targets = tokens.subspan(s + 1, window - 1);
      Tape tape(true);
      const auto bound = model.bind(tape);
      const Var loss = model.sequence_loss(bound, inputs, targets);
      tape.backward(loss);
      batch_loss += tape.value(loss)[0];
      for (std::size_t i : active) {
        const Tensor g = tape.gradient(bound.all[i]);
        auto& acc = grads[i].storage();
        for (std::size_t k = 0; k < acc.size(); ++k) {
          acc[k] += g[k];
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(config.batch_size);
    batch_loss *= inv;
    if (!std::isfinite(batch_loss)) {
      fail(ErrorCode::Diverged, "loss became non-finite at step " + std::to_string(step) + " of run '" +
                                    record.label + "' (last finite loss " +
                                    (record.loss_curve.empty() ? std::string("n/a")
                                                               : detail::format_double(record.loss_curve.back())) +
                                    ")");
    }
    record.loss_curve.push_back(batch_loss);

    double norm_sq = 0.0;
    for (std::size_t i : active) {
      for (auto& g : grads[i].storage()) {
        g *= inv;
        norm_sq += g * g;
      }
    }
    double clip = 1.0;
    if (config.grad_clip > 0.0 && std::sqrt(norm_sq) > config.grad_clip) {
      clip = config.grad_clip / std::sqrt(norm_sq);
    }

    const double lr = learning_rate_at(config, step);
    const double t = static_cast<double>(step + 1);
    const double bias1 = 1.0 - std::pow(config.beta1, t);
    const double bias2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i : active) {
      auto& p = params[i].tensor->storage();
      auto& m = state[i].m.storage();
      auto& v = state[i].v.storage();
      const auto& g = grads[i].storage();
      const double decay = params[i].decays ? 1.0 - lr * config.weight_decay : 1.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k] * clip;
        p[k] *= decay;
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
        const double m_hat = m[k] / bias1;
        const double v_hat = v[k] / bias2;
        p[k] -= lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
      }
    }
  }
  record.digests_after = group_digests(model);
  return record;
}

double evaluate_lm(const model::Model& model, std::span<const int> tokens) {
  require(tokens.size() >= 2, ErrorCode::InvalidInput, "evaluation corpus needs at least two tokens");
  const std::size_t w = static_cast<std::size_t>(model.config().max_seq_len);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s + 1 < tokens.size(); s += w) {
    const std::size_t n = std::min(w, tokens.size() - 1 - s);
    Tape tape(false);
    const auto bound = model.bind(tape);
    const Var loss = model.sequence_loss(bound, tokens.subspan(s, n), tokens.subspan(s + 1, n));
    total += tape.value(loss)[0] * static_cast<double>(n);
    count += n;
  }
  return total / static_cast<double>(count);
}

RunRecord pretrain(model::Model& model, std::span<const int> tokens, const TrainConfig& config) {
  model.apply_freeze_plan(model::FreezePlan::all_trainable(model.n_layers()));
  return train(model, tokens, config, "pretrain");
}

RunRecord continued_pretrain(model::Model& model, std::span<const int> tokens, const Strategy& strategy,
                             const TrainConfig& config, const std::vector<EvalSet>& evals) {
  model.apply_freeze_plan(freeze_plan(strategy, model.n_layers()));
  auto record = train(model, tokens, config, std::string(strategy_name(strategy.kind)));
  for (const auto& e : evals) {
    record.eval_losses.emplace_back(e.name, evaluate_lm(model, e.tokens));
  }
  return record;
}

std::vector<RunRecord> run_strategy_comparison(const model::Model& base, std::span<const int> tokens,
                                               const std::vector<Strategy>& strategies, const TrainConfig& config,
                                               const std::vector<EvalSet>& evals) {
  std::vector<RunRecord> out;
  for (const auto& s : strategies) {
    model::Model m = base;
    out.push_back(continued_pretrain(m, tokens, s, config, evals));
  }
  return out;
}

std::string_view placement_name(Placement p) {
  return p == Placement::LinearShallowDonorDeep ? "linear-shallow-donor-deep" : "donor-shallow-linear-deep";
}

model::Model build_hybrid(const model::Model& donor, Placement placement, const HybridOptions& options) {
  const int n = donor.n_layers();
  for (auto kind : donor.config().block_layout) {
    require(kind == model::BlockKind::FullAttention, ErrorCode::InvalidConfig,
            "hybrid donor must consist of full-attention blocks only");
  }
  const int b = options.split.split_layer(n);
  const bool donor_deep = placement == Placement::LinearShallowDonorDeep;
  auto config = donor.config();
  config.block_layout.clear();
  for (int l = 1; l <= n; ++l) {
    const bool from_donor = donor_deep ? l > b : l <= b;
    config.block_layout.push_back(from_donor ? model::BlockKind::FullAttention : model::BlockKind::LinearAttention);
  }
  auto hybrid = model::Model::build(config, options.init_seed);
  auto dst = hybrid.parameters();
  const auto src = donor.parameters();
  model::FreezePlan plan = model::FreezePlan::all_trainable(n);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const int g = dst[i].group;
    const bool donor_layer = g >= 1 && g <= n && config.block_layout[static_cast<std::size_t>(g - 1)] ==
                                                     model::BlockKind::FullAttention;
    if (g == 0 || g == n + 1 || donor_layer) {
      require(src[i].name == dst[i].name && src[i].tensor->shape() == dst[i].tensor->shape(),
              ErrorCode::InvalidConfig, "donor parameter '" + src[i].name + "' does not match the hybrid");
      *dst[i].tensor = *src[i].tensor;
    }
  }
  for (int l = 1; l <= n; ++l) {
    const bool donor_layer = config.block_layout[static_cast<std::size_t>(l - 1)] == model::BlockKind::FullAttention;
    if (donor_layer && (donor_deep || options.freeze_shallow_donor)) {
      plan.trainable[static_cast<std::size_t>(l - 1)] = false;
    }
  }
  hybrid.apply_freeze_plan(plan);
  return hybrid;
}

std::pair<RunRecord, RunRecord> hybrid_placement_run(const model::Model& donor, std::span<const int> tokens,
                                                     const TrainConfig& config, const HybridOptions& options,
                                                     const std::vector<EvalSet>& evals) {
  auto run = [&](Placement p) {
    auto m = build_hybrid(donor, p, options);
    auto record = train(m, tokens, config, std::string(placement_name(p)));
    for (const auto& e : evals) {
      record.eval_losses.emplace_back(e.name, evaluate_lm(m, e.tokens));
    }
    return record;
  };
  return {run(Placement::LinearShallowDonorDeep), run(Placement::DonorShallowLinearDeep)};
}

namespace {

json config_json(const RunRecord& r) {
  const auto& c = r.config;
  json groups = json::array();
  for (bool t : r.group_trainable) {
    groups.push_back(t);
  }
  return json{{"label", r.label},
              {"block_layout", r.block_layout},
              {"learning_rate", c.learning_rate},
              {"betas", {c.beta1, c.beta2}},
              {"weight_decay", c.weight_decay},
              {"warmup_ratio", c.warmup_ratio},
              {"warmup_steps", warmup_steps(c)},
              {"adam_eps", c.adam_eps},
              {"grad_clip", c.grad_clip},
              {"batch_size", c.batch_size},
              {"seq_len", c.seq_len},
              {"steps", c.steps},
              {"seed", c.seed},
              {"group_trainable", groups},
              {"trainable_parameters", r.trainable_parameters}};
}

}  // namespace

void write_run_artifacts(const RunRecord& record, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
  detail::write_text_file(dir / "config.json", config_json(record).dump(2) + "\n");

  std::string csv = "step,loss\n";
  for (std::size_t s = 0; s < record.loss_curve.size(); ++s) {
    csv += std::to_string(s) + "," + detail::format_double(record.loss_curve[s]) + "\n";
  }
  detail::write_text_file(dir / "loss.csv", csv);

  json eval = json::object();
  for (const auto& [name, loss] : record.eval_losses) {
    eval[name] = loss;
  }
  if (!record.loss_curve.empty()) {
    eval["final_train_loss"] = record.loss_curve.back();
  }
  detail::write_text_file(dir / "eval.json", eval.dump(2) + "\n");

  json digests = json::array();
  for (std::size_t g = 0; g < record.digests_before.size(); ++g) {
    digests.push_back({{"group", g},
                       {"trainable", static_cast<bool>(record.group_trainable[g])},
                       {"before", record.digests_before[g]},
                       {"after", record.digests_after[g]}});
  }
  json out{{"groups", digests}, {"frozen_groups_unchanged", record.frozen_groups_unchanged()}};
  detail::write_text_file(dir / "digests.json", out.dump(2) + "\n");
}

std::string comparison_table(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "| run | layout | trainable params | final train loss";
  if (!records.empty()) {
    for (const auto& [name, loss] : records.front().eval_losses) {
      os << " | eval " << name;
    }
  }
  os << " | frozen unchanged |\n|---|---|---|---";
  if (!records.empty()) {
    for (std::size_t i = 0; i < records.front().eval_losses.size(); ++i) {
      os << "|---";
    }
  }
  os << "|---|\n";
  for (const auto& r : records) {
    os << "| " << r.label << " | " << r.block_layout << " | " << r.trainable_parameters << " | "
       << (r.loss_curve.empty() ? std::string("-") : detail::format_double(r.loss_curve.back()));
    for (const auto& [name, loss] : r.eval_losses) {
      os << " | " << detail::format_double(loss);
    }
    os << " | " << (r.frozen_groups_unchanged() ? "yes" : "no") << " |\n";
  }
  return os.str();
}

}  // namespace layertracer::trainer
