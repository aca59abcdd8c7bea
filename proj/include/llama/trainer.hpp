#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "llama/model.hpp"
#include "llama/rng.hpp"

namespace llama {

/// Optimisation recipe. Defaults are the published recipe except for the
/// desk-scale batch size.
struct TrainConfig {
  double max_lr = 3.0e-4;
  double min_lr_ratio = 0.1;  // final learning rate as a fraction of max_lr
  std::int64_t total_steps = 10000;
  std::int64_t warmup_steps = 2000;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::int64_t batch_tokens = 8192;
  std::int64_t seq_len = 0;  // training window; 0 means the model's max_seq_len
  std::uint64_t seed = 0;

  void validate() const;
};

/// Linear warmup from 0 to max_lr, then cosine decay to min_lr_ratio·max_lr at
/// total_steps. Steps past total_steps return the final value.
double lr_schedule(std::int64_t step, const TrainConfig& cfg);

/// Global L2 norm over every gradient in `params` (missing grads count as zero).
double global_grad_norm(std::span<const Tensor> params);

/// Scales all gradients by clip/norm when the global norm exceeds `clip` and
/// returns the factor applied (1 when unchanged). Non-finite gradients throw
/// DivergenceError.
double clip_global_norm(std::span<Tensor> params, double clip);

struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t t = 0;
};

/// One decoupled-weight-decay Adam update:
///   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
///   θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ   (decay only where param.decay)
/// Parameters without a gradient are treated as having a zero gradient.
void adamw_step(std::span<const NamedTensor<float>> params, OptimizerState& state, double lr,
                const TrainConfig& cfg);

struct LossRecord {
  std::int64_t step;
  std::int64_t tokens_seen;
  double loss;
  double lr;
  double grad_norm;
};

/// Owns the mutable pieces of a training run so a step can be replayed.
class Trainer {
 public:
  Trainer(ModelConfig model, ModelWeights<float> weights, TrainConfig cfg, ForwardOptions options = {});

  /// Samples windows from `tokens`, runs forward/backward, clips, applies
  /// the scheduled AdamW update and returns the pre-update loss.
  LossRecord step(std::span<const TokenId> tokens);

  const ModelWeights<float>& weights() const { return weights_; }
  const OptimizerState& optimizer_state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t window() const { return window_; }
  std::int64_t windows_per_step() const;

 private:
  ModelConfig model_;
  ModelWeights<float> weights_;
  TrainConfig cfg_;
  ForwardOptions options_;
  OptimizerState state_;
  Rng rng_;
  std::int64_t window_;
  std::int64_t step_ = 0;
  std::int64_t tokens_seen_ = 0;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Runs cfg.total_steps steps and returns one record per step. Throws
/// DivergenceError if the loss becomes non-finite.
std::vector<LossRecord> train_loop(const ModelConfig& model, ModelWeights<float>& weights,
                                   std::span<const TokenId> tokens, const TrainConfig& cfg,
                                   const ForwardOptions& options = {}, const StepCallback& on_step = {});

}  // namespace llama
