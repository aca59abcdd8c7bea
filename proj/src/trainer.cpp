#include "llama/trainer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace llama {

void TrainConfig::validate() const {
  if (!(max_lr > 0)) throw ConfigError("max_lr must be positive");
  if (!(min_lr_ratio > 0) || min_lr_ratio > 1) throw ConfigError("min_lr_ratio must lie in (0, 1]");
  if (total_steps <= 0) throw ConfigError("total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " must lie in [0, total_steps=" +
                      std::to_string(total_steps) + "]");
  }
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (batch_tokens <= 0) throw ConfigError("batch_tokens must be positive");
  if (seq_len < 0) throw ConfigError("seq_len must be non-negative");
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw DomainError("lr_schedule: negative step");
  if (step > cfg.total_steps) step = cfg.total_steps;
  const double min_lr = cfg.min_lr_ratio * cfg.max_lr;
  if (step < cfg.warmup_steps) {
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (step == cfg.warmup_steps) return cfg.max_lr;
  if (step == cfg.total_steps) return min_lr;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return min_lr + 0.5 * (cfg.max_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(std::span<const Tensor> params) {
  double total = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

double clip_global_norm(std::span<Tensor> params, double clip) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm is not finite");
  if (norm <= clip) return 1.0;
  const double factor = clip / norm;
  for (auto& p : params) {
    for (auto& g : p.mutable_grad()) g = static_cast<float>(static_cast<double>(g) * factor);
  }
  return factor;
}

void adamw_step(std::span<const NamedTensor<float>> params, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state built for other parameters");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i].tensor;
    auto theta = param.mutable_data();
    const auto grad = param.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != theta.size()) throw ContractError("adamw_step: moment shape mismatch for " + params[i].name);
    const double decay = params[i].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const float g = grad.empty() ? 0.0f : grad[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      const double old = theta[j];
      theta[j] = static_cast<float>(old - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps) - decay * old);
    }
  }
}

Trainer::Trainer(ModelConfig model, ModelWeights<float> weights, TrainConfig cfg, ForwardOptions options)
    : model_(std::move(model)),
      weights_(std::move(weights)),
      cfg_(cfg),
      options_(options),
      rng_(cfg.seed),
      window_(cfg.seq_len > 0 ? cfg.seq_len : model_.max_seq_len) {
  model_.validate();
  cfg_.validate();
  if (window_ > model_.max_seq_len) {
    throw ConfigError("training window " + std::to_string(window_) + " exceeds max_seq_len " +
                      std::to_string(model_.max_seq_len));
  }
  weights_.set_requires_grad(true);
}

std::int64_t Trainer::windows_per_step() const { return std::max<std::int64_t>(1, cfg_.batch_tokens / window_); }

LossRecord Trainer::step(std::span<const TokenId> tokens) {
  const auto n = static_cast<std::int64_t>(tokens.size());
  if (n < window_ + 1) {
    throw InputError("training corpus has " + std::to_string(n) + " tokens; a window needs " +
                     std::to_string(window_ + 1));
  }
  const std::int64_t windows = windows_per_step();
  Tape tape;
  Tape::Scope scope(tape);
  Tensor total;
  for (std::int64_t w = 0; w < windows; ++w) {
    const auto start = static_cast<std::size_t>(rng_.below(static_cast<std::uint64_t>(n - window_)));
    auto inputs = tokens.subspan(start, static_cast<std::size_t>(window_));
    auto targets = tokens.subspan(start + 1, static_cast<std::size_t>(window_));
    auto loss = cross_entropy(forward(model_, weights_, inputs, nullptr, options_), targets);
    total = w == 0 ? loss : add(total, loss);
  }
  Tensor loss = scale(total, 1.0f / static_cast<float>(windows));
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream report;
    report << "loss diverged at step " << step_ << " (loss=" << value << ", tokens_seen=" << tokens_seen_ << ")";
    throw DivergenceError(report.str());
  }
  backward(loss);

  auto named = weights_.named();
  std::vector<Tensor> params;
  for (const auto& p : named) params.push_back(p.tensor);
  const double norm = global_grad_norm(params);
  clip_global_norm(params, cfg_.clip_norm);
  const double lr = lr_schedule(step_ + 1, cfg_);
  adamw_step(named, state_, lr, cfg_);
  weights_.zero_grad();

  tokens_seen_ += windows * window_;
  LossRecord record{step_, tokens_seen_, value, lr, norm};
  ++step_;
  return record;
}

std::vector<LossRecord> train_loop(const ModelConfig& model, ModelWeights<float>& weights,
                                   std::span<const TokenId> tokens, const TrainConfig& cfg,
                                   const ForwardOptions& options, const StepCallback& on_step) {
  Trainer trainer(model, weights, cfg, options);
  std::vector<LossRecord> history;
  history.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (std::int64_t s = 0; s < cfg.total_steps; ++s) {
    history.push_back(trainer.step(tokens));
    if (on_step) on_step(history.back());
  }
  return history;
}

}  // namespace llama
