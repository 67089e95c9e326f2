#include "magpath/optim.hpp"

#include <cmath>

namespace magpath::nn {

static void validate(const OptimizerConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("optimizer: learning rate must be > 0");
  if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
    throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (cfg.weight_decay < 0.0) throw ConfigError("optimizer: weight decay must be >= 0");
  if (cfg.kind == OptimizerKind::AdamLookahead &&
      (cfg.lookahead_k == 0 || cfg.lookahead_alpha <= 0.0 || cfg.lookahead_alpha > 1.0))
    throw ConfigError("optimizer: lookahead needs k >= 1 and alpha in (0, 1]");
}

Optimizer::Optimizer(const ParamStore& params, OptimizerConfig cfg) : cfg_(cfg) {
  validate(cfg_);
  for (const auto& p : params) {
    m_.push_back(Tensor::zeros_like(p.value));
    v_.push_back(Tensor::zeros_like(p.value));
    if (cfg_.kind == OptimizerKind::AdamLookahead) slow_.push_back(p.value);
  }
}

void Optimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer: learning rate must be > 0");
  cfg_.lr = lr;
}

void Optimizer::step(ParamStore& params) {
  if (params.size() != m_.size())
    throw ContractError("optimizer: parameter store changed since construction");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  std::size_t idx = 0;
  for (auto& p : params) {
    Tensor& m = m_[idx];
    Tensor& v = v_[idx];
    ++idx;
    if (!p.trainable) continue;
    expect_shape(m, p.value.shape(), p.name.c_str());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.value[i]);
    }
  }

  if (cfg_.kind == OptimizerKind::AdamLookahead && steps_ % cfg_.lookahead_k == 0) {
    idx = 0;
    for (auto& p : params) {
      Tensor& slow = slow_[idx++];
      if (!p.trainable) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        slow[i] += cfg_.lookahead_alpha * (p.value[i] - slow[i]);
        p.value[i] = slow[i];
      }
    }
  }
}

}  // namespace magpath::nn
