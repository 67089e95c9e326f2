#pragma once

#include <cstdint>
#include <vector>

#include "magpath/params.hpp"

namespace magpath::nn {

enum class OptimizerKind { Adam, AdamLookahead };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
};

/// Adam with decoupled weight decay, optionally wrapped in LookAhead
/// (every k fast steps: slow += alpha * (fast - slow); fast = slow).
class Optimizer {
 public:
  Optimizer(const ParamStore& params, OptimizerConfig cfg);

  /// One update of every trainable parameter from its accumulated gradient.
  void step(ParamStore& params);

  void set_lr(double lr);
  double lr() const { return cfg_.lr; }
  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> m_, v_, slow_;
};

}  // namespace magpath::nn
