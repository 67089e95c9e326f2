#pragma once

#include <functional>
#include <string>
#include <vector>

#include "magpath/ops.hpp"

namespace magpath::nn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<name>[<index>]"
  std::size_t coordinates = 0;
};

/// Builds a scalar loss on the given tape from input leaves and the params.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>& inputs)>;

/// Compares analytic gradients against central differences for every
/// trainable parameter coordinate and every input coordinate.
/// Error per coordinate: |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(ParamStore& params, std::vector<Tensor> inputs,
                           const LossBuilder& loss, double eps = 1e-5);

}  // namespace magpath::nn
