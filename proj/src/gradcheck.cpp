#include "magpath/gradcheck.hpp"

#include <cmath>

namespace magpath::nn {

namespace {

double eval_loss(std::vector<Tensor>& inputs, const LossBuilder& loss) {
  Tape tape;
  std::vector<Var> vars;
  for (auto& x : inputs) vars.push_back(tape.constant(x));
  return loss(tape, vars).value()[0];
}

}  // namespace

GradCheckReport grad_check(ParamStore& params, std::vector<Tensor> inputs,
                           const LossBuilder& loss, double eps) {
  constexpr std::size_t kMaxCoordinates = 10000;
  std::size_t total = 0;
  for (const auto& p : params)
    if (p.trainable) total += p.value.size();
  for (const auto& x : inputs) total += x.size();
  if (total > kMaxCoordinates)
    throw ConfigError("grad_check: " + std::to_string(total) + " coordinates exceeds limit");

  params.zero_grad();
  std::vector<Tensor> input_grads;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& x : inputs) vars.push_back(tape.leaf(x));
    Var out = loss(tape, vars);
    tape.backward(out);
    for (auto& v : vars) input_grads.push_back(tape.grad(v));
  }

  GradCheckReport report;
  auto compare = [&](double analytic, double& slot, const std::string& name, std::size_t i) {
    const double saved = slot;
    slot = saved + eps;
    const double up = eval_loss(inputs, loss);
    slot = saved - eps;
    const double down = eval_loss(inputs, loss);
    slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
    ++report.coordinates;
    if (err > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = err;
      report.worst = name + "[" + std::to_string(i) + "]";
    }
  };

  for (auto& p : params) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) compare(p.grad[i], p.value[i], p.name, i);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i)
      compare(input_grads[k][i], inputs[k][i], "input" + std::to_string(k), i);
  params.zero_grad();
  return report;
}

}  // namespace magpath::nn
