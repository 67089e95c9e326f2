#pragma once

#include <random>

#include "magpath/tensor.hpp"

namespace magpath::test {

inline Tensor randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.raw()) v = n(rng);
  return t;
}

inline Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.raw()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace magpath::test
