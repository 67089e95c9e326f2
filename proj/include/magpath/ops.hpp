#pragma once

// Tape-recording versions of the layers in layers.hpp, each with an
// analytic backward pass.

#include <random>

#include "magpath/tape.hpp"

namespace magpath::nn {

Var dense(Var x, Var w, Var b);
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double c);
/// a * c + shift, elementwise.
Var affine(Var a, double c, double shift);
Var reshape(Var a, Shape shape);
Var relu(Var a);
Var softmax(Var x);
Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5);
/// y[i,j] = x[i,j] * scale[j] + shift[j] with fixed (non-differentiated) scale/shift.
Var column_affine(Var x, const Tensor& scale, const Tensor& shift);

struct MhsaVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};
Var mhsa(Var tokens, const MhsaVars& w, std::size_t heads);

Var dilated_conv1d(Var tokens, Var kernel, Var bias, std::size_t dilation);
Var conv2d(Var image, Var kernel, Var bias, std::size_t stride, std::size_t pad);
Var avg_pool_grid(Var map, std::size_t h, std::size_t w);
Var global_avg_pool(Var map);

/// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, std::mt19937_64& rng);

/// Scalar reductions.
Var sum(Var a);
Var dot(Var a, const Tensor& weights);
Var mean_abs_diff(Var a, Var b);
Var add_scalars(Var a, Var b);

/// -log(max(probs[label], 1e-12)) for a probability row.
inline constexpr double kProbFloor = 1e-12;
Var cross_entropy(Var probs, std::size_t label);

}  // namespace magpath::nn
