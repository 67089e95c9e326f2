#pragma once

// Stateless forward passes. The tape-recording wrappers in ops.hpp reuse
// these and add the analytic backward passes.

#include <cstddef>

#include "magpath/tensor.hpp"

namespace magpath::nn {

inline constexpr double kLayerNormEps = 1e-5;

/// y = x W + b, row-wise. x[N,din], W[din,dout], b[dout].
Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b);

/// Softmax along the last axis, max-shifted.
Tensor softmax(const Tensor& x);

/// Per-row standardisation followed by gain/shift. x[N,d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                  double eps = kLayerNormEps);

Tensor relu(const Tensor& x);

struct MhsaWeights {
  const Tensor& wq;
  const Tensor& bq;
  const Tensor& wk;
  const Tensor& bk;
  const Tensor& wv;
  const Tensor& bv;
  const Tensor& wo;
  const Tensor& bo;
};

/// Intermediate values kept for the backward pass.
struct MhsaCache {
  Tensor q, k, v;   // [N,d]
  Tensor attn;      // [heads,N,N]
  Tensor context;   // [N,d], heads concatenated
  Tensor out;       // [N,d]
};

/// Multi-head scaled dot-product self-attention over tokens[N,d].
/// Throws ConfigError when d is not divisible by heads.
Tensor mhsa_forward(const Tensor& tokens, const MhsaWeights& w, std::size_t heads);
MhsaCache mhsa_forward_cached(const Tensor& tokens, const MhsaWeights& w, std::size_t heads);

/// Zero-padded dilated convolution along the token axis.
/// tokens[N,d], kernel[width,d,d] (tap, in, out), bias[d]. Width must be odd.
Tensor dilated_conv1d_forward(const Tensor& tokens, const Tensor& kernel, const Tensor& bias,
                              std::size_t dilation);

/// image[C,H,W], kernel[O,C,k,k], bias[O] -> [O,Ho,Wo], zero padding.
Tensor conv2d_forward(const Tensor& image, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t pad);

/// Non-overlapping mean pooling of map[C,H,W] down to [C,h,w].
/// Throws ConfigError unless h divides H and w divides W.
Tensor avg_pool_grid(const Tensor& map, std::size_t h, std::size_t w);

/// Spatial mean of map[C,H,W] -> [C].
Tensor global_avg_pool(const Tensor& map);

}  // namespace magpath::nn
