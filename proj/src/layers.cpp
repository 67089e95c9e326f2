#include "magpath/layers.hpp"

#include <algorithm>
#include <cmath>

#include "magpath/kernels.hpp"

namespace magpath::nn {

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 2, "dense input");
  expect_rank(w, 2, "dense weight");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  if (w.dim(0) != din)
    throw ContractError("dense weight: expected " + std::to_string(din) + " input rows, got " +
                        shape_str(w.shape()));
  expect_shape(b, {dout}, "dense bias");
  Tensor y({n, dout});
  kernels::par::matmul(x.values(), w.values(), y.values(), n, din, dout);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) y.at(i, j) += b[j];
  return y;
}

Tensor softmax(const Tensor& x) {
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.size() / k;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * k;
    double* out = y.data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[j] /= z;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  expect_rank(x, 2, "layer_norm input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  expect_shape(gain, {d}, "layer_norm gain");
  expect_shape(shift, {d}, "layer_norm shift");
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) y.at(i, j) = (x.at(i, j) - mean) * inv * gain[j] + shift[j];
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

MhsaCache mhsa_forward_cached(const Tensor& tokens, const MhsaWeights& w, std::size_t heads) {
  expect_rank(tokens, 2, "mhsa tokens");
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("mhsa: model width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  MhsaCache c;
  c.q = dense_forward(tokens, w.wq, w.bq);
  c.k = dense_forward(tokens, w.wk, w.bk);
  c.v = dense_forward(tokens, w.wv, w.bv);
  if (c.q.dim(1) != d || c.k.dim(1) != d || c.v.dim(1) != d)
    throw ContractError("mhsa: projections must preserve width " + std::to_string(d));

  c.attn = Tensor({heads, n, n});
  c.context = Tensor({n, d});
  std::vector<double> row(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += c.q.at(i, off + e) * c.k.at(j, off + e);
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < n; ++j) c.attn.at(h, i, j) = row[j] / z;
      for (std::size_t e = 0; e < dh; ++e) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += c.attn.at(h, i, j) * c.v.at(j, off + e);
        c.context.at(i, off + e) = s;
      }
    }
  }
  c.out = dense_forward(c.context, w.wo, w.bo);
  return c;
}

Tensor mhsa_forward(const Tensor& tokens, const MhsaWeights& w, std::size_t heads) {
  return mhsa_forward_cached(tokens, w, heads).out;
}

Tensor dilated_conv1d_forward(const Tensor& tokens, const Tensor& kernel, const Tensor& bias,
                              std::size_t dilation) {
  expect_rank(tokens, 2, "dilated_conv1d tokens");
  expect_rank(kernel, 3, "dilated_conv1d kernel");
  const std::size_t n = tokens.dim(0), d = tokens.dim(1), width = kernel.dim(0);
  if (width % 2 == 0)
    throw ConfigError("dilated_conv1d: kernel width must be odd, got " + std::to_string(width));
  if (dilation == 0) throw ConfigError("dilated_conv1d: dilation must be positive");
  expect_shape(kernel, {width, d, d}, "dilated_conv1d kernel");
  expect_shape(bias, {d}, "dilated_conv1d bias");
  Tensor y({n, d});
  kernels::par::dilated_conv1d_forward({n, d, width, dilation}, tokens.values(), kernel.values(),
                                       bias.values(), y.values());
  return y;
}

Tensor conv2d_forward(const Tensor& image, const Tensor& kernel, const Tensor& bias,
                      std::size_t stride, std::size_t pad) {
  expect_rank(image, 3, "conv2d input");
  expect_rank(kernel, 4, "conv2d kernel");
  const kernels::Conv2dGeom g{image.dim(0), image.dim(1), image.dim(2), kernel.dim(0),
                              kernel.dim(2), stride, pad};
  expect_shape(kernel, {g.out_channels, g.in_channels, g.ksize, g.ksize}, "conv2d kernel");
  expect_shape(bias, {g.out_channels}, "conv2d bias");
  if (g.height + 2 * pad < g.ksize || g.width + 2 * pad < g.ksize)
    throw InputError("conv2d: input " + shape_str(image.shape()) + " smaller than kernel");
  Tensor y({g.out_channels, g.out_height(), g.out_width()});
  kernels::par::conv2d_forward(g, image.values(), kernel.values(), bias.values(), y.values());
  return y;
}

Tensor avg_pool_grid(const Tensor& map, std::size_t h, std::size_t w) {
  expect_rank(map, 3, "avg_pool_grid input");
  const std::size_t c = map.dim(0), hh = map.dim(1), ww = map.dim(2);
  if (h == 0 || w == 0 || h > hh || w > ww || hh % h != 0 || ww % w != 0)
    throw ConfigError("avg_pool_grid: cannot pool " + shape_str(map.shape()) + " to " +
                      std::to_string(h) + "x" + std::to_string(w));
  const std::size_t fh = hh / h, fw = ww / w;
  const double inv = 1.0 / static_cast<double>(fh * fw);
  Tensor y({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < fh; ++a)
          for (std::size_t b = 0; b < fw; ++b) s += map.at(ch, i * fh + a, j * fw + b);
        y.at(ch, i, j) = s * inv;
      }
  return y;
}

Tensor global_avg_pool(const Tensor& map) {
  expect_rank(map, 3, "global_avg_pool input");
  const std::size_t c = map.dim(0), area = map.dim(1) * map.dim(2);
  Tensor y({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t q = 0; q < area; ++q) s += map[ch * area + q];
    y[ch] = s / static_cast<double>(area);
  }
  return y;
}

}  // namespace magpath::nn
