#include "magpath/kernels.hpp"

#include <algorithm>

namespace magpath::kernels::ref {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * m + j];
      c[i * m + j] = s;
    }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * n + i] * b[p * m + j];
      c[i * m + j] = s;
    }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * m + j] = s;
    }
}

void conv2d_forward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = b[o];
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                  ix >= static_cast<long>(g.width))
                continue;
              s += w[((o * g.in_channels + c) * k + ky) * k + kx] *
                   x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                     static_cast<std::size_t>(ix)];
            }
        y[(o * ho + oy) * wo + ox] = s;
      }
}

void conv2d_backward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  std::fill(dx.begin(), dx.end(), 0.0);
  std::fill(dw.begin(), dw.end(), 0.0);
  std::fill(db.begin(), db.end(), 0.0);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double gy = dy[(o * ho + oy) * wo + ox];
        db[o] += gy;
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                  ix >= static_cast<long>(g.width))
                continue;
              const std::size_t xi = (c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                     static_cast<std::size_t>(ix);
              const std::size_t wi = ((o * g.in_channels + c) * k + ky) * k + kx;
              dw[wi] += gy * x[xi];
              dx[xi] += gy * w[wi];
            }
      }
}

void dilated_conv1d_forward(const Conv1dGeom& g, std::span<const double> x,
                            std::span<const double> w, std::span<const double> b,
                            std::span<double> y) {
  const std::size_t d = g.channels;
  const long half = static_cast<long>(g.ksize / 2);
  for (std::size_t t = 0; t < g.length; ++t)
    for (std::size_t o = 0; o < d; ++o) {
      double s = b[o];
      for (std::size_t j = 0; j < g.ksize; ++j) {
        const long src = static_cast<long>(t) + (static_cast<long>(j) - half) *
                                                    static_cast<long>(g.dilation);
        if (src < 0 || src >= static_cast<long>(g.length)) continue;
        for (std::size_t i = 0; i < d; ++i)
          s += x[static_cast<std::size_t>(src) * d + i] * w[(j * d + i) * d + o];
      }
      y[t * d + o] = s;
    }
}

void dilated_conv1d_backward(const Conv1dGeom& g, std::span<const double> x,
                             std::span<const double> w, std::span<const double> dy,
                             std::span<double> dx, std::span<double> dw, std::span<double> db) {
  const std::size_t d = g.channels;
  const long half = static_cast<long>(g.ksize / 2);
  std::fill(dx.begin(), dx.end(), 0.0);
  std::fill(dw.begin(), dw.end(), 0.0);
  std::fill(db.begin(), db.end(), 0.0);
  for (std::size_t t = 0; t < g.length; ++t)
    for (std::size_t o = 0; o < d; ++o) {
      const double gy = dy[t * d + o];
      db[o] += gy;
      for (std::size_t j = 0; j < g.ksize; ++j) {
        const long src = static_cast<long>(t) + (static_cast<long>(j) - half) *
                                                    static_cast<long>(g.dilation);
        if (src < 0 || src >= static_cast<long>(g.length)) continue;
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t xi = static_cast<std::size_t>(src) * d + i;
          dw[(j * d + i) * d + o] += gy * x[xi];
          dx[xi] += gy * w[(j * d + i) * d + o];
        }
      }
    }
}

}  // namespace magpath::kernels::ref
