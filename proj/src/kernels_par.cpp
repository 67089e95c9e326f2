#include "magpath/kernels.hpp"

#include <algorithm>
#include <vector>

namespace magpath::kernels::par {

namespace {

using idx = long;

// Copy x[C,H,W] into a zero-padded [C,H+2p,W+2p] buffer.
std::vector<double> pad_input(const Conv2dGeom& g, std::span<const double> x) {
  const std::size_t hp = g.height + 2 * g.pad, wp = g.width + 2 * g.pad;
  std::vector<double> out(g.in_channels * hp * wp, 0.0);
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t y = 0; y < g.height; ++y)
      std::copy_n(x.data() + (c * g.height + y) * g.width, g.width,
                  out.data() + (c * hp + y + g.pad) * wp + g.pad);
  return out;
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(n); ++i) {
    double* crow = c.data() + i * m;
    std::fill_n(crow, m, 0.0);
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(n); ++i) {
    double* crow = c.data() + i * m;
    std::fill_n(crow, m, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * n + i];
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(n); ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * m + j] = s;
    }
  }
}

void conv2d_forward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize, s = g.stride;
  const std::size_t hp = g.height + 2 * g.pad, wp = g.width + 2 * g.pad;
  const std::vector<double> xp = pad_input(g, x);
#pragma omp parallel for schedule(static)
  for (idx o = 0; o < static_cast<idx>(g.out_channels); ++o) {
    double* yo = y.data() + o * ho * wo;
    std::fill_n(yo, ho * wo, b[o]);
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = w[((o * g.in_channels + c) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const double* xrow = xp.data() + (c * hp + oy * s + ky) * wp + kx;
            double* yrow = yo + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) yrow[ox] += wv * xrow[ox * s];
          }
        }
  }
}

void conv2d_backward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize, s = g.stride;
  const std::size_t hp = g.height + 2 * g.pad, wp = g.width + 2 * g.pad;
  const std::vector<double> xp = pad_input(g, x);

#pragma omp parallel for schedule(static)
  for (idx o = 0; o < static_cast<idx>(g.out_channels); ++o) {
    const double* go = dy.data() + o * ho * wo;
    double acc = 0.0;
    for (std::size_t q = 0; q < ho * wo; ++q) acc += go[q];
    db[o] = acc;
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double sum = 0.0;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const double* xrow = xp.data() + (c * hp + oy * s + ky) * wp + kx;
            const double* grow = go + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) sum += grow[ox] * xrow[ox * s];
          }
          dw[((o * g.in_channels + c) * k + ky) * k + kx] = sum;
        }
  }

#pragma omp parallel for schedule(static)
  for (idx c = 0; c < static_cast<idx>(g.in_channels); ++c) {
    std::vector<double> dxp(hp * wp, 0.0);
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* go = dy.data() + o * ho * wo;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = w[((o * g.in_channels + c) * k + ky) * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            double* drow = dxp.data() + (oy * s + ky) * wp + kx;
            const double* grow = go + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) drow[ox * s] += wv * grow[ox];
          }
        }
    }
    for (std::size_t yy = 0; yy < g.height; ++yy)
      std::copy_n(dxp.data() + (yy + g.pad) * wp + g.pad, g.width,
                  dx.data() + (c * g.height + yy) * g.width);
  }
}

void dilated_conv1d_forward(const Conv1dGeom& g, std::span<const double> x,
                            std::span<const double> w, std::span<const double> b,
                            std::span<double> y) {
  const std::size_t d = g.channels;
  const idx half = static_cast<idx>(g.ksize / 2);
  const idx len = static_cast<idx>(g.length);
#pragma omp parallel for schedule(static)
  for (idx t = 0; t < len; ++t) {
    double* yrow = y.data() + t * d;
    std::copy_n(b.data(), d, yrow);
    for (std::size_t j = 0; j < g.ksize; ++j) {
      const idx src = t + (static_cast<idx>(j) - half) * static_cast<idx>(g.dilation);
      if (src < 0 || src >= len) continue;
      const double* xrow = x.data() + src * d;
      for (std::size_t i = 0; i < d; ++i) {
        const double xv = xrow[i];
        const double* wrow = w.data() + (j * d + i) * d;
        for (std::size_t o = 0; o < d; ++o) yrow[o] += xv * wrow[o];
      }
    }
  }
}

void dilated_conv1d_backward(const Conv1dGeom& g, std::span<const double> x,
                             std::span<const double> w, std::span<const double> dy,
                             std::span<double> dx, std::span<double> dw, std::span<double> db) {
  const std::size_t d = g.channels;
  const idx half = static_cast<idx>(g.ksize / 2);
  const idx len = static_cast<idx>(g.length);

  for (std::size_t o = 0; o < d; ++o) db[o] = 0.0;
  for (idx t = 0; t < len; ++t)
    for (std::size_t o = 0; o < d; ++o) db[o] += dy[t * d + o];

  // dx[s] = sum_j dy[s - off_j] * W_j^T
#pragma omp parallel for schedule(static)
  for (idx src = 0; src < len; ++src) {
    double* dxrow = dx.data() + src * d;
    std::fill_n(dxrow, d, 0.0);
    for (std::size_t j = 0; j < g.ksize; ++j) {
      const idx t = src - (static_cast<idx>(j) - half) * static_cast<idx>(g.dilation);
      if (t < 0 || t >= len) continue;
      const double* grow = dy.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) {
        const double* wrow = w.data() + (j * d + i) * d;
        double s = 0.0;
        for (std::size_t o = 0; o < d; ++o) s += grow[o] * wrow[o];
        dxrow[i] += s;
      }
    }
  }

  // dW_j[i,o] = sum_t x[t + off_j, i] * dy[t, o]
  const idx rows = static_cast<idx>(g.ksize * d);
#pragma omp parallel for schedule(static)
  for (idx r = 0; r < rows; ++r) {
    const std::size_t j = static_cast<std::size_t>(r) / d, i = static_cast<std::size_t>(r) % d;
    double* wrow = dw.data() + r * d;
    std::fill_n(wrow, d, 0.0);
    for (idx t = 0; t < len; ++t) {
      const idx src = t + (static_cast<idx>(j) - half) * static_cast<idx>(g.dilation);
      if (src < 0 || src >= len) continue;
      const double xv = x[src * d + i];
      const double* grow = dy.data() + t * d;
      for (std::size_t o = 0; o < d; ++o) wrow[o] += xv * grow[o];
    }
  }
}

}  // namespace magpath::kernels::par
