#pragma once

// Numeric hot loops. Every kernel exists twice:
//   ref::  straightforward index loops, kept as the testing oracle
//   par::  loop-reordered OpenMP versions used by the layers
// par:: kernels parallelise only over independent output slices, so each
// output element is produced by one thread in a fixed order and results are
// bit-identical for any thread count.

#include <cstddef>
#include <span>

namespace magpath::kernels {

struct Conv2dGeom {
  std::size_t in_channels, height, width;
  std::size_t out_channels, ksize, stride, pad;

  std::size_t out_height() const { return (height + 2 * pad - ksize) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - ksize) / stride + 1; }
};

struct Conv1dGeom {
  std::size_t length, channels, ksize, dilation;
};

namespace ref {

// c[n,m] = a[n,k] * b[k,m]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
// c[n,m] = a[k,n]^T * b[k,m]
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);
// c[n,m] = a[n,k] * b[m,k]^T
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);

// x[C,H,W], w[O,C,k,k], b[O] -> y[O,Ho,Wo], zero padding.
void conv2d_forward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
// Overwrites dx, dw, db.
void conv2d_backward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db);

// x[N,d], w[ksize,d,d] (tap, in, out), b[d] -> y[N,d], zero padding.
void dilated_conv1d_forward(const Conv1dGeom& g, std::span<const double> x,
                            std::span<const double> w, std::span<const double> b,
                            std::span<double> y);
void dilated_conv1d_backward(const Conv1dGeom& g, std::span<const double> x,
                             std::span<const double> w, std::span<const double> dy,
                             std::span<double> dx, std::span<double> dw, std::span<double> db);

}  // namespace ref

namespace par {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);

void conv2d_forward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
void conv2d_backward(const Conv2dGeom& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db);

void dilated_conv1d_forward(const Conv1dGeom& g, std::span<const double> x,
                            std::span<const double> w, std::span<const double> b,
                            std::span<double> y);
void dilated_conv1d_backward(const Conv1dGeom& g, std::span<const double> x,
                             std::span<const double> w, std::span<const double> dy,
                             std::span<double> dx, std::span<double> dw, std::span<double> db);

}  // namespace par

}  // namespace magpath::kernels
