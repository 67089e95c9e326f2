#include "magpath/ops.hpp"

#include <cmath>
#include <memory>

#include "magpath/kernels.hpp"
#include "magpath/layers.hpp"

namespace magpath::nn {

namespace {

Tensor column_sums(const Tensor& g) {
  const std::size_t n = g.dim(0), m = g.dim(1);
  Tensor s({m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) s[j] += g.at(i, j);
  return s;
}

// dx = g * w^T for g[N,dout], w[din,dout].
Tensor times_transpose(const Tensor& g, const Tensor& w) {
  Tensor dx({g.dim(0), w.dim(0)});
  kernels::par::matmul_nt(g.values(), w.values(), dx.values(), g.dim(0), g.dim(1), w.dim(0));
  return dx;
}

// dw = x^T * g for x[N,din], g[N,dout].
Tensor transpose_times(const Tensor& x, const Tensor& g) {
  Tensor dw({x.dim(1), g.dim(1)});
  kernels::par::matmul_tn(x.values(), g.values(), dw.values(), x.dim(1), x.dim(0), g.dim(1));
  return dw;
}

}  // namespace

Var dense(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  Tensor y = dense_forward(x.value(), w.value(), b.value());
  return t.record(std::move(y), {x, w, b}, [x, w, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) t.accumulate(x, times_transpose(g, t.value(w)));
    if (t.requires_grad(w)) t.accumulate(w, transpose_times(t.value(x), g));
    if (t.requires_grad(b)) t.accumulate(b, column_sums(g));
  });
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  expect_rank(av, 2, "matmul lhs");
  expect_rank(bv, 2, "matmul rhs");
  if (av.dim(1) != bv.dim(0))
    throw ContractError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor y({av.dim(0), bv.dim(1)});
  kernels::par::matmul(av.values(), bv.values(), y.values(), av.dim(0), av.dim(1), bv.dim(1));
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, times_transpose(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, transpose_times(t.value(a), g));
  });
}

Var add(Var a, Var b) {
  Tensor y = a.value();
  y.add_inplace(b.value());
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var scale(Var a, double c) {
  Tensor y = a.value();
  for (auto& v : y.values()) v *= c;
  return a.tape->record(std::move(y), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor d = g;
    for (auto& v : d.values()) v *= c;
    t.accumulate(a, d);
  });
}

Var affine(Var a, double c, double shift) {
  Tensor y = a.value();
  for (auto& v : y.values()) v = v * c + shift;
  return a.tape->record(std::move(y), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor d = g;
    for (auto& v : d.values()) v *= c;
    t.accumulate(a, d);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, g.reshaped(t.value(a).shape()));
  });
}

Var relu(Var a) {
  return a.tape->record(relu(a.value()), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor d(g.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0 ? g[i] : 0.0;
    t.accumulate(a, d);
  });
}

Var softmax(Var x) {
  Tensor y = softmax(x.value());
  Tensor saved = y;
  return x.tape->record(std::move(y), {x}, [x, y = std::move(saved)](Tape& t, const Tensor& g) {
    const std::size_t k = y.shape().back(), rows = y.size() / k;
    Tensor d(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += g[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) d[r * k + j] = y[r * k + j] * (g[r * k + j] - s);
    }
    t.accumulate(x, d);
  });
}

Var layer_norm(Var x, Var gain, Var shift, double eps) {
  Tensor y = layer_norm(x.value(), gain.value(), shift.value(), eps);
  return x.tape->record(std::move(y), {x, gain, shift},
                        [x, gain, shift, eps](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor dx(xv.shape()), dg({d}), ds({d});
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += xv.at(i, j);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (xv.at(i, j) - mean) * (xv.at(i, j) - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (xv.at(i, j) - mean) * inv;
        dxhat[j] = g.at(i, j) * gv[j];
        dg[j] += g.at(i, j) * xhat[j];
        ds[j] += g.at(i, j);
        m1 += dxhat[j];
        m2 += dxhat[j] * xhat[j];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) dx.at(i, j) = inv * (dxhat[j] - m1 - xhat[j] * m2);
    }
    t.accumulate(x, dx);
    t.accumulate(gain, dg);
    t.accumulate(shift, ds);
  });
}

Var column_affine(Var x, const Tensor& scale, const Tensor& shift) {
  const Tensor& xv = x.value();
  expect_rank(xv, 2, "column_affine input");
  expect_shape(scale, {xv.dim(1)}, "column_affine scale");
  expect_shape(shift, {xv.dim(1)}, "column_affine shift");
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.dim(0); ++i)
    for (std::size_t j = 0; j < xv.dim(1); ++j) y.at(i, j) = xv.at(i, j) * scale[j] + shift[j];
  return x.tape->record(std::move(y), {x}, [x, scale](Tape& t, const Tensor& g) {
    Tensor d(g.shape());
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t j = 0; j < g.dim(1); ++j) d.at(i, j) = g.at(i, j) * scale[j];
    t.accumulate(x, d);
  });
}

Var mhsa(Var tokens, const MhsaVars& w, std::size_t heads) {
  Tape& tape = *tokens.tape;
  const MhsaWeights weights{w.wq.value(), w.bq.value(), w.wk.value(), w.bk.value(),
                            w.wv.value(), w.bv.value(), w.wo.value(), w.bo.value()};
  auto cache = std::make_shared<MhsaCache>(mhsa_forward_cached(tokens.value(), weights, heads));
  Tensor out = cache->out;
  return tape.record(
      std::move(out), {tokens, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo},
      [tokens, w, heads, cache](Tape& t, const Tensor& g) {
        const MhsaCache& c = *cache;
        const std::size_t n = c.q.dim(0), d = c.q.dim(1), dh = d / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

        t.accumulate(w.wo, transpose_times(c.context, g));
        t.accumulate(w.bo, column_sums(g));
        const Tensor dctx = times_transpose(g, t.value(w.wo));

        Tensor dq({n, d}), dk({n, d}), dv({n, d});
        std::vector<double> da(n);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            double dot_a = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double s = 0.0;
              for (std::size_t e = 0; e < dh; ++e) s += dctx.at(i, off + e) * c.v.at(j, off + e);
              da[j] = s;
              dot_a += s * c.attn.at(h, i, j);
              const double a = c.attn.at(h, i, j);
              for (std::size_t e = 0; e < dh; ++e) dv.at(j, off + e) += a * dctx.at(i, off + e);
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double ds = c.attn.at(h, i, j) * (da[j] - dot_a) * sc;
              for (std::size_t e = 0; e < dh; ++e) {
                dq.at(i, off + e) += ds * c.k.at(j, off + e);
                dk.at(j, off + e) += ds * c.q.at(i, off + e);
              }
            }
          }
        }

        const Tensor& x = t.value(tokens);
        t.accumulate(w.wq, transpose_times(x, dq));
        t.accumulate(w.bq, column_sums(dq));
        t.accumulate(w.wk, transpose_times(x, dk));
        t.accumulate(w.bk, column_sums(dk));
        t.accumulate(w.wv, transpose_times(x, dv));
        t.accumulate(w.bv, column_sums(dv));
        if (t.requires_grad(tokens)) {
          Tensor dx = times_transpose(dq, t.value(w.wq));
          dx.add_inplace(times_transpose(dk, t.value(w.wk)));
          dx.add_inplace(times_transpose(dv, t.value(w.wv)));
          t.accumulate(tokens, dx);
        }
      });
}

Var dilated_conv1d(Var tokens, Var kernel, Var bias, std::size_t dilation) {
  Tensor y = dilated_conv1d_forward(tokens.value(), kernel.value(), bias.value(), dilation);
  return tokens.tape->record(std::move(y), {tokens, kernel, bias},
                             [tokens, kernel, bias, dilation](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(tokens);
    const Tensor& k = t.value(kernel);
    Tensor dx(x.shape()), dk(k.shape()), db({x.dim(1)});
    kernels::par::dilated_conv1d_backward({x.dim(0), x.dim(1), k.dim(0), dilation}, x.values(),
                                          k.values(), g.values(), dx.values(), dk.values(),
                                          db.values());
    t.accumulate(tokens, dx);
    t.accumulate(kernel, dk);
    t.accumulate(bias, db);
  });
}

Var conv2d(Var image, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
  Tensor y = conv2d_forward(image.value(), kernel.value(), bias.value(), stride, pad);
  return image.tape->record(std::move(y), {image, kernel, bias},
                            [image, kernel, bias, stride, pad](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(image);
    const Tensor& k = t.value(kernel);
    const kernels::Conv2dGeom geom{x.dim(0), x.dim(1), x.dim(2), k.dim(0), k.dim(2), stride, pad};
    Tensor dx(x.shape()), dk(k.shape()), db({k.dim(0)});
    kernels::par::conv2d_backward(geom, x.values(), k.values(), g.values(), dx.values(),
                                  dk.values(), db.values());
    t.accumulate(image, dx);
    t.accumulate(kernel, dk);
    t.accumulate(bias, db);
  });
}

Var avg_pool_grid(Var map, std::size_t h, std::size_t w) {
  Tensor y = avg_pool_grid(map.value(), h, w);
  return map.tape->record(std::move(y), {map}, [map, h, w](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(map);
    const std::size_t fh = x.dim(1) / h, fw = x.dim(2) / w;
    const double inv = 1.0 / static_cast<double>(fh * fw);
    Tensor dx(x.shape());
    for (std::size_t c = 0; c < x.dim(0); ++c)
      for (std::size_t i = 0; i < x.dim(1); ++i)
        for (std::size_t j = 0; j < x.dim(2); ++j) dx.at(c, i, j) = g.at(c, i / fh, j / fw) * inv;
    t.accumulate(map, dx);
  });
}

Var global_avg_pool(Var map) {
  Tensor y = global_avg_pool(map.value());
  return map.tape->record(std::move(y), {map}, [map](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(map);
    const std::size_t area = x.dim(1) * x.dim(2);
    Tensor dx(x.shape());
    for (std::size_t c = 0; c < x.dim(0); ++c)
      for (std::size_t q = 0; q < area; ++q) dx[c * area + q] = g[c] / static_cast<double>(area);
    t.accumulate(map, dx);
  });
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  Tensor mask(a.value().shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask.values()) m = u(rng) >= p ? 1.0 / (1.0 - p) : 0.0;
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return a.tape->record(std::move(y), {a}, [a, mask = std::move(mask)](Tape& t, const Tensor& g) {
    Tensor d = g;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask[i];
    t.accumulate(a, d);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor(t.value(a).shape(), g[0]));
  });
}

Var dot(Var a, const Tensor& weights) {
  expect_shape(weights, a.value().shape(), "dot weights");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += a.value()[i] * weights[i];
  return a.tape->record(Tensor::scalar(s), {a}, [a, weights](Tape& t, const Tensor& g) {
    Tensor d = weights;
    for (auto& v : d.values()) v *= g[0];
    t.accumulate(a, d);
  });
}

Var mean_abs_diff(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  expect_shape(bv, av.shape(), "mean_abs_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  s /= static_cast<double>(av.size());
  return a.tape->record(Tensor::scalar(s), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    const double k = g[0] / static_cast<double>(x.size());
    Tensor d(x.shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double diff = x[i] - y[i];
      d[i] = diff > 0.0 ? k : (diff < 0.0 ? -k : 0.0);
    }
    t.accumulate(a, d);
    for (auto& v : d.values()) v = -v;
    t.accumulate(b, d);
  });
}

Var add_scalars(Var a, Var b) {
  expect_shape(a.value(), {1}, "add_scalars lhs");
  expect_shape(b.value(), {1}, "add_scalars rhs");
  return add(a, b);
}

Var cross_entropy(Var probs, std::size_t label) {
  const Tensor& p = probs.value();
  if (label >= p.size())
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
  const double py = p[label];
  const double loss = -std::log(std::max(py, kProbFloor));
  return probs.tape->record(Tensor::scalar(loss), {probs},
                            [probs, label, py](Tape& t, const Tensor& g) {
    Tensor d(t.value(probs).shape());
    if (py > kProbFloor) d[label] = -g[0] / py;
    t.accumulate(probs, d);
  });
}

}  // namespace magpath::nn
