#include <doctest.h>
#include <omp.h>

#include <cmath>

#include "grad_suite.hpp"
#include "magpath/gradcheck.hpp"
#include "magpath/kernels.hpp"
#include "magpath/layers.hpp"
#include "magpath/ops.hpp"
#include "magpath/optim.hpp"
#include "support.hpp"

using namespace magpath;
using namespace magpath::test;

TEST_CASE("tensor rejects inconsistent shapes and non-finite contracts") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ContractError);
  CHECK_THROWS_AS(Tensor({0, 3}), ContractError);
  Tensor t({2});
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(expect_finite(t, "t"), ContractError);
}

TEST_CASE("dense forward") {
  Tensor id({2, 2}, {1, 0, 0, 1});
  CHECK(nn::dense_forward(Tensor({1, 2}, {1, 2}), id, Tensor({2})) == Tensor({1, 2}, {1, 2}));
  CHECK(nn::dense_forward(Tensor({1, 2}, {1, 1}), Tensor({2, 2}), Tensor({2}, {3, 4})) == Tensor({1, 2}, {3, 4}));

  std::mt19937_64 rng(1);
  const Tensor x = randn({4, 3}, rng), w = randn({3, 5}, rng), b = randn({5}, rng);
  const Tensor y = nn::dense_forward(x, w, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += x.at(i, k) * w.at(k, j);
      CHECK(y.at(i, j) == doctest::Approx(s + b[j]).epsilon(1e-14));
    }
  CHECK_THROWS_AS(nn::dense_forward(x, randn({4, 5}, rng), b), ContractError);
}

TEST_CASE("softmax") {
  const Tensor half = nn::softmax(Tensor({2}, {0, 0}));
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  const Tensor big = nn::softmax(Tensor({2}, {1000, 0}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  std::mt19937_64 rng(2);
  const Tensor x = randn({5}, rng);
  const Tensor s = nn::softmax(x);
  long double z = 0.0L;
  for (std::size_t i = 0; i < 5; ++i) z += std::exp(static_cast<long double>(x[i]));
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(s[i] - static_cast<double>(std::exp(static_cast<long double>(x[i])) / z)) < 1e-12);
    total += s[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("layer norm") {
  const Tensor g({3}, 1.0), sh({3});
  const Tensor c = nn::layer_norm(Tensor({1, 3}, {5, 5, 5}), g, sh);
  for (double v : c.raw()) CHECK(v == 0.0);
  const Tensor two = nn::layer_norm(Tensor({1, 2}, {1, -1}), Tensor({2}, 1.0), Tensor({2}));
  CHECK(two[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(two[1] == doctest::Approx(-1.0).epsilon(1e-5));

  std::mt19937_64 rng(3);
  const Tensor x = randn({1, 16}, rng, 3.0);
  const Tensor r = nn::layer_norm(x, Tensor({16}, 1.0), Tensor({16}));
  double xm = 0.0, xv = 0.0, mean = 0.0, var = 0.0;
  for (double v : x.raw()) xm += v / 16.0;
  for (double v : x.raw()) xv += (v - xm) * (v - xm) / 16.0;
  for (double v : r.raw()) mean += v / 16.0;
  for (double v : r.raw()) var += (v - mean) * (v - mean) / 16.0;
  CHECK(std::abs(mean) < 1e-12);
  // eps = 1e-5 shrinks the variance to s^2 / (s^2 + eps).
  CHECK(std::abs(var - xv / (xv + 1e-5)) < 1e-12);
}

namespace {
// Index-loop attention oracle.
Tensor attention_oracle(const Tensor& x, const std::vector<Tensor>& w, std::size_t heads) {
  const std::size_t n = x.dim(0), d = x.dim(1), dh = d / heads;
  auto proj = [&](const Tensor& W, const Tensor& b) {
    Tensor y({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < d; ++k) s += x.at(i, k) * W.at(k, j);
        y.at(i, j) = s;
      }
    return y;
  };
  const Tensor q = proj(w[0], w[1]), k = proj(w[2], w[3]), v = proj(w[4], w[5]);
  Tensor ctx({n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> a(n);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += q.at(i, h * dh + e) * k.at(j, h * dh + e);
        a[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, a[j]);
      }
      for (auto& t : a) z += (t = std::exp(t - mx));
      for (std::size_t e = 0; e < dh; ++e) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[j] / z * v.at(j, h * dh + e);
        ctx.at(i, h * dh + e) = s;
      }
    }
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = w[7][j];
      for (std::size_t k2 = 0; k2 < d; ++k2) s += ctx.at(i, k2) * w[6].at(k2, j);
      out.at(i, j) = s;
    }
  return out;
}
}  // namespace

TEST_CASE("multi-head self-attention") {
  std::mt19937_64 rng(4);
  std::vector<Tensor> w;
  for (int i = 0; i < 4; ++i) {
    w.push_back(randn({4, 4}, rng));
    w.push_back(randn({4}, rng));
  }
  nn::MhsaWeights mw{w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]};
  const Tensor x = randn({5, 4}, rng);
  CHECK(max_abs_diff(nn::mhsa_forward(x, mw, 2), attention_oracle(x, w, 2)) < 1e-10);

  // Single token: attention is exactly 1, so the output is outProj(V token).
  const Tensor one = randn({1, 4}, rng);
  CHECK(max_abs_diff(nn::mhsa_forward(one, mw, 2), attention_oracle(one, w, 2)) < 1e-12);
  const Tensor v = nn::dense_forward(one, w[4], w[5]);
  CHECK(max_abs_diff(nn::mhsa_forward(one, mw, 2), nn::dense_forward(v, w[6], w[7])) < 1e-12);

  // Identity projections with two identical tokens give identical rows.
  const Tensor id({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}), z({4});
  nn::MhsaWeights iw{id, z, id, z, id, z, id, z};
  Tensor twin({2, 4});
  for (std::size_t j = 0; j < 4; ++j) twin.at(0, j) = twin.at(1, j) = static_cast<double>(j) - 1.5;
  const Tensor tw = nn::mhsa_forward(twin, iw, 2);
  for (std::size_t j = 0; j < 4; ++j) CHECK(tw.at(0, j) == tw.at(1, j));

  CHECK_THROWS_AS(nn::mhsa_forward(x, mw, 3), ConfigError);
}

TEST_CASE("dilated conv1d") {
  std::mt19937_64 rng(5);
  // Width-1 identity kernel is the identity for every dilation.
  Tensor id({1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) id.at(0, i, i) = 1.0;
  const Tensor x = randn({6, 3}, rng);
  for (std::size_t r : {1, 3, 5}) CHECK(nn::dilated_conv1d_forward(x, id, Tensor({3}), r) == x);

  // N=1, r=5: only the centre tap sees data.
  const Tensor k = randn({3, 3, 3}, rng), b = randn({3}, rng);
  const Tensor single = randn({1, 3}, rng);
  Tensor centre({1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) centre[i] = k[9 + i];
  CHECK(nn::dilated_conv1d_forward(single, k, b, 5) == nn::dilated_conv1d_forward(single, centre, b, 5));

  // Loop oracle.
  const Tensor seq = randn({7, 3}, rng);
  const Tensor y = nn::dilated_conv1d_forward(seq, k, b, 3);
  for (long t = 0; t < 7; ++t)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = b[o];
      for (long j = 0; j < 3; ++j) {
        const long src = t + (j - 1) * 3;
        if (src < 0 || src >= 7) continue;
        for (std::size_t i = 0; i < 3; ++i) s += k.at(j, i, o) * seq.at(src, i);
      }
      CHECK(y.at(t, o) == s);
    }
  CHECK_THROWS_AS(nn::dilated_conv1d_forward(seq, randn({2, 3, 3}, rng), b, 1), ConfigError);
}

TEST_CASE("tape basics and freezing") {
  nn::Tape tape;
  std::mt19937_64 rng(6);
  nn::Var x = tape.leaf(randn({3, 2}, rng));
  tape.backward(nn::sum(x));
  const Tensor gx = tape.grad(x);
  for (double g : gx.raw()) CHECK(g == 1.0);

  ParamStore ps;
  ps.add("frozen", randn({2, 2}, rng), false);
  ps.add("live", randn({2, 2}, rng));
  nn::Tape t2;
  nn::Var in = t2.constant(randn({1, 2}, rng));
  nn::Var h = nn::matmul(nn::matmul(in, t2.param(ps.get("frozen"))), t2.param(ps.get("live")));
  t2.backward(nn::sum(h));
  for (double g : ps.get("frozen").grad.raw()) CHECK(g == 0.0);
  double live = 0.0;
  for (double g : ps.get("live").grad.raw()) live += std::abs(g);
  CHECK(live > 0.0);

  nn::Tape empty;
  CHECK_THROWS_AS(empty.backward(nn::Var{&empty, 0}), StateError);
}

TEST_CASE("optimizer") {
  SUBCASE("zero gradients leave parameters unchanged") {
    ParamStore ps;
    ps.add("p", Tensor({3}, {1, 2, 3}));
    nn::Optimizer opt(ps, {});
    opt.step(ps);
    CHECK(ps.get("p").value == Tensor({3}, {1, 2, 3}));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("scalar Adam recurrence") {
    ParamStore ps;
    ps.add("p", Tensor({1}, {0.5}));
    nn::OptimizerConfig cfg;
    cfg.lr = 0.01;
    nn::Optimizer opt(ps, cfg);
    double p = 0.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      ps.get("p").grad[0] = 1.0;
      opt.step(ps);
      m = 0.9 * m + 0.1;
      v = 0.999 * v + 0.001;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      p -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(ps.get("p").value[0] - p) < 1e-12);
    }
  }
  SUBCASE("lookahead with k=1, alpha=1 equals Adam") {
    std::mt19937_64 rng(7);
    ParamStore a, b;
    a.add("p", randn({4}, rng));
    b = a;
    nn::OptimizerConfig plain;
    plain.weight_decay = 1e-3;
    nn::OptimizerConfig la = plain;
    la.kind = nn::OptimizerKind::AdamLookahead;
    la.lookahead_k = 1;
    la.lookahead_alpha = 1.0;
    nn::Optimizer oa(a, plain), ob(b, la);
    for (int s = 0; s < 5; ++s) {
      const Tensor g = randn({4}, rng);
      a.get("p").grad = g;
      b.get("p").grad = g;
      oa.step(a);
      ob.step(b);
    }
    CHECK(max_abs_diff(a.get("p").value, b.get("p").value) < 1e-15);
  }
  SUBCASE("non-positive learning rate") {
    ParamStore ps;
    ps.add("p", Tensor({1}));
    nn::OptimizerConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS_AS(nn::Optimizer(ps, cfg), ConfigError);
  }
}

TEST_CASE("parameter bundles round-trip bit-exactly") {
  std::mt19937_64 rng(8);
  ParamStore ps;
  ps.add("a.weight", randn({3, 4}, rng));
  ps.add("b", randn({2, 2, 2}, rng), false);
  const std::string bytes = encode_bundle(ps);
  CHECK(bytes.substr(0, 4) == "MAGW");
  const ParamStore back = decode_bundle(bytes);
  CHECK(back.checksum() == ps.checksum());
  CHECK(encode_bundle(back) == bytes);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_bundle(bad), InputError);
  CHECK_THROWS_AS(decode_bundle(bytes.substr(0, bytes.size() - 3)), InputError);
}

TEST_CASE("parallel kernels match the reference and ignore thread count") {
  std::mt19937_64 rng(9);
  const std::size_t n = 17, k = 13, m = 11;
  const Tensor a = randn({n, k}, rng), b = randn({k, m}, rng);
  Tensor c_ref({n, m}), c_par({n, m}), c_one({n, m});
  kernels::ref::matmul(a.values(), b.values(), c_ref.values(), n, k, m);
  kernels::par::matmul(a.values(), b.values(), c_par.values(), n, k, m);
  CHECK(max_abs_diff(c_ref, c_par) < 1e-12);

  kernels::Conv2dGeom g{3, 12, 12, 4, 3, 2, 1};
  const Tensor x = randn({3, 12, 12}, rng), w = randn({4, 3, 3, 3}, rng), bias = randn({4}, rng);
  Tensor y_ref({4, g.out_height(), g.out_width()}), y_par = y_ref, y_one = y_ref;
  kernels::ref::conv2d_forward(g, x.values(), w.values(), bias.values(), y_ref.values());
  kernels::par::conv2d_forward(g, x.values(), w.values(), bias.values(), y_par.values());
  CHECK(max_abs_diff(y_ref, y_par) < 1e-12);
  const Tensor dy = randn(y_ref.shape(), rng);
  Tensor dx_r(x.shape()), dw_r(w.shape()), db_r(bias.shape());
  Tensor dx_p = dx_r, dw_p = dw_r, db_p = db_r;
  kernels::ref::conv2d_backward(g, x.values(), w.values(), dy.values(), dx_r.values(), dw_r.values(), db_r.values());
  kernels::par::conv2d_backward(g, x.values(), w.values(), dy.values(), dx_p.values(), dw_p.values(), db_p.values());
  CHECK(max_abs_diff(dx_r, dx_p) < 1e-12);
  CHECK(max_abs_diff(dw_r, dw_p) < 1e-12);
  CHECK(max_abs_diff(db_r, db_p) < 1e-12);

  kernels::Conv1dGeom g1{9, 4, 3, 3};
  const Tensor t = randn({9, 4}, rng), kk = randn({3, 4, 4}, rng), kb = randn({4}, rng);
  Tensor o_ref({9, 4}), o_par({9, 4});
  kernels::ref::dilated_conv1d_forward(g1, t.values(), kk.values(), kb.values(), o_ref.values());
  kernels::par::dilated_conv1d_forward(g1, t.values(), kk.values(), kb.values(), o_par.values());
  CHECK(max_abs_diff(o_ref, o_par) < 1e-12);

  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  kernels::par::matmul(a.values(), b.values(), c_one.values(), n, k, m);
  kernels::par::conv2d_forward(g, x.values(), w.values(), bias.values(), y_one.values());
  omp_set_num_threads(4);
  Tensor c_four({n, m}), y_four = y_ref;
  kernels::par::matmul(a.values(), b.values(), c_four.values(), n, k, m);
  kernels::par::conv2d_forward(g, x.values(), w.values(), bias.values(), y_four.values());
  omp_set_num_threads(saved);
  CHECK(c_one == c_four);
  CHECK(y_one == y_four);
}

TEST_CASE("finite-difference suite, three seeds per op") {
  for (const auto& c : grad_suite())
    for (std::uint64_t seed = 100; seed < 103; ++seed) {
      INFO(c.name << " seed " << seed);
      CHECK(c.run(seed) < c.tolerance);
    }
}
