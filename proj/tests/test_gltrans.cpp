#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "magpath/gltrans.hpp"
#include "magpath/layers.hpp"
#include "support.hpp"

using namespace magpath;
using namespace magpath::test;

namespace {

GLTransConfig small(bool local = true) {
  GLTransConfig c;
  c.d_in = 6;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 2;
  c.dropout = 0.0;
  c.local_branch = local;
  return c;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) y.at(i, j) = x.at(order[i], j);
  return y;
}

GltBlockVars bind_block(nn::Tape& t, const GLTrans& m, std::size_t layer) {
  const std::string p = "block" + std::to_string(layer + 1) + ".";
  auto c = [&](const std::string& n) { return t.constant(m.params().get(p + n).value); };
  GltBlockVars w;
  w.ln1_gain = c("ln1.gain");
  w.ln1_shift = c("ln1.shift");
  w.attn = {c("attn.wq"), c("attn.bq"), c("attn.wk"), c("attn.bk"),
            c("attn.wv"), c("attn.bv"), c("attn.wo"), c("attn.bo")};
  for (auto r : m.config().dilations) {
    w.conv_weight.push_back(c("conv.r" + std::to_string(r) + ".weight"));
    w.conv_bias.push_back(c("conv.r" + std::to_string(r) + ".bias"));
  }
  w.local_weight = c("local.weight");
  w.local_bias = c("local.bias");
  w.ln2_gain = c("ln2.gain");
  w.ln2_shift = c("ln2.shift");
  return w;
}

Bag make_bag(const Tensor& emb, int label, int id) {
  Bag b;
  b.embeddings = emb;
  for (std::size_t i = 0; i < emb.dim(0); ++i) b.coords.push_back({i / 4, i % 4});
  b.label = label;
  b.slide_id = id;
  b.patient = id;
  b.grid_side = 4;
  return b;
}

// Class 1 bags get +1 on feature 0 for every instance.
std::vector<Bag> separable(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Bag> bags;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    Tensor e = randn({5, 6}, rng, 0.3);
    for (std::size_t r = 0; r < 5; ++r) e.at(r, 0) += y ? 1.0 : -1.0;
    bags.push_back(make_bag(e, y, static_cast<int>(i)));
  }
  return bags;
}

}  // namespace

TEST_CASE("glt_block") {
  GLTrans m(small(), 1);
  std::mt19937_64 rng(2);
  SUBCASE("single token is well defined") {
    nn::Tape t;
    const nn::Var y = glt_block(t.constant(randn({1, 8}, rng)), bind_block(t, m, 0), m.config());
    CHECK(y.value().all_finite());
  }
  SUBCASE("zeroed branch projections reduce the block to LN2 of its input") {
    for (const char* n : {"attn.wo", "attn.bo", "local.weight", "local.bias"})
      m.params().get(std::string("block1.") + n).value.fill(0.0);
    nn::Tape t;
    const Tensor x = randn({5, 8}, rng);
    const nn::Var y = glt_block(t.constant(x), bind_block(t, m, 0), m.config());
    const Tensor ln = nn::layer_norm(x, m.params().get("block1.ln2.gain").value, m.params().get("block1.ln2.shift").value);
    CHECK(max_abs_diff(y.value(), ln) < 1e-12);
  }
  SUBCASE("without the local branch the block is permutation-equivariant") {
    GLTrans g(small(false), 3);
    const Tensor x = randn({7, 8}, rng);
    nn::Tape t;
    const Tensor y = glt_block(t.constant(x), bind_block(t, g, 0), g.config()).value();
    for (int k = 0; k < 10; ++k) {
      std::vector<std::size_t> order(7);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      nn::Tape t2;
      const Tensor yp = glt_block(t2.constant(permute(x, order)), bind_block(t2, g, 0), g.config()).value();
      CHECK(max_abs_diff(yp, permute(y, order)) < 1e-12);
    }
  }
}

TEST_CASE("attention_pool") {
  std::mt19937_64 rng(4);
  nn::Tape t;
  const nn::Var w = t.constant(randn({5, 1}, rng)), b = t.constant(randn({1}, rng));
  const Tensor one = randn({1, 5}, rng);
  const PooledVars p1 = attention_pool(t.constant(one), w, b);
  CHECK(p1.scores.value()[0] == 1.0);
  CHECK(max_abs_diff(p1.pooled.value(), one) < 1e-15);

  Tensor same({4, 5});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) same.at(i, j) = static_cast<double>(j);
  const PooledVars p2 = attention_pool(t.constant(same), w, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p2.scores.value()[i] == doctest::Approx(0.25).epsilon(1e-15));

  const Tensor x = randn({6, 5}, rng);
  const PooledVars p3 = attention_pool(t.constant(x), w, b);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += p3.scores.value()[k] * x.at(k, j);
    CHECK(std::abs(p3.pooled.value()[j] - s) < 1e-15);
  }
}

TEST_CASE("forward and predict contracts") {
  std::mt19937_64 rng(5);
  GLTrans m(small(), 6);
  const Tensor x = randn({9, 6}, rng);
  const PredictionOutput out = m.predict(x);
  CHECK(std::abs(out.probs[0] + out.probs[1] - 1.0) < 1e-12);
  CHECK(std::abs(std::accumulate(out.scores.begin(), out.scores.end(), 0.0) - 1.0) < 1e-12);
  for (double s : out.scores) CHECK(s >= 0.0);
  CHECK(out.scores.size() == 9);

  const std::uint64_t before = m.params().checksum();
  const PredictionOutput again = m.predict(x);
  CHECK(again.probs == out.probs);
  CHECK(again.scores == out.scores);
  CHECK(m.params().checksum() == before);

  nn::Tape t;
  const GLTrans::Recorded rec = m.forward(t, t.constant(x));
  CHECK(rec.probs.value()[0] == out.probs[0]);
  CHECK(rec.probs.value()[1] == out.probs[1]);

  CHECK_THROWS_AS(m.predict(randn({3, 5}, rng)), ContractError);

  GLTrans zero = m;
  zero.params().get("head.weight").value.fill(0.0);
  zero.params().get("head.bias").value.fill(0.0);
  const PredictionOutput z = zero.predict(x);
  CHECK(z.probs[0] == 0.5);
  CHECK(z.probs[1] == 0.5);
  CHECK(z.label == 0);
}

TEST_CASE("local branch breaks permutation invariance; disabling it restores invariance") {
  std::mt19937_64 rng(7);
  const Tensor x = randn({10, 6}, rng);
  GLTrans global(small(false), 8), local(small(true), 8);
  const double g0 = global.predict(x).probs[1], l0 = local.predict(x).probs[1];
  double worst_global = 0.0, best_local = 0.0;
  for (int k = 0; k < 10; ++k) {
    std::vector<std::size_t> order(10);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    worst_global = std::max(worst_global, std::abs(global.predict(permute(x, order)).probs[1] - g0));
    best_local = std::max(best_local, std::abs(local.predict(permute(x, order)).probs[1] - l0));
  }
  CHECK(worst_global < 1e-9);
  CHECK(best_local > 1e-6);

  // Duplicating every instance leaves a purely global model unchanged.
  Tensor dup({20, 6});
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 6; ++j) dup.at(i, j) = x.at(i % 10, j);
  CHECK(std::abs(global.predict(dup).probs[1] - g0) < 1e-9);
}

TEST_CASE("ce_loss") {
  CHECK(ce_loss({0.5, 0.5}, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ce_loss({0.5, 0.5}, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ce_loss({1.0, 0.0}, 0) == 0.0);
  CHECK(ce_loss({1.0, 0.0}, 1) == doctest::Approx(-std::log(nn::kProbFloor)));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int i = 0; i < 20; ++i) {
    const double p = u(rng);
    const int y = i % 2;
    const double oracle = -(y == 0 ? 1.0 : 0.0) * std::log(1 - p) - (y == 1 ? 1.0 : 0.0) * std::log(p);
    CHECK(std::abs(ce_loss({1 - p, p}, y) - oracle) < 1e-12);
    nn::Tape t;
    CHECK(std::abs(ce_loss(t.constant(Tensor({1, 2}, {1 - p, p})), y).value()[0] - oracle) < 1e-12);
  }
}

TEST_CASE("train_gltrans") {
  const std::vector<Bag> train = separable(16, 10), val = separable(6, 11);
  GLTransTrainConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 3e-3;
  const GLTransTrainResult r = train_gltrans(train, val, small(), cfg);
  CHECK(r.trace.size() == 50);
  std::size_t correct = 0;
  for (const auto& b : train) correct += r.model.predict(b).label == b.label;
  CHECK(correct == train.size());

  double best = -1.0;
  std::size_t arg = 0;
  for (const auto& e : r.trace)
    if (e.val_f1 > best) {
      best = e.val_f1;
      arg = e.epoch;
    }
  CHECK(r.best_epoch == arg);
  std::vector<int> preds, labels;
  for (const auto& b : val) {
    preds.push_back(r.model.predict(b).label);
    labels.push_back(b.label);
  }
  CHECK(f1_accuracy(preds, labels).f1 == best);

  GLTransTrainConfig short_cfg = cfg;
  short_cfg.epochs = 5;
  const auto a = train_gltrans(train, val, small(), short_cfg), b = train_gltrans(train, val, small(), short_cfg);
  CHECK(glt_trace_csv(a.trace) == glt_trace_csv(b.trace));
  CHECK(a.model.params().checksum() == b.model.params().checksum());
  CHECK(glt_trace_csv(a.trace).rfind("epoch,train_loss,val_f1\n", 0) == 0);

  CHECK_THROWS_AS(train_gltrans({}, val, small(), short_cfg), InputError);
  CHECK_THROWS_AS(train_gltrans(train, {}, small(), short_cfg), InputError);
}

TEST_CASE("model and bag persistence") {
  std::mt19937_64 rng(12);
  GLTrans m(small(), 13);
  m.fit_standardization(separable(4, 14));
  const GLTrans back = GLTrans::from_bundle(decode_bundle(encode_bundle(m.to_bundle())));
  CHECK(back.config() == m.config());
  const Tensor x = randn({4, 6}, rng);
  CHECK(back.predict(x).probs == m.predict(x).probs);

  const auto bags = separable(3, 15);
  const auto path = std::filesystem::temp_directory_path() / "magpath_test_bags.magw";
  save_bags(path, bags);
  const auto loaded = load_bags(path);
  std::filesystem::remove(path);
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded[i].embeddings == bags[i].embeddings);
    CHECK(loaded[i].coords == bags[i].coords);
    CHECK(loaded[i].label == bags[i].label);
    CHECK(loaded[i].patient == bags[i].patient);
    CHECK(loaded[i].grid_side == bags[i].grid_side);
  }

  GLTransConfig bad = small();
  bad.heads = 3;
  CHECK_THROWS_AS(GLTrans(bad, 1), ConfigError);
}
