#include <doctest.h>

#include <cmath>

#include "magpath/encoder.hpp"
#include "magpath/mag.hpp"
#include "magpath/pipeline.hpp"
#include "support.hpp"

using namespace magpath;
using namespace magpath::test;

TEST_CASE("encode: pooled block is the spatial mean of the last map") {
  Encoder enc(EncoderConfig{}, 3);
  const BlockFeatureSet zero = enc.encode(Tensor({3, 32, 32}));
  CHECK(zero.size() == 4);
  std::mt19937_64 rng(1);
  const BlockFeatureSet f = enc.encode(uniform({3, 64, 64}, rng));
  const Tensor& last = f.maps.back();
  const std::size_t c = last.dim(0), hw = last.dim(1) * last.dim(2);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += last[k * hw + i];
    CHECK(std::abs(f.pooled[k] - s / static_cast<double>(hw)) < 1e-15);
  }
  // Spatial extents never grow with depth.
  for (std::size_t b = 1; b < f.maps.size(); ++b) CHECK(f.maps[b].dim(1) <= f.maps[b - 1].dim(1));
  CHECK_THROWS_AS(enc.encode(Tensor({3, 4, 4})), InputError);
}

TEST_CASE("pool_to_grid") {
  CHECK(pool_to_grid(Tensor({1, 4, 4}, 2.5), 2, 2) == Tensor({1, 2, 2}, 2.5));
  std::mt19937_64 rng(2);
  const Tensor m = randn({1, 4, 4}, rng);
  CHECK(pool_to_grid(m, 4, 4) == m);
  const Tensor p = pool_to_grid(m, 2, 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      const double mean = (m.at(0, 2 * r, 2 * c) + m.at(0, 2 * r, 2 * c + 1) + m.at(0, 2 * r + 1, 2 * c) +
                           m.at(0, 2 * r + 1, 2 * c + 1)) / 4.0;
      CHECK(p.at(0, r, c) == doctest::Approx(mean).epsilon(1e-15));
    }
  CHECK_THROWS_AS(pool_to_grid(m, 3, 3), ConfigError);
}

TEST_CASE("teacher and student share architecture; pooled block pairs align") {
  const Encoder teacher = make_teacher(EncoderConfig{}, 7);
  const Encoder student = make_student(teacher);
  CHECK(teacher.frozen());
  CHECK_FALSE(student.frozen());
  CHECK(teacher.params().checksum() == student.params().checksum());
  std::mt19937_64 rng(3);
  const BlockFeatureSet h = teacher.encode(uniform({3, 256, 256}, rng));
  const BlockFeatureSet l = student.encode(uniform({3, 64, 64}, rng));
  const BlockFeatureSet matched = pool_to_match(h, l);
  for (std::size_t b = 0; b < l.maps.size(); ++b) CHECK(matched.maps[b].shape() == l.maps[b].shape());

  Encoder twice = teacher;
  twice.freeze();
  twice.freeze();
  CHECK(twice.frozen());
}

namespace {
BlockFeatureSet random_set(std::mt19937_64& rng, double scale = 1.0) {
  BlockFeatureSet s;
  s.maps.push_back(randn({2, 4, 4}, rng, scale));
  s.maps.push_back(randn({3, 2, 2}, rng, scale));
  s.pooled = randn({3}, rng, scale);
  return s;
}
}  // namespace

TEST_CASE("mag_loss") {
  std::mt19937_64 rng(4);
  const BlockFeatureSet a = random_set(rng);
  CHECK(mag_loss(a, a) == 0.0);

  BlockFeatureSet ones, zeros;
  ones.maps.push_back(Tensor({1, 2, 2}, 1.0));
  ones.pooled = Tensor({1}, 1.0);
  zeros.maps.push_back(Tensor({1, 2, 2}));
  zeros.pooled = Tensor({1});
  CHECK(mag_loss(ones, zeros) == 2.0);

  const BlockFeatureSet b = random_set(rng);
  double oracle = 0.0;
  for (std::size_t m = 0; m < a.maps.size(); ++m) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.maps[m].size(); ++i) s += std::abs(a.maps[m][i] - b.maps[m][i]);
    oracle += s / static_cast<double>(a.maps[m].size());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.pooled.size(); ++i) s += std::abs(a.pooled[i] - b.pooled[i]);
  oracle += s / static_cast<double>(a.pooled.size());
  CHECK(std::abs(mag_loss(a, b) - oracle) < 1e-12);

  BlockFeatureSet short_set = a;
  short_set.maps.pop_back();
  CHECK_THROWS_AS(mag_loss(a, short_set), ContractError);
}

namespace {
EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.channels = {4, 8};
  c.strides = {2, 2};
  return c;
}

std::vector<PatchPair> tiny_pairs(std::size_t n, std::size_t ratio, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<PatchPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    PatchPair p;
    p.high = uniform({3, 16 * ratio, 16 * ratio}, rng);
    p.low = ratio == 1 ? p.high : downsample(p.high, ratio);
    p.coord = {i, 0};
    pairs.push_back(std::move(p));
  }
  return pairs;
}
}  // namespace

TEST_CASE("train_mag: fixed point, freeze contract, determinism") {
  const Encoder teacher = make_teacher(tiny_encoder(), 11);
  MagTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;

  SUBCASE("identical inputs at ratio 1 are a fixed point") {
    Encoder student = make_student(teacher);
    const auto trace = train_mag(tiny_pairs(6, 1, 1), teacher, student, cfg);
    CHECK(trace.front().mean_loss == 0.0);
    CHECK(student.params().checksum() == teacher.params().checksum());
  }
  SUBCASE("teacher untouched, student moves, trace reproducible") {
    const std::uint64_t before = teacher.params().checksum();
    const auto pairs = tiny_pairs(10, 4, 2);
    Encoder s1 = make_student(teacher), s2 = make_student(teacher);
    const auto t1 = train_mag(pairs, teacher, s1, cfg);
    const auto t2 = train_mag(pairs, teacher, s2, cfg);
    CHECK(teacher.params().checksum() == before);
    CHECK(s1.params().checksum() != before);
    CHECK(loss_trace_csv(t1) == loss_trace_csv(t2));
    CHECK(s1.params().checksum() == s2.params().checksum());
    CHECK(t1.back().mean_loss < t1.front().mean_loss);
    CHECK(loss_trace_csv(t1).rfind("epoch,mean_loss,lr\n", 0) == 0);
  }
  SUBCASE("errors") {
    Encoder student = make_student(teacher);
    CHECK_THROWS_AS(train_mag({}, teacher, student, cfg), InputError);
    Encoder loose(tiny_encoder(), 11);
    CHECK_THROWS_AS(train_mag(tiny_pairs(2, 4, 3), loose, student, cfg), StateError);
    MagTrainConfig bad = cfg;
    bad.decay = 1.5;
    CHECK_THROWS_AS(train_mag(tiny_pairs(2, 4, 3), teacher, student, bad), ConfigError);
  }
  SUBCASE("per-epoch multiplicative decay") {
    CHECK(cfg.lr_at(0) == cfg.lr);
    CHECK(cfg.lr_at(2) == doctest::Approx(cfg.lr * 0.81).epsilon(1e-15));
  }
}

TEST_CASE("extract_embeddings rows are pooled vectors in order") {
  const Encoder enc(tiny_encoder(), 5);
  std::mt19937_64 rng(6);
  std::vector<Tensor> imgs{uniform({3, 16, 16}, rng), uniform({3, 16, 16}, rng)};
  const Tensor e = extract_embeddings(enc, imgs);
  CHECK(e.shape() == Shape{2, 8});
  for (std::size_t k = 0; k < 2; ++k) {
    const Tensor pooled = enc.encode(imgs[k]).pooled;
    for (std::size_t j = 0; j < 8; ++j) CHECK(e.at(k, j) == pooled[j]);
  }
  CHECK(extract_embeddings(enc, imgs) == e);
}
