#include <doctest.h>

#include <filesystem>
#include <set>

#include "magpath/pipeline.hpp"

using namespace magpath;
namespace fs = std::filesystem;

namespace {

SynthParams small_params() {
  SynthParams p;
  p.base_size = 256;
  return p;
}

TilingConfig small_tiling() {
  TilingConfig t;
  t.patch20 = 64;
  return t;
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.channels = {4, 8};
  e.strides = {2, 2};
  return e;
}

}  // namespace

TEST_CASE("cohort sources agree") {
  const CohortSpec spec{12, 6, 5};
  const CohortSource gen = CohortSource::generated(spec, small_params());
  REQUIRE(gen.size() == 12);
  CHECK(patient_ids(gen) == std::vector<int>{0, 1, 2, 3, 4, 5});
  for (std::size_t i = 0; i < gen.size(); ++i) {
    CHECK(gen.slides[i].slide_id == static_cast<int>(i));
    CHECK(gen.slides[i].label == gen.slides[i].patient % 2);
  }

  const std::vector<SyntheticSlide> all = generate_cohort(spec, small_params());
  const fs::path dir = fs::temp_directory_path() / "magpath_test_pipeline";
  fs::remove_all(dir);
  for (const auto& s : all) save_slide(slide_dir(dir, s.slide_id), s);
  const CohortSource disk = CohortSource::on_disk(dir);
  const CohortSource mem = CohortSource::in_memory(all);
  REQUIRE(disk.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const SyntheticSlide a = gen.load(i), b = disk.load(i), c = mem.load(i);
    CHECK(disk.slides[i].patient == gen.slides[i].patient);
    CHECK(disk.slides[i].label == gen.slides[i].label);
    CHECK(a.level(20) == b.level(20));
    CHECK(a.level(5) == c.level(5));
  }
  CHECK_THROWS_AS(CohortSource::on_disk(dir / "nowhere"), InputError);
  CHECK_THROWS_AS(CohortSource::generated({3, 6, 1}, small_params()), InputError);
  fs::remove_all(dir);
}

TEST_CASE("holdout and pair sampling") {
  const PatientSplit split = holdout_split({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.2, 3);
  CHECK(split.holdout.size() == 2);
  CHECK(split.train.size() == 8);
  std::set<int> all(split.train.begin(), split.train.end());
  for (int h : split.holdout) CHECK(all.insert(h).second);

  const CohortSource src = CohortSource::generated({8, 4, 2}, small_params());
  const TilingConfig tiling = small_tiling();
  const std::vector<int> patients{0, 2, 3};
  std::size_t available = 0;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (src.slides[i].patient != 1) available += kept_cells(src.load(i), tiling).size();

  const auto a = sample_pairs(src, patients, 5, 10, 11, tiling);
  const auto b = sample_pairs(src, patients, 5, 10, 11, tiling);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].high == b[i].high);
    CHECK(src.slides[static_cast<std::size_t>(a[i].slide_id)].patient != 1);
    if (i > 0) {
      const auto& p = a[i - 1];
      CHECK((p.slide_id < a[i].slide_id || (p.slide_id == a[i].slide_id && p.coord < a[i].coord)));
    }
  }
  CHECK(sample_pairs(src, patients, 5, 100000, 11, tiling).size() == available);
  CHECK_THROWS_AS(sample_pairs(src, patients, 5, 0, 11, tiling), ConfigError);
  CHECK_THROWS_AS(sample_pairs(src, {99}, 5, 5, 11, tiling), InputError);
}

TEST_CASE("bag extraction") {
  const CohortSource src = CohortSource::generated({6, 3, 4}, small_params());
  const TilingConfig tiling = small_tiling();
  const Encoder teacher = make_teacher(tiny_encoder(), 1);
  CHECK(teacher.frozen());
  Encoder student = make_student(teacher);
  CHECK_FALSE(student.frozen());
  CHECK(student.params().checksum() == teacher.params().checksum());

  const auto multi = make_bags(src, {{&teacher, 20}, {&teacher, 5}}, tiling);
  REQUIRE(multi.size() == 2);
  const auto b20 = make_bags(src, teacher, 20, tiling);
  REQUIRE(b20.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(multi[0][i].embeddings == b20[i].embeddings);
    CHECK(multi[1][i].coords == b20[i].coords);
    CHECK(b20[i].embeddings.dim(1) == 8);
    CHECK(b20[i].slide_id == static_cast<int>(i));
    CHECK(b20[i].grid_side == 4);
    const Bag direct = make_bag(src.load(i), teacher, 20, tiling);
    CHECK(direct.embeddings == b20[i].embeddings);
  }
  const auto picked = select_bags(b20, {1});
  REQUIRE(picked.size() == 2);
  CHECK(picked[0].slide_id == 1);
  CHECK(picked[1].slide_id == 4);
}

TEST_CASE("cross validation bookkeeping") {
  const CohortSource src = CohortSource::generated({40, 30, 6}, small_params());
  const TilingConfig tiling = small_tiling();
  const Encoder teacher = make_teacher(tiny_encoder(), 2);
  const auto bags = make_bags(src, teacher, 20, tiling);
  const SplitPlan plan = make_splits(patient_ids(src), 10, 0.8, 0.1, 0.1, 42);
  GLTransConfig gc;
  gc.d_in = 8;
  gc.d_model = 8;
  gc.heads = 2;
  gc.layers = 1;
  GLTransTrainConfig tc;
  tc.epochs = 2;

  CHECK(fold_seed(42, 3) == 42ull * 1000003ull + 3ull);
  const CvResult cv = cross_validate(bags, plan, gc, tc, 20);
  REQUIRE(cv.folds.size() == 10);
  std::multiset<int> tested;
  double mean = 0.0, n = 0.0;
  for (const auto& f : cv.folds) {
    tested.insert(f.slide_ids.begin(), f.slide_ids.end());
    CHECK(f.trace.size() == 2);
    if (!std::isnan(f.auc)) {
      mean += f.auc;
      n += 1.0;
    }
  }
  for (int id = 0; id < 40; ++id) CHECK(tested.count(id) == 1);
  CHECK(cv.mean_auc == doctest::Approx(mean / n).epsilon(1e-12));

  const CvResult one = cross_validate(bags, plan, gc, tc, 20, 4);
  REQUIRE(one.folds.size() == 1);
  CHECK(one.folds[0].probs == cv.folds[4].probs);
  CHECK(eval_csv(cv).rfind("fold,auc,accuracy,f1,ci_low,ci_high,n_test,best_epoch\n", 0) == 0);
}
