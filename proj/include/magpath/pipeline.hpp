#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "magpath/config.hpp"
#include "magpath/gltrans.hpp"
#include "magpath/mag.hpp"
#include "magpath/metrics.hpp"

namespace magpath {

struct SlideInfo {
  int slide_id = 0;
  int patient = 0;
  int label = 0;
};

/// Random access to a cohort one slide at a time, so a full cohort never has
/// to sit in memory (one 1024^2 pyramid is ~33 MB in double precision).
struct CohortSource {
  std::vector<SlideInfo> slides;
  std::function<SyntheticSlide(std::size_t)> load;

  std::size_t size() const { return slides.size(); }
  /// Slides regenerated on demand from (spec, params).
  static CohortSource generated(const CohortSpec& spec, const SynthParams& params);
  /// Slide directories under data_dir/slides, in id order.
  static CohortSource on_disk(const std::filesystem::path& data_dir);
  static CohortSource in_memory(const std::vector<SyntheticSlide>& slides);
};

/// Sorted distinct patient ids.
std::vector<int> patient_ids(const std::vector<SyntheticSlide>& slides);
std::vector<int> patient_ids(const CohortSource& source);

struct PatientSplit {
  std::vector<int> train, holdout;
};
/// Seeded shuffle; the last round(fraction * P) patients are held out.
PatientSplit holdout_split(std::vector<int> patients, double fraction, std::uint64_t seed);

/// Pairs from the given patients' slides at `low_magnification`, subsampled
/// without replacement (seeded reservoir) to at most `count`, returned in
/// slide then tiling order.
std::vector<PatchPair> sample_pairs(const CohortSource& source, const std::vector<int>& patients,
                                    int low_magnification, std::size_t count, std::uint64_t seed,
                                    const TilingConfig& tiling);

/// Frozen, randomly initialised teacher.
Encoder make_teacher(const EncoderConfig& cfg, std::uint64_t seed);
/// Trainable student starting as an exact copy of the teacher.
Encoder make_student(const Encoder& teacher);

Bag make_bag(const SyntheticSlide& slide, const Encoder& encoder, int magnification, const TilingConfig& tiling);
struct BagRequest {
  const Encoder* encoder = nullptr;
  int magnification = 20;
};
/// For each request, one bag per slide in source order. Every slide is
/// loaded once and serves all requests; slides are processed in parallel.
std::vector<std::vector<Bag>> make_bags(const CohortSource& source, const std::vector<BagRequest>& requests,
                                        const TilingConfig& tiling);
std::vector<Bag> make_bags(const CohortSource& source, const Encoder& encoder, int magnification,
                           const TilingConfig& tiling);
/// Bags whose patient is listed, original order kept.
std::vector<Bag> select_bags(const std::vector<Bag>& bags, const std::vector<int>& patients);

struct FoldResult {
  std::size_t fold = 0;
  // auc and ci are NaN when the test fold holds a single class.
  double auc = 0.0, accuracy = 0.0, f1 = 0.0;
  Interval ci;
  std::size_t best_epoch = 0;
  std::vector<GltEpoch> trace;
  std::vector<int> slide_ids, labels, preds;
  std::vector<double> probs;  // P(class 1)
  std::vector<PredictionOutput> outputs;
  std::vector<const Bag*> test_bags;
};

/// Seed used for fold `index`: seed * 1000003 + index.
std::uint64_t fold_seed(std::uint64_t seed, std::size_t index);
/// GLTrans trained on the fold's train patients, checkpoint picked on its
/// validation patients.
GLTransTrainResult train_fold(const std::vector<Bag>& bags, const Fold& fold, std::size_t index,
                              const GLTransConfig& model_cfg, GLTransTrainConfig train_cfg);

/// Trains on the fold's train patients, selects by validation F1, scores the
/// test patients' slides.
FoldResult run_fold(const std::vector<Bag>& bags, const Fold& fold, std::size_t index, const GLTransConfig& model_cfg,
                    GLTransTrainConfig train_cfg, std::size_t bootstrap);

struct CvResult {
  std::vector<FoldResult> folds;
  // mean_auc averages the folds where AUC is defined.
  double mean_auc = 0.0, mean_accuracy = 0.0, mean_f1 = 0.0;
  Interval pooled_ci;  // bootstrap over every test prediction
};

CvResult cross_validate(const std::vector<Bag>& bags, const SplitPlan& plan, const GLTransConfig& model_cfg,
                        const GLTransTrainConfig& train_cfg, std::size_t bootstrap,
                        std::optional<std::size_t> only_fold = std::nullopt);

/// fold,auc,accuracy,f1,ci_low,ci_high,n_test,best_epoch rows plus a final
/// "mean" row.
std::string eval_csv(const CvResult& cv);


void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

}  // namespace magpath
