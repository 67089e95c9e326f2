#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "magpath/metrics.hpp"
#include "magpath/tensor.hpp"

namespace magpath {

/// Pyramid levels, highest magnification first.
inline constexpr std::array<int, 3> kMagnifications{20, 10, 5};

/// Downsampling factor of a level relative to 20x. Throws InputError for
/// anything other than 20, 10 or 5.
std::size_t level_factor(int magnification);

enum class TissueLayout { Random, Full, LeftHalf };

/// Appearance model of the synthetic cohort. Class 0 and class 1 differ only
/// in the orientation of a fine periodic texture. Its frequency sits where
/// 4x area averaging attenuates it (to roughly a quarter) without erasing
/// it, while coarse random "blob" structure survives downsampling intact and
/// dominates low-magnification contrast.
struct SynthParams {
  std::size_t base_size = 1024;
  TissueLayout layout = TissueLayout::Random;
  double min_tissue_fraction = 0.3;

  double texture_frequency = 0.325;  // cycles per base pixel
  double texture_amplitude = 0.12;
  std::array<double, 2> class_angle_deg{0.0, 90.0};
  double angle_jitter_deg = 5.0;

  std::size_t blob_components = 6;
  double blob_amplitude = 0.20;
  double blob_period_min = 96.0;  // base pixels
  double blob_period_max = 256.0;

  double noise_amplitude = 0.03;  // uniform, per pixel and channel
  double stain_jitter = 0.06;     // per slide and channel
  double background_level = 0.93;

  void validate() const;
};

struct SyntheticSlide {
  int slide_id = 0;
  int patient = 0;
  int label = 0;
  std::uint64_t seed = 0;
  std::array<Tensor, 3> levels;      // [3,S,S] at 20x, 10x, 5x
  std::vector<std::uint8_t> mask;    // base resolution, 1 = tissue

  const Tensor& level(int magnification) const;
  std::size_t base_size() const { return levels[0].dim(1); }
  double tissue_fraction() const;
};

/// Deterministic in (label, patient, seed, params). The base level is
/// quantised to 8-bit steps; lower levels are exact block means of it.
SyntheticSlide generate_slide(int label, int patient, std::uint64_t seed, const SynthParams& params,
                              int slide_id = 0);

/// Exact area-average downsampling of image[C,H,W] by an integer factor.
Tensor downsample(const Tensor& image, std::size_t factor);

/// Pixels whose channel-mean intensity is below the threshold are tissue.
std::vector<std::uint8_t> tissue_mask(const Tensor& base, double threshold);

/// sum(gx^2 - gy^2) / sum(gx^2 + gy^2) over tissue pixels of the channel-mean
/// image, using forward differences. Positive for texture varying along x.
double gradient_orientation_statistic(const Tensor& image, const std::vector<std::uint8_t>& mask);

struct TilingConfig {
  std::size_t patch20 = 256;              // 128 at 10x, 64 at 5x
  double background_threshold = 0.85;    // mean intensity separating tissue
  double min_tissue_fraction = 0.5;       // per grid cell

  std::size_t patch_size(int magnification) const { return patch20 / level_factor(magnification); }
  void validate() const;
};

struct Patch {
  Tensor image;
  GridCoord coord;
};

/// Grid cells kept by the tissue test, row-major. Decided on the base mask so
/// every magnification yields the same coordinates.
std::vector<GridCoord> kept_cells(const SyntheticSlide& slide, const TilingConfig& cfg);
std::size_t grid_side(const SyntheticSlide& slide, const TilingConfig& cfg);
/// Same tissue test applied to a single level image, for callers that only
/// hold one magnification.
std::vector<GridCoord> kept_cells(const Tensor& level, std::size_t patch, const TilingConfig& cfg);

/// Non-overlapping tiling of one level, background cells dropped.
std::vector<Patch> tile(const SyntheticSlide& slide, int magnification, const TilingConfig& cfg);
std::vector<Patch> tile(const Tensor& level, const std::vector<GridCoord>& cells, std::size_t patch);

struct PatchPair {
  Tensor high;  // 20x
  Tensor low;   // 10x or 5x, same content
  int slide_id = 0;
  GridCoord coord;
};
std::vector<PatchPair> make_pairs(const SyntheticSlide& slide, int low_magnification,
                                  const TilingConfig& cfg);

struct Fold {
  std::vector<int> train, val, test;
};
struct SplitPlan {
  std::vector<Fold> folds;
};

/// Patient-level k-fold plan. Test sets rotate through k near-equal chunks
/// of a seeded shuffle; the validation set takes the next patients in cyclic
/// order; the rest train. Throws InputError with fewer than 3k patients.
SplitPlan make_splits(std::vector<int> patients, std::size_t k, double train_ratio,
                      double val_ratio, double test_ratio, std::uint64_t seed);

struct CohortSpec {
  std::size_t slides = 200;
  std::size_t patients = 100;
  std::uint64_t seed = 42;
};
/// Patients alternate labels; slides are assigned to patients round-robin.
/// Slides are generated in parallel with per-slide seeds.
std::vector<SyntheticSlide> generate_cohort(const CohortSpec& spec, const SynthParams& params);
std::uint64_t slide_seed(std::uint64_t cohort_seed, int slide_id);

// On-disk layout: one directory per slide holding level20.ppm, level10.ppm,
// level5.ppm, mask.pgm and meta.txt (key=value).
void save_slide(const std::filesystem::path& dir, const SyntheticSlide& slide);
/// Reads the base level and mask; lower levels are rebuilt from the base.
SyntheticSlide load_slide(const std::filesystem::path& dir);
std::filesystem::path slide_dir(const std::filesystem::path& data_dir, int slide_id);

void save_split_plan(const std::filesystem::path& path, const SplitPlan& plan);
SplitPlan load_split_plan(const std::filesystem::path& path);

}  // namespace magpath
