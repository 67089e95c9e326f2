#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "magpath/channel.hpp"
#include "magpath/tensor.hpp"

namespace magpath {

/// Raised when a metric is undefined for the given labels (e.g. one class).
struct UndefinedMetric : InputError {
  using InputError::InputError;
};

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
double auc(std::span<const double> scores, std::span<const int> labels);

struct Interval {
  double low = 0.0, high = 0.0;
};

/// Percentile bootstrap interval of the AUC over `replicates` resamples with
/// replacement. Resamples missing a class are redrawn. Replicate r uses its
/// own generator derived from (seed, r), so the result does not depend on
/// how replicates are scheduled.
Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels,
                      std::size_t replicates = 500, double level = 0.95, std::uint64_t seed = 42);

struct F1Accuracy {
  double f1 = 0.0, accuracy = 0.0;
};
/// Positive class is 1; F1 is 0 when precision + recall is 0.
F1Accuracy f1_accuracy(std::span<const int> preds, std::span<const int> labels);

struct Similarity {
  std::vector<double> per_row;
  double mean = 0.0;
};
/// sim_k = 1 / (1 + ||low_k - high_k|| / sqrt(d)), rows matched by index.
Similarity feature_similarity(const Tensor& low, const Tensor& high);

struct KMeansResult {
  std::vector<std::size_t> labels;
  Tensor centroids;  // [k,d]
  double inertia = 0.0;
  std::size_t iterations = 0;
};
/// Lloyd iterations from k-means++ seeding; stops after 100 iterations or when
/// no centroid moves more than 1e-9.
KMeansResult kmeans(const Tensor& features, std::size_t k, std::uint64_t seed);

struct GridCoord {
  std::size_t row = 0, col = 0;
  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

/// Grayscale PGM of min-max normalised scores placed at their grid cells.
/// Tissue cells map to [1,255] (constant scores -> 255); background is 0.
std::string render_heatmap(std::span<const double> scores, std::span<const GridCoord> coords,
                           std::size_t rows, std::size_t cols);
void heatmap_export(std::span<const double> scores, std::span<const GridCoord> coords,
                    std::size_t rows, std::size_t cols, const std::filesystem::path& path);

struct CostReport {
  int magnification = 0;
  double gigapixels = 0.0;
  double stored_bytes = 0.0;
  double transfer_s = 0.0;
  double inference_s = 0.0;
};

/// stored_bytes = pixels * bytes_per_pixel / compression_ratio,
/// transfer_s = stored_bytes * 8 / bandwidth + latency.
CostReport cost_model(double pixels, double bytes_per_pixel, double compression_ratio,
                      const ChannelModel& channel, int magnification = 0);

}  // namespace magpath
