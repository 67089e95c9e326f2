#include "magpath/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace magpath {

namespace {

void check_pairs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ContractError("metrics: " + std::to_string(scores.size()) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y != 0 && y != 1) throw ContractError("metrics: labels must be 0 or 1");
}

// splitmix64 finaliser; derives independent replicate seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_pairs(scores, labels);
  const std::size_t n = scores.size();
  std::size_t npos = 0;
  for (int y : labels) npos += static_cast<std::size_t>(y);
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) throw UndefinedMetric("auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  // Midranks (1-based); rank sums stay exact in double for any realistic n.
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q)
      if (labels[order[q]] == 1) rank_sum_pos += mid;
    i = j + 1;
  }
  const double p = static_cast<double>(npos);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(nneg));
}

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels,
                      std::size_t replicates, double level, std::uint64_t seed) {
  check_pairs(scores, labels);
  if (replicates == 0) throw ConfigError("bootstrap: need at least one replicate");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap: level must lie in (0, 1)");
  (void)auc(scores, labels);  // both classes present

  const std::size_t n = scores.size();
  std::vector<double> stats(replicates);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < static_cast<long>(replicates); ++r) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (;;) {
      int pos = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = pick(rng);
        s[i] = scores[k];
        y[i] = labels[k];
        pos += y[i];
      }
      if (pos > 0 && pos < static_cast<int>(n)) break;
    }
    stats[static_cast<std::size_t>(r)] = auc(s, y);
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = (1.0 - level) / 2.0;
  return {quantile_sorted(stats, alpha), quantile_sorted(stats, 1.0 - alpha)};
}

F1Accuracy f1_accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ContractError("f1_accuracy: length mismatch");
  if (preds.empty()) throw ContractError("f1_accuracy: empty input");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == 1, y = labels[i] == 1;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
    tn += !p && !y;
  }
  F1Accuracy out;
  out.accuracy = static_cast<double>(tp + tn) / static_cast<double>(preds.size());
  const double denom = static_cast<double>(2 * tp + fp + fn);
  out.f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  return out;
}

Similarity feature_similarity(const Tensor& low, const Tensor& high) {
  expect_rank(low, 2, "feature_similarity low");
  expect_shape(high, low.shape(), "feature_similarity high");
  const std::size_t n = low.dim(0), d = low.dim(1);
  Similarity out;
  out.per_row.resize(n);
  const double root_d = std::sqrt(static_cast<double>(d));
  for (std::size_t k = 0; k < n; ++k) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = low.at(k, j) - high.at(k, j);
      ss += diff * diff;
    }
    out.per_row[k] = 1.0 / (1.0 + std::sqrt(ss) / root_d);
    out.mean += out.per_row[k];
  }
  out.mean /= static_cast<double>(n);
  return out;
}

KMeansResult kmeans(const Tensor& features, std::size_t k, std::uint64_t seed) {
  expect_rank(features, 2, "kmeans features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (k == 0) throw ConfigError("kmeans: k must be positive");
  if (n < k)
    throw InputError("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) +
                     " clusters");
  constexpr std::size_t kMaxIter = 100;
  constexpr double kTol = 1e-9;

  auto dist2 = [&](std::size_t i, const Tensor& c, std::size_t j) {
    double s = 0.0;
    for (std::size_t e = 0; e < d; ++e) {
      const double diff = features.at(i, e) - c.at(j, e);
      s += diff * diff;
    }
    return s;
  };

  // k-means++ seeding: D^2-weighted draws; falls back to the farthest point
  // when all weights vanish (duplicate points).
  std::mt19937_64 rng(seed);
  Tensor centroids({k, d});
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t e = 0; e < d; ++e) centroids.at(0, e) = features.at(first, e);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(i, centroids, c - 1));
      total += best[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      std::size_t last_positive = 0;
      bool found = false;
      for (std::size_t i = 0; i < n && !found; ++i) {
        if (best[i] <= 0.0) continue;
        last_positive = i;
        if (r < best[i]) {
          chosen = i;
          found = true;
        }
        r -= best[i];
      }
      if (!found) chosen = last_positive;  // rounding at the upper end
    } else {
      chosen = static_cast<std::size_t>(std::max_element(best.begin(), best.end()) - best.begin());
    }
    for (std::size_t e = 0; e < d; ++e) centroids.at(c, e) = features.at(chosen, e);
  }

  KMeansResult out;
  out.labels.assign(n, 0);
  for (std::size_t it = 0; it < kMaxIter; ++it) {
    out.iterations = it + 1;
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(n); ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = dist2(static_cast<std::size_t>(i), centroids, c);
        if (dd < bd) {
          bd = dd;
          arg = c;
        }
      }
      out.labels[static_cast<std::size_t>(i)] = arg;
    }
    Tensor next({k, d});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[out.labels[i]];
      for (std::size_t e = 0; e < d; ++e) next.at(out.labels[i], e) += features.at(i, e);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t e = 0; e < d; ++e) {
        // Empty clusters keep their previous centroid.
        next.at(c, e) = counts[c] ? next.at(c, e) / static_cast<double>(counts[c]) : centroids.at(c, e);
        s += (next.at(c, e) - centroids.at(c, e)) * (next.at(c, e) - centroids.at(c, e));
      }
      shift = std::max(shift, std::sqrt(s));
    }
    centroids = std::move(next);
    if (shift < kTol) break;
  }
  for (std::size_t i = 0; i < n; ++i) out.inertia += dist2(i, centroids, out.labels[i]);
  out.centroids = std::move(centroids);
  return out;
}

std::string render_heatmap(std::span<const double> scores, std::span<const GridCoord> coords,
                           std::size_t rows, std::size_t cols) {
  if (scores.size() != coords.size()) throw ContractError("heatmap: scores/coords length mismatch");
  if (rows == 0 || cols == 0) throw InputError("heatmap: empty grid");
  for (const auto& c : coords)
    if (c.row >= rows || c.col >= cols)
      throw InputError("heatmap: coordinate (" + std::to_string(c.row) + "," +
                       std::to_string(c.col) + ") outside " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " grid");
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + rows * cols, '\0');
  if (scores.empty()) return out;
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  const double range = *mx - *mn;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double v = range > 0.0 ? (scores[i] - *mn) / range : 1.0;
    const auto px = static_cast<unsigned char>(1 + std::lround(254.0 * v));
    out[header + coords[i].row * cols + coords[i].col] = static_cast<char>(px);
  }
  return out;
}

void heatmap_export(std::span<const double> scores, std::span<const GridCoord> coords,
                    std::size_t rows, std::size_t cols, const std::filesystem::path& path) {
  const std::string bytes = render_heatmap(scores, coords, rows, cols);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("heatmap: cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CostReport cost_model(double pixels, double bytes_per_pixel, double compression_ratio,
                      const ChannelModel& channel, int magnification) {
  if (!(pixels > 0.0) || !(bytes_per_pixel > 0.0) || !(compression_ratio > 0.0))
    throw ConfigError("cost_model: pixels, bytes per pixel and compression ratio must be > 0");
  channel.validate();
  CostReport r;
  r.magnification = magnification;
  r.gigapixels = pixels / 1e9;
  r.stored_bytes = pixels * bytes_per_pixel / compression_ratio;
  r.transfer_s = r.stored_bytes * 8.0 / channel.bandwidth_bps + channel.latency_s;
  return r;
}

}  // namespace magpath
