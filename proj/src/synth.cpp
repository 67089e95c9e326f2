#include "magpath/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "magpath/netpbm.hpp"

namespace magpath {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Plane wave cos(a*x + b*y + phase) evaluated through separable row/column tables.
struct PlaneWave {
  std::vector<double> cx, sx, cy, sy;

  PlaneWave(std::size_t size, double a, double b, double phase) : cx(size), sx(size), cy(size), sy(size) {
    for (std::size_t i = 0; i < size; ++i) {
      const double t = static_cast<double>(i);
      cx[i] = std::cos(a * t + phase);
      sx[i] = std::sin(a * t + phase);
      cy[i] = std::cos(b * t);
      sy[i] = std::sin(b * t);
    }
  }
  double operator()(std::size_t x, std::size_t y) const { return cx[x] * cy[y] - sx[x] * sy[y]; }
};

std::vector<std::uint8_t> plant_tissue(std::size_t size, const SynthParams& p, std::mt19937_64& rng) {
  std::vector<std::uint8_t> region(size * size, 0);
  if (p.layout == TissueLayout::Full) {
    std::fill(region.begin(), region.end(), 1);
    return region;
  }
  if (p.layout == TissueLayout::LeftHalf) {
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size / 2; ++x) region[y * size + x] = 1;
    return region;
  }
  std::uniform_real_distribution<double> centre(0.2, 0.8), radius(0.2, 0.45), angle(0.0, std::numbers::pi);
  const double s = static_cast<double>(size);
  std::size_t covered = 0;
  for (int ellipses = 0; ellipses < 3 || static_cast<double>(covered) < p.min_tissue_fraction * s * s;
       ++ellipses) {
    const double cxp = centre(rng) * s, cyp = centre(rng) * s;
    const double rx = radius(rng) * s, ry = radius(rng) * s, rot = angle(rng);
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - cxp, dy = static_cast<double>(y) - cyp;
        const double u = (dx * cr + dy * sr) / rx, v = (-dx * sr + dy * cr) / ry;
        auto& cell = region[y * size + x];
        if (!cell && u * u + v * v <= 1.0) {
          cell = 1;
          ++covered;
        }
      }
  }
  return region;
}

double quantise(double v) { return static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0; }

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

std::size_t level_factor(int magnification) {
  switch (magnification) {
    case 20: return 1;
    case 10: return 2;
    case 5: return 4;
    default: throw InputError("unknown magnification " + std::to_string(magnification) + "x");
  }
}

void SynthParams::validate() const {
  if (base_size == 0 || base_size % 4 != 0) throw ConfigError("synth: base size must be a positive multiple of 4");
  if (min_tissue_fraction < 0.2 || min_tissue_fraction > 1.0)
    throw ConfigError("synth: minimum tissue fraction must lie in [0.2, 1]");
  if (blob_period_min <= 0.0 || blob_period_max < blob_period_min)
    throw ConfigError("synth: invalid blob period range");
}

const Tensor& SyntheticSlide::level(int magnification) const {
  switch (magnification) {
    case 20: return levels[0];
    case 10: return levels[1];
    case 5: return levels[2];
    default: throw InputError("slide has no " + std::to_string(magnification) + "x level");
  }
}

double SyntheticSlide::tissue_fraction() const {
  std::size_t n = 0;
  for (auto m : mask) n += m;
  return static_cast<double>(n) / static_cast<double>(mask.size());
}

Tensor downsample(const Tensor& image, std::size_t factor) {
  expect_rank(image, 3, "downsample input");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (factor == 0 || h % factor != 0 || w % factor != 0)
    throw ConfigError("downsample: factor " + std::to_string(factor) + " does not divide " +
                      shape_str(image.shape()));
  const std::size_t ho = h / factor, wo = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) s += image.at(ch, y * factor + dy, x * factor + dx);
        out.at(ch, y, x) = s * inv;
      }
  return out;
}

std::vector<std::uint8_t> tissue_mask(const Tensor& base, double threshold) {
  expect_rank(base, 3, "tissue_mask input");
  const std::size_t c = base.dim(0), area = base.dim(1) * base.dim(2);
  std::vector<std::uint8_t> mask(area);
  for (std::size_t q = 0; q < area; ++q) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) s += base[ch * area + q];
    mask[q] = s / static_cast<double>(c) < threshold ? 1 : 0;
  }
  return mask;
}

double gradient_orientation_statistic(const Tensor& image, const std::vector<std::uint8_t>& mask) {
  expect_rank(image, 3, "orientation statistic input");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (mask.size() != h * w) throw ContractError("orientation statistic: mask size mismatch");
  auto gray = [&](std::size_t y, std::size_t x) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) s += image.at(ch, y, x);
    return s / static_cast<double>(c);
  };
  double num = 0.0, den = 0.0;
  for (std::size_t y = 0; y + 1 < h; ++y)
    for (std::size_t x = 0; x + 1 < w; ++x) {
      if (!mask[y * w + x] || !mask[y * w + x + 1] || !mask[(y + 1) * w + x]) continue;
      const double g = gray(y, x);
      const double gx = gray(y, x + 1) - g, gy = gray(y + 1, x) - g;
      num += gx * gx - gy * gy;
      den += gx * gx + gy * gy;
    }
  return den > 0.0 ? num / den : 0.0;
}

SyntheticSlide generate_slide(int label, int patient, std::uint64_t seed, const SynthParams& p,
                              int slide_id) {
  p.validate();
  if (label != 0 && label != 1) throw InputError("synth: label must be 0 or 1");
  const std::size_t n = p.base_size;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const std::vector<std::uint8_t> region = plant_tissue(n, p, rng);

  const std::array<double, 3> stain_base{0.62, 0.40, 0.58};
  const std::array<double, 3> blob_colour{0.55, 0.85, 0.45};
  const std::array<double, 3> texture_colour{0.80, 0.90, 0.70};
  std::array<double, 3> stain{};
  for (std::size_t ch = 0; ch < 3; ++ch) stain[ch] = stain_base[ch] + uniform(-p.stain_jitter, p.stain_jitter);

  std::vector<PlaneWave> blobs;
  std::vector<double> blob_weight;
  double weight_ss = 0.0;
  for (std::size_t k = 0; k < p.blob_components; ++k) {
    const double period = uniform(p.blob_period_min, p.blob_period_max);
    const double dir = uniform(0.0, kTwoPi);
    blobs.emplace_back(n, kTwoPi * std::cos(dir) / period, kTwoPi * std::sin(dir) / period, uniform(0.0, kTwoPi));
    blob_weight.push_back(uniform(0.5, 1.0));
    weight_ss += blob_weight.back() * blob_weight.back();
  }
  const double blob_norm = weight_ss > 0.0 ? 1.0 / std::sqrt(weight_ss / 2.0) : 0.0;

  const double theta = (p.class_angle_deg[static_cast<std::size_t>(label)] +
                        uniform(-p.angle_jitter_deg, p.angle_jitter_deg)) * std::numbers::pi / 180.0;
  const PlaneWave texture(n, kTwoPi * p.texture_frequency * std::cos(theta),
                          kTwoPi * p.texture_frequency * std::sin(theta), uniform(0.0, kTwoPi));
  const double env_period = uniform(200.0, 400.0), env_dir = uniform(0.0, kTwoPi);
  const PlaneWave envelope(n, kTwoPi * std::cos(env_dir) / env_period,
                           kTwoPi * std::sin(env_dir) / env_period, uniform(0.0, kTwoPi));

  Tensor base({3, n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      if (!region[y * n + x]) {
        for (std::size_t ch = 0; ch < 3; ++ch)
          base.at(ch, y, x) = quantise(p.background_level + uniform(-0.02, 0.02));
        continue;
      }
      double b = 0.0;
      for (std::size_t k = 0; k < blobs.size(); ++k) b += blob_weight[k] * blobs[k](x, y);
      b *= blob_norm;
      const double t = (0.7 + 0.3 * envelope(x, y)) * texture(x, y);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = stain[ch] - p.blob_amplitude * blob_colour[ch] * b -
                         p.texture_amplitude * texture_colour[ch] * t +
                         uniform(-p.noise_amplitude, p.noise_amplitude);
        base.at(ch, y, x) = quantise(std::clamp(v, 0.02, 0.80));
      }
    }

  SyntheticSlide slide;
  slide.slide_id = slide_id;
  slide.patient = patient;
  slide.label = label;
  slide.seed = seed;
  slide.levels[1] = downsample(base, 2);
  slide.levels[2] = downsample(base, 4);
  slide.levels[0] = std::move(base);
  slide.mask = tissue_mask(slide.levels[0], TilingConfig{}.background_threshold);
  return slide;
}

void TilingConfig::validate() const {
  if (patch20 == 0 || patch20 % 4 != 0) throw ConfigError("tiling: 20x patch size must be a multiple of 4");
  if (min_tissue_fraction < 0.0 || min_tissue_fraction > 1.0)
    throw ConfigError("tiling: minimum tissue fraction must lie in [0, 1]");
}

std::size_t grid_side(const SyntheticSlide& slide, const TilingConfig& cfg) {
  cfg.validate();
  return slide.base_size() / cfg.patch20;
}

std::vector<GridCoord> kept_cells(const Tensor& level, std::size_t patch, const TilingConfig& cfg) {
  cfg.validate();
  expect_rank(level, 3, "kept_cells level");
  if (patch == 0) throw ConfigError("kept_cells: patch size must be positive");
  const std::size_t h = level.dim(1), w = level.dim(2);
  const std::vector<std::uint8_t> mask = tissue_mask(level, cfg.background_threshold);
  std::vector<GridCoord> kept;
  for (std::size_t r = 0; r < h / patch; ++r)
    for (std::size_t c = 0; c < w / patch; ++c) {
      std::size_t tissue = 0;
      for (std::size_t y = r * patch; y < (r + 1) * patch; ++y)
        for (std::size_t x = c * patch; x < (c + 1) * patch; ++x) tissue += mask[y * w + x];
      if (static_cast<double>(tissue) >= cfg.min_tissue_fraction * static_cast<double>(patch * patch))
        kept.push_back({r, c});
    }
  return kept;
}

std::vector<GridCoord> kept_cells(const SyntheticSlide& slide, const TilingConfig& cfg) {
  return kept_cells(slide.levels[0], cfg.patch20, cfg);
}

std::vector<Patch> tile(const Tensor& level, const std::vector<GridCoord>& cells, std::size_t patch) {
  expect_rank(level, 3, "tile level");
  std::vector<Patch> out;
  for (const GridCoord& g : cells) {
    if ((g.row + 1) * patch > level.dim(1) || (g.col + 1) * patch > level.dim(2))
      throw InputError("tile: cell (" + std::to_string(g.row) + "," + std::to_string(g.col) + ") outside image");
    Tensor t({level.dim(0), patch, patch});
    for (std::size_t ch = 0; ch < level.dim(0); ++ch)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) t.at(ch, y, x) = level.at(ch, g.row * patch + y, g.col * patch + x);
    out.push_back({std::move(t), g});
  }
  return out;
}

std::vector<Patch> tile(const SyntheticSlide& slide, int magnification, const TilingConfig& cfg) {
  return tile(slide.level(magnification), kept_cells(slide, cfg), cfg.patch_size(magnification));
}

std::vector<PatchPair> make_pairs(const SyntheticSlide& slide, int low_magnification, const TilingConfig& cfg) {
  if (low_magnification == 20) throw InputError("make_pairs: low magnification must be 10x or 5x");
  std::vector<Patch> high = tile(slide, 20, cfg);
  std::vector<Patch> low = tile(slide, low_magnification, cfg);
  std::vector<PatchPair> pairs;
  pairs.reserve(high.size());
  for (std::size_t i = 0; i < high.size(); ++i)
    pairs.push_back({std::move(high[i].image), std::move(low[i].image), slide.slide_id, high[i].coord});
  return pairs;
}

SplitPlan make_splits(std::vector<int> patients, std::size_t k, double train_ratio, double val_ratio,
                      double test_ratio, std::uint64_t seed) {
  if (k < 2) throw ConfigError("splits: need at least 2 folds");
  if (train_ratio <= 0.0 || val_ratio <= 0.0 || test_ratio <= 0.0 ||
      std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    throw ConfigError("splits: ratios must be positive and sum to 1");
  std::sort(patients.begin(), patients.end());
  if (std::adjacent_find(patients.begin(), patients.end()) != patients.end())
    throw InputError("splits: duplicate patient ids");
  const std::size_t n = patients.size();
  if (n < 3 * k)
    throw InputError("splits: too few patients (" + std::to_string(n) + ") for " + std::to_string(k) +
                     " folds; need at least " + std::to_string(3 * k));

  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);

  // Test chunks: sizes floor(n/k) or +1, extra members going to the first chunks.
  std::vector<std::size_t> start(k + 1, 0);
  for (std::size_t f = 0; f < k; ++f) start[f + 1] = start[f] + n / k + (f < n % k ? 1 : 0);
  const auto n_val = static_cast<std::size_t>(std::llround(std::floor(val_ratio * static_cast<double>(n))));

  SplitPlan plan;
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    std::vector<char> used(n, 0);
    for (std::size_t i = start[f]; i < start[f + 1]; ++i) {
      fold.test.push_back(patients[i]);
      used[i] = 1;
    }
    for (std::size_t j = 0, i = start[f + 1] % n; j < n_val; ++j, i = (i + 1) % n) {
      fold.val.push_back(patients[i]);
      used[i] = 1;
    }
    for (std::size_t i = 0; i < n; ++i)
      if (!used[i]) fold.train.push_back(patients[i]);
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

std::uint64_t slide_seed(std::uint64_t cohort_seed, int slide_id) {
  std::uint64_t z = cohort_seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(slide_id) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::vector<SyntheticSlide> generate_cohort(const CohortSpec& spec, const SynthParams& params) {
  if (spec.patients == 0 || spec.slides < spec.patients)
    throw InputError("cohort: need at least one slide per patient");
  params.validate();
  std::vector<SyntheticSlide> slides(spec.slides);
#pragma omp parallel for schedule(dynamic)
  for (long s = 0; s < static_cast<long>(spec.slides); ++s) {
    const int id = static_cast<int>(s);
    const int patient = static_cast<int>(static_cast<std::size_t>(s) % spec.patients);
    slides[static_cast<std::size_t>(s)] =
        generate_slide(patient % 2, patient, slide_seed(spec.seed, id), params, id);
  }
  return slides;
}

std::filesystem::path slide_dir(const std::filesystem::path& data_dir, int slide_id) {
  char name[32];
  std::snprintf(name, sizeof name, "slide_%04d", slide_id);
  return data_dir / "slides" / name;
}

void save_slide(const std::filesystem::path& dir, const SyntheticSlide& slide) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < kMagnifications.size(); ++i)
    write_netpbm(dir / ("level" + std::to_string(kMagnifications[i]) + ".ppm"), to_raster(slide.levels[i]));
  const std::size_t n = slide.base_size();
  Raster mask{n, n, 1, {}};
  mask.pixels.resize(n * n);
  for (std::size_t q = 0; q < n * n; ++q) mask.pixels[q] = slide.mask[q] ? 255 : 0;
  write_netpbm(dir / "mask.pgm", mask);
  std::ofstream meta(dir / "meta.txt");
  meta << "slide_id=" << slide.slide_id << "\npatient=" << slide.patient << "\nlabel=" << slide.label
       << "\nseed=" << slide.seed << "\nbase_size=" << n << "\n";
}

SyntheticSlide load_slide(const std::filesystem::path& dir) {
  const auto kv = parse_key_values(read_text(dir / "meta.txt"));
  auto field = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw InputError("slide " + dir.string() + ": meta.txt lacks '" + key + "'");
    return it->second;
  };
  SyntheticSlide slide;
  slide.slide_id = std::stoi(field("slide_id"));
  slide.patient = std::stoi(field("patient"));
  slide.label = std::stoi(field("label"));
  slide.seed = std::stoull(field("seed"));
  Tensor base = from_raster(read_netpbm(dir / "level20.ppm"));
  if (base.dim(0) != 3) throw InputError("slide " + dir.string() + ": base level must be RGB");
  const Raster mask = read_netpbm(dir / "mask.pgm");
  if (mask.width != base.dim(2) || mask.height != base.dim(1) || mask.channels != 1)
    throw InputError("slide " + dir.string() + ": mask does not match base level");
  slide.mask.resize(mask.pixels.size());
  for (std::size_t q = 0; q < mask.pixels.size(); ++q) slide.mask[q] = mask.pixels[q] ? 1 : 0;
  slide.levels[1] = downsample(base, 2);
  slide.levels[2] = downsample(base, 4);
  slide.levels[0] = std::move(base);
  return slide;
}

void save_split_plan(const std::filesystem::path& path, const SplitPlan& plan) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  auto list = [&](const std::vector<int>& ids) {
    for (std::size_t i = 0; i < ids.size(); ++i) f << (i ? "," : "") << ids[i];
  };
  for (std::size_t i = 0; i < plan.folds.size(); ++i) {
    const Fold& fold = plan.folds[i];
    f << "fold=" << i << " train=";
    list(fold.train);
    f << " val=";
    list(fold.val);
    f << " test=";
    list(fold.test);
    f << "\n";
  }
}

SplitPlan load_split_plan(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  SplitPlan plan;
  std::string line;
  auto parse_ids = [](const std::string& s) {
    std::vector<int> ids;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ','))
      if (!tok.empty()) ids.push_back(std::stoi(tok));
    return ids;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    Fold fold;
    while (ls >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw InputError("split plan: malformed field '" + field + "'");
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "train") fold.train = parse_ids(value);
      else if (key == "val") fold.val = parse_ids(value);
      else if (key == "test") fold.test = parse_ids(value);
    }
    plan.folds.push_back(std::move(fold));
  }
  if (plan.folds.empty()) throw InputError("split plan: no folds in " + path.string());
  return plan;
}

}  // namespace magpath
