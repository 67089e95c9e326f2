#include "magpath/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace magpath {

std::vector<int> patient_ids(const std::vector<SyntheticSlide>& slides) {
  std::set<int> ids;
  for (const auto& s : slides) ids.insert(s.patient);
  return {ids.begin(), ids.end()};
}

PatientSplit holdout_split(std::vector<int> patients, double fraction, std::uint64_t seed) {
  std::sort(patients.begin(), patients.end());
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(patients.size())));
  PatientSplit out;
  out.train.assign(patients.begin(), patients.end() - static_cast<long>(n_hold));
  out.holdout.assign(patients.end() - static_cast<long>(n_hold), patients.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.holdout.begin(), out.holdout.end());
  return out;
}

std::vector<PatchPair> sample_pairs(const CohortSource& source, const std::vector<int>& patients,
                                    int low_magnification, std::size_t count, std::uint64_t seed,
                                    const TilingConfig& tiling) {
  if (count == 0) throw ConfigError("sample_pairs: count must be positive");
  const std::set<int> keep(patients.begin(), patients.end());
  std::mt19937_64 rng(seed);
  // Reservoir entries carry their global stream position to restore order.
  std::vector<std::pair<std::size_t, PatchPair>> reservoir;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!keep.count(source.slides[i].patient)) continue;
    for (auto& p : make_pairs(source.load(i), low_magnification, tiling)) {
      if (reservoir.size() < count) {
        reservoir.emplace_back(seen, std::move(p));
      } else {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, seen)(rng);
        if (j < count) reservoir[j] = {seen, std::move(p)};
      }
      ++seen;
    }
  }
  if (reservoir.empty()) throw InputError("sample_pairs: the selected patients have no tissue patches");
  std::sort(reservoir.begin(), reservoir.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<PatchPair> out;
  out.reserve(reservoir.size());
  for (auto& r : reservoir) out.push_back(std::move(r.second));
  return out;
}

Encoder make_teacher(const EncoderConfig& cfg, std::uint64_t seed) {
  Encoder teacher(cfg, seed);
  teacher.freeze();
  return teacher;
}

Encoder make_student(const Encoder& teacher) {
  ParamStore params = teacher.params();
  params.set_trainable(true);
  return Encoder(teacher.config(), std::move(params));
}

Bag make_bag(const SyntheticSlide& slide, const Encoder& encoder, int magnification, const TilingConfig& tiling) {
  const std::vector<Patch> patches = tile(slide, magnification, tiling);
  if (patches.empty()) throw InputError("slide " + std::to_string(slide.slide_id) + " has no tissue patches");
  Bag bag;
  bag.embeddings = extract_embeddings(encoder, patches);
  for (const auto& p : patches) bag.coords.push_back(p.coord);
  bag.slide_id = slide.slide_id;
  bag.patient = slide.patient;
  bag.label = slide.label;
  bag.grid_side = grid_side(slide, tiling);
  return bag;
}

std::vector<std::vector<Bag>> make_bags(const CohortSource& source, const std::vector<BagRequest>& requests,
                                        const TilingConfig& tiling) {
  std::vector<std::vector<Bag>> bags(requests.size(), std::vector<Bag>(source.size()));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(source.size()); ++i) {
    try {
      const auto k = static_cast<std::size_t>(i);
      const SyntheticSlide slide = source.load(k);
      for (std::size_t r = 0; r < requests.size(); ++r)
        bags[r][k] = make_bag(slide, *requests[r].encoder, requests[r].magnification, tiling);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return bags;
}

std::vector<Bag> make_bags(const CohortSource& source, const Encoder& encoder, int magnification,
                           const TilingConfig& tiling) {
  return std::move(make_bags(source, {{&encoder, magnification}}, tiling)[0]);
}

std::vector<Bag> select_bags(const std::vector<Bag>& bags, const std::vector<int>& patients) {
  const std::set<int> keep(patients.begin(), patients.end());
  std::vector<Bag> out;
  for (const auto& b : bags)
    if (keep.count(b.patient)) out.push_back(b);
  return out;
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t index) { return seed * 1000003ull + index; }

GLTransTrainResult train_fold(const std::vector<Bag>& bags, const Fold& fold, std::size_t index,
                              const GLTransConfig& model_cfg, GLTransTrainConfig train_cfg) {
  const std::vector<Bag> train = select_bags(bags, fold.train);
  const std::vector<Bag> val = select_bags(bags, fold.val);
  if (train.empty() || val.empty())
    throw InputError("fold " + std::to_string(index) + ": no slides for the train or validation patients");
  train_cfg.seed = fold_seed(train_cfg.seed, index);
  return train_gltrans(train, val, model_cfg, train_cfg);
}

FoldResult run_fold(const std::vector<Bag>& bags, const Fold& fold, std::size_t index, const GLTransConfig& model_cfg,
                    GLTransTrainConfig train_cfg, std::size_t bootstrap) {
  const GLTransTrainResult trained = train_fold(bags, fold, index, model_cfg, train_cfg);
  train_cfg.seed = fold_seed(train_cfg.seed, index);

  FoldResult r;
  r.fold = index;
  r.best_epoch = trained.best_epoch;
  r.trace = trained.trace;
  const std::set<int> test(fold.test.begin(), fold.test.end());
  for (const auto& b : bags) {
    if (!test.count(b.patient)) continue;
    PredictionOutput out = trained.model.predict(b);
    r.slide_ids.push_back(b.slide_id);
    r.labels.push_back(b.label);
    r.preds.push_back(out.label);
    r.probs.push_back(out.probs[1]);
    r.outputs.push_back(std::move(out));
    r.test_bags.push_back(&b);
  }
  if (r.labels.empty()) throw InputError("fold " + std::to_string(index) + " has no test slides");
  const F1Accuracy fa = f1_accuracy(r.preds, r.labels);
  r.accuracy = fa.accuracy;
  r.f1 = fa.f1;
  try {
    r.auc = auc(r.probs, r.labels);
    r.ci = bootstrap_ci(r.probs, r.labels, bootstrap, 0.95, train_cfg.seed);
  } catch (const UndefinedMetric&) {
    // Single-class test fold; excluded from the AUC mean.
    r.auc = std::numeric_limits<double>::quiet_NaN();
    r.ci = {r.auc, r.auc};
  }
  return r;
}

CvResult cross_validate(const std::vector<Bag>& bags, const SplitPlan& plan, const GLTransConfig& model_cfg,
                        const GLTransTrainConfig& train_cfg, std::size_t bootstrap,
                        std::optional<std::size_t> only_fold) {
  if (only_fold && *only_fold >= plan.folds.size())
    throw ConfigError("fold " + std::to_string(*only_fold) + " out of range (plan has " +
                      std::to_string(plan.folds.size()) + " folds)");
  CvResult cv;
  std::size_t auc_folds = 0;
  std::vector<double> pooled_probs;
  std::vector<int> pooled_labels;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    if (only_fold && f != *only_fold) continue;
    cv.folds.push_back(run_fold(bags, plan.folds[f], f, model_cfg, train_cfg, bootstrap));
    const FoldResult& r = cv.folds.back();
    if (!std::isnan(r.auc)) {
      cv.mean_auc += r.auc;
      ++auc_folds;
    }
    cv.mean_accuracy += r.accuracy;
    cv.mean_f1 += r.f1;
    pooled_probs.insert(pooled_probs.end(), r.probs.begin(), r.probs.end());
    pooled_labels.insert(pooled_labels.end(), r.labels.begin(), r.labels.end());
  }
  const auto n = static_cast<double>(cv.folds.size());
  cv.mean_auc = auc_folds ? cv.mean_auc / static_cast<double>(auc_folds) : std::numeric_limits<double>::quiet_NaN();
  cv.mean_accuracy /= n;
  cv.mean_f1 /= n;
  try {
    cv.pooled_ci = bootstrap_ci(pooled_probs, pooled_labels, bootstrap, 0.95, train_cfg.seed);
  } catch (const UndefinedMetric&) {
    cv.pooled_ci = {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  }
  return cv;
}

std::string eval_csv(const CvResult& cv) {
  std::string out = "fold,auc,accuracy,f1,ci_low,ci_high,n_test,best_epoch\n";
  char line[256];
  std::size_t total = 0;
  for (const auto& r : cv.folds) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu\n", r.fold, r.auc, r.accuracy, r.f1,
                  r.ci.low, r.ci.high, r.labels.size(), r.best_epoch);
    out += line;
    total += r.labels.size();
  }
  std::snprintf(line, sizeof line, "mean,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,\n", cv.mean_auc, cv.mean_accuracy,
                cv.mean_f1, cv.pooled_ci.low, cv.pooled_ci.high, total);
  out += line;
  return out;
}

CohortSource CohortSource::generated(const CohortSpec& spec, const SynthParams& params) {
  if (spec.patients == 0 || spec.slides < spec.patients)
    throw InputError("cohort: need at least one slide per patient");
  params.validate();
  CohortSource src;
  for (std::size_t s = 0; s < spec.slides; ++s) {
    const int patient = static_cast<int>(s % spec.patients);
    src.slides.push_back({static_cast<int>(s), patient, patient % 2});
  }
  src.load = [spec, params, infos = src.slides](std::size_t i) {
    const SlideInfo& info = infos.at(i);
    return generate_slide(info.label, info.patient, slide_seed(spec.seed, info.slide_id), params, info.slide_id);
  };
  return src;
}

CohortSource CohortSource::on_disk(const std::filesystem::path& data_dir) {
  const auto root = data_dir / "slides";
  if (!std::filesystem::is_directory(root)) throw InputError("no dataset at " + root.string() + " (run synth first)");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InputError("dataset at " + root.string() + " is empty");
  CohortSource src;
  for (const auto& d : dirs) {
    std::istringstream meta(read_file(d / "meta.txt"));
    SlideInfo info;
    std::string line;
    while (std::getline(meta, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const int v = std::atoi(line.c_str() + eq + 1);
      if (key == "slide_id") info.slide_id = v;
      if (key == "patient") info.patient = v;
      if (key == "label") info.label = v;
    }
    src.slides.push_back(info);
  }
  src.load = [dirs](std::size_t i) { return load_slide(dirs.at(i)); };
  return src;
}

CohortSource CohortSource::in_memory(const std::vector<SyntheticSlide>& slides) {
  CohortSource src;
  for (const auto& s : slides) src.slides.push_back({s.slide_id, s.patient, s.label});
  src.load = [&slides](std::size_t i) { return slides.at(i); };
  return src;
}

std::vector<int> patient_ids(const CohortSource& source) {
  std::set<int> ids;
  for (const auto& s : source.slides) ids.insert(s.patient);
  return {ids.begin(), ids.end()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace magpath
