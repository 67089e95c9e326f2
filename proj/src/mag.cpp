#include "magpath/mag.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "magpath/optim.hpp"

namespace magpath {

void MagTrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("mag: learning rate must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("mag: decay must lie in (0, 1]");
  if (epochs == 0) throw ConfigError("mag: epochs must be positive");
  if (batch_size == 0) throw ConfigError("mag: batch size must be positive");
}

double MagTrainConfig::lr_at(std::size_t epoch) const {
  return lr * std::pow(decay, static_cast<double>(epoch));
}

namespace {

double mean_abs(const Tensor& a, const Tensor& b, const std::string& what) {
  expect_shape(b, a.shape(), what.c_str());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

double mag_loss(const BlockFeatureSet& teacher, const BlockFeatureSet& student) {
  if (teacher.size() != student.size())
    throw ContractError("mag_loss: teacher has " + std::to_string(teacher.size()) + " blocks, student " +
                        std::to_string(student.size()));
  double loss = 0.0;
  for (std::size_t i = 0; i < teacher.maps.size(); ++i)
    loss += mean_abs(teacher.maps[i], student.maps[i], "mag_loss block " + std::to_string(i + 1));
  return loss + mean_abs(teacher.pooled, student.pooled, "mag_loss pooled block");
}

nn::Var mag_loss(nn::Tape& tape, const BlockFeatureSet& teacher, const Encoder::Recorded& student) {
  if (teacher.maps.size() != student.maps.size())
    throw ContractError("mag_loss: block counts differ");
  nn::Var loss = nn::mean_abs_diff(tape.constant(teacher.pooled), student.pooled);
  for (std::size_t i = 0; i < teacher.maps.size(); ++i)
    loss = nn::add_scalars(loss, nn::mean_abs_diff(tape.constant(teacher.maps[i]), student.maps[i]));
  return loss;
}

std::vector<MagEpoch> train_mag(const std::vector<PatchPair>& pairs, const Encoder& teacher,
                                Encoder& student, const MagTrainConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw InputError("train_mag: no patch pairs");
  if (!teacher.frozen()) throw StateError("train_mag: teacher must be frozen");
  if (!(teacher.config() == student.config()))
    throw ContractError("train_mag: teacher and student configs differ");

  // Teacher targets never change; compute them once, already on the student grid.
  std::vector<BlockFeatureSet> targets(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const BlockFeatureSet t = teacher.encode(pairs[i].high);
    const std::size_t h = pairs[i].low.dim(1), w = pairs[i].low.dim(2);
    for (std::size_t b = 0; b < t.maps.size(); ++b) {
      std::size_t sh = h, sw = w;
      for (std::size_t k = 0; k <= b; ++k) {
        const std::size_t s = teacher.config().strides[k];
        sh = (sh + s - 1) / s;
        sw = (sw + s - 1) / s;
      }
      targets[i].maps.push_back(pool_to_grid(t.maps[b], sh, sw));
    }
    targets[i].pooled = t.pooled;
  }

  nn::OptimizerConfig ocfg;
  ocfg.lr = cfg.lr;
  nn::Optimizer opt(student.params(), ocfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<MagEpoch> trace;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    opt.set_lr(cfg.lr_at(e));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const Tensor upstream = Tensor::scalar(1.0 / static_cast<double>(stop - start));
      student.params().zero_grad();
      for (std::size_t j = start; j < stop; ++j) {
        const std::size_t idx = order[j];
        nn::Tape tape;
        const Encoder::Recorded rec = student.encode(tape, tape.constant(pairs[idx].low));
        nn::Var loss = mag_loss(tape, targets[idx], rec);
        total += loss.value()[0];
        tape.backward(loss, upstream);
      }
      opt.step(student.params());
    }
    trace.push_back({e, total / static_cast<double>(pairs.size()), cfg.lr_at(e)});
  }
  return trace;
}

std::string loss_trace_csv(const std::vector<MagEpoch>& trace) {
  std::string out = "epoch,mean_loss,lr\n";
  char line[96];
  for (const auto& t : trace) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", t.epoch, t.mean_loss, t.lr);
    out += line;
  }
  return out;
}

Tensor extract_embeddings(const Encoder& encoder, const std::vector<Tensor>& images) {
  if (images.empty()) throw InputError("extract_embeddings: no patches");
  const std::size_t d = encoder.config().embedding_dim();
  Tensor out({images.size(), d});
  for (std::size_t k = 0; k < images.size(); ++k) {
    const Tensor pooled = encoder.encode(images[k]).pooled;
    for (std::size_t j = 0; j < d; ++j) out.at(k, j) = pooled[j];
  }
  return out;
}

Tensor extract_embeddings(const Encoder& encoder, const std::vector<Patch>& patches) {
  std::vector<Tensor> images;
  images.reserve(patches.size());
  for (const auto& p : patches) images.push_back(p.image);
  return extract_embeddings(encoder, images);
}

}  // namespace magpath
