#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "magpath/encoder.hpp"
#include "magpath/synth.hpp"

namespace magpath {

struct MagTrainConfig {
  double lr = 1e-4;
  double decay = 0.9;  // per-epoch multiplicative factor
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

/// Sum over blocks of the mean absolute element difference. Both sets must
/// already be shape-identical block by block (see pool_to_match).
double mag_loss(const BlockFeatureSet& teacher, const BlockFeatureSet& student);

/// Recorded variant used for training: teacher values are constants.
nn::Var mag_loss(nn::Tape& tape, const BlockFeatureSet& teacher, const Encoder::Recorded& student);

struct MagEpoch {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

/// Trains `student` on (low -> pooled teacher(high)) targets. The teacher must
/// be frozen and share the student's config. Pair order is reshuffled every
/// epoch from cfg.seed; per-epoch mean loss is averaged over pairs.
std::vector<MagEpoch> train_mag(const std::vector<PatchPair>& pairs, const Encoder& teacher,
                                Encoder& student, const MagTrainConfig& cfg);

/// CSV with header epoch,mean_loss,lr; values printed with 17 significant digits.
std::string loss_trace_csv(const std::vector<MagEpoch>& trace);

/// Row k = pooled embedding of patch k.
Tensor extract_embeddings(const Encoder& encoder, const std::vector<Patch>& patches);
Tensor extract_embeddings(const Encoder& encoder, const std::vector<Tensor>& images);

}  // namespace magpath
