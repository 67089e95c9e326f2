#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "magpath/metrics.hpp"
#include "magpath/ops.hpp"
#include "magpath/params.hpp"

namespace magpath {

/// One slide's instance embeddings in tiling order.
struct Bag {
  Tensor embeddings;  // [N, d_in]
  std::vector<GridCoord> coords;
  int slide_id = 0;
  int patient = 0;
  int label = 0;
  std::size_t grid_side = 0;

  std::size_t size() const { return embeddings.dim(0); }
  void validate() const;
};

void save_bags(const std::filesystem::path& path, const std::vector<Bag>& bags);
std::vector<Bag> load_bags(const std::filesystem::path& path);

struct GLTransConfig {
  std::size_t d_in = 32;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::vector<std::size_t> dilations{1, 3, 5};
  std::size_t kernel = 3;
  double dropout = 0.1;
  std::size_t classes = 2;
  bool local_branch = true;

  void validate() const;
  friend bool operator==(const GLTransConfig&, const GLTransConfig&) = default;
};

struct PredictionOutput {
  std::array<double, 2> probs{0.5, 0.5};
  std::vector<double> scores;  // per instance, sums to 1
  int label = 0;               // argmax, ties -> 0
};

// Tape-level building blocks, exposed for testing.
struct GltBlockVars {
  nn::Var ln1_gain, ln1_shift;
  nn::MhsaVars attn;
  std::vector<nn::Var> conv_weight, conv_bias;  // one per dilation
  nn::Var local_weight, local_bias;             // local branch output projection
  nn::Var ln2_gain, ln2_shift;
};

/// out = LN2(x + drop(MHSA(LN1 x)) + drop(W_lo relu(mean_r conv_r(LN1 x)) + b_lo)).
/// Dropout is active only when `rng` is non-null.
nn::Var glt_block(nn::Var tokens, const GltBlockVars& w, const GLTransConfig& cfg,
                  std::mt19937_64* rng = nullptr);

struct PooledVars {
  nn::Var pooled;  // [1, d]
  nn::Var scores;  // [1, N]
};
/// scores = softmax(tokens * w + b) over instances; pooled = scores * tokens.
PooledVars attention_pool(nn::Var tokens, nn::Var w, nn::Var b);

class GLTrans {
 public:
  GLTrans(GLTransConfig cfg, std::uint64_t seed);
  GLTrans(GLTransConfig cfg, ParamStore params);

  /// Stores per-feature standardisation (non-trainable) fitted on all
  /// instances of the given bags.
  void fit_standardization(const std::vector<Bag>& bags);

  struct Recorded {
    nn::Var probs;   // [1, classes]
    nn::Var scores;  // [1, N]
  };
  /// Training pass; parameters are bound as tape leaves.
  Recorded forward(nn::Tape& tape, nn::Var embeddings, std::mt19937_64* dropout_rng = nullptr);

  /// Inference in the given instance order, no dropout. Never mutates the model.
  PredictionOutput predict(const Tensor& embeddings) const;
  PredictionOutput predict(const Bag& bag) const { return predict(bag.embeddings); }

  const GLTransConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Parameters plus a "config.gltrans" record.
  ParamStore to_bundle() const;
  static GLTrans from_bundle(const ParamStore& bundle);

 private:
  using Binder = std::function<nn::Var(const std::string&)>;
  Recorded run(nn::Var embeddings, const Binder& bind, std::mt19937_64* rng) const;
  GltBlockVars bind_block(std::size_t layer, const Binder& bind) const;

  GLTransConfig cfg_;
  ParamStore params_;
};

nn::Var ce_loss(nn::Var probs, int label);
double ce_loss(const std::array<double, 2>& probs, int label);

struct GLTransTrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  std::uint64_t seed = 42;
  bool shuffle_instances = true;

  void validate() const;
};

struct GltEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
};

struct GLTransTrainResult {
  GLTrans model;             // checkpoint with the best validation F1
  std::vector<GltEpoch> trace;
  std::size_t best_epoch = 0;  // earliest epoch attaining the maximum
};

/// One bag per step. Bag order and instance order within each bag are
/// reshuffled every epoch from cfg.seed.
GLTransTrainResult train_gltrans(const std::vector<Bag>& train, const std::vector<Bag>& val,
                                 const GLTransConfig& model_cfg, const GLTransTrainConfig& cfg);

/// CSV with header epoch,train_loss,val_f1.
std::string glt_trace_csv(const std::vector<GltEpoch>& trace);

}  // namespace magpath
