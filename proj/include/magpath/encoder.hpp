#pragma once

#include <cstdint>
#include <vector>

#include "magpath/ops.hpp"
#include "magpath/params.hpp"

namespace magpath {

enum class Activation { ReLU };

/// Block-structured convolutional encoder. Inputs are first normalised to
/// (x - input_mean) / input_std. Each conv block is
/// conv(kernel, stride, pad = kernel/2) followed by the activation; a final
/// global-average-pooling stage counts as the last block.
struct EncoderConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{8, 16, 32};
  std::vector<std::size_t> strides{2, 2, 2};
  std::size_t kernel = 3;
  Activation activation = Activation::ReLU;
  double input_mean = 0.55;
  double input_std = 0.2;

  std::size_t n_blocks() const { return channels.size() + 1; }
  std::size_t embedding_dim() const { return channels.back(); }
  /// Smallest accepted input side: product of the strides.
  std::size_t min_input_side() const;
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Per-block outputs X_1..X_n: conv maps [C,H,W] followed by the pooled vector.
struct BlockFeatureSet {
  std::vector<Tensor> maps;
  Tensor pooled;

  std::size_t size() const { return maps.size() + 1; }
};

class Encoder {
 public:
  /// He-normal weights, zero biases, drawn from `seed`.
  Encoder(EncoderConfig cfg, std::uint64_t seed);
  /// Adopt existing parameters (e.g. loaded from a bundle); shapes are checked.
  Encoder(EncoderConfig cfg, ParamStore params);

  /// Pure inference pass over image[C,H,W].
  BlockFeatureSet encode(const Tensor& image) const;

  struct Recorded {
    std::vector<nn::Var> maps;
    nn::Var pooled;
  };
  /// Same computation recorded on a tape for training.
  Recorded encode(nn::Tape& tape, nn::Var image);

  /// Marks every parameter non-trainable. Idempotent.
  void freeze();
  bool frozen() const;

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  void check_input(const Tensor& image) const;

  EncoderConfig cfg_;
  ParamStore params_;
};

/// Non-overlapping average pooling of map[C,H,W] to [C,h,w].
Tensor pool_to_grid(const Tensor& map, std::size_t h, std::size_t w);

/// Pools every teacher conv map onto the grid of the matching student map so
/// both sets become shape-identical.
BlockFeatureSet pool_to_match(const BlockFeatureSet& teacher, const BlockFeatureSet& student);

}  // namespace magpath
