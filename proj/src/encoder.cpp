#include "magpath/encoder.hpp"

#include <cmath>
#include <random>

#include "magpath/layers.hpp"

namespace magpath {

namespace {

std::string weight_name(std::size_t block) { return "block" + std::to_string(block + 1) + ".weight"; }
std::string bias_name(std::size_t block) { return "block" + std::to_string(block + 1) + ".bias"; }

}  // namespace

std::size_t EncoderConfig::min_input_side() const {
  std::size_t s = 1;
  for (auto st : strides) s *= st;
  return s;
}

void EncoderConfig::validate() const {
  if (in_channels == 0) throw ConfigError("encoder: in_channels must be positive");
  if (channels.empty()) throw ConfigError("encoder: n_blocks must be >= 2");
  if (channels.size() != strides.size())
    throw ConfigError("encoder: channels and strides lists differ in length");
  for (auto c : channels)
    if (c == 0) throw ConfigError("encoder: channel counts must be positive");
  for (auto s : strides)
    if (s == 0) throw ConfigError("encoder: strides must be >= 1");
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("encoder: kernel width must be odd");
  if (!(input_std > 0.0)) throw ConfigError("encoder: input_std must be > 0");
}

Encoder::Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::size_t cin = cfg_.in_channels;
  for (std::size_t b = 0; b < cfg_.channels.size(); ++b) {
    const std::size_t cout = cfg_.channels[b];
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * cfg_.kernel * cfg_.kernel));
    std::normal_distribution<double> normal(0.0, stddev);
    Tensor w({cout, cin, cfg_.kernel, cfg_.kernel});
    for (auto& v : w.values()) v = normal(rng);
    params_.add(weight_name(b), std::move(w));
    params_.add(bias_name(b), Tensor({cout}));
    cin = cout;
  }
}

Encoder::Encoder(EncoderConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  std::size_t cin = cfg_.in_channels;
  for (std::size_t b = 0; b < cfg_.channels.size(); ++b) {
    const std::size_t cout = cfg_.channels[b];
    expect_shape(params_.get(weight_name(b)).value, {cout, cin, cfg_.kernel, cfg_.kernel},
                 weight_name(b).c_str());
    expect_shape(params_.get(bias_name(b)).value, {cout}, bias_name(b).c_str());
    cin = cout;
  }
  if (params_.size() != 2 * cfg_.channels.size())
    throw ContractError("encoder: parameter bundle has unexpected entries");
}

void Encoder::check_input(const Tensor& image) const {
  expect_rank(image, 3, "encoder input");
  if (image.dim(0) != cfg_.in_channels)
    throw InputError("encoder: expected " + std::to_string(cfg_.in_channels) + " channels, got " +
                     shape_str(image.shape()));
  const std::size_t side = cfg_.min_input_side();
  if (image.dim(1) < side || image.dim(2) < side)
    throw InputError("encoder: input " + shape_str(image.shape()) +
                     " smaller than the stride contraction " + std::to_string(side));
}

BlockFeatureSet Encoder::encode(const Tensor& image) const {
  check_input(image);
  BlockFeatureSet out;
  Tensor normalised = image;
  const double inv = 1.0 / cfg_.input_std, shift = -cfg_.input_mean / cfg_.input_std;
  for (auto& v : normalised.values()) v = v * inv + shift;
  const Tensor* x = &normalised;
  for (std::size_t b = 0; b < cfg_.channels.size(); ++b) {
    Tensor y = nn::conv2d_forward(*x, params_.get(weight_name(b)).value,
                                  params_.get(bias_name(b)).value, cfg_.strides[b], cfg_.kernel / 2);
    out.maps.push_back(nn::relu(y));
    x = &out.maps.back();
  }
  out.pooled = nn::global_avg_pool(out.maps.back());
  return out;
}

Encoder::Recorded Encoder::encode(nn::Tape& tape, nn::Var image) {
  check_input(image.value());
  Recorded out;
  nn::Var x = nn::affine(image, 1.0 / cfg_.input_std, -cfg_.input_mean / cfg_.input_std);
  for (std::size_t b = 0; b < cfg_.channels.size(); ++b) {
    nn::Var w = tape.param(params_.get(weight_name(b)));
    nn::Var bias = tape.param(params_.get(bias_name(b)));
    x = nn::relu(nn::conv2d(x, w, bias, cfg_.strides[b], cfg_.kernel / 2));
    out.maps.push_back(x);
  }
  out.pooled = nn::global_avg_pool(x);
  return out;
}

void Encoder::freeze() { params_.set_trainable(false); }

bool Encoder::frozen() const {
  for (const auto& p : params_)
    if (p.trainable) return false;
  return true;
}

Tensor pool_to_grid(const Tensor& map, std::size_t h, std::size_t w) {
  return nn::avg_pool_grid(map, h, w);
}

BlockFeatureSet pool_to_match(const BlockFeatureSet& teacher, const BlockFeatureSet& student) {
  if (teacher.maps.size() != student.maps.size())
    throw ContractError("pool_to_match: block counts differ");
  BlockFeatureSet out;
  for (std::size_t i = 0; i < teacher.maps.size(); ++i) {
    const Tensor& s = student.maps[i];
    out.maps.push_back(pool_to_grid(teacher.maps[i], s.dim(1), s.dim(2)));
  }
  out.pooled = teacher.pooled;
  return out;
}

}  // namespace magpath
