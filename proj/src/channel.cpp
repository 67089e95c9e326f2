#include "magpath/channel.hpp"

#include <random>

#include "magpath/tensor.hpp"

namespace magpath {

void ChannelModel::validate() const {
  if (!(bandwidth_bps > 0.0)) throw ConfigError("channel: bandwidth must be > 0");
  if (!(latency_s >= 0.0)) throw ConfigError("channel: latency must be >= 0");
  if (jitter_fraction < 0.0 || jitter_fraction > 1.0)
    throw ConfigError("channel: jitter fraction must lie in [0, 1]");
}

double ChannelModel::transfer_seconds(std::uint64_t bytes, std::uint64_t session_id) const {
  validate();
  double latency = latency_s;
  if (jitter_seed) {
    std::mt19937_64 rng(*jitter_seed ^ (session_id * 0x9e3779b97f4a7c15ull));
    std::uniform_real_distribution<double> u(-jitter_fraction, jitter_fraction);
    latency *= 1.0 + u(rng);
  }
  return static_cast<double>(bytes) * 8.0 / bandwidth_bps + latency;
}

}  // namespace magpath
