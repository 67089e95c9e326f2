#pragma once

#include <cstdint>
#include <optional>

namespace magpath {

enum class ChannelMode { Simulated, RealSocket };

/// Deterministic link model: transfer_s = bytes * 8 / bandwidth + latency.
struct ChannelModel {
  double bandwidth_bps = 200e6;
  double latency_s = 0.01;
  std::optional<std::uint64_t> jitter_seed;  // when set, latency varies per session
  double jitter_fraction = 0.1;
  ChannelMode mode = ChannelMode::Simulated;

  void validate() const;
  /// Closed-form transfer time; jitter (if seeded) perturbs only the latency
  /// term, deterministically per session id.
  double transfer_seconds(std::uint64_t bytes, std::uint64_t session_id = 0) const;
};

}  // namespace magpath
