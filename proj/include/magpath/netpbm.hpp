#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "magpath/tensor.hpp"

namespace magpath {

/// 8-bit raster with interleaved channels (1 = PGM, 3 = PPM).
struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

std::string encode_netpbm(const Raster& r);
Raster decode_netpbm(std::string_view bytes);
void write_netpbm(const std::filesystem::path& path, const Raster& r);
Raster read_netpbm(const std::filesystem::path& path);

/// image[C,H,W] with values in [0,1] -> 8-bit raster (round to nearest).
Raster to_raster(const Tensor& image);
/// 8-bit raster -> image[C,H,W] with values k/255.
Tensor from_raster(const Raster& r);

}  // namespace magpath
