#include "magpath/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace magpath {

std::string encode_netpbm(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ContractError("netpbm: channels must be 1 or 3");
  if (r.pixels.size() != r.width * r.height * r.channels)
    throw ContractError("netpbm: pixel buffer does not match dimensions");
  std::string out = (r.channels == 1 ? "P5\n" : "P6\n") + std::to_string(r.width) + " " +
                    std::to_string(r.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
  return out;
}

Raster decode_netpbm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw InputError("netpbm: truncated header");
    return std::string(bytes.substr(start, pos - start));
  };
  auto number = [&]() -> std::size_t {
    const std::string tok = next_token();
    if (!std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      throw InputError("netpbm: bad header field '" + tok + "'");
    return std::stoul(tok);
  };

  Raster r;
  const std::string magic = next_token();
  if (magic == "P5") r.channels = 1;
  else if (magic == "P6") r.channels = 3;
  else throw InputError("netpbm: unsupported magic '" + magic + "'");
  r.width = number();
  r.height = number();
  if (number() != 255) throw InputError("netpbm: only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  const std::size_t n = r.width * r.height * r.channels;
  if (r.width == 0 || r.height == 0 || bytes.size() < pos + n)
    throw InputError("netpbm: truncated raster");
  r.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return r;
}

void write_netpbm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("netpbm: cannot write " + path.string());
  const std::string bytes = encode_netpbm(r);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Raster read_netpbm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("netpbm: cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_netpbm(bytes);
}

Raster to_raster(const Tensor& image) {
  expect_rank(image, 3, "to_raster");
  Raster r{image.dim(2), image.dim(1), image.dim(0), {}};
  r.pixels.resize(image.size());
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t y = 0; y < r.height; ++y)
      for (std::size_t x = 0; x < r.width; ++x) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        r.pixels[(y * r.width + x) * r.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return r;
}

Tensor from_raster(const Raster& r) {
  Tensor image({r.channels, r.height, r.width});
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t y = 0; y < r.height; ++y)
      for (std::size_t x = 0; x < r.width; ++x)
        image.at(c, y, x) = r.pixels[(y * r.width + x) * r.channels + c] / 255.0;
  return image;
}

}  // namespace magpath
