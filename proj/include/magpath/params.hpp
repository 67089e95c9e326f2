#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>

#include "magpath/tensor.hpp"

namespace magpath {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Named parameters in insertion order. Addresses of entries are stable for
/// the lifetime of the store, so tapes may hold pointers into it.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param& add(std::string name, Tensor value, bool trainable = true);
  Param& get(std::string_view name);
  const Param& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  void set_trainable(bool trainable);
  /// Overwrite values from another store with identical names and shapes.
  void assign_values(const ParamStore& other);
  /// Copy every entry of `other` into this store under `prefix`.
  void merge(const ParamStore& other, std::string_view prefix);
  /// Entries whose name starts with `prefix`, with the prefix stripped.
  ParamStore extract(std::string_view prefix) const;

  /// FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const;

 private:
  void rebuild_index();

  std::deque<Param> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameter bundle file: "MAGW", u16 version, then records of
// (u16 name length, name, u8 rank, u32 extents[rank], f64 values[]).
// All integers and values little-endian.
inline constexpr std::uint16_t kBundleVersion = 1;

std::string encode_bundle(const ParamStore& store);
ParamStore decode_bundle(std::string_view bytes);
void save_bundle(const std::filesystem::path& path, const ParamStore& store);
ParamStore load_bundle(const std::filesystem::path& path);

}  // namespace magpath
