#include "magpath/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace magpath {

ParamStore::ParamStore(const ParamStore& other) : entries_(other.entries_) { rebuild_index(); }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    entries_ = other.entries_;
    rebuild_index();
  }
  return *this;
}

void ParamStore::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
}

Param& ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw ContractError("param store: duplicate parameter '" + name + "'");
  Tensor grad = Tensor::zeros_like(value);
  index_.emplace(name, entries_.size());
  entries_.push_back(Param{std::move(name), std::move(value), std::move(grad), trainable});
  return entries_.back();
}

Param& ParamStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end())
    throw ContractError("param store: no parameter named '" + std::string(name) + "'");
  return entries_[it->second];
}

const Param& ParamStore::get(std::string_view name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

bool ParamStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : entries_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : entries_) p.grad.fill(0.0);
}

void ParamStore::set_trainable(bool trainable) {
  for (auto& p : entries_) {
    p.trainable = trainable;
    if (!trainable) p.grad.fill(0.0);
  }
}

void ParamStore::assign_values(const ParamStore& other) {
  if (other.size() != size())
    throw ContractError("param store: assign between stores of different sizes");
  for (auto& p : entries_) {
    const Param& src = other.get(p.name);
    expect_shape(src.value, p.value.shape(), p.name.c_str());
    p.value = src.value;
  }
}

void ParamStore::merge(const ParamStore& other, std::string_view prefix) {
  for (const auto& p : other) add(std::string(prefix) + p.name, p.value, p.trainable);
}

ParamStore ParamStore::extract(std::string_view prefix) const {
  ParamStore out;
  for (const auto& p : entries_)
    if (p.name.starts_with(prefix)) out.add(p.name.substr(prefix.size()), p.value, p.trainable);
  return out;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : entries_) {
    mix(p.name.data(), p.name.size());
    for (auto e : p.value.shape()) mix(&e, sizeof e);
    mix(p.value.data(), p.value.size() * sizeof(double));
  }
  return h;
}

namespace {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }

  template <class T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InputError("bundle: truncated record");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_bundle(const ParamStore& store) {
  std::string out = "MAGW";
  put_le<std::uint16_t>(out, kBundleVersion);
  for (const auto& p : store) {
    if (p.name.size() > 0xffff) throw ContractError("bundle: parameter name too long");
    if (p.value.rank() > 0xff) throw ContractError("bundle: rank too large");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    out.push_back(static_cast<char>(p.value.rank()));
    for (auto e : p.value.shape()) {
      if (e > 0xffffffffull) throw ContractError("bundle: extent exceeds u32");
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    for (double v : p.value.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamStore decode_bundle(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != "MAGW") throw InputError("bundle: bad magic");
  const auto version = in.get_le<std::uint16_t>();
  if (version != kBundleVersion)
    throw InputError("bundle: unsupported version " + std::to_string(version));
  ParamStore store;
  while (!in.done()) {
    const auto name_len = in.get_le<std::uint16_t>();
    std::string name(in.take(name_len));
    const auto rank = in.get_le<std::uint8_t>();
    if (rank == 0) throw InputError("bundle: record '" + name + "' has rank 0");
    Shape shape(rank);
    for (auto& e : shape) e = in.get_le<std::uint32_t>();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<double>(in.get_le<std::uint64_t>());
    store.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return store;
}

void save_bundle(const std::filesystem::path& path, const ParamStore& store) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("bundle: cannot write " + path.string());
  const std::string bytes = encode_bundle(store);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ParamStore load_bundle(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("bundle: cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes);
}

}  // namespace magpath
