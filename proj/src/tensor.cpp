#include "magpath/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace magpath {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

static void check_extents(const Shape& shape) {
  if (shape.empty()) throw ContractError("tensor: rank must be >= 1");
  for (auto e : shape)
    if (e == 0) throw ContractError("tensor: zero extent in shape " + shape_str(shape));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_size(shape_) != data_.size())
    throw ContractError("tensor: shape " + shape_str(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ContractError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_inplace(const Tensor& other) {
  if (other.shape_ != shape_)
    throw ContractError("add: shape " + shape_str(other.shape_) + " vs " + shape_str(shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void expect_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ContractError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                        shape_str(t.shape()));
}

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ContractError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
}

void expect_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw ContractError(std::string(what) + ": non-finite value");
}

}  // namespace magpath
