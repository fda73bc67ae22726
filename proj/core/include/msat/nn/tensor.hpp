#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msat/errors.hpp"

namespace msat::nn {

// Dense row-major tensor. Copies are shallow (shared buffer); reshaped()
// returns a view. Graph tensors are treated as immutable once produced, so
// sharing is safe; clone() gives an owning deep copy where mutation is needed.
template <typename T>
class Tensor {
 public:
  Tensor() : buf_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(count(shape_), T{0})) {}

  Tensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), buf_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (static_cast<int64_t>(buf_->size()) != count(shape_)) {
      throw ShapeError("tensor data size does not match shape");
    }
  }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(buf_->size()); }

  T* data() { return buf_->data(); }
  const T* data() const { return buf_->data(); }
  std::span<T> flat() { return {buf_->data(), buf_->size()}; }
  std::span<const T> flat() const { return {buf_->data(), buf_->size()}; }

  T& operator[](int64_t i) { return (*buf_)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }

  // View with a new shape over the same buffer.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != numel()) {
      throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(shape) +
                       " changes element count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<T>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + ")";
  }

 private:
  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t c = 1;
    for (int64_t d : shape) c *= d;
    return c;
  }

  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<T>> buf_;
};

}  // namespace msat::nn
