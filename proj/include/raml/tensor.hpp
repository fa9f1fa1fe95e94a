#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "raml/errors.hpp"

namespace raml {

/// Dense channels x height x width array, stored channel-major then row-major.
///
/// Constructors reject non-positive dimensions, length mismatches and
/// non-finite values. Element access is mutable so that network code can
/// fill activations in place; `all_finite()` re-checks the invariant.
template <typename T>
class BasicTensor3 {
 public:
  using value_type = T;

  BasicTensor3() = default;

  BasicTensor3(int channels, int height, int width, T fill = T(0))
      : channels_(channels), height_(height), width_(width) {
    check_dims(channels, height, width);
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
    if (!std::isfinite(static_cast<double>(fill))) {
      throw PreconditionError("Tensor3: fill value is not finite");
    }
  }

  BasicTensor3(int channels, int height, int width, std::vector<T> data)
      : channels_(channels), height_(height), width_(width), data_(std::move(data)) {
    check_dims(channels, height, width);
    if (data_.size() != static_cast<std::size_t>(channels) * height * width) {
      throw ShapeError("Tensor3: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(channels) + "x" +
                       std::to_string(height) + "x" + std::to_string(width));
    }
    if (!all_finite()) throw PreconditionError("Tensor3: data contains NaN or Inf");
  }

  template <typename U>
  explicit BasicTensor3(const BasicTensor3<U>& other)
      : channels_(other.channels()), height_(other.height()), width_(other.width()) {
    data_.reserve(other.size());
    for (U v : other.data()) data_.push_back(static_cast<T>(v));
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int plane() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  T operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  std::span<T> channel(int c) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }
  std::span<const T> channel(int c) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_shape(const BasicTensor3& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  friend bool operator==(const BasicTensor3&, const BasicTensor3&) = default;

 private:
  static void check_dims(int c, int h, int w) {
    if (c <= 0 || h <= 0 || w <= 0) {
      throw ShapeError("Tensor3: dimensions must be positive, got " + std::to_string(c) + "x" +
                       std::to_string(h) + "x" + std::to_string(w));
    }
  }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

/// Storage precision of every serialized tensor.
using Tensor3 = BasicTensor3<float>;
/// Working precision for losses and gradient checks.
using Tensor3d = BasicTensor3<double>;

/// Per-pixel class indices; 255 marks pixels excluded from losses and metrics.
/// 254 marks "none of the known classes" for losses that accept it.
class LabelMap {
 public:
  static constexpr std::uint8_t kIgnore = 255;
  static constexpr std::uint8_t kUnknown = 254;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0);
  LabelMap(int height, int width, std::vector<std::uint8_t> labels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return labels_.size(); }

  std::uint8_t& operator()(int y, int x) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t operator()(int y, int x) const {
    return labels_[static_cast<std::size_t>(y) * width_ + x];
  }
  std::span<std::uint8_t> labels() { return labels_; }
  std::span<const std::uint8_t> labels() const { return labels_; }

  /// Throws PreconditionError if a non-ignore label is >= num_classes.
  void validate(int num_classes) const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> labels_;
};

/// Binary H x W mask (edge map, candidate region, novel-object mask).
class BitMask {
 public:
  BitMask() = default;
  BitMask(int height, int width, bool fill = false);
  BitMask(int height, int width, std::vector<std::uint8_t> bits);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x, bool v = true) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  bool at(std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v = true) { bits_[i] = v ? 1 : 0; }

  /// Number of set pixels.
  std::size_t count() const;
  bool any() const { return count() > 0; }
  bool same_shape(const BitMask& o) const { return height_ == o.height_ && width_ == o.width_; }

  std::span<const std::uint8_t> bits() const { return bits_; }

  friend bool operator==(const BitMask&, const BitMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;  // 0 or 1
};

BitMask complement(const BitMask& m);
/// Mask of pixels whose label equals `cls`.
BitMask class_mask(const LabelMap& labels, int cls);

}  // namespace raml
