#include "raml/tensor.hpp"

#include <algorithm>

namespace raml {

namespace {
void check_plane(int h, int w, const char* what) {
  if (h <= 0 || w <= 0) {
    throw ShapeError(std::string(what) + ": dimensions must be positive, got " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
}
}  // namespace

LabelMap::LabelMap(int height, int width, std::uint8_t fill) : height_(height), width_(width) {
  check_plane(height, width, "LabelMap");
  labels_.assign(static_cast<std::size_t>(height) * width, fill);
}

LabelMap::LabelMap(int height, int width, std::vector<std::uint8_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  check_plane(height, width, "LabelMap");
  if (labels_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("LabelMap: label count does not match dimensions");
  }
}

void LabelMap::validate(int num_classes) const {
  for (std::uint8_t v : labels_) {
    if (v != kIgnore && v >= num_classes) {
      throw PreconditionError("LabelMap: label " + std::to_string(v) + " >= num_classes " +
                              std::to_string(num_classes));
    }
  }
}

BitMask::BitMask(int height, int width, bool fill) : height_(height), width_(width) {
  check_plane(height, width, "BitMask");
  bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

BitMask::BitMask(int height, int width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  check_plane(height, width, "BitMask");
  if (bits_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("BitMask: bit count does not match dimensions");
  }
  for (auto& b : bits_) b = b ? 1 : 0;
}

std::size_t BitMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BitMask complement(const BitMask& m) {
  BitMask out(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) out.set(i, !m.at(i));
  return out;
}

BitMask class_mask(const LabelMap& labels, int cls) {
  BitMask out(labels.height(), labels.width());
  auto l = labels.labels();
  for (std::size_t i = 0; i < l.size(); ++i) out.set(i, l[i] == cls);
  return out;
}

}  // namespace raml
