#include "raml/region_separation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

namespace raml {

namespace {

struct Offset {
  int dy, dx;
};
constexpr std::array<Offset, 8> kNeighbours = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1},
                                                {-1, -1}, {-1, 1}, {1, -1}, {1, 1}}};

int neighbour_count(Connectivity c) { return c == Connectivity::kFour ? 4 : 8; }

// Labels the pixels where `member(i)` holds; other pixels get -1.
template <typename Pred>
int label_components(int h, int w, Pred member, Connectivity conn, std::vector<int>& labels) {
  labels.assign(static_cast<std::size_t>(h) * w, -1);
  const int nn = neighbour_count(conn);
  std::vector<int> stack;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (labels[start] != -1 || !member(start)) continue;
    labels[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      int p = stack.back();
      stack.pop_back();
      int y = p / w, x = p % w;
      for (int k = 0; k < nn; ++k) {
        int ny = y + kNeighbours[k].dy, nx = x + kNeighbours[k].dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        int q = ny * w + nx;
        if (labels[q] == -1 && member(q)) {
          labels[q] = next;
          stack.push_back(q);
        }
      }
    }
    ++next;
  }
  return next;
}

// Builds, filters and orders regions from a component labelling.
RegionSet collect_regions(int h, int w, const std::vector<int>& labels, int count, int min_area) {
  std::vector<int> area(count, 0), first(count, -1);
  for (int i = 0; i < h * w; ++i) {
    int l = labels[i];
    if (l < 0) continue;
    if (area[l]++ == 0) first[l] = i;
  }
  std::vector<int> order;
  for (int l = 0; l < count; ++l) {
    if (area[l] >= min_area && area[l] > 0) order.push_back(l);
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (area[a] != area[b]) return area[a] > area[b];
    return first[a] < first[b];
  });
  std::vector<int> slot(count, -1);
  RegionSet out{h, w, {}};
  out.regions.reserve(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    slot[order[k]] = static_cast<int>(k);
    out.regions.emplace_back(h, w);
  }
  for (int i = 0; i < h * w; ++i) {
    if (labels[i] >= 0 && slot[labels[i]] >= 0) out.regions[slot[labels[i]]].set(i);
  }
  return out;
}

void check_same_plane(const Tensor3& image, const Tensor3& logits) {
  if (image.height() != logits.height() || image.width() != logits.width()) {
    throw ShapeError("edge_map: image is " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + " but logits are " +
                     std::to_string(logits.height()) + "x" + std::to_string(logits.width()));
  }
}

}  // namespace

void UrsConfig::validate() const {
  if (!(alpha >= 0.0)) throw PreconditionError("UrsConfig: alpha must be >= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) throw PreconditionError("UrsConfig: beta must be in [0,1]");
  if (min_region_area < 1) throw PreconditionError("UrsConfig: min_region_area must be >= 1");
}

Tensor3 sobel_magnitude(const Tensor3& image) {
  if (image.channels() != 3) {
    throw ShapeError("sobel_magnitude: expected 3 channels, got " + std::to_string(image.channels()));
  }
  const int h = image.height(), w = image.width();
  std::vector<double> gray(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gray[y * w + x] =
          (0.299 * image(0, y, x) + 0.587 * image(1, y, x) + 0.114 * image(2, y, x)) * 255.0;
    }
  }
  auto g = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return gray[y * w + x];
  };
  Tensor3 out(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double gx = (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) -
                  (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
      double gy = (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) -
                  (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
      out(0, y, x) = static_cast<float>(std::sqrt(gx * gx + gy * gy));
    }
  }
  return out;
}

Tensor3 msp(const Tensor3& logits) {
  if (logits.channels() < 2) throw ShapeError("msp: need at least 2 classes");
  const int n = logits.channels(), h = logits.height(), w = logits.width();
  Tensor3 out(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = logits(0, y, x);
      for (int c = 1; c < n; ++c) m = std::max(m, static_cast<double>(logits(c, y, x)));
      double z = 0.0;
      for (int c = 0; c < n; ++c) z += std::exp(static_cast<double>(logits(c, y, x)) - m);
      // The largest term contributes exp(0) = 1.
      out(0, y, x) = static_cast<float>(1.0 / z);
    }
  }
  return out;
}

BitMask edge_map(const Tensor3& image, const Tensor3& logits, const UrsConfig& cfg) {
  cfg.validate();
  check_same_plane(image, logits);
  Tensor3 sobel = sobel_magnitude(image);
  Tensor3 conf = msp(logits);
  BitMask edges(image.height(), image.width());
  for (std::size_t i = 0; i < edges.size(); ++i) {
    double p = conf.data()[i];
    bool msp_edge = cfg.msp_mode == MspMode::kUncertainty ? p <= cfg.beta : p >= cfg.beta;
    edges.set(i, sobel.data()[i] >= cfg.alpha || msp_edge);
  }
  return edges;
}

BitMask fill_holes(const BitMask& mask, Connectivity background) {
  const int h = mask.height(), w = mask.width();
  std::vector<int> labels;
  int n = label_components(h, w, [&](int i) { return !mask.at(i); }, background, labels);
  std::vector<char> reaches_border(n, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (y != 0 && y != h - 1 && x != 0 && x != w - 1) continue;
      int l = labels[y * w + x];
      if (l >= 0) reaches_border[l] = 1;
    }
  }
  BitMask out = mask;
  for (int i = 0; i < h * w; ++i) {
    if (labels[i] >= 0 && !reaches_border[labels[i]]) out.set(static_cast<std::size_t>(i));
  }
  return out;
}

RegionSet connected_components(const BitMask& mask, Connectivity connectivity, int min_area) {
  std::vector<int> labels;
  int n = label_components(mask.height(), mask.width(), [&](int i) { return mask.at(i); },
                           connectivity, labels);
  return collect_regions(mask.height(), mask.width(), labels, n, std::max(min_area, 1));
}

RegionSet regions_from_edges(const BitMask& edges, const UrsConfig& cfg) {
  cfg.validate();
  const int h = edges.height(), w = edges.width();
  std::vector<int> region;
  int nregions = label_components(h, w, [&](int i) { return !edges.at(i); }, cfg.connectivity, region);

  // Edge blobs use the dual connectivity of the regions.
  Connectivity dual =
      cfg.connectivity == Connectivity::kFour ? Connectivity::kEight : Connectivity::kFour;
  std::vector<int> blob;
  int nblobs = label_components(h, w, [&](int i) { return edges.at(i); }, dual, blob);

  constexpr int kNone = -1, kMany = -2;
  std::vector<int> owner(nblobs, kNone);
  std::vector<char> on_border(nblobs, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int b = blob[y * w + x];
      if (b < 0) continue;
      if (y == 0 || y == h - 1 || x == 0 || x == w - 1) on_border[b] = 1;
      for (int k = 0; k < 4; ++k) {
        int ny = y + kNeighbours[k].dy, nx = x + kNeighbours[k].dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        int r = region[ny * w + nx];
        if (r < 0) continue;
        if (owner[b] == kNone) {
          owner[b] = r;
        } else if (owner[b] != r) {
          owner[b] = kMany;
        }
      }
    }
  }
  for (int i = 0; i < h * w; ++i) {
    int b = blob[i];
    if (b >= 0 && !on_border[b] && owner[b] >= 0) region[i] = owner[b];
  }
  return collect_regions(h, w, region, nregions, cfg.min_region_area);
}

RegionSet separate_regions(const Tensor3& image, const Tensor3& logits, const UrsConfig& cfg) {
  return regions_from_edges(edge_map(image, logits, cfg), cfg);
}

}  // namespace raml
