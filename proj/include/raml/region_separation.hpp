#pragma once

#include <vector>

#include "raml/tensor.hpp"

namespace raml {

enum class MspMode {
  kUncertainty,  // edge where MSP <= beta
  kLiteral,      // edge where MSP >= beta
};

enum class Connectivity { kFour = 4, kEight = 8 };

struct UrsConfig {
  double alpha = 50.0;  // Sobel threshold, 0-255 intensity scale
  double beta = 0.7;    // MSP threshold
  MspMode msp_mode = MspMode::kUncertainty;
  Connectivity connectivity = Connectivity::kFour;
  int min_region_area = 16;

  void validate() const;
};

/// Disjoint, individually connected candidate regions of one frame.
struct RegionSet {
  int height = 0;
  int width = 0;
  std::vector<BitMask> regions;

  std::size_t size() const { return regions.size(); }
  bool empty() const { return regions.empty(); }
};

/// Luminance (0.299R + 0.587G + 0.114B) * 255, then 3x3 Sobel gradient
/// magnitude with clamp-to-border sampling. Returns 1 x H x W.
Tensor3 sobel_magnitude(const Tensor3& image);

/// Per-pixel maximum softmax probability over the logit channels.
Tensor3 msp(const Tensor3& logits);

BitMask edge_map(const Tensor3& image, const Tensor3& logits, const UrsConfig& cfg);

/// Sets every clear pixel that cannot reach the frame border through clear
/// pixels. `background` is the connectivity used for the clear set.
BitMask fill_holes(const BitMask& mask, Connectivity background = Connectivity::kEight);

/// Maximal connected components of the set pixels, area >= min_area, ordered
/// by descending area and then by raster position of the first pixel.
RegionSet connected_components(const BitMask& mask, Connectivity connectivity, int min_area = 1);

/// Candidate regions of one frame: the connected components of the non-edge
/// pixels. Each component also absorbs the enclosed edge blobs that touch no
/// other component (holes inside an object), then small regions are dropped.
RegionSet separate_regions(const Tensor3& image, const Tensor3& logits, const UrsConfig& cfg);

/// Region extraction from an already computed edge map.
RegionSet regions_from_edges(const BitMask& edges, const UrsConfig& cfg);

}  // namespace raml
