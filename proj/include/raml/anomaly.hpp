#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "raml/metric_embedding.hpp"
#include "raml/region_separation.hpp"
#include "raml/tensor.hpp"

namespace raml {

/// Per-pixel anomaly probability in [0,1] as a 1 x H x W tensor.
struct AnomalyMap {
  Tensor3d values;

  int height() const { return values.height(); }
  int width() const { return values.width(); }
};

/// Pixel scores with ground truth (1 = anomalous).
struct ScoredPixels {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  void append(std::span<const double> s, std::span<const std::uint8_t> l);
};

/// Maximum cosine similarity of the region embedding to any known prototype.
double region_anomaly_prob(std::span<const double> embedding, const PrototypeBank& bank);

/// Q = -(max logit) * P(region) per pixel; pixels outside every region use P = 1.
Tensor3d uncertainty_map(const Tensor3& logits, const RegionSet& regions, std::span<const double> probs);

/// Per-frame min-max rescaling to [0,1]; a constant map becomes all 0.5.
AnomalyMap normalize_map(const Tensor3d& q);

/// Normalized negative max logit (the MaxLogit baseline).
AnomalyMap maxlogit_map(const Tensor3& logits);

/// Mann-Whitney statistic P(pos > neg) + P(tie)/2.
double auroc(const ScoredPixels& s);
/// Average precision with tied scores treated as one threshold.
double aupr(const ScoredPixels& s);
/// False-positive rate at the largest threshold reaching 95% recall.
double fpr95(const ScoredPixels& s);

struct AnomalyMetrics {
  double auroc = 0.0;
  double aupr = 0.0;
  double fpr95 = 0.0;
  std::size_t pixels = 0;
};

AnomalyMetrics evaluate_anomaly(const ScoredPixels& s);

/// Full region-aware scoring of one frame from given candidate regions.
AnomalyMap score_regions(const Tensor3& features, const Tensor3& logits, const RegionSet& regions,
                         const ProjectionHead& head, const PrototypeBank& bank);

/// separate_regions followed by score_regions.
AnomalyMap score_image(const Tensor3& image, const Tensor3& features, const Tensor3& logits,
                       const ProjectionHead& head, const PrototypeBank& bank, const UrsConfig& cfg);

}  // namespace raml
