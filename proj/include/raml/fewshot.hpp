#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "raml/metric_embedding.hpp"
#include "raml/region_separation.hpp"
#include "raml/tensor.hpp"

namespace raml {

struct FewshotConfig {
  double theta_novel = 0.8;
  int M = 1;  // novel classes
  int L = 5;  // shots per class

  void validate() const;
};

/// One annotated example of a novel class.
struct Shot {
  const Tensor3* features;
  const BitMask* mask;
  std::string id;
};

struct NovelPrototypes {
  std::vector<Embedding> prototypes;  // index i = novel class i (0-based)
  int shots = 0;
  std::vector<std::vector<std::string>> shot_ids;
};

/// Mean of the L shot embeddings per novel class. `shots[i]` holds class i.
NovelPrototypes novel_prototypes(std::span<const std::vector<Shot>> shots, const ProjectionHead& head);

/// Cosine similarity of the region embedding to every novel prototype.
std::vector<double> region_similarities(std::span<const double> embedding, const NovelPrototypes& protos);

/// 0-based novel class whose similarity exceeds theta and strictly exceeds
/// every other class, or nullopt (reject).
std::optional<int> classify_region(std::span<const double> sims, double theta_novel);

/// Overwrites accepted regions with label num_known + class.
LabelMap assemble_segmentation(const LabelMap& closed_pred, const RegionSet& regions,
                               std::span<const std::optional<int>> decisions, int num_known);

struct MiouReport {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from pred and gt
  double miou_all = 0.0;
  double miou_novel = 0.0;
  double miou_old = 0.0;
  double miou_harm = 0.0;
  std::vector<std::string> notes;
};

/// Accumulated (gt, pred) pixel counts; shards merge by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return n_; }
  /// pred == num_classes() counts predictions outside the class range.
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * (n_ + 1) + pred]; }

 private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

/// 2ab / (a + b), zero when either side is zero.
double harmonic_mean(double a, double b);

MiouReport miou(const ConfusionMatrix& cm, const std::set<int>& known, const std::set<int>& novel);
MiouReport miou(const LabelMap& pred, const LabelMap& gt, const std::set<int>& known, const std::set<int>& novel);

}  // namespace raml
