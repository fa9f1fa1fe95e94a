#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "raml/optim.hpp"
#include "raml/tensor.hpp"

namespace raml {

using Embedding = std::vector<double>;

/// Two affine layers with a rectifier between them: in -> hidden -> out.
struct ProjectionHead {
  int in_dim = 0;
  int hidden = 0;
  int out_dim = 0;
  std::vector<double> w1;  // hidden x in_dim, row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // out_dim x hidden
  std::vector<double> b2;  // out_dim

  /// Glorot-uniform weights, zero biases.
  static ProjectionHead init(int in_dim, int hidden, int out_dim, std::uint64_t seed);

  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
  /// Parameters flattened in the order w1, b1, w2, b2.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  void validate() const;

  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;
};

/// Activations cached by `head_forward` for `head_backward`.
struct HeadCache {
  std::vector<double> input;
  std::vector<double> hidden_pre;
  std::vector<double> output;
};

HeadCache head_forward(const ProjectionHead& head, std::span<const double> input);
/// Accumulates parameter gradients into `grad` (flattened layout) and returns
/// the gradient with respect to the head input.
std::vector<double> head_backward(const ProjectionHead& head, const HeadCache& cache,
                                  std::span<const double> grad_output, std::span<double> grad);

/// Masked mean of the per-pixel feature vectors of `features` over `region`.
std::vector<double> region_pool(const Tensor3& features, const BitMask& region);
std::vector<double> region_pool(const Tensor3d& features, const BitMask& region);
/// Adds d loss / d features given d loss / d pooled.
void region_pool_backward(std::span<const double> grad_pooled, const BitMask& region, Tensor3d& grad_features);

Embedding embed_region(const Tensor3& features, const BitMask& region, const ProjectionHead& head);

double cosine(std::span<const double> a, std::span<const double> b);

/// Gradient of cosine(a, b) with respect to a.
std::vector<double> cosine_grad(std::span<const double> a, std::span<const double> b);

struct PrototypeBank {
  std::map<int, Embedding> known;  // class index -> prototype
  std::map<int, int> counts;       // images contributing to each prototype
};

struct LabeledFeatures {
  const Tensor3* features;
  const LabelMap* labels;
};

/// Per class: the mean over images containing the class of the embedding of
/// that image's class mask. Throws PreconditionError listing absent classes.
PrototypeBank known_prototypes(std::span<const LabeledFeatures> dataset, const ProjectionHead& head,
                               int num_classes);

struct CircleLossConfig {
  double gamma = 8.0;
  double margin = 0.25;

  void validate() const;
};

double circle_loss(std::span<const double> s_p, std::span<const double> s_n, const CircleLossConfig& cfg);

struct CircleLossGrad {
  std::vector<double> d_sp;
  std::vector<double> d_sn;
};

CircleLossGrad circle_loss_grad(std::span<const double> s_p, std::span<const double> s_n,
                                const CircleLossConfig& cfg);

/// One training example for the projection head: a mask-pooled feature vector
/// and its class.
struct PooledRegion {
  std::vector<double> pooled;
  int label = 0;
};

/// Batch circle loss with per-batch class prototypes. Each region is scored
/// against the mean of the other batch members of its class (s_p) and against
/// the means of the other classes present (s_n); regions without a same-class
/// partner are skipped. Returns the mean loss over scored regions and, when
/// `grad` is non-null, accumulates the exact gradient of that mean.
/// `grad_inputs`, when non-null, receives d loss / d pooled for each region.
double head_batch_loss(const ProjectionHead& head, std::span<const PooledRegion> batch,
                       const CircleLossConfig& cfg, std::span<double> grad = {},
                       std::vector<std::vector<double>>* grad_inputs = nullptr);

struct HeadTrainConfig {
  int iters = 1500;
  int batch = 32;
  std::uint64_t seed = 1;
  SgdConfig sgd{0.02, 0.9, 1e-4, 0.9};
};

struct HeadTrainLog {
  std::vector<double> loss;  // per iteration
};

/// SGD-momentum training of the head on circle loss over random batches.
/// Throws PreconditionError when fewer than two classes are present.
ProjectionHead train_head(std::span<const PooledRegion> dataset, ProjectionHead head,
                          const CircleLossConfig& cfg, const HeadTrainConfig& train,
                          HeadTrainLog* log = nullptr);

}  // namespace raml
