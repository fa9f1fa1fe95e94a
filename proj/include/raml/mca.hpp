#pragma once

#include <set>
#include <span>
#include <vector>

#include "raml/region_separation.hpp"
#include "raml/tensor.hpp"

namespace raml {

enum class MetaActivation {
  kSoftmaxAll,         // softmax across all N+K channels
  kSigmoidPerChannel,  // independent sigmoid per channel
};

enum class CandidateMode {
  kLiteral,    // numerator = binarized channel mass over the whole frame
  kIntersect,  // numerator = binarized channel mass inside the novel mask
};

struct McaConfig {
  int K = 4;
  double eta = 0.02;
  double lambda_inter = 0.1;
  double lambda_split = 0.1;
  double lambda_rec = 0.01;
  double kappa = 0.1;
  double dice_epsilon = 1e-6;
  MetaActivation activation = MetaActivation::kSigmoidPerChannel;
  CandidateMode candidate_mode = CandidateMode::kLiteral;
  // Segmentation cross entropy over all N+K channels. When false only the
  // first N channels enter the softmax and meta channels are left free.
  bool seg_all_channels = true;

  void validate() const;
};

/// Activated (N+K)-channel output of the widened head.
struct MetaOutput {
  Tensor3d values;
  MetaActivation activation = MetaActivation::kSigmoidPerChannel;
};

MetaOutput activate(const Tensor3d& logits, MetaActivation activation);

/// Mean cross entropy over non-ignore pixels of softmax over the first
/// `num_classes` logit channels (all channels when num_classes <= 0).
/// With unknown_from > 0, pixels labelled LabelMap::kUnknown score
/// -log of the summed probability of channels [unknown_from, num_classes).
/// Adds d loss / d logits into `grad` when non-null.
double seg_loss(const Tensor3d& logits, const LabelMap& labels, Tensor3d* grad = nullptr, int num_classes = 0,
                int unknown_from = 0);

/// 2 * sum(a*b) / (sum(a) + sum(b) + eps)
double dice_coeff(std::span<const double> a, std::span<const double> b, double eps);

/// Sum of dice coefficients over all unordered channel pairs. Adds
/// d loss / d C into `grad_c` when non-null.
double inter_loss(const MetaOutput& c, double eps = 1e-6, Tensor3d* grad_c = nullptr);

/// sum over meta channels i of -log(max(eta * mass_i, 1)); meta channels are
/// the last K of the N+K channels.
double split_loss(const MetaOutput& c, int num_known, int num_meta, double eta, Tensor3d* grad_c = nullptr);

/// || X (.) (sum_i C_i - 1) ||^2 with the residual broadcast over image channels.
double rec_loss(const Tensor3d& image, const MetaOutput& c, Tensor3d* grad_c = nullptr);

struct LossBreakdown {
  double seg = 0.0;
  double inter = 0.0;
  double split = 0.0;
  double rec = 0.0;
  double total = 0.0;
};

/// Weighted combination of the four terms given precomputed values.
double combine_losses(const LossBreakdown& terms, const McaConfig& cfg);

/// Full fine-tuning objective on (N+K)-channel logits. The segmentation term
/// spans all channels or the first `num_known`, per cfg.seg_all_channels.
/// Pixels labelled LabelMap::kUnknown target the meta channels as a group
/// and require seg_all_channels. Writes d total / d logits into
/// `grad_logits` when non-null.
LossBreakdown overall_loss(const Tensor3d& logits, const LabelMap& labels, const Tensor3d& image,
                           int num_known, const McaConfig& cfg, Tensor3d* grad_logits = nullptr);

/// Per-pixel argmax over all N+K channels (lowest index wins ties); returns one
/// mask per meta channel.
std::vector<BitMask> binarize_meta(const MetaOutput& c, int num_known);

/// Meta channel indices (0-based within the K meta channels) whose mass
/// relative to the novel mask strictly exceeds kappa.
std::set<int> candidate_channels(std::span<const BitMask> meta_masks, const BitMask& novel_mask, double kappa,
                                 CandidateMode mode = CandidateMode::kLiteral);

/// Pointwise union of the masks. An empty selection yields an empty h x w
/// mask and a warning on stderr.
BitMask aggregate_channels(std::span<const BitMask> masks, int height, int width);

/// One annotated image seen through the MCA head.
struct AnnotatedShot {
  const MetaOutput* output;
  const BitMask* novel_mask;
};

/// Union over shots of the candidate channels.
std::set<int> select_candidates(std::span<const AnnotatedShot> shots, int num_known, const McaConfig& cfg);

/// binarize -> keep candidate channels -> union -> fill holes -> components.
RegionSet mca_regions(const MetaOutput& c, const std::set<int>& candidates, int num_known,
                      Connectivity connectivity, int min_area);

RegionSet mca_regions(const MetaOutput& c, std::span<const AnnotatedShot> shots, int num_known,
                      const McaConfig& cfg, Connectivity connectivity, int min_area);

}  // namespace raml
