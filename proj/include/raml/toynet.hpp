#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "raml/mca.hpp"
#include "raml/optim.hpp"
#include "raml/tensor.hpp"

namespace raml {

/// Parameters of the desk-scale backbone:
///   conv1 3x3 (in -> hidden) -> ReLU -> conv2 3x3 (hidden -> features) -> ReLU = F
///   head 1x1 (features -> outputs) = U
/// Convolutions use stride 1 and zero padding 1.
template <typename T>
struct NetParams {
  int in_channels = 3;
  int hidden = 16;
  int features = 32;
  int outputs = 4;
  std::vector<T> conv1_w;  // hidden x in x 3 x 3
  std::vector<T> conv1_b;
  std::vector<T> conv2_w;  // features x hidden x 3 x 3
  std::vector<T> conv2_b;
  std::vector<T> head_w;   // outputs x features
  std::vector<T> head_b;

  static NetParams init(int in_channels, int hidden, int features, int outputs, std::uint64_t seed);
  /// Zero-valued parameters with the same shapes (gradient accumulator).
  NetParams zeros_like() const;
  /// Copy with `extra` freshly initialized head rows appended.
  NetParams widened(int extra, std::uint64_t seed) const;

  std::size_t parameter_count() const;
  /// Order: conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b.
  std::vector<std::span<T>> blocks();
  std::vector<std::span<const T>> blocks() const;
  std::vector<T> flatten() const;
  void assign(std::span<const T> flat);
  void add(const NetParams& other, T scale = T(1));
  bool all_finite() const;

  template <typename U>
  NetParams<U> cast() const {
    NetParams<U> o;
    o.in_channels = in_channels;
    o.hidden = hidden;
    o.features = features;
    o.outputs = outputs;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    o.conv1_w = conv(conv1_w);
    o.conv1_b = conv(conv1_b);
    o.conv2_w = conv(conv2_w);
    o.conv2_b = conv(conv2_b);
    o.head_w = conv(head_w);
    o.head_b = conv(head_b);
    return o;
  }

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

using ToyNetParams = NetParams<float>;

/// Activations kept for the backward pass.
template <typename T>
struct ForwardCache {
  BasicTensor3<T> input;
  BasicTensor3<T> hidden;    // post-ReLU conv1
  BasicTensor3<T> features;  // post-ReLU conv2 (F)
  BasicTensor3<T> logits;    // U
};

template <typename T>
ForwardCache<T> forward(const NetParams<T>& params, const BasicTensor3<T>& image);

/// Exact reverse-mode gradients. `grad_features` (may be null) is an upstream
/// gradient on F from paths that bypass the head, e.g. region pooling.
/// Gradients are added into `grads`.
template <typename T>
void backward(const NetParams<T>& params, const ForwardCache<T>& cache, const BasicTensor3<T>& grad_logits,
              const BasicTensor3<T>* grad_features, NetParams<T>& grads);

/// Smallest |pre-activation| over both rectifiers. Finite-difference checks
/// need it well above the probe step.
template <typename T>
double kink_margin(const NetParams<T>& params, const BasicTensor3<T>& image);

/// Per-pixel argmax over the first `num_classes` logit channels.
LabelMap predict_labels(const Tensor3& logits, int num_classes);

/// One training image with its loss labels.
struct TrainSample {
  Tensor3 image;
  LabelMap labels;
};

struct TrainConfig {
  SgdConfig sgd{0.05, 0.9, 1e-4, 0.9};
  int iters = 2000;
  int batch = 4;
  std::uint64_t seed = 1;
  double clip_norm = 0.0;  // rescale the batch gradient to this L2 norm when larger; 0 disables
};

struct TrainLog {
  struct Entry {
    int iter;
    LossBreakdown loss;
  };
  std::vector<Entry> entries;
};

/// Close-set training with cross entropy. Throws DivergenceError on a
/// non-finite loss and PreconditionError with fewer than two classes.
ToyNetParams train_closed(std::span<const TrainSample> dataset, ToyNetParams init, const TrainConfig& cfg,
                          TrainLog* log = nullptr);

struct FinetuneData {
  std::span<const TrainSample> regular;
  std::span<const TrainSample> shots;
  int shot_period = 5;  // every shot_period-th batch is drawn from the shots
};

/// Widens the head by cfg.K meta channels and optimizes the combined
/// segmentation + MCA objective.
ToyNetParams finetune_mca(const ToyNetParams& closed, const FinetuneData& data, const McaConfig& mca,
                          const TrainConfig& cfg, int num_known, TrainLog* log = nullptr);

/// Naive fine-tuning baseline: widen the head by `num_novel` channels and
/// train cross entropy on the shots alone (labels carry only novel pixels).
ToyNetParams finetune_naive(const ToyNetParams& closed, std::span<const TrainSample> shots, int num_novel,
                            const TrainConfig& cfg, TrainLog* log = nullptr);

/// Loss callback used by the generic trainer: fills d loss / d logits and
/// returns the loss terms for one image.
using LossFn = std::function<LossBreakdown(const Tensor3d& logits, const TrainSample& sample, Tensor3d& grad)>;

/// Minibatch SGD over `pick(iter, slot)`-selected samples.
ToyNetParams train_generic(ToyNetParams params, const std::function<const TrainSample&(int, int)>& pick,
                           const LossFn& loss, const TrainConfig& cfg, TrainLog* log);

}  // namespace raml
