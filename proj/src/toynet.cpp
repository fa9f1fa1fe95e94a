#include "raml/toynet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "raml/parallel.hpp"
#include "raml/rng.hpp"

namespace raml {

namespace {

template <typename T>
void glorot(std::vector<T>& w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (T& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
}

// out[co] = bias[co] + sum_ci conv(in[ci], w[co][ci]), zero padding 1.
template <typename T>
void conv3x3_forward(const T* in, int cin, int h, int w, const T* wt, const T* bias, int cout, T* out) {
  const int hw = h * w;
  for (int co = 0; co < cout; ++co) std::fill(out + co * hw, out + (co + 1) * hw, bias[co]);
  for (int co = 0; co < cout; ++co) {
    T* o_plane = out + co * hw;
    for (int ci = 0; ci < cin; ++ci) {
      const T* i_plane = in + ci * hw;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          const T wv = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            T* o = o_plane + y * w;
            const T* src = i_plane + (y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) o[x] += wv * src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void conv3x3_backward(const T* in, int cin, int h, int w, const T* wt, int cout, const T* gout, T* gw, T* gb,
                      T* gin) {
  const int hw = h * w;
  std::vector<T> acc(w);
  for (int co = 0; co < cout; ++co) {
    const T* g_plane = gout + co * hw;
    T s = 0;
    for (int p = 0; p < hw; ++p) s += g_plane[p];
    gb[co] += s;
    for (int ci = 0; ci < cin; ++ci) {
      const T* i_plane = in + ci * hw;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          // Row-wise accumulation keeps the inner loop free of a reduction.
          std::fill(acc.begin(), acc.end(), T(0));
          for (int y = y0; y < y1; ++y) {
            const T* g = g_plane + y * w;
            const T* src = i_plane + (y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) acc[x] += g[x] * src[x];
          }
          T total = 0;
          for (int x = 0; x < w; ++x) total += acc[x];
          gw[((co * cin + ci) * 3 + ky) * 3 + kx] += total;
          if (gin == nullptr) continue;
          const T wv = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
          T* gi_plane = gin + ci * hw;
          for (int y = y0; y < y1; ++y) {
            const T* g = g_plane + y * w;
            T* dst = gi_plane + (y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) dst[x] += wv * g[x];
          }
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(std::span<T> v) {
  for (T& x : v) x = x > T(0) ? x : T(0);
}

template <typename T>
void check_image(const NetParams<T>& p, const BasicTensor3<T>& image) {
  if (image.channels() != p.in_channels) {
    throw ShapeError("forward: expected " + std::to_string(p.in_channels) + " input channels, got " +
                     std::to_string(image.channels()));
  }
}

}  // namespace

template <typename T>
NetParams<T> NetParams<T>::init(int in_channels, int hidden, int features, int outputs, std::uint64_t seed) {
  if (in_channels <= 0 || hidden <= 0 || features <= 0 || outputs <= 0) {
    throw PreconditionError("NetParams: layer widths must be positive");
  }
  NetParams p;
  p.in_channels = in_channels;
  p.hidden = hidden;
  p.features = features;
  p.outputs = outputs;
  p.conv1_w.resize(static_cast<std::size_t>(hidden) * in_channels * 9);
  p.conv1_b.assign(hidden, T(0));
  p.conv2_w.resize(static_cast<std::size_t>(features) * hidden * 9);
  p.conv2_b.assign(features, T(0));
  p.head_w.resize(static_cast<std::size_t>(outputs) * features);
  p.head_b.assign(outputs, T(0));
  Rng rng(seed);
  glorot(p.conv1_w, in_channels * 9, hidden * 9, rng);
  glorot(p.conv2_w, hidden * 9, features * 9, rng);
  glorot(p.head_w, features, outputs, rng);
  return p;
}

template <typename T>
NetParams<T> NetParams<T>::zeros_like() const {
  NetParams z = *this;
  for (auto b : z.blocks()) std::fill(b.begin(), b.end(), T(0));
  return z;
}

template <typename T>
NetParams<T> NetParams<T>::widened(int extra, std::uint64_t seed) const {
  if (extra < 1) throw PreconditionError("NetParams::widened: extra must be >= 1");
  NetParams p = *this;
  // Fresh rows use the initialization of a newly built head of the final width.
  NetParams fresh = init(in_channels, hidden, features, outputs + extra, seed);
  p.outputs = outputs + extra;
  p.head_w.insert(p.head_w.end(), fresh.head_w.begin() + static_cast<std::ptrdiff_t>(head_w.size()),
                  fresh.head_w.end());
  p.head_b.resize(p.outputs, T(0));
  return p;
}

template <typename T>
std::size_t NetParams<T>::parameter_count() const {
  return conv1_w.size() + conv1_b.size() + conv2_w.size() + conv2_b.size() + head_w.size() + head_b.size();
}

template <typename T>
std::vector<std::span<T>> NetParams<T>::blocks() {
  return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b};
}

template <typename T>
std::vector<std::span<const T>> NetParams<T>::blocks() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b};
}

template <typename T>
std::vector<T> NetParams<T>::flatten() const {
  std::vector<T> out;
  out.reserve(parameter_count());
  for (auto b : blocks()) out.insert(out.end(), b.begin(), b.end());
  return out;
}

template <typename T>
void NetParams<T>::assign(std::span<const T> flat) {
  if (flat.size() != parameter_count()) throw ShapeError("NetParams::assign: size mismatch");
  std::size_t off = 0;
  for (auto b : blocks()) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + b.size()),
              b.begin());
    off += b.size();
  }
}

template <typename T>
void NetParams<T>::add(const NetParams& other, T scale) {
  auto dst = blocks();
  auto src = other.blocks();
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k].size() != src[k].size()) throw ShapeError("NetParams::add: shape mismatch");
    for (std::size_t i = 0; i < dst[k].size(); ++i) dst[k][i] += scale * src[k][i];
  }
}

template <typename T>
bool NetParams<T>::all_finite() const {
  for (auto b : blocks()) {
    for (T v : b) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
  }
  return true;
}

template <typename T>
ForwardCache<T> forward(const NetParams<T>& p, const BasicTensor3<T>& image) {
  check_image(p, image);
  const int h = image.height(), w = image.width(), hw = h * w;
  ForwardCache<T> c;
  c.input = image;
  c.hidden = BasicTensor3<T>(p.hidden, h, w);
  conv3x3_forward(image.data().data(), p.in_channels, h, w, p.conv1_w.data(), p.conv1_b.data(), p.hidden,
                  c.hidden.data().data());
  relu_inplace(c.hidden.data());
  c.features = BasicTensor3<T>(p.features, h, w);
  conv3x3_forward(c.hidden.data().data(), p.hidden, h, w, p.conv2_w.data(), p.conv2_b.data(), p.features,
                  c.features.data().data());
  relu_inplace(c.features.data());
  c.logits = BasicTensor3<T>(p.outputs, h, w);
  for (int k = 0; k < p.outputs; ++k) {
    auto out = c.logits.channel(k);
    std::fill(out.begin(), out.end(), p.head_b[k]);
    for (int f = 0; f < p.features; ++f) {
      const T wv = p.head_w[static_cast<std::size_t>(k) * p.features + f];
      auto src = c.features.channel(f);
      for (int i = 0; i < hw; ++i) out[i] += wv * src[i];
    }
  }
  return c;
}

template <typename T>
void backward(const NetParams<T>& p, const ForwardCache<T>& c, const BasicTensor3<T>& grad_logits,
              const BasicTensor3<T>* grad_features, NetParams<T>& g) {
  if (c.logits.empty()) throw PreconditionError("backward: forward cache is empty");
  if (!grad_logits.same_shape(c.logits)) throw ShapeError("backward: logit gradient shape mismatch");
  if (grad_features != nullptr && !grad_features->same_shape(c.features)) {
    throw ShapeError("backward: feature gradient shape mismatch");
  }
  const int h = c.input.height(), w = c.input.width(), hw = h * w;

  // Head (1x1 convolution).
  BasicTensor3<T> d_feat = grad_features != nullptr ? *grad_features : BasicTensor3<T>(p.features, h, w);
  for (int k = 0; k < p.outputs; ++k) {
    auto gu = grad_logits.channel(k);
    T sb = 0;
    for (int i = 0; i < hw; ++i) sb += gu[i];
    g.head_b[k] += sb;
    for (int f = 0; f < p.features; ++f) {
      auto a = c.features.channel(f);
      T s = 0;
      for (int i = 0; i < hw; ++i) s += gu[i] * a[i];
      g.head_w[static_cast<std::size_t>(k) * p.features + f] += s;
      const T wv = p.head_w[static_cast<std::size_t>(k) * p.features + f];
      auto df = d_feat.channel(f);
      for (int i = 0; i < hw; ++i) df[i] += wv * gu[i];
    }
  }
  {
    auto df = d_feat.data();
    auto a = c.features.data();
    for (std::size_t i = 0; i < df.size(); ++i) {
      if (!(a[i] > T(0))) df[i] = T(0);
    }
  }
  BasicTensor3<T> d_hidden(p.hidden, h, w);
  conv3x3_backward(c.hidden.data().data(), p.hidden, h, w, p.conv2_w.data(), p.features, d_feat.data().data(),
                   g.conv2_w.data(), g.conv2_b.data(), d_hidden.data().data());
  {
    auto dh = d_hidden.data();
    auto a = c.hidden.data();
    for (std::size_t i = 0; i < dh.size(); ++i) {
      if (!(a[i] > T(0))) dh[i] = T(0);
    }
  }
  conv3x3_backward(c.input.data().data(), p.in_channels, h, w, p.conv1_w.data(), p.hidden, d_hidden.data().data(),
                   g.conv1_w.data(), g.conv1_b.data(), static_cast<T*>(nullptr));
}

template <typename T>
double kink_margin(const NetParams<T>& p, const BasicTensor3<T>& image) {
  check_image(p, image);
  const int h = image.height(), w = image.width();
  double margin = std::numeric_limits<double>::infinity();
  BasicTensor3<T> hidden(p.hidden, h, w);
  conv3x3_forward(image.data().data(), p.in_channels, h, w, p.conv1_w.data(), p.conv1_b.data(), p.hidden,
                  hidden.data().data());
  for (T v : hidden.data()) margin = std::min(margin, std::abs(static_cast<double>(v)));
  relu_inplace(hidden.data());
  BasicTensor3<T> feat(p.features, h, w);
  conv3x3_forward(hidden.data().data(), p.hidden, h, w, p.conv2_w.data(), p.conv2_b.data(), p.features,
                  feat.data().data());
  for (T v : feat.data()) margin = std::min(margin, std::abs(static_cast<double>(v)));
  return margin;
}

LabelMap predict_labels(const Tensor3& logits, int num_classes) {
  if (num_classes < 1 || num_classes > logits.channels()) throw ShapeError("predict_labels: bad class count");
  LabelMap out(logits.height(), logits.width());
  const int hw = logits.plane();
  auto u = logits.data();
  auto l = out.labels();
  for (int p = 0; p < hw; ++p) {
    int best = 0;
    for (int k = 1; k < num_classes; ++k) {
      if (u[k * hw + p] > u[best * hw + p]) best = k;
    }
    l[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ToyNetParams train_generic(ToyNetParams params, const std::function<const TrainSample&(int, int)>& pick,
                           const LossFn& loss, const TrainConfig& cfg, TrainLog* log) {
  cfg.sgd.validate();
  if (cfg.batch < 1) throw PreconditionError("TrainConfig: batch must be >= 1");
  std::vector<double> velocity(params.parameter_count(), 0.0);
  std::vector<ToyNetParams> slot_grads(cfg.batch);
  std::vector<LossBreakdown> slot_loss(cfg.batch);
  for (int it = 0; it < cfg.iters; ++it) {
    parallel_for(static_cast<std::size_t>(cfg.batch), [&](std::size_t s) {
      const TrainSample& sample = pick(it, static_cast<int>(s));
      ForwardCache<float> cache = forward(params, sample.image);
      Tensor3d logits(cache.logits);
      Tensor3d grad(logits.channels(), logits.height(), logits.width());
      slot_loss[s] = loss(logits, sample, grad);
      slot_grads[s] = params.zeros_like();
      backward<float>(params, cache, Tensor3(grad), nullptr, slot_grads[s]);
    });
    ToyNetParams total = params.zeros_like();
    LossBreakdown mean;
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    for (int s = 0; s < cfg.batch; ++s) {
      total.add(slot_grads[s], inv);
      mean.seg += slot_loss[s].seg / cfg.batch;
      mean.inter += slot_loss[s].inter / cfg.batch;
      mean.split += slot_loss[s].split / cfg.batch;
      mean.rec += slot_loss[s].rec / cfg.batch;
      mean.total += slot_loss[s].total / cfg.batch;
    }
    if (!std::isfinite(mean.total) || !total.all_finite()) {
      throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                            " (loss=" + std::to_string(mean.total) + "); lower the learning rate");
    }
    if (log != nullptr) log->entries.push_back({it, mean});
    std::vector<float> flat = params.flatten();
    std::vector<float> gflat = total.flatten();
    if (cfg.clip_norm > 0.0) {
      double sq = 0.0;
      for (float g : gflat) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) {
        const float scale = static_cast<float>(cfg.clip_norm / norm);
        for (float& g : gflat) g *= scale;
      }
    }
    sgd_step<float, float>(flat, gflat, velocity, cfg.sgd, it, cfg.iters);
    params.assign(flat);
  }
  return params;
}

namespace {

// Epoch-shuffled sample order, fixed by the seed.
std::vector<std::size_t> schedule(std::size_t n, std::size_t draws, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> order;
  order.reserve(draws);
  std::vector<std::size_t> perm(n);
  while (order.size() < draws) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < n && order.size() < draws; ++i) order.push_back(perm[i]);
  }
  return order;
}

}  // namespace

ToyNetParams train_closed(std::span<const TrainSample> dataset, ToyNetParams init, const TrainConfig& cfg,
                          TrainLog* log) {
  if (dataset.empty()) throw PreconditionError("train_closed: empty dataset");
  std::vector<char> seen(init.outputs, 0);
  for (const auto& s : dataset) {
    s.labels.validate(init.outputs);
    for (auto l : s.labels.labels()) {
      if (l != LabelMap::kIgnore) seen[l] = 1;
    }
  }
  if (std::count(seen.begin(), seen.end(), 1) < 2) {
    throw PreconditionError("train_closed: need at least two known classes in the training labels");
  }
  auto order = schedule(dataset.size(), static_cast<std::size_t>(cfg.iters) * cfg.batch, cfg.seed);
  auto pick = [&](int it, int slot) -> const TrainSample& {
    return dataset[order[static_cast<std::size_t>(it) * cfg.batch + slot]];
  };
  const int n = init.outputs;
  auto loss = [n](const Tensor3d& logits, const TrainSample& s, Tensor3d& grad) {
    LossBreakdown b;
    b.seg = seg_loss(logits, s.labels, &grad, n);
    b.total = b.seg;
    return b;
  };
  return train_generic(std::move(init), pick, loss, cfg, log);
}

ToyNetParams finetune_mca(const ToyNetParams& closed, const FinetuneData& data, const McaConfig& mca,
                          const TrainConfig& cfg, int num_known, TrainLog* log) {
  mca.validate();
  if (data.regular.empty()) throw PreconditionError("finetune_mca: no regular training samples");
  if (data.shot_period < 1) throw PreconditionError("finetune_mca: shot_period must be >= 1");
  if (num_known != closed.outputs) throw ShapeError("finetune_mca: num_known must equal the closed model width");
  const std::size_t draws = static_cast<std::size_t>(cfg.iters) * cfg.batch;
  auto regular_order = schedule(data.regular.size(), draws, cfg.seed);
  std::vector<std::size_t> shot_order;
  if (!data.shots.empty()) shot_order = schedule(data.shots.size(), draws, cfg.seed ^ 0x5bd1e995ULL);
  const bool mix = !data.shots.empty();
  auto pick = [&](int it, int slot) -> const TrainSample& {
    const std::size_t k = static_cast<std::size_t>(it) * cfg.batch + slot;
    if (mix && it % data.shot_period == data.shot_period - 1) return data.shots[shot_order[k]];
    return data.regular[regular_order[k]];
  };
  auto loss = [&](const Tensor3d& logits, const TrainSample& s, Tensor3d& grad) {
    return overall_loss(logits, s.labels, Tensor3d(s.image), num_known, mca, &grad);
  };
  ToyNetParams init = closed.widened(mca.K, cfg.seed + 101);
  return train_generic(std::move(init), pick, loss, cfg, log);
}

ToyNetParams finetune_naive(const ToyNetParams& closed, std::span<const TrainSample> shots, int num_novel,
                            const TrainConfig& cfg, TrainLog* log) {
  if (shots.empty()) throw PreconditionError("finetune_naive: no shots");
  ToyNetParams init = closed.widened(num_novel, cfg.seed + 202);
  for (const auto& s : shots) s.labels.validate(init.outputs);
  auto order = schedule(shots.size(), static_cast<std::size_t>(cfg.iters) * cfg.batch, cfg.seed);
  auto pick = [&](int it, int slot) -> const TrainSample& {
    return shots[order[static_cast<std::size_t>(it) * cfg.batch + slot]];
  };
  const int n = init.outputs;
  auto loss = [n](const Tensor3d& logits, const TrainSample& s, Tensor3d& grad) {
    LossBreakdown b;
    b.seg = seg_loss(logits, s.labels, &grad, n);
    b.total = b.seg;
    return b;
  };
  return train_generic(std::move(init), pick, loss, cfg, log);
}

template struct NetParams<float>;
template struct NetParams<double>;
template double kink_margin(const NetParams<double>&, const BasicTensor3<double>&);
template ForwardCache<float> forward(const NetParams<float>&, const BasicTensor3<float>&);
template ForwardCache<double> forward(const NetParams<double>&, const BasicTensor3<double>&);
template void backward(const NetParams<float>&, const ForwardCache<float>&, const BasicTensor3<float>&,
                       const BasicTensor3<float>*, NetParams<float>&);
template void backward(const NetParams<double>&, const ForwardCache<double>&, const BasicTensor3<double>&,
                       const BasicTensor3<double>*, NetParams<double>&);

}  // namespace raml
