#include "raml/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "raml/mca.hpp"
#include "raml/metric_embedding.hpp"
#include "raml/rng.hpp"
#include "raml/toynet.hpp"

namespace raml {

namespace {

using Net = NetParams<double>;

constexpr int kSide = 6;
constexpr int kKnown = 2;
constexpr int kMeta = 2;
// Minimum distance of every pre-activation from the rectifier kink.
constexpr double kKinkMargin = 2e-4;

Net random_net(int outputs, Rng& rng) {
  Net p = Net::init(3, 3, 4, outputs, rng.next());
  for (auto* b : {&p.conv1_b, &p.conv2_b, &p.head_b}) {
    for (double& v : *b) v = rng.uniform(-0.2, 0.2);
  }
  return p;
}

Tensor3d random_image(Rng& rng) {
  Tensor3d img(3, kSide, kSide);
  for (double& v : img.data()) v = rng.uniform();
  return img;
}

// Redraws until no pre-activation lies within kKinkMargin of zero, so the
// central-difference stencil never straddles a rectifier kink.
std::pair<Net, Tensor3d> smooth_point(int outputs, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Net net = random_net(outputs, rng);
    Tensor3d image = random_image(rng);
    if (kink_margin(net, image) > kKinkMargin) return {net, image};
  }
  throw PreconditionError("gradient check: no kink-free test point found");
}

LabelMap random_labels(Rng& rng, int classes) {
  LabelMap l(kSide, kSide);
  for (auto& v : l.labels()) v = rng.uniform() < 0.1 ? LabelMap::kIgnore : static_cast<std::uint8_t>(rng.below(classes));
  return l;
}

std::vector<double> flat_grads(const Net& g) { return g.flatten(); }

// Network loss driven by a per-logit loss callback.
ScalarFn net_fn(const Net& shape, const Tensor3d& image,
                std::function<double(const Tensor3d& logits, Tensor3d* grad)> loss) {
  return [shape, image, loss](const std::vector<double>& x, std::vector<double>* grad) {
    Net p = shape;
    p.assign(x);
    ForwardCache<double> cache = forward(p, image);
    if (grad == nullptr) return loss(cache.logits, nullptr);
    Tensor3d g(cache.logits.channels(), kSide, kSide);
    const double value = loss(cache.logits, &g);
    Net grads = p.zeros_like();
    backward<double>(p, cache, g, nullptr, grads);
    *grad = flat_grads(grads);
    return value;
  };
}

GradCheckEntry check(const std::string& name, std::uint64_t seed, const ScalarFn& fn, const std::vector<double>& x,
                     const GradCheckOptions& opt) {
  return {name, seed, x.size(), max_relative_error(fn, x, opt.step, opt.floor)};
}

}  // namespace

double max_relative_error(const ScalarFn& fn, const std::vector<double>& x, double step, double floor) {
  std::vector<double> analytic;
  fn(x, &analytic);
  if (analytic.size() != x.size()) throw ShapeError("gradient check: gradient length differs from input");
  double worst = 0.0;
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = fn(probe, nullptr);
    probe[i] = x[i] - step;
    const double down = fn(probe, nullptr);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

GradCheckReport run_grad_checks(const GradCheckOptions& opt) {
  GradCheckReport rep;
  for (int s = 0; s < opt.seeds; ++s) {
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(s);
    Rng rng(seed);
    const CircleLossConfig circle;

    // Circle loss on raw similarities.
    {
      const int kp = 1 + static_cast<int>(rng.below(4)), kn = 1 + static_cast<int>(rng.below(4));
      std::vector<double> x(kp + kn);
      for (double& v : x) v = rng.uniform(-1.0, 1.0);
      ScalarFn fn = [kp, circle](const std::vector<double>& v, std::vector<double>* grad) {
        std::span<const double> sp(v.data(), kp), sn(v.data() + kp, v.size() - kp);
        if (grad != nullptr) {
          auto g = circle_loss_grad(sp, sn, circle);
          grad->assign(g.d_sp.begin(), g.d_sp.end());
          grad->insert(grad->end(), g.d_sn.begin(), g.d_sn.end());
        }
        return circle_loss(sp, sn, circle);
      };
      rep.entries.push_back(check("circle_loss", seed, fn, x, opt));
    }

    // Close-set cross entropy through the network.
    {
      auto [net, image] = smooth_point(kKnown, rng);
      LabelMap labels = random_labels(rng, kKnown);
      auto fn = net_fn(net, image, [labels](const Tensor3d& logits, Tensor3d* g) {
        return seg_loss(logits, labels, g, kKnown);
      });
      rep.entries.push_back(check("seg_loss_net", seed, fn, net.flatten(), opt));
    }

    // Combined fine-tuning objective, both activations. eta is large enough
    // that the split term is active on a 6x6 frame.
    for (MetaActivation act : {MetaActivation::kSigmoidPerChannel, MetaActivation::kSoftmaxAll}) {
      auto [net, image] = smooth_point(kKnown + kMeta, rng);
      LabelMap labels = random_labels(rng, kKnown);
      for (auto& v : labels.labels()) {
        if (v != LabelMap::kIgnore && rng.uniform() < 0.2) v = LabelMap::kUnknown;
      }
      McaConfig mca;
      mca.K = kMeta;
      mca.eta = 0.2;
      mca.activation = act;
      auto fn = net_fn(net, image, [labels, image, mca](const Tensor3d& logits, Tensor3d* g) {
        return overall_loss(logits, labels, image, kKnown, mca, g).total;
      });
      const std::string name = act == MetaActivation::kSigmoidPerChannel ? "overall_loss_sigmoid_net"
                                                                          : "overall_loss_softmax_net";
      rep.entries.push_back(check(name, seed, fn, net.flatten(), opt));
    }

    // Circle loss on pooled region embeddings, through head and network.
    {
      auto [net, image] = smooth_point(kKnown, rng);
      ProjectionHead head = ProjectionHead::init(net.features, 5, 3, rng.next());
      for (double& v : head.b1) v = rng.uniform(-0.2, 0.2);
      for (double& v : head.b2) v = rng.uniform(-0.2, 0.2);
      std::vector<BitMask> masks;
      std::vector<int> labels{0, 0, 1, 1, 2, 2};
      for (std::size_t r = 0; r < labels.size(); ++r) {
        BitMask m(kSide, kSide);
        for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < 0.4);
        m.set(rng.below(m.size()));
        masks.push_back(m);
      }
      const std::size_t n_net = net.parameter_count();
      ScalarFn fn = [=](const std::vector<double>& x, std::vector<double>* grad) {
        Net p = net;
        p.assign(std::span<const double>(x.data(), n_net));
        ProjectionHead h = head;
        h.assign(std::span<const double>(x.data() + n_net, x.size() - n_net));
        ForwardCache<double> cache = forward(p, image);
        std::vector<PooledRegion> batch;
        for (std::size_t r = 0; r < masks.size(); ++r) batch.push_back({region_pool(cache.features, masks[r]), labels[r]});
        if (grad == nullptr) return head_batch_loss(h, batch, circle);
        std::vector<double> g_head(h.parameter_count(), 0.0);
        std::vector<std::vector<double>> g_in;
        const double value = head_batch_loss(h, batch, circle, g_head, &g_in);
        Tensor3d d_feat(p.features, kSide, kSide);
        for (std::size_t r = 0; r < masks.size(); ++r) region_pool_backward(g_in[r], masks[r], d_feat);
        Net grads = p.zeros_like();
        Tensor3d zero_logits(p.outputs, kSide, kSide);
        backward<double>(p, cache, zero_logits, &d_feat, grads);
        *grad = grads.flatten();
        grad->insert(grad->end(), g_head.begin(), g_head.end());
        return value;
      };
      std::vector<double> x = net.flatten();
      auto hf = head.flatten();
      x.insert(x.end(), hf.begin(), hf.end());
      rep.entries.push_back(check("circle_loss_regions_net", seed, fn, x, opt));
    }
  }
  for (const auto& e : rep.entries) rep.worst = std::max(rep.worst, e.max_relative_error);
  rep.pass = rep.worst < opt.tolerance;
  return rep;
}

}  // namespace raml
