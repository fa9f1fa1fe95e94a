#include "raml/metric_embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "raml/rng.hpp"

namespace raml {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void glorot(std::vector<double>& w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : w) v = rng.uniform(-limit, limit);
}

// log(sum(exp(v))) and the softmax weights of v.
double log_sum_exp(std::span<const double> v, std::vector<double>* weights = nullptr) {
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  if (weights != nullptr) {
    weights->resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) (*weights)[i] = std::exp(v[i] - m) / s;
  }
  return m + std::log(s);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

void check_circle_inputs(std::span<const double> s_p, std::span<const double> s_n) {
  if (s_p.empty() || s_n.empty()) {
    throw PreconditionError("circle_loss: need at least one positive and one negative similarity");
  }
}

}  // namespace

ProjectionHead ProjectionHead::init(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
  if (in_dim <= 0 || hidden <= 0 || out_dim <= 0) {
    throw PreconditionError("ProjectionHead: layer sizes must be positive");
  }
  ProjectionHead h;
  h.in_dim = in_dim;
  h.hidden = hidden;
  h.out_dim = out_dim;
  h.w1.resize(static_cast<std::size_t>(hidden) * in_dim);
  h.b1.assign(hidden, 0.0);
  h.w2.resize(static_cast<std::size_t>(out_dim) * hidden);
  h.b2.assign(out_dim, 0.0);
  Rng rng(seed);
  glorot(h.w1, in_dim, hidden, rng);
  glorot(h.w2, hidden, out_dim, rng);
  return h;
}

std::vector<double> ProjectionHead::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  out.insert(out.end(), w1.begin(), w1.end());
  out.insert(out.end(), b1.begin(), b1.end());
  out.insert(out.end(), w2.begin(), w2.end());
  out.insert(out.end(), b2.begin(), b2.end());
  return out;
}

void ProjectionHead::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ShapeError("ProjectionHead::assign: size mismatch");
  auto it = flat.begin();
  for (auto* v : {&w1, &b1, &w2, &b2}) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(v->size()), v->begin());
    it += static_cast<std::ptrdiff_t>(v->size());
  }
}

void ProjectionHead::validate() const {
  if (hidden <= 0 || in_dim <= 0 || out_dim <= 0) throw PreconditionError("ProjectionHead: empty layer");
  if (w1.size() != static_cast<std::size_t>(hidden) * in_dim || b1.size() != static_cast<std::size_t>(hidden) ||
      w2.size() != static_cast<std::size_t>(out_dim) * hidden || b2.size() != static_cast<std::size_t>(out_dim)) {
    throw ShapeError("ProjectionHead: parameter sizes do not match layer sizes");
  }
  for (const auto* v : {&w1, &b1, &w2, &b2}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw PreconditionError("ProjectionHead: non-finite parameter");
    }
  }
}

HeadCache head_forward(const ProjectionHead& head, std::span<const double> input) {
  if (input.size() != static_cast<std::size_t>(head.in_dim)) {
    throw ShapeError("projection head expects " + std::to_string(head.in_dim) + " inputs, got " +
                     std::to_string(input.size()));
  }
  HeadCache c;
  c.input.assign(input.begin(), input.end());
  c.hidden_pre.resize(head.hidden);
  for (int j = 0; j < head.hidden; ++j) {
    const double* row = &head.w1[static_cast<std::size_t>(j) * head.in_dim];
    double s = head.b1[j];
    for (int i = 0; i < head.in_dim; ++i) s += row[i] * input[i];
    c.hidden_pre[j] = s;
  }
  c.output.resize(head.out_dim);
  for (int k = 0; k < head.out_dim; ++k) {
    const double* row = &head.w2[static_cast<std::size_t>(k) * head.hidden];
    double s = head.b2[k];
    for (int j = 0; j < head.hidden; ++j) s += row[j] * std::max(c.hidden_pre[j], 0.0);
    c.output[k] = s;
  }
  return c;
}

std::vector<double> head_backward(const ProjectionHead& head, const HeadCache& cache,
                                  std::span<const double> grad_output, std::span<double> grad) {
  const std::size_t off_b1 = head.w1.size();
  const std::size_t off_w2 = off_b1 + head.b1.size();
  const std::size_t off_b2 = off_w2 + head.w2.size();
  std::vector<double> d_hidden(head.hidden, 0.0);
  for (int k = 0; k < head.out_dim; ++k) {
    const double g = grad_output[k];
    if (g == 0.0) continue;
    if (!grad.empty()) grad[off_b2 + k] += g;
    const double* row = &head.w2[static_cast<std::size_t>(k) * head.hidden];
    for (int j = 0; j < head.hidden; ++j) {
      const double a = std::max(cache.hidden_pre[j], 0.0);
      if (!grad.empty()) grad[off_w2 + static_cast<std::size_t>(k) * head.hidden + j] += g * a;
      d_hidden[j] += g * row[j];
    }
  }
  std::vector<double> d_input(head.in_dim, 0.0);
  for (int j = 0; j < head.hidden; ++j) {
    if (cache.hidden_pre[j] <= 0.0) continue;
    const double g = d_hidden[j];
    if (!grad.empty()) grad[off_b1 + j] += g;
    const double* row = &head.w1[static_cast<std::size_t>(j) * head.in_dim];
    for (int i = 0; i < head.in_dim; ++i) {
      if (!grad.empty()) grad[static_cast<std::size_t>(j) * head.in_dim + i] += g * cache.input[i];
      d_input[i] += g * row[i];
    }
  }
  return d_input;
}

namespace {

template <typename T>
std::vector<double> pool_impl(const BasicTensor3<T>& features, const BitMask& region) {
  if (features.height() != region.height() || features.width() != region.width()) {
    throw ShapeError("region_pool: mask and feature map sizes differ");
  }
  const std::size_t mass = region.count();
  if (mass == 0) throw PreconditionError("region_pool: region is empty");
  std::vector<double> out(features.channels(), 0.0);
  for (int c = 0; c < features.channels(); ++c) {
    auto ch = features.channel(c);
    double s = 0.0;
    for (std::size_t i = 0; i < ch.size(); ++i) {
      if (region.at(i)) s += ch[i];
    }
    out[c] = s / static_cast<double>(mass);
  }
  return out;
}

}  // namespace

std::vector<double> region_pool(const Tensor3& features, const BitMask& region) { return pool_impl(features, region); }

std::vector<double> region_pool(const Tensor3d& features, const BitMask& region) { return pool_impl(features, region); }

void region_pool_backward(std::span<const double> grad_pooled, const BitMask& region, Tensor3d& grad_features) {
  if (grad_features.height() != region.height() || grad_features.width() != region.width() ||
      static_cast<std::size_t>(grad_features.channels()) != grad_pooled.size()) {
    throw ShapeError("region_pool_backward: shape mismatch");
  }
  const std::size_t mass = region.count();
  if (mass == 0) throw PreconditionError("region_pool: region is empty");
  for (int c = 0; c < grad_features.channels(); ++c) {
    const double g = grad_pooled[c] / static_cast<double>(mass);
    auto ch = grad_features.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      if (region.at(i)) ch[i] += g;
    }
  }
}

Embedding embed_region(const Tensor3& features, const BitMask& region, const ProjectionHead& head) {
  return head_forward(head, region_pool(features, region)).output;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vector lengths differ");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw PreconditionError("cosine: zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> cosine_grad(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw PreconditionError("cosine: zero-norm vector");
  const double c = dot(a, b) / (na * nb);
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = b[i] / (na * nb) - c * a[i] / (na * na);
  return g;
}

PrototypeBank known_prototypes(std::span<const LabeledFeatures> dataset, const ProjectionHead& head,
                               int num_classes) {
  PrototypeBank bank;
  std::map<int, Embedding> sums;
  for (const auto& item : dataset) {
    for (int c = 0; c < num_classes; ++c) {
      BitMask m = class_mask(*item.labels, c);
      if (!m.any()) continue;
      Embedding e = embed_region(*item.features, m, head);
      auto [it, inserted] = sums.try_emplace(c, e.size(), 0.0);
      for (std::size_t i = 0; i < e.size(); ++i) it->second[i] += e[i];
      ++bank.counts[c];
    }
  }
  std::string missing;
  for (int c = 0; c < num_classes; ++c) {
    if (!sums.contains(c)) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!missing.empty()) throw PreconditionError("known_prototypes: missing prototype for class(es) " + missing);
  for (auto& [c, s] : sums) {
    for (double& v : s) v /= bank.counts[c];
    if (norm(s) == 0.0) {
      throw PreconditionError("known_prototypes: zero prototype for class " + std::to_string(c));
    }
    bank.known[c] = std::move(s);
  }
  return bank;
}

void CircleLossConfig::validate() const {
  if (!(gamma > 0.0)) throw PreconditionError("CircleLossConfig: gamma must be > 0");
  if (!(margin >= 0.0 && margin < 1.0)) throw PreconditionError("CircleLossConfig: margin must be in [0,1)");
}

double circle_loss(std::span<const double> s_p, std::span<const double> s_n, const CircleLossConfig& cfg) {
  check_circle_inputs(s_p, s_n);
  std::vector<double> neg(s_n.size()), pos(s_p.size());
  for (std::size_t j = 0; j < s_n.size(); ++j) neg[j] = cfg.gamma * (s_n[j] + cfg.margin);
  for (std::size_t i = 0; i < s_p.size(); ++i) pos[i] = -cfg.gamma * s_p[i];
  return softplus(log_sum_exp(neg) + log_sum_exp(pos));
}

CircleLossGrad circle_loss_grad(std::span<const double> s_p, std::span<const double> s_n,
                                const CircleLossConfig& cfg) {
  check_circle_inputs(s_p, s_n);
  std::vector<double> neg(s_n.size()), pos(s_p.size()), wn, wp;
  for (std::size_t j = 0; j < s_n.size(); ++j) neg[j] = cfg.gamma * (s_n[j] + cfg.margin);
  for (std::size_t i = 0; i < s_p.size(); ++i) pos[i] = -cfg.gamma * s_p[i];
  const double z = log_sum_exp(neg, &wn) + log_sum_exp(pos, &wp);
  const double outer = sigmoid(z) * cfg.gamma;
  CircleLossGrad g;
  g.d_sp.resize(s_p.size());
  g.d_sn.resize(s_n.size());
  for (std::size_t i = 0; i < s_p.size(); ++i) g.d_sp[i] = -outer * wp[i];
  for (std::size_t j = 0; j < s_n.size(); ++j) g.d_sn[j] = outer * wn[j];
  return g;
}

double head_batch_loss(const ProjectionHead& head, std::span<const PooledRegion> batch,
                       const CircleLossConfig& cfg, std::span<double> grad,
                       std::vector<std::vector<double>>* grad_inputs) {
  const std::size_t n = batch.size();
  std::vector<HeadCache> caches;
  caches.reserve(n);
  for (const auto& r : batch) caches.push_back(head_forward(head, r.pooled));
  const std::size_t dim = static_cast<std::size_t>(head.out_dim);

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t r = 0; r < n; ++r) members[batch[r].label].push_back(r);
  std::map<int, std::vector<double>> sums;
  for (const auto& [cls, idx] : members) {
    std::vector<double> s(dim, 0.0);
    for (std::size_t r : idx) {
      for (std::size_t k = 0; k < dim; ++k) s[k] += caches[r].output[k];
    }
    sums[cls] = std::move(s);
  }

  struct Term {
    std::size_t region;
    double g_p;
    std::vector<double> proto_own;
    std::vector<std::pair<int, double>> g_n;  // class, dL/ds_n
  };
  std::vector<Term> terms;
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int cls = batch[r].label;
    const auto& own = members[cls];
    if (own.size() < 2 || members.size() < 2) continue;
    const auto& e = caches[r].output;
    std::vector<double> proto_own(dim);
    for (std::size_t k = 0; k < dim; ++k) proto_own[k] = (sums[cls][k] - e[k]) / (own.size() - 1.0);
    std::vector<double> sp{cosine(e, proto_own)};
    std::vector<double> sn;
    std::vector<int> neg_classes;
    for (const auto& [other, idx] : members) {
      if (other == cls) continue;
      std::vector<double> p(dim);
      for (std::size_t k = 0; k < dim; ++k) p[k] = sums[other][k] / idx.size();
      sn.push_back(cosine(e, p));
      neg_classes.push_back(other);
    }
    total += circle_loss(sp, sn, cfg);
    if (!grad.empty() || grad_inputs != nullptr) {
      auto g = circle_loss_grad(sp, sn, cfg);
      Term t{r, g.d_sp[0], std::move(proto_own), {}};
      for (std::size_t j = 0; j < sn.size(); ++j) t.g_n.emplace_back(neg_classes[j], g.d_sn[j]);
      terms.push_back(std::move(t));
    } else {
      terms.push_back(Term{r, 0.0, {}, {}});
    }
  }
  if (terms.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(terms.size());
  if (grad.empty() && grad_inputs == nullptr) return total * scale;

  std::vector<std::vector<double>> d_emb(n, std::vector<double>(dim, 0.0));
  for (const Term& t : terms) {
    const auto& e = caches[t.region].output;
    const int cls = batch[t.region].label;
    const auto& own = members[cls];
    // Positive pair: cosine(e, mean of the other members of the class).
    auto ga = cosine_grad(e, t.proto_own);
    auto gb = cosine_grad(t.proto_own, e);
    for (std::size_t k = 0; k < dim; ++k) d_emb[t.region][k] += scale * t.g_p * ga[k];
    for (std::size_t q : own) {
      if (q == t.region) continue;
      for (std::size_t k = 0; k < dim; ++k) d_emb[q][k] += scale * t.g_p * gb[k] / (own.size() - 1.0);
    }
    // Negative pairs: cosine(e, mean of another class).
    for (const auto& [other, g_n] : t.g_n) {
      const auto& idx = members[other];
      std::vector<double> p(dim);
      for (std::size_t k = 0; k < dim; ++k) p[k] = sums[other][k] / idx.size();
      auto na = cosine_grad(e, p);
      auto nb = cosine_grad(p, e);
      for (std::size_t k = 0; k < dim; ++k) d_emb[t.region][k] += scale * g_n * na[k];
      for (std::size_t q : idx) {
        for (std::size_t k = 0; k < dim; ++k) d_emb[q][k] += scale * g_n * nb[k] / idx.size();
      }
    }
  }
  if (grad_inputs != nullptr) grad_inputs->assign(n, {});
  for (std::size_t r = 0; r < n; ++r) {
    auto d_in = head_backward(head, caches[r], d_emb[r], grad);
    if (grad_inputs != nullptr) (*grad_inputs)[r] = std::move(d_in);
  }
  return total * scale;
}

ProjectionHead train_head(std::span<const PooledRegion> dataset, ProjectionHead head,
                          const CircleLossConfig& cfg, const HeadTrainConfig& train, HeadTrainLog* log) {
  cfg.validate();
  train.sgd.validate();
  head.validate();
  std::map<int, int> classes;
  for (const auto& r : dataset) ++classes[r.label];
  if (classes.size() < 2) {
    throw PreconditionError("train_head: need at least two classes for negative pairs, got " +
                            std::to_string(classes.size()));
  }
  Rng rng(train.seed);
  std::vector<double> params = head.flatten();
  std::vector<double> velocity(params.size(), 0.0);
  std::vector<double> grad(params.size());
  std::vector<PooledRegion> batch(static_cast<std::size_t>(train.batch));
  for (int it = 0; it < train.iters; ++it) {
    for (auto& b : batch) b = dataset[rng.below(dataset.size())];
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = head_batch_loss(head, batch, cfg, grad);
    if (!std::isfinite(loss)) throw DivergenceError("train_head: loss is not finite at iteration " + std::to_string(it));
    if (log != nullptr) log->loss.push_back(loss);
    sgd_step<double, double>(params, grad, velocity, train.sgd, it, train.iters);
    head.assign(params);
  }
  return head;
}

}  // namespace raml
