#include "raml/mca.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>

namespace raml {

namespace {

void check_channels(const MetaOutput& c, int num_known, int num_meta) {
  if (num_known < 0 || num_meta < 1 || c.values.channels() != num_known + num_meta) {
    throw ShapeError("MCA output has " + std::to_string(c.values.channels()) + " channels, expected " +
                     std::to_string(num_known) + "+" + std::to_string(num_meta));
  }
}

void ensure_grad(Tensor3d* grad, const Tensor3d& like) {
  if (grad != nullptr && !grad->same_shape(like)) *grad = Tensor3d(like.channels(), like.height(), like.width());
}

// Pulls d loss / d C back to d loss / d logits and adds it to `grad_logits`.
void backprop_activation(const MetaOutput& c, const Tensor3d& grad_c, Tensor3d& grad_logits) {
  const int ch = c.values.channels(), hw = c.values.plane();
  auto v = c.values.data();
  auto gc = grad_c.data();
  auto gl = grad_logits.data();
  if (c.activation == MetaActivation::kSigmoidPerChannel) {
    for (std::size_t i = 0; i < v.size(); ++i) gl[i] += gc[i] * v[i] * (1.0 - v[i]);
    return;
  }
  for (int p = 0; p < hw; ++p) {
    double dotp = 0.0;
    for (int k = 0; k < ch; ++k) dotp += v[k * hw + p] * gc[k * hw + p];
    for (int k = 0; k < ch; ++k) gl[k * hw + p] += v[k * hw + p] * (gc[k * hw + p] - dotp);
  }
}

}  // namespace

void McaConfig::validate() const {
  if (K < 1) throw PreconditionError("McaConfig: K must be >= 1");
  if (!(eta > 0.0)) throw PreconditionError("McaConfig: eta must be > 0");
  if (lambda_inter < 0 || lambda_split < 0 || lambda_rec < 0) {
    throw PreconditionError("McaConfig: loss weights must be >= 0");
  }
  if (!(kappa > 0.0 && kappa < 1.0)) throw PreconditionError("McaConfig: kappa must be in (0,1)");
  if (!(dice_epsilon >= 0.0)) throw PreconditionError("McaConfig: dice_epsilon must be >= 0");
}

MetaOutput activate(const Tensor3d& logits, MetaActivation activation) {
  MetaOutput out{Tensor3d(logits.channels(), logits.height(), logits.width()), activation};
  auto u = logits.data();
  auto v = out.values.data();
  if (activation == MetaActivation::kSigmoidPerChannel) {
    for (std::size_t i = 0; i < u.size(); ++i) {
      v[i] = u[i] >= 0 ? 1.0 / (1.0 + std::exp(-u[i])) : std::exp(u[i]) / (1.0 + std::exp(u[i]));
    }
    return out;
  }
  const int ch = logits.channels(), hw = logits.plane();
  for (int p = 0; p < hw; ++p) {
    double m = u[p];
    for (int k = 1; k < ch; ++k) m = std::max(m, u[k * hw + p]);
    double z = 0.0;
    for (int k = 0; k < ch; ++k) z += std::exp(u[k * hw + p] - m);
    for (int k = 0; k < ch; ++k) v[k * hw + p] = std::exp(u[k * hw + p] - m) / z;
  }
  return out;
}

double seg_loss(const Tensor3d& logits, const LabelMap& labels, Tensor3d* grad, int num_classes,
                int unknown_from) {
  if (logits.height() != labels.height() || logits.width() != labels.width()) {
    throw ShapeError("seg_loss: logits and labels differ in size");
  }
  const int n = num_classes > 0 ? num_classes : logits.channels();
  if (n > logits.channels()) throw ShapeError("seg_loss: more classes than logit channels");
  const bool group = unknown_from > 0;
  if (group && unknown_from >= n) throw PreconditionError("seg_loss: unknown group is empty");
  const int labelled = group ? unknown_from : n;
  auto l = labels.labels();
  for (auto v : l) {
    if (v == LabelMap::kIgnore || (group && v == LabelMap::kUnknown)) continue;
    if (v >= labelled) {
      throw PreconditionError("seg_loss: label " + std::to_string(v) + " >= num_classes " + std::to_string(labelled));
    }
  }
  ensure_grad(grad, logits);
  const int hw = logits.plane();
  auto u = logits.data();
  std::size_t valid = 0;
  for (auto v : l) valid += v != LabelMap::kIgnore;
  if (valid == 0) throw PreconditionError("seg_loss: every pixel is ignored");
  const double inv = 1.0 / static_cast<double>(valid);
  double total = 0.0;
  std::vector<double> prob(n);
  for (int p = 0; p < hw; ++p) {
    if (l[p] == LabelMap::kIgnore) continue;
    double m = u[p];
    for (int k = 1; k < n; ++k) m = std::max(m, u[k * hw + p]);
    double z = 0.0;
    for (int k = 0; k < n; ++k) {
      prob[k] = std::exp(u[k * hw + p] - m);
      z += prob[k];
    }
    for (int k = 0; k < n; ++k) prob[k] /= z;
    const bool unknown = l[p] == LabelMap::kUnknown;
    double gm = 0.0, gz = 0.0;  // log-sum-exp pieces of the unknown group
    if (unknown) {
      gm = u[unknown_from * hw + p];
      for (int k = unknown_from + 1; k < n; ++k) gm = std::max(gm, u[k * hw + p]);
      for (int k = unknown_from; k < n; ++k) gz += std::exp(u[k * hw + p] - gm);
      total += -(gm + std::log(gz) - m - std::log(z));
    } else {
      total += -(u[l[p] * hw + p] - m - std::log(z));
    }
    if (grad != nullptr) {
      auto g = grad->data();
      for (int k = 0; k < n; ++k) {
        double t;
        if (unknown) {
          t = k >= unknown_from ? std::exp(u[k * hw + p] - gm) / gz : 0.0;
        } else {
          t = k == l[p] ? 1.0 : 0.0;
        }
        g[k * hw + p] += inv * (prob[k] - t);
      }
    }
  }
  return total * inv;
}

double dice_coeff(std::span<const double> a, std::span<const double> b, double eps) {
  if (a.size() != b.size()) throw ShapeError("dice_coeff: grids differ in size");
  double inter = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] * b[i];
    sa += a[i];
    sb += b[i];
  }
  const double den = sa + sb + eps;
  return den > 0.0 ? 2.0 * inter / den : 0.0;
}

double inter_loss(const MetaOutput& c, double eps, Tensor3d* grad_c) {
  const int ch = c.values.channels();
  if (ch < 2) throw ShapeError("inter_loss: need at least two channels");
  ensure_grad(grad_c, c.values);
  std::vector<double> mass(ch, 0.0);
  for (int i = 0; i < ch; ++i) {
    for (double v : c.values.channel(i)) mass[i] += v;
  }
  double total = 0.0;
  for (int i = 0; i < ch; ++i) {
    for (int j = i + 1; j < ch; ++j) {
      auto a = c.values.channel(i), b = c.values.channel(j);
      const double d = dice_coeff(a, b, eps);
      total += d;
      if (grad_c == nullptr) continue;
      const double den = mass[i] + mass[j] + eps;
      if (den <= 0.0) continue;
      auto ga = grad_c->channel(i), gb = grad_c->channel(j);
      for (std::size_t p = 0; p < a.size(); ++p) {
        ga[p] += (2.0 * b[p] - d) / den;
        gb[p] += (2.0 * a[p] - d) / den;
      }
    }
  }
  return total;
}

double split_loss(const MetaOutput& c, int num_known, int num_meta, double eta, Tensor3d* grad_c) {
  check_channels(c, num_known, num_meta);
  ensure_grad(grad_c, c.values);
  double total = 0.0;
  for (int i = num_known; i < num_known + num_meta; ++i) {
    double mass = 0.0;
    for (double v : c.values.channel(i)) mass += v;
    const double scaled = eta * mass;
    if (scaled <= 1.0) continue;
    total -= std::log(scaled);
    if (grad_c != nullptr) {
      for (double& g : grad_c->channel(i)) g -= 1.0 / mass;
    }
  }
  return total;
}

double rec_loss(const Tensor3d& image, const MetaOutput& c, Tensor3d* grad_c) {
  if (image.height() != c.values.height() || image.width() != c.values.width()) {
    throw ShapeError("rec_loss: image and output differ in size");
  }
  ensure_grad(grad_c, c.values);
  const int hw = c.values.plane(), ch = c.values.channels();
  auto v = c.values.data();
  auto x = image.data();
  double total = 0.0;
  for (int p = 0; p < hw; ++p) {
    double sum = 0.0;
    for (int k = 0; k < ch; ++k) sum += v[k * hw + p];
    const double r = sum - 1.0;
    double x2 = 0.0;
    for (int k = 0; k < image.channels(); ++k) x2 += x[k * hw + p] * x[k * hw + p];
    total += x2 * r * r;
    if (grad_c != nullptr) {
      auto g = grad_c->data();
      for (int k = 0; k < ch; ++k) g[k * hw + p] += 2.0 * x2 * r;
    }
  }
  return total;
}

double combine_losses(const LossBreakdown& t, const McaConfig& cfg) {
  return t.seg + cfg.lambda_inter * t.inter + cfg.lambda_split * t.split + cfg.lambda_rec * t.rec;
}

LossBreakdown overall_loss(const Tensor3d& logits, const LabelMap& labels, const Tensor3d& image, int num_known,
                           const McaConfig& cfg, Tensor3d* grad_logits) {
  if (logits.channels() != num_known + cfg.K) {
    throw ShapeError("overall_loss: expected " + std::to_string(num_known + cfg.K) + " logit channels");
  }
  ensure_grad(grad_logits, logits);
  MetaOutput c = activate(logits, cfg.activation);
  LossBreakdown t;
  t.seg = cfg.seg_all_channels ? seg_loss(logits, labels, grad_logits, 0, num_known)
                                : seg_loss(logits, labels, grad_logits, num_known);

  Tensor3d g_inter, g_split, g_rec;
  const bool want = grad_logits != nullptr;
  t.inter = inter_loss(c, cfg.dice_epsilon, want ? &g_inter : nullptr);
  t.split = split_loss(c, num_known, cfg.K, cfg.eta, want ? &g_split : nullptr);
  t.rec = rec_loss(image, c, want ? &g_rec : nullptr);
  t.total = combine_losses(t, cfg);
  if (want) {
    Tensor3d g_c(logits.channels(), logits.height(), logits.width());
    auto gc = g_c.data();
    auto gi = g_inter.data(), gs = g_split.data(), gr = g_rec.data();
    for (std::size_t i = 0; i < gc.size(); ++i) {
      gc[i] = cfg.lambda_inter * gi[i] + cfg.lambda_split * gs[i] + cfg.lambda_rec * gr[i];
    }
    backprop_activation(c, g_c, *grad_logits);
  }
  return t;
}

std::vector<BitMask> binarize_meta(const MetaOutput& c, int num_known) {
  const int ch = c.values.channels(), hw = c.values.plane();
  const int k_meta = ch - num_known;
  if (k_meta < 1) throw ShapeError("binarize_meta: no meta channels");
  std::vector<BitMask> masks(k_meta, BitMask(c.values.height(), c.values.width()));
  auto v = c.values.data();
  for (int p = 0; p < hw; ++p) {
    int best = 0;
    for (int k = 1; k < ch; ++k) {
      if (v[k * hw + p] > v[best * hw + p]) best = k;
    }
    if (best >= num_known) masks[best - num_known].set(static_cast<std::size_t>(p));
  }
  return masks;
}

std::set<int> candidate_channels(std::span<const BitMask> meta_masks, const BitMask& novel_mask, double kappa,
                                 CandidateMode mode) {
  const std::size_t novel = novel_mask.count();
  if (novel == 0) throw PreconditionError("candidate_channels: novel mask is empty");
  std::set<int> out;
  for (std::size_t j = 0; j < meta_masks.size(); ++j) {
    const BitMask& m = meta_masks[j];
    if (!m.same_shape(novel_mask)) throw ShapeError("candidate_channels: mask sizes differ");
    std::size_t mass = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.at(i) && (mode == CandidateMode::kLiteral || novel_mask.at(i))) ++mass;
    }
    if (static_cast<double>(mass) / static_cast<double>(novel) > kappa) out.insert(static_cast<int>(j));
  }
  return out;
}

BitMask aggregate_channels(std::span<const BitMask> masks, int height, int width) {
  BitMask out(height, width);
  if (masks.empty()) {
    std::cerr << "warning: no candidate meta channels selected; aggregated mask is empty\n";
    return out;
  }
  for (const BitMask& m : masks) {
    if (m.height() != height || m.width() != width) throw ShapeError("aggregate_channels: mask sizes differ");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.at(i)) out.set(i);
    }
  }
  return out;
}

std::set<int> select_candidates(std::span<const AnnotatedShot> shots, int num_known, const McaConfig& cfg) {
  std::set<int> out;
  for (const auto& s : shots) {
    auto masks = binarize_meta(*s.output, num_known);
    auto sel = candidate_channels(masks, *s.novel_mask, cfg.kappa, cfg.candidate_mode);
    out.insert(sel.begin(), sel.end());
  }
  return out;
}

RegionSet mca_regions(const MetaOutput& c, const std::set<int>& candidates, int num_known,
                      Connectivity connectivity, int min_area) {
  const int h = c.values.height(), w = c.values.width();
  if (candidates.empty()) return RegionSet{h, w, {}};
  auto masks = binarize_meta(c, num_known);
  std::vector<BitMask> chosen;
  for (int j : candidates) {
    if (j < 0 || j >= static_cast<int>(masks.size())) throw ShapeError("mca_regions: candidate index out of range");
    chosen.push_back(masks[j]);
  }
  BitMask merged = aggregate_channels(chosen, h, w);
  Connectivity dual = connectivity == Connectivity::kFour ? Connectivity::kEight : Connectivity::kFour;
  return connected_components(fill_holes(merged, dual), connectivity, min_area);
}

RegionSet mca_regions(const MetaOutput& c, std::span<const AnnotatedShot> shots, int num_known,
                      const McaConfig& cfg, Connectivity connectivity, int min_area) {
  return mca_regions(c, select_candidates(shots, num_known, cfg), num_known, connectivity, min_area);
}

}  // namespace raml
