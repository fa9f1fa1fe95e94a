#include "raml/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace raml {

namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts count_labels(const ScoredPixels& s) {
  if (s.scores.size() != s.labels.size()) throw ShapeError("ScoredPixels: scores and labels differ in length");
  Counts c;
  for (auto l : s.labels) (l ? c.pos : c.neg)++;
  return c;
}

void require_both(const Counts& c, const char* op) {
  if (c.pos == 0 || c.neg == 0) {
    throw PreconditionError(std::string(op) + ": need at least one positive and one negative pixel");
  }
}

// Indices sorted by descending score.
std::vector<std::size_t> descending(const ScoredPixels& s) {
  std::vector<std::size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  return idx;
}

}  // namespace

void ScoredPixels::append(std::span<const double> s, std::span<const std::uint8_t> l) {
  if (s.size() != l.size()) throw ShapeError("ScoredPixels::append: length mismatch");
  scores.insert(scores.end(), s.begin(), s.end());
  for (auto v : l) labels.push_back(v ? 1 : 0);
}

double region_anomaly_prob(std::span<const double> embedding, const PrototypeBank& bank) {
  if (bank.known.empty()) throw PreconditionError("region_anomaly_prob: prototype bank is empty");
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [cls, proto] : bank.known) best = std::max(best, cosine(embedding, proto));
  return best;
}

Tensor3d uncertainty_map(const Tensor3& logits, const RegionSet& regions, std::span<const double> probs) {
  if (regions.size() != probs.size()) {
    throw ShapeError("uncertainty_map: " + std::to_string(regions.size()) + " regions but " +
                     std::to_string(probs.size()) + " probabilities");
  }
  const int h = logits.height(), w = logits.width();
  if (!regions.empty() && (regions.height != h || regions.width != w)) {
    throw ShapeError("uncertainty_map: region and logit sizes differ");
  }
  std::vector<double> p(static_cast<std::size_t>(h) * w, 1.0);
  std::vector<char> covered(p.size(), 0);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const BitMask& m = regions.regions[r];
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m.at(i)) continue;
      if (covered[i]) throw PreconditionError("uncertainty_map: regions overlap");
      covered[i] = 1;
      p[i] = probs[r];
    }
  }
  Tensor3d q(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = logits(0, y, x);
      for (int c = 1; c < logits.channels(); ++c) m = std::max(m, static_cast<double>(logits(c, y, x)));
      q(0, y, x) = -m * p[static_cast<std::size_t>(y) * w + x];
    }
  }
  return q;
}

AnomalyMap normalize_map(const Tensor3d& q) {
  auto d = q.data();
  auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const double mn = *lo, mx = *hi;
  Tensor3d out(1, q.height(), q.width(), 0.5);
  if (mx > mn) {
    auto o = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) o[i] = (d[i] - mn) / (mx - mn);
  }
  return AnomalyMap{std::move(out)};
}

AnomalyMap maxlogit_map(const Tensor3& logits) {
  RegionSet none{logits.height(), logits.width(), {}};
  return normalize_map(uncertainty_map(logits, none, {}));
}

double auroc(const ScoredPixels& s) {
  Counts c = count_labels(s);
  require_both(c, "auroc");
  std::vector<std::size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
  double rank_sum_x2 = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) ++j;
    const double avg_x2 = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (s.labels[idx[k]]) rank_sum_x2 += avg_x2;
    }
    i = j;
  }
  const double p = static_cast<double>(c.pos), n = static_cast<double>(c.neg);
  const double u = rank_sum_x2 / 2.0 - p * (p + 1.0) / 2.0;
  return u / (p * n);
}

double aupr(const ScoredPixels& s) {
  Counts c = count_labels(s);
  if (c.pos == 0) throw PreconditionError("aupr: no positive pixels");
  auto idx = descending(s);
  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, block_pos = 0;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
      if (s.labels[idx[j]]) ++block_pos;
      ++j;
    }
    tp += block_pos;
    fp += (j - i) - block_pos;
    if (block_pos > 0) ap += static_cast<double>(block_pos) * static_cast<double>(tp) / static_cast<double>(tp + fp);
    i = j;
  }
  return ap / static_cast<double>(c.pos);
}

double fpr95(const ScoredPixels& s) {
  Counts c = count_labels(s);
  require_both(c, "fpr95");
  auto idx = descending(s);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
      (s.labels[idx[j]] ? tp : fp)++;
      ++j;
    }
    // TPR >= 0.95 in exact integer arithmetic.
    if (100 * tp >= 95 * c.pos) return static_cast<double>(fp) / static_cast<double>(c.neg);
    i = j;
  }
  return 1.0;
}

AnomalyMetrics evaluate_anomaly(const ScoredPixels& s) {
  return AnomalyMetrics{auroc(s), aupr(s), fpr95(s), s.scores.size()};
}

AnomalyMap score_regions(const Tensor3& features, const Tensor3& logits, const RegionSet& regions,
                         const ProjectionHead& head, const PrototypeBank& bank) {
  std::vector<double> probs;
  probs.reserve(regions.size());
  for (const BitMask& r : regions.regions) {
    probs.push_back(region_anomaly_prob(embed_region(features, r, head), bank));
  }
  return normalize_map(uncertainty_map(logits, regions, probs));
}

AnomalyMap score_image(const Tensor3& image, const Tensor3& features, const Tensor3& logits,
                       const ProjectionHead& head, const PrototypeBank& bank, const UrsConfig& cfg) {
  return score_regions(features, logits, separate_regions(image, logits, cfg), head, bank);
}

}  // namespace raml
