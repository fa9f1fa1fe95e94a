#include "raml/fewshot.hpp"

#include <algorithm>
#include <cmath>

namespace raml {

void FewshotConfig::validate() const {
  if (!(theta_novel > 0.0 && theta_novel < 1.0)) throw PreconditionError("FewshotConfig: theta_novel must be in (0,1)");
  if (M < 1) throw PreconditionError("FewshotConfig: M must be >= 1");
  if (L < 1) throw PreconditionError("FewshotConfig: L must be >= 1");
}

NovelPrototypes novel_prototypes(std::span<const std::vector<Shot>> shots, const ProjectionHead& head) {
  if (shots.empty()) throw PreconditionError("novel_prototypes: no novel classes");
  NovelPrototypes out;
  out.shots = static_cast<int>(shots.front().size());
  for (std::size_t cls = 0; cls < shots.size(); ++cls) {
    const auto& list = shots[cls];
    if (list.empty() || static_cast<int>(list.size()) != out.shots) {
      throw PreconditionError("novel_prototypes: class " + std::to_string(cls) + " has " +
                              std::to_string(list.size()) + " shots, expected " + std::to_string(out.shots));
    }
    Embedding mean(head.out_dim, 0.0);
    std::vector<std::string> ids;
    for (const Shot& s : list) {
      if (!s.mask->any()) throw PreconditionError("novel_prototypes: shot '" + s.id + "' has an empty mask");
      Embedding e = embed_region(*s.features, *s.mask, head);
      for (std::size_t k = 0; k < e.size(); ++k) mean[k] += e[k];
      ids.push_back(s.id);
    }
    double norm2 = 0.0;
    for (double& v : mean) {
      v /= static_cast<double>(list.size());
      norm2 += v * v;
    }
    if (norm2 == 0.0) throw PreconditionError("novel_prototypes: zero prototype for class " + std::to_string(cls));
    out.prototypes.push_back(std::move(mean));
    out.shot_ids.push_back(std::move(ids));
  }
  return out;
}

std::vector<double> region_similarities(std::span<const double> embedding, const NovelPrototypes& protos) {
  std::vector<double> sims;
  sims.reserve(protos.prototypes.size());
  for (const auto& p : protos.prototypes) sims.push_back(cosine(embedding, p));
  return sims;
}

std::optional<int> classify_region(std::span<const double> sims, double theta_novel) {
  if (sims.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t i = 1; i < sims.size(); ++i) {
    if (sims[i] > sims[best]) best = i;
  }
  if (!(sims[best] > theta_novel)) return std::nullopt;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    if (i != best && !(sims[best] > sims[i])) return std::nullopt;
  }
  return static_cast<int>(best);
}

LabelMap assemble_segmentation(const LabelMap& closed_pred, const RegionSet& regions,
                               std::span<const std::optional<int>> decisions, int num_known) {
  if (decisions.size() != regions.size()) {
    throw ShapeError("assemble_segmentation: " + std::to_string(regions.size()) + " regions but " +
                     std::to_string(decisions.size()) + " decisions");
  }
  if (!regions.empty() && (regions.height != closed_pred.height() || regions.width != closed_pred.width())) {
    throw ShapeError("assemble_segmentation: region and prediction sizes differ");
  }
  LabelMap out = closed_pred;
  auto l = out.labels();
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (!decisions[r]) continue;
    const int label = num_known + *decisions[r];
    if (label >= LabelMap::kIgnore) throw PreconditionError("assemble_segmentation: class index too large");
    const BitMask& m = regions.regions[r];
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.at(i)) l[i] = static_cast<std::uint8_t>(label);
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * (num_classes + 1), 0) {
  if (num_classes < 1) throw PreconditionError("ConfusionMatrix: need at least one class");
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) throw ShapeError("miou: pred and gt differ in size");
  auto p = pred.labels();
  auto g = gt.labels();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] == LabelMap::kIgnore) continue;
    if (g[i] >= n_) throw PreconditionError("miou: ground-truth label " + std::to_string(g[i]) + " out of range");
    // Out-of-range predictions land in the extra column: misses of the gt class.
    const int col = p[i] < n_ ? p[i] : n_;
    ++counts_[static_cast<std::size_t>(g[i]) * (n_ + 1) + col];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("ConfusionMatrix::merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

double harmonic_mean(double a, double b) {
  if (a <= 0.0 || b <= 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

MiouReport miou(const ConfusionMatrix& cm, const std::set<int>& known, const std::set<int>& novel) {
  const int n = cm.num_classes();
  MiouReport rep;
  rep.per_class.assign(n, std::nullopt);
  std::vector<std::uint64_t> gt_total(n, 0), pred_total(n, 0);
  for (int g = 0; g < n; ++g) {
    for (int p = 0; p <= n; ++p) {
      gt_total[g] += cm.at(g, p);
      if (p < n) pred_total[p] += cm.at(g, p);
    }
  }
  for (int c = 0; c < n; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = gt_total[c] + pred_total[c] - tp;
    if (uni == 0) {
      rep.notes.push_back("class " + std::to_string(c) + " absent from prediction and ground truth; excluded");
      continue;
    }
    rep.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  auto mean_over = [&](auto pred) {
    double s = 0.0;
    int k = 0;
    for (int c = 0; c < n; ++c) {
      if (pred(c) && rep.per_class[c]) {
        s += *rep.per_class[c];
        ++k;
      }
    }
    return k > 0 ? s / k : 0.0;
  };
  rep.miou_all = mean_over([&](int c) { return known.contains(c) || novel.contains(c); });
  rep.miou_old = mean_over([&](int c) { return known.contains(c); });
  rep.miou_novel = mean_over([&](int c) { return novel.contains(c); });
  rep.miou_harm = harmonic_mean(rep.miou_old, rep.miou_novel);
  return rep;
}

MiouReport miou(const LabelMap& pred, const LabelMap& gt, const std::set<int>& known, const std::set<int>& novel) {
  int n = 0;
  for (int c : known) n = std::max(n, c + 1);
  for (int c : novel) n = std::max(n, c + 1);
  ConfusionMatrix cm(n);
  cm.add(pred, gt);
  return miou(cm, known, novel);
}

}  // namespace raml
