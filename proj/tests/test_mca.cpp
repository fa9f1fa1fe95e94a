#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "raml/gradcheck.hpp"
#include "raml/mca.hpp"

using namespace raml;

namespace {

Tensor3d random_logits(Rng& rng, int c, int h, int w, double scale = 3.0) {
  Tensor3d t(c, h, w);
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

MetaOutput values_of(int c, int h, int w, std::vector<double> v, MetaActivation act = MetaActivation::kSigmoidPerChannel) {
  return MetaOutput{Tensor3d(c, h, w, std::move(v)), act};
}

std::vector<double> channel_vec(const Tensor3d& t, int c) {
  auto s = t.channel(c);
  return {s.begin(), s.end()};
}

// Scales the flat vector into a logits tensor for gradient checks.
ScalarFn logits_fn(int c, int h, int w, std::function<double(const Tensor3d&, Tensor3d*)> f) {
  return [=](const std::vector<double>& x, std::vector<double>* grad) {
    Tensor3d logits(c, h, w, x);
    if (grad == nullptr) return f(logits, nullptr);
    Tensor3d g(c, h, w);
    const double v = f(logits, &g);
    grad->assign(g.data().begin(), g.data().end());
    return v;
  };
}

}  // namespace

TEST_CASE("activation") {
  Rng rng(1);
  Tensor3d u = random_logits(rng, 5, 3, 4);
  MetaOutput s = activate(u, MetaActivation::kSoftmaxAll);
  for (int p = 0; p < 12; ++p) {
    double sum = 0;
    for (int c = 0; c < 5; ++c) sum += s.values.data()[c * 12 + p];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  MetaOutput g = activate(u, MetaActivation::kSigmoidPerChannel);
  for (std::size_t i = 0; i < u.size(); ++i) {
    CHECK(g.values.data()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-u.data()[i]))));
  }
}

TEST_CASE("seg loss") {
  SUBCASE("large one-hot logits give zero loss") {
    Tensor3d u(3, 2, 2);
    LabelMap l(2, 2, std::vector<std::uint8_t>{0, 1, 2, 1});
    for (int p = 0; p < 4; ++p) u.data()[l.labels()[p] * 4 + p] = 50.0;
    CHECK(seg_loss(u, l) < 1e-12);
  }
  SUBCASE("uniform logits give ln N") {
    CHECK(seg_loss(Tensor3d(4, 3, 3, 0.7), LabelMap(3, 3, 2)) == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("random 4-class 3x3 against a per-pixel oracle") {
    Rng rng(2);
    Tensor3d u = random_logits(rng, 4, 3, 3);
    LabelMap l(3, 3);
    for (auto& v : l.labels()) v = static_cast<std::uint8_t>(rng.below(4));
    l.labels()[4] = LabelMap::kIgnore;
    long double total = 0;
    int valid = 0;
    for (int p = 0; p < 9; ++p) {
      if (l.labels()[p] == LabelMap::kIgnore) continue;
      long double z = 0;
      for (int c = 0; c < 4; ++c) z += std::exp(static_cast<long double>(u.data()[c * 9 + p]));
      total += -std::log(std::exp(static_cast<long double>(u.data()[l.labels()[p] * 9 + p])) / z);
      ++valid;
    }
    CHECK(std::abs(seg_loss(u, l) - static_cast<double>(total / valid)) <= 1e-9);
  }
  SUBCASE("restricted to the first channels") {
    Rng rng(3);
    Tensor3d u = random_logits(rng, 5, 2, 2);
    Tensor3d first(3, 2, 2, std::vector<double>(u.data().begin(), u.data().begin() + 12));
    LabelMap l(2, 2, 1);
    CHECK(seg_loss(u, l, nullptr, 3) == doctest::Approx(seg_loss(first, l)).epsilon(1e-14));
  }
  SUBCASE("unknown label scores the meta group") {
    Rng rng(4);
    Tensor3d u = random_logits(rng, 5, 1, 1);
    LabelMap l(1, 1, LabelMap::kUnknown);
    long double z = 0, group = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(u.data()[c]));
    for (int c = 3; c < 5; ++c) group += std::exp(static_cast<long double>(u.data()[c]));
    CHECK(std::abs(seg_loss(u, l, nullptr, 0, 3) - static_cast<double>(-std::log(group / z))) <= 1e-12);
    CHECK_THROWS_AS(seg_loss(u, l), PreconditionError);
    LabelMap bad(1, 1, 3);
    CHECK_THROWS_AS(seg_loss(u, bad, nullptr, 0, 3), PreconditionError);
  }
  SUBCASE("gradient, including the unknown group") {
    Rng rng(5);
    LabelMap l(3, 3);
    for (auto& v : l.labels()) v = static_cast<std::uint8_t>(rng.below(3));
    l.labels()[0] = LabelMap::kUnknown;
    l.labels()[5] = LabelMap::kUnknown;
    l.labels()[7] = LabelMap::kIgnore;
    auto fn = logits_fn(5, 3, 3, [&](const Tensor3d& u, Tensor3d* g) { return seg_loss(u, l, g, 0, 3); });
    Tensor3d u = random_logits(rng, 5, 3, 3);
    CHECK(max_relative_error(fn, std::vector<double>(u.data().begin(), u.data().end()), 1e-6, 1e-8) < 1e-6);
  }
  SUBCASE("optimum has near-zero gradient") {
    Tensor3d u(2, 1, 2);
    u(0, 0, 0) = 40;
    u(1, 0, 1) = 40;
    Tensor3d g(2, 1, 2);
    seg_loss(u, LabelMap(1, 2, std::vector<std::uint8_t>{0, 1}), &g);
    for (double v : g.data()) CHECK(std::abs(v) < 1e-12);
  }
  CHECK_THROWS_AS(seg_loss(Tensor3d(2, 2, 2), LabelMap(2, 2, LabelMap::kIgnore)), PreconditionError);
  CHECK_THROWS_AS(seg_loss(Tensor3d(2, 2, 2), LabelMap(2, 3, 0)), ShapeError);
}

TEST_CASE("dice and inter loss") {
  std::vector<double> a{1.0, 1.0, 0.0, 1.0};  // hard mask: the soft coefficient of a with itself is below 1
  CHECK(dice_coeff(a, a, 1e-6) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(dice_coeff(a, std::vector<double>{0.0, 0.0, 0.5, 0.0}, 1e-6) == 0.0);
  SUBCASE("two identical channels, rest zero") {
    std::vector<double> v(12, 0.0);
    for (int i = 0; i < 4; ++i) v[i] = v[4 + i] = a[i];
    CHECK(inter_loss(values_of(3, 2, 2, v)) == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("disjoint channels") {
    std::vector<double> v(12, 0.0);
    v[0] = 1;
    v[4 + 1] = 1;
    v[8 + 2] = 0.5;
    CHECK(inter_loss(values_of(3, 2, 2, v)) == 0.0);
  }
  SUBCASE("random 5-channel pairwise oracle, symmetry, gradient") {
    Rng rng(7);
    Tensor3d u = random_logits(rng, 5, 3, 3);
    MetaOutput c = activate(u, MetaActivation::kSigmoidPerChannel);
    long double ref = 0;
    for (int i = 0; i < 5; ++i) {
      for (int j = i + 1; j < 5; ++j) ref += oracle::dice(channel_vec(c.values, i), channel_vec(c.values, j), 1e-6);
    }
    CHECK(std::abs(inter_loss(c) - static_cast<double>(ref)) <= 1e-9);
    auto x = channel_vec(c.values, 1), y = channel_vec(c.values, 3);
    CHECK(dice_coeff(x, y, 1e-6) == dice_coeff(y, x, 1e-6));
    ScalarFn fn = [](const std::vector<double>& v, std::vector<double>* grad) {
      MetaOutput m{Tensor3d(5, 3, 3, v), MetaActivation::kSigmoidPerChannel};
      if (grad == nullptr) return inter_loss(m);
      Tensor3d g(5, 3, 3);
      const double r = inter_loss(m, 1e-6, &g);
      grad->assign(g.data().begin(), g.data().end());
      return r;
    };
    const std::vector<double> x0(c.values.data().begin(), c.values.data().end());
    CHECK(max_relative_error(fn, x0, 1e-7, 1e-8) < 1e-5);
  }
}

TEST_CASE("split loss") {
  SUBCASE("K=2, mass 100 each, eta 0.02") {
    std::vector<double> v(3 * 100, 0.0);
    for (int i = 100; i < 300; ++i) v[i] = 1.0;
    CHECK(split_loss(values_of(3, 10, 10, v), 1, 2, 0.02) == doctest::Approx(-2 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("masses at or below 1/eta clip to zero") {
    std::vector<double> v(3 * 100, 0.0);
    for (int i = 100; i < 150; ++i) v[i] = 1.0;
    for (int i = 200; i < 230; ++i) v[i] = 1.0;
    CHECK(split_loss(values_of(3, 10, 10, v), 1, 2, 0.02) == 0.0);
  }
  SUBCASE("monotone and non-positive") {
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
      Tensor3d u = random_logits(rng, 4, 8, 8);
      MetaOutput c = activate(u, MetaActivation::kSigmoidPerChannel);
      const double base = split_loss(c, 2, 2, 0.05);
      CHECK(base <= 0.0);
      MetaOutput more = c;
      for (int p = 0; p < 64; ++p) {
        double& v = more.values.data()[2 * 64 + p];
        v = std::min(1.0, v + 0.1);
      }
      CHECK(split_loss(more, 2, 2, 0.05) <= base);
    }
  }
  SUBCASE("equal allocation minimizes the loss for fixed total mass (Jensen)") {
    Rng rng(10);
    const int k = 4;
    const double eta = 0.02, total = 1200.0;  // eta * total / k = 6 >= 1
    auto loss_for = [&](const std::vector<double>& masses) {
      // One row of pixels per channel: place the mass as full pixels plus a fraction.
      const int w = 400;
      std::vector<double> v((1 + k) * w, 0.0);
      for (int i = 0; i < k; ++i) {
        double m = masses[i];
        for (int x = 0; x < w && m > 0; ++x) {
          v[(1 + i) * w + x] = std::min(1.0, m);
          m -= 1.0;
        }
      }
      return split_loss(values_of(1 + k, 1, w, v), 1, k, eta);
    };
    const double equal = loss_for(std::vector<double>(k, total / k));
    for (int t = 0; t < 1000; ++t) {
      std::vector<double> w(k);
      double s = 0;
      for (double& x : w) s += (x = rng.uniform(0.01, 1.0));
      std::vector<double> masses(k);
      for (int i = 0; i < k; ++i) masses[i] = std::min(400.0, total * w[i] / s);
      double used = 0;
      for (double m : masses) used += m;
      if (std::abs(used - total) > 1e-9) continue;  // capped allocation, different total
      CHECK(equal <= loss_for(masses) + 1e-12);
    }
  }
  CHECK_THROWS_AS(split_loss(values_of(2, 1, 1, {0.1, 0.2}), 1, 2, 0.02), ShapeError);
}

TEST_CASE("rec loss") {
  Rng rng(11);
  Tensor3d x(3, 4, 5);
  for (double& v : x.data()) v = rng.uniform();
  SUBCASE("identically zero under softmax over all channels") {
    for (int t = 0; t < 20; ++t) {
      MetaOutput c = activate(random_logits(rng, 6, 4, 5, 8.0), MetaActivation::kSoftmaxAll);
      CHECK(rec_loss(x, c) < 1e-24);
    }
  }
  SUBCASE("all-zero channels with a white image give H*W*3") {
    MetaOutput c = values_of(2, 4, 5, std::vector<double>(40, 0.0));
    CHECK(rec_loss(Tensor3d(3, 4, 5, 1.0), c) == doctest::Approx(60.0));
  }
  SUBCASE("random sigmoid case against a direct sum") {
    MetaOutput c = activate(random_logits(rng, 4, 4, 5), MetaActivation::kSigmoidPerChannel);
    long double ref = 0;
    for (int ch = 0; ch < 3; ++ch) {
      for (int p = 0; p < 20; ++p) {
        long double s = -1;
        for (int k = 0; k < 4; ++k) s += c.values.data()[k * 20 + p];
        const long double r = x.data()[ch * 20 + p] * s;
        ref += r * r;
      }
    }
    CHECK(std::abs(rec_loss(x, c) - static_cast<double>(ref)) <= 1e-9);
  }
}

TEST_CASE("overall loss") {
  McaConfig cfg;
  SUBCASE("weights on planted terms") {
    LossBreakdown t{1.0, 2.0, -1.0, 4.0, 0.0};
    CHECK(combine_losses(t, cfg) == doctest::Approx(1.14).epsilon(1e-14));
  }
  SUBCASE("zero weights reduce to the segmentation term") {
    Rng rng(12);
    cfg.K = 2;
    cfg.lambda_inter = cfg.lambda_split = cfg.lambda_rec = 0.0;
    Tensor3d u = random_logits(rng, 5, 4, 4);
    LabelMap l(4, 4, 1);
    Tensor3d img(3, 4, 4, 0.5);
    CHECK(overall_loss(u, l, img, 3, cfg).total == doctest::Approx(seg_loss(u, l)).epsilon(1e-14));
    cfg.seg_all_channels = false;
    CHECK(overall_loss(u, l, img, 3, cfg).total == doctest::Approx(seg_loss(u, l, nullptr, 3)).epsilon(1e-14));
  }
  SUBCASE("gradient with respect to logits, both activations") {
    Rng rng(13);
    cfg.K = 2;
    cfg.eta = 0.2;
    Tensor3d img(3, 4, 4);
    for (double& v : img.data()) v = rng.uniform();
    LabelMap l(4, 4);
    for (auto& v : l.labels()) v = static_cast<std::uint8_t>(rng.below(3));
    l.labels()[3] = LabelMap::kUnknown;
    for (auto act : {MetaActivation::kSigmoidPerChannel, MetaActivation::kSoftmaxAll}) {
      cfg.activation = act;
      auto fn = logits_fn(5, 4, 4, [&](const Tensor3d& u, Tensor3d* g) { return overall_loss(u, l, img, 3, cfg, g).total; });
      Tensor3d u = random_logits(rng, 5, 4, 4);
      CHECK(max_relative_error(fn, std::vector<double>(u.data().begin(), u.data().end()), 1e-6, 1e-7) < 1e-5);
    }
  }
  CHECK_THROWS_AS(overall_loss(Tensor3d(4, 2, 2), LabelMap(2, 2, 0), Tensor3d(3, 2, 2), 3, cfg), ShapeError);
}

TEST_CASE("binarize, candidates, aggregation") {
  SUBCASE("one meta channel dominating a block") {
    std::vector<double> v(3 * 4, 0.1);
    v[0 * 4 + 0] = 0.9;
    v[0 * 4 + 1] = 0.9;
    v[2 * 4 + 2] = 0.8;
    v[2 * 4 + 3] = 0.8;
    auto masks = binarize_meta(values_of(3, 2, 2, v), 2);
    REQUIRE(masks.size() == 1);
    CHECK(masks[0] == BitMask(2, 2, std::vector<std::uint8_t>{0, 0, 1, 1}));
  }
  SUBCASE("ties go to the lowest channel") {
    auto masks = binarize_meta(values_of(3, 1, 1, {0.5, 0.7, 0.7}), 1);
    CHECK(masks[0].count() == 1);
    CHECK(masks[1].count() == 0);
  }
  SUBCASE("random output against a per-pixel argmax") {
    Rng rng(14);
    MetaOutput c = activate(random_logits(rng, 6, 5, 5), MetaActivation::kSigmoidPerChannel);
    auto masks = binarize_meta(c, 2);
    for (int p = 0; p < 25; ++p) {
      int best = 0;
      for (int k = 1; k < 6; ++k) {
        if (c.values.data()[k * 25 + p] > c.values.data()[best * 25 + p]) best = k;
      }
      for (int j = 0; j < 4; ++j) CHECK(masks[j].at(p) == (best == 2 + j));
    }
  }
  SUBCASE("candidate ratio with strict threshold") {
    BitMask novel(10, 10, true);
    BitMask c15(10, 10), c10(10, 10), c0(10, 10);
    for (int i = 0; i < 15; ++i) c15.set(static_cast<std::size_t>(i));
    for (int i = 0; i < 10; ++i) c10.set(static_cast<std::size_t>(50 + i));
    std::vector<BitMask> masks{c15, c10, c0};
    CHECK(candidate_channels(masks, novel, 0.1) == std::set<int>{0});
    CHECK_THROWS_AS(candidate_channels(masks, BitMask(10, 10), 0.1), PreconditionError);
  }
  SUBCASE("literal and intersect numerators") {
    BitMask novel(4, 4), c(4, 4);
    for (int i = 0; i < 4; ++i) novel.set(static_cast<std::size_t>(i));
    for (int i = 8; i < 16; ++i) c.set(static_cast<std::size_t>(i));  // outside the novel mask
    std::vector<BitMask> masks{c};
    CHECK(candidate_channels(masks, novel, 0.1, CandidateMode::kLiteral) == std::set<int>{0});
    CHECK(candidate_channels(masks, novel, 0.1, CandidateMode::kIntersect).empty());
  }
  SUBCASE("aggregation is a union") {
    Rng rng(15);
    std::vector<BitMask> masks;
    for (int i = 0; i < 4; ++i) masks.push_back(oracle::random_mask(rng, 6, 6, 0.2));
    BitMask u = aggregate_channels(masks, 6, 6);
    std::size_t total = 0;
    for (std::size_t p = 0; p < u.size(); ++p) {
      bool any = false;
      for (const auto& m : masks) any |= m.at(p);
      CHECK(u.at(p) == any);
    }
    for (const auto& m : masks) total += m.count();
    CHECK(u.count() <= total);
    std::vector<BitMask> same{masks[0], masks[0]};
    CHECK(aggregate_channels(same, 6, 6) == masks[0]);
    CHECK(aggregate_channels({}, 6, 6).count() == 0);
  }
}

TEST_CASE("mca regions") {
  // Background known channel everywhere except a planted 4x4 block owned by meta channel 1.
  const int h = 10, w = 10, n = 2, k = 2;
  std::vector<double> v((n + k) * h * w, 0.05);
  BitMask block(h, w);
  for (int y = 3; y < 7; ++y) {
    for (int x = 2; x < 6; ++x) block.set(y, x);
  }
  for (int p = 0; p < h * w; ++p) {
    if (block.at(static_cast<std::size_t>(p))) v[(n + 1) * h * w + p] = 0.9;
    else v[p] = 0.9;
  }
  MetaOutput c = values_of(n + k, h, w, v);
  McaConfig cfg;
  cfg.K = k;
  AnnotatedShot shot{&c, &block};
  std::vector<AnnotatedShot> shots{shot};
  CHECK(select_candidates(shots, n, cfg) == std::set<int>{1});
  RegionSet rs = mca_regions(c, shots, n, cfg, Connectivity::kFour, 4);
  REQUIRE(rs.size() == 1);
  CHECK(rs.regions[0] == block);
  CHECK(mca_regions(c, std::set<int>{}, n, Connectivity::kFour, 4).empty());
  RegionSet again = mca_regions(c, shots, n, cfg, Connectivity::kFour, 4);
  CHECK(again.regions == rs.regions);
}

TEST_CASE("mca config validation") {
  McaConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.K = 0;
  CHECK_THROWS_AS(cfg.validate(), PreconditionError);
  cfg = McaConfig{};
  cfg.kappa = 1.0;
  CHECK_THROWS_AS(cfg.validate(), PreconditionError);
  cfg = McaConfig{};
  cfg.lambda_rec = -1;
  CHECK_THROWS_AS(cfg.validate(), PreconditionError);
}
