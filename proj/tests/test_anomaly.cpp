#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "raml/anomaly.hpp"

using namespace raml;

namespace {

ScoredPixels make(std::vector<double> s, std::vector<std::uint8_t> l) {
  ScoredPixels p;
  p.append(s, l);
  return p;
}

// Random scores on a coarse grid so ties occur.
ScoredPixels random_scores(Rng& rng, std::size_t n, bool ties) {
  ScoredPixels p;
  p.scores.resize(n);
  p.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.labels[i] = rng.uniform() < 0.3 ? 1 : 0;
    const double v = rng.uniform();
    p.scores[i] = ties ? std::floor(v * 20) / 20 + 0.3 * p.labels[i] * rng.uniform() : v + 0.3 * p.labels[i];
  }
  p.labels[0] = 1;
  p.labels[1] = 0;
  return p;
}

PrototypeBank bank_of(std::vector<Embedding> protos) {
  PrototypeBank b;
  for (std::size_t i = 0; i < protos.size(); ++i) {
    b.known[static_cast<int>(i)] = protos[i];
    b.counts[static_cast<int>(i)] = 1;
  }
  return b;
}

}  // namespace

TEST_CASE("region anomaly probability") {
  PrototypeBank b = bank_of({{1, 0, 0}, {0, 1, 0}});
  CHECK(region_anomaly_prob(std::vector<double>{0, 2, 0}, b) == doctest::Approx(1.0));
  CHECK(region_anomaly_prob(std::vector<double>{0, 0, 3}, b) == doctest::Approx(0.0));
  Rng rng(3);
  std::vector<Embedding> protos(5, Embedding(4));
  for (auto& p : protos) {
    for (double& v : p) v = rng.uniform(-1, 1);
  }
  Embedding e(4);
  for (double& v : e) v = rng.uniform(-1, 1);
  double best = -2;
  for (const auto& p : protos) best = std::max(best, cosine(e, p));
  CHECK(region_anomaly_prob(e, bank_of(protos)) == best);
  CHECK_THROWS_AS(region_anomaly_prob(e, PrototypeBank{}), PreconditionError);
}

TEST_CASE("uncertainty map") {
  Tensor3 u(2, 2, 2);
  u(0, 0, 0) = 10.0f;
  u(1, 0, 1) = 4.0f;
  u(0, 1, 0) = -3.0f;
  u(1, 1, 0) = -5.0f;
  u(0, 1, 1) = 2.0f;
  RegionSet rs{2, 2, {}};
  BitMask r0(2, 2), r1(2, 2);
  r0.set(0, 0);
  r1.set(1, 0);
  r1.set(1, 1);
  rs.regions = {r0, r1};
  SUBCASE("direct substitution and fallback") {
    Tensor3d q = uncertainty_map(u, rs, std::vector<double>{0.9, 0.5});
    CHECK(q(0, 0, 0) == doctest::Approx(-9.0));
    CHECK(q(0, 0, 1) == doctest::Approx(-4.0));  // outside every region: P = 1
    CHECK(q(0, 1, 0) == doctest::Approx(1.5));   // max logit -3, P 0.5
    CHECK(q(0, 1, 1) == doctest::Approx(-1.0));
  }
  SUBCASE("zero probability zeroes the region") {
    Tensor3d q = uncertainty_map(u, rs, std::vector<double>{0.0, 0.5});
    CHECK(q(0, 0, 0) == 0.0);
  }
  SUBCASE("linear in each region probability") {
    Tensor3d a = uncertainty_map(u, rs, std::vector<double>{0.3, 0.4});
    Tensor3d b = uncertainty_map(u, rs, std::vector<double>{0.6, 0.4});
    CHECK(b(0, 0, 0) == doctest::Approx(2 * a(0, 0, 0)));
    CHECK(b(0, 1, 1) == a(0, 1, 1));
  }
  SUBCASE("random logits against a per-pixel loop") {
    Rng rng(6);
    Tensor3 r(3, 5, 5);
    for (float& v : r.data()) v = static_cast<float>(rng.uniform(-5, 5));
    BitMask a(5, 5), b(5, 5);
    for (int x = 0; x < 5; ++x) {
      a.set(0, x);
      b.set(3, x);
    }
    RegionSet two{5, 5, {a, b}};
    std::vector<double> probs{0.7, -0.2};
    Tensor3d q = uncertainty_map(r, two, probs);
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 5; ++x) {
        double m = r(0, y, x);
        for (int c = 1; c < 3; ++c) m = std::max(m, double(r(c, y, x)));
        const double p = a(y, x) ? 0.7 : b(y, x) ? -0.2 : 1.0;
        CHECK(q(0, y, x) == doctest::Approx(-m * p).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(uncertainty_map(u, rs, std::vector<double>{0.1}), ShapeError);
}

TEST_CASE("normalize map") {
  SUBCASE("two-point grid") {
    Tensor3d q(1, 2, 2, std::vector<double>{-9, -1, -1, -9});
    AnomalyMap m = normalize_map(q);
    CHECK(m.values.data()[0] == 0.0);
    CHECK(m.values.data()[1] == 1.0);
  }
  SUBCASE("constant") {
    const AnomalyMap m = normalize_map(Tensor3d(1, 3, 3, 4.0));
    for (double v : m.values.data()) CHECK(v == 0.5);
  }
  SUBCASE("random grid is the affine rescale and keeps order") {
    Rng rng(2);
    Tensor3d q(1, 6, 7);
    for (double& v : q.data()) v = rng.uniform(-20, 5);
    const auto [lo, hi] = std::minmax_element(q.data().begin(), q.data().end());
    AnomalyMap m = normalize_map(q);
    for (std::size_t i = 0; i < q.size(); ++i) {
      CHECK(std::abs(m.values.data()[i] - (q.data()[i] - *lo) / (*hi - *lo)) <= 1e-9);
      for (std::size_t j = 0; j < q.size(); ++j) {
        if (q.data()[i] < q.data()[j]) CHECK(m.values.data()[i] <= m.values.data()[j]);
      }
    }
  }
}

TEST_CASE("maxlogit map and empty region set") {
  Rng rng(1);
  Tensor3 u(3, 4, 4);
  for (float& v : u.data()) v = static_cast<float>(rng.uniform(-3, 3));
  Tensor3 f(2, 4, 4, 1.0f);
  ProjectionHead head = ProjectionHead::init(2, 4, 3, 1);
  PrototypeBank bank = bank_of({{1, 0, 0}});
  AnomalyMap a = score_regions(f, u, RegionSet{4, 4, {}}, head, bank);
  AnomalyMap b = maxlogit_map(u);
  CHECK(a.values == b.values);
}

TEST_CASE("region-aware scoring separates a known region from an unfamiliar one") {
  // Features: left half points along e0, right half along e1. Equal logits.
  Tensor3 f(2, 4, 8);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 8; ++x) f(x < 4 ? 0 : 1, y, x) = 1.0f;
  }
  Tensor3 u(2, 4, 8, 0.0f);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 8; ++x) u(0, y, x) = 5.0f;
  }
  ProjectionHead head = ProjectionHead::init(2, 2, 2, 1);
  head.w1 = {1, 0, 0, 1};
  head.w2 = {1, 0, 0, 1};
  PrototypeBank bank = bank_of({{1, 0}});
  BitMask left(4, 8), right(4, 8);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 8; ++x) (x < 4 ? left : right).set(y, x);
  }
  AnomalyMap m = score_regions(f, u, RegionSet{4, 8, {left, right}}, head, bank);
  CHECK(m.values(0, 0, 0) <= m.values(0, 0, 7));
  CHECK(m.values(0, 0, 0) == 0.0);
  CHECK(m.values(0, 0, 7) == 1.0);
  AnomalyMap again = score_regions(f, u, RegionSet{4, 8, {left, right}}, head, bank);
  CHECK(again.values == m.values);
}

TEST_CASE("metrics: fixed cases") {
  CHECK(auroc(make({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0})) == 1.0);
  CHECK(auroc(make({0.5, 0.5, 0.5}, {1, 0, 0})) == 0.5);
  CHECK(aupr(make({0.9, 0.8, 0.1}, {1, 1, 0})) == 1.0);
  CHECK(aupr(make({0.9, 0.8, 0.7}, {1, 0, 1})) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(fpr95(make({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0})) == 0.0);
  CHECK(fpr95(make({0.1, 0.2, 0.9, 0.8}, {1, 1, 0, 0})) == 1.0);
  CHECK_THROWS_AS(auroc(make({0.1, 0.2}, {1, 1})), PreconditionError);
  CHECK_THROWS_AS(aupr(make({0.1, 0.2}, {0, 0})), PreconditionError);
  CHECK_THROWS_AS(fpr95(make({0.1, 0.2}, {0, 0})), PreconditionError);
}

TEST_CASE("metrics match brute-force oracles") {
  Rng rng(123);
  for (int t = 0; t < 100; ++t) {
    ScoredPixels p = random_scores(rng, 50 + rng.below(200), t % 2 == 0);
    CHECK(std::abs(auroc(p) - oracle::auroc(p.scores, p.labels)) <= 1e-12);
    CHECK(std::abs(aupr(p) - oracle::aupr(p.scores, p.labels)) <= 1e-12);
    CHECK(fpr95(p) == oracle::fpr95(p.scores, p.labels));
  }
}

TEST_CASE("metric invariants") {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    ScoredPixels p = random_scores(rng, 120, false);
    ScoredPixels neg = p, warped = p;
    for (double& v : neg.scores) v = -v;
    for (double& v : warped.scores) v = std::exp(3 * v) - 7;
    CHECK(auroc(p) + auroc(neg) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(auroc(warped) == auroc(p));
    ScoredPixels lifted = p;
    for (std::size_t i = 0; i < lifted.scores.size(); ++i) {
      if (lifted.labels[i]) lifted.scores[i] += 0.2;
    }
    CHECK(fpr95(lifted) <= fpr95(p));
  }
}

TEST_CASE("scored pixels append checks lengths") {
  ScoredPixels p;
  CHECK_THROWS_AS(p.append(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1}), ShapeError);
}
