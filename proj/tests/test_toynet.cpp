#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "raml/optim.hpp"
#include "raml/rng.hpp"
#include "raml/toynet.hpp"

using namespace raml;

namespace {

Tensor3d random_image(Rng& rng, int c, int h, int w) {
  Tensor3d t(c, h, w);
  for (double& v : t.data()) v = rng.uniform(0, 1);
  return t;
}

NetParams<double> small_net(std::uint64_t seed) { return NetParams<float>::init(2, 3, 4, 3, seed).cast<double>(); }

// Weighted sum of logits and features: linear upstream gradients.
double probe_loss(const NetParams<double>& p, const Tensor3d& img, const Tensor3d& wl, const Tensor3d& wf) {
  ForwardCache<double> c = forward(p, img);
  double s = 0;
  for (std::size_t i = 0; i < wl.size(); ++i) s += wl.data()[i] * c.logits.data()[i];
  for (std::size_t i = 0; i < wf.size(); ++i) s += wf.data()[i] * c.features.data()[i];
  return s;
}

}  // namespace

TEST_CASE("parameter shapes and widening") {
  ToyNetParams p = ToyNetParams::init(3, 16, 32, 4, 1);
  CHECK(p.conv1_w.size() == 16 * 3 * 9);
  CHECK(p.conv2_w.size() == 32 * 16 * 9);
  CHECK(p.head_w.size() == 4 * 32);
  CHECK(p.parameter_count() == 16 * 27 + 16 + 32 * 144 + 32 + 128 + 4);
  CHECK(p.flatten().size() == p.parameter_count());
  ToyNetParams w = p.widened(3, 5);
  CHECK(w.outputs == 7);
  CHECK(std::equal(p.head_w.begin(), p.head_w.end(), w.head_w.begin()));
  CHECK(std::equal(p.head_b.begin(), p.head_b.end(), w.head_b.begin()));
  CHECK(w.conv1_w == p.conv1_w);
  CHECK(w.conv2_w == p.conv2_w);
  CHECK(ToyNetParams::init(3, 16, 32, 4, 1) == p);
  CHECK_FALSE(ToyNetParams::init(3, 16, 32, 4, 2) == p);
  ToyNetParams q = p;
  q.assign(p.flatten());
  CHECK(q == p);
}

TEST_CASE("forward: zero weights give the bias") {
  NetParams<double> p = small_net(1);
  for (auto b : p.blocks()) std::fill(b.begin(), b.end(), 0.0);
  p.head_b = {0.5, -1.0, 2.0};
  Rng rng(2);
  ForwardCache<double> c = forward(p, random_image(rng, 2, 5, 6));
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 6; ++x) {
      CHECK(c.logits(0, y, x) == 0.5);
      CHECK(c.logits(1, y, x) == -1.0);
      CHECK(c.logits(2, y, x) == 2.0);
    }
  }
}

TEST_CASE("forward: convolution against a direct oracle") {
  Rng rng(3);
  NetParams<double> p = small_net(3);
  Tensor3d img = random_image(rng, 2, 5, 4);
  ForwardCache<double> c = forward(p, img);
  auto at = [&](const Tensor3d& t, int ch, int y, int x) {
    return (y < 0 || x < 0 || y >= t.height() || x >= t.width()) ? 0.0 : t(ch, y, x);
  };
  for (int o = 0; o < p.hidden; ++o) {
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 4; ++x) {
        double s = p.conv1_b[o];
        for (int i = 0; i < 2; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              s += p.conv1_w[((o * 2 + i) * 3 + ky) * 3 + kx] * at(img, i, y + ky - 1, x + kx - 1);
            }
          }
        }
        CHECK(c.hidden(o, y, x) == doctest::Approx(std::max(0.0, s)).epsilon(1e-12));
      }
    }
  }
  for (int o = 0; o < p.outputs; ++o) {
    double s = p.head_b[o];
    for (int f = 0; f < p.features; ++f) s += p.head_w[o * p.features + f] * c.features(f, 2, 1);
    CHECK(c.logits(o, 2, 1) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("forward: a centred delta kernel copies its input channel") {
  NetParams<double> p = NetParams<float>::init(1, 1, 1, 1, 1).cast<double>();
  for (auto b : p.blocks()) std::fill(b.begin(), b.end(), 0.0);
  p.conv1_w[4] = 1.0;
  p.conv2_w[4] = 1.0;
  p.head_w[0] = 1.0;
  Rng rng(4);
  Tensor3d img = random_image(rng, 1, 4, 4);
  ForwardCache<double> c = forward(p, img);
  CHECK(c.logits == img);
}

TEST_CASE("forward is translation equivariant away from the border") {
  Rng rng(5);
  NetParams<double> p = small_net(5);
  Tensor3d img(2, 12, 12, 0.0), shifted(2, 12, 12, 0.0);
  for (int ch = 0; ch < 2; ++ch) {
    for (int y = 3; y < 7; ++y) {
      for (int x = 3; x < 7; ++x) {
        img(ch, y, x) = rng.uniform();
        shifted(ch, y + 2, x + 1) = img(ch, y, x);
      }
    }
  }
  ForwardCache<double> a = forward(p, img), b = forward(p, shifted);
  for (int o = 0; o < p.outputs; ++o) {
    for (int y = 0; y < 9; ++y) {
      for (int x = 0; x < 10; ++x) CHECK(b.logits(o, y + 2, x + 1) == doctest::Approx(a.logits(o, y, x)).epsilon(1e-12));
    }
  }
}

TEST_CASE("backward matches central differences") {
  Rng rng(6);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    NetParams<double> p = small_net(seed);
    Tensor3d img = random_image(rng, 2, 4, 5);
    if (kink_margin(p, img) < 1e-4) continue;
    ForwardCache<double> c = forward(p, img);
    Tensor3d wl(c.logits.channels(), 4, 5), wf(c.features.channels(), 4, 5);
    for (double& v : wl.data()) v = rng.uniform(-1, 1);
    for (double& v : wf.data()) v = rng.uniform(-1, 1);
    NetParams<double> g = p.zeros_like();
    backward(p, c, wl, &wf, g);
    const std::vector<double> ga = g.flatten();
    std::vector<double> x = p.flatten();
    const double h = 1e-6;
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      NetParams<double> q = p;
      const double x0 = x[i];
      x[i] = x0 + h;
      q.assign(x);
      const double up = probe_loss(q, img, wl, wf);
      x[i] = x0 - h;
      q.assign(x);
      const double dn = probe_loss(q, img, wl, wf);
      x[i] = x0;
      const double num = (up - dn) / (2 * h);
      worst = std::max(worst, std::abs(num - ga[i]) / std::max({std::abs(num), std::abs(ga[i]), 1e-5}));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("backward accumulates and is linear in the upstream gradient") {
  Rng rng(7);
  NetParams<double> p = small_net(7);
  Tensor3d img = random_image(rng, 2, 4, 4);
  ForwardCache<double> c = forward(p, img);
  Tensor3d wl(3, 4, 4);
  for (double& v : wl.data()) v = rng.uniform(-1, 1);
  NetParams<double> once = p.zeros_like(), twice = p.zeros_like();
  backward(p, c, wl, static_cast<const Tensor3d*>(nullptr), once);
  backward(p, c, wl, static_cast<const Tensor3d*>(nullptr), twice);
  backward(p, c, wl, static_cast<const Tensor3d*>(nullptr), twice);
  const auto a = once.flatten(), b = twice.flatten();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2 * a[i]).epsilon(1e-12));
}

TEST_CASE("predict labels") {
  Tensor3 u(3, 1, 3, std::vector<float>{1, 0, 5, 2, 0, 0, 0, 3, 9});
  LabelMap all = predict_labels(u, 3);
  CHECK(std::ranges::equal(all.labels(), std::vector<std::uint8_t>{1, 2, 2}));
  LabelMap two = predict_labels(u, 2);
  CHECK(std::ranges::equal(two.labels(), std::vector<std::uint8_t>{1, 0, 0}));
}

TEST_CASE("SGD with momentum and weight decay by hand") {
  SgdConfig cfg{0.1, 0.9, 0.01, 1.0};
  // f(x) = x^2 / 2, gradient x; two steps from x = 1 over a 4-iteration poly schedule.
  std::vector<double> x{1.0}, v{0.0};
  std::vector<double> g{x[0]};
  sgd_step<double, double>(x, g, v, cfg, 0, 4);
  // v = 1 + 0.01 = 1.01, lr = 0.1, x = 1 - 0.101 = 0.899
  CHECK(v[0] == doctest::Approx(1.01));
  CHECK(x[0] == doctest::Approx(0.899));
  g[0] = x[0];
  sgd_step<double, double>(x, g, v, cfg, 1, 4);
  // v = 0.9 * 1.01 + 0.899 + 0.00899 = 1.81699, lr = 0.075
  CHECK(v[0] == doctest::Approx(1.81699));
  CHECK(x[0] == doctest::Approx(0.899 - 0.075 * 1.81699));
  SUBCASE("zero learning rate leaves parameters unchanged") {
    SgdConfig z = cfg;
    z.lr0 = 0;
    std::vector<double> y{3.0}, w{0.0}, gy{1.0};
    sgd_step<double, double>(y, gy, w, z, 0, 4);
    CHECK(y[0] == 3.0);
  }
  const std::vector<double> g2{1, 2};
  auto mismatched = [&] { sgd_step<double, double>(x, g2, v, cfg, 0, 4); };
  CHECK_THROWS_AS(mismatched(), ShapeError);
}

TEST_CASE("poly schedule") {
  SgdConfig cfg{0.2, 0.9, 0.0, 0.9};
  CHECK(poly_lr(cfg, 0, 10) == 0.2);
  CHECK(poly_lr(cfg, 5, 10) == doctest::Approx(0.2 * std::pow(0.5, 0.9)));
  CHECK(poly_lr(cfg, 10, 10) == 0.0);
  for (int i = 1; i < 10; ++i) CHECK(poly_lr(cfg, i, 10) < poly_lr(cfg, i - 1, 10));
}

TEST_CASE("closed training") {
  Rng rng(8);
  std::vector<TrainSample> data;
  for (int i = 0; i < 4; ++i) {
    TrainSample s{Tensor3(3, 8, 8, 0.1f), LabelMap(8, 8, 0)};
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        if ((x + i) % 8 < 4) {
          s.image(0, y, x) = 0.9f;
          s.labels(y, x) = 1;
        }
      }
    }
    data.push_back(s);
  }
  ToyNetParams init = ToyNetParams::init(3, 4, 6, 2, 3);
  TrainConfig cfg;
  cfg.iters = 150;
  cfg.batch = 2;
  SUBCASE("zero iterations return the initial parameters") {
    cfg.iters = 0;
    CHECK(train_closed(data, init, cfg) == init);
  }
  SUBCASE("zero learning rate returns the initial parameters") {
    cfg.sgd.lr0 = 0;
    CHECK(train_closed(data, init, cfg) == init);
  }
  SUBCASE("loss decreases, fits the toy task and is deterministic") {
    TrainLog log;
    ToyNetParams a = train_closed(data, init, cfg, &log);
    ToyNetParams b = train_closed(data, init, cfg);
    CHECK(a == b);
    REQUIRE(log.entries.size() >= 2);
    CHECK(log.entries.back().loss.seg < log.entries.front().loss.seg);
    LabelMap pred = predict_labels(forward(a, data[0].image).logits, 2);
    CHECK(pred == data[0].labels);
  }
  SUBCASE("single class is rejected") {
    for (auto& s : data) s.labels = LabelMap(8, 8, 0);
    CHECK_THROWS_AS(train_closed(data, init, cfg), PreconditionError);
  }
}
