#include <cmath>
#include <vector>

#include "doctest.h"
#include "msgc/gating.hpp"
#include "msgc/msgc_block.hpp"
#include "msgc/rng.hpp"

using namespace msgc;

namespace {
double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

TEST_SUITE("gating") {

TEST_CASE("evaluation threshold: negatives drop, zero and positives select") {
  CHECK(binarize_eval(-0.7) == 0.0);
  CHECK(binarize_eval(-1e-12) == 0.0);
  CHECK(binarize_eval(0.0) == 1.0);  // ties resolve to selected
  CHECK(binarize_eval(0.3) == 1.0);

  Tensor2 s(1, 4);
  s.v = {-2.0, 0.0, 1e-9, 5.0};
  Tensor2 b = binarize_eval(s);
  CHECK(b.v == std::vector<double>{0.0, 1.0, 1.0, 1.0});
}

TEST_CASE("training gate: soft value is the tempered logistic of saliency plus noise") {
  Tensor2 s(2, 3), noise(2, 3);
  s.v = {-1.0, 0.0, 2.0, 0.5, -0.5, 3.0};
  noise.v = {0.3, -0.2, 0.1, -1.0, 2.0, 0.0};
  const double tau = 2.0 / 3.0;
  TrainGate g = binarize_train(s, noise, tau);
  for (size_t i = 0; i < s.v.size(); ++i) {
    const double want = sigma((s.v[i] + noise.v[i]) / tau);
    CHECK(g.soft.v[i] == doctest::Approx(want).epsilon(1e-14));
    CHECK(g.hard.v[i] == (g.soft.v[i] >= 0.5 ? 1.0 : 0.0));
  }
}

TEST_CASE("training gate: hard bits do not depend on the temperature") {
  Rng rng(17);
  Tensor2 s(4, 8), noise(4, 8);
  for (double& v : s.v) v = rng.uniform(-3.0, 3.0);
  for (double& v : noise.v) v = logistic_noise(rng);
  TrainGate cold = binarize_train(s, noise, 0.4);
  TrainGate hot = binarize_train(s, noise, 1.7);
  // p >= 0.5 iff s + noise >= 0, whatever the temperature does to p itself.
  CHECK(cold.hard.v == hot.hard.v);
}

TEST_CASE("training gate: selection frequency tracks sigmoid of the saliency") {
  const int draws = 40000;
  for (double s : {-2.0, 0.0, 1.0}) {
    CAPTURE(s);
    Rng rng(23);
    Tensor2 sal(1, 1), noise(1, 1);
    sal.at(0, 0) = s;
    int selected = 0;
    for (int i = 0; i < draws; ++i) {
      noise.at(0, 0) = logistic_noise(rng);
      TrainGate g = binarize_train(sal, noise, 2.0 / 3.0);
      selected += g.hard.at(0, 0) == 1.0 ? 1 : 0;
    }
    const double p = sigma(s);
    const double freq = static_cast<double>(selected) / draws;
    // four standard deviations of the binomial estimate
    const double tol = 4.0 * std::sqrt(p * (1.0 - p) / draws);
    CHECK(std::abs(freq - p) < tol);
  }
}

TEST_CASE("logistic noise: zero-median and symmetric tails") {
  Rng rng(31);
  const int draws = 40000;
  int below = 0, far = 0;
  for (int i = 0; i < draws; ++i) {
    const double l = logistic_noise(rng);
    REQUIRE(std::isfinite(l));
    below += l < 0.0 ? 1 : 0;
    far += std::abs(l) > 2.0 ? 1 : 0;
  }
  const double half = static_cast<double>(below) / draws;
  CHECK(std::abs(half - 0.5) < 4.0 * std::sqrt(0.25 / draws));
  // P(|L| > 2) = 2 * sigma(-2)
  const double want_far = 2.0 * sigma(-2.0);
  CHECK(std::abs(static_cast<double>(far) / draws - want_far) <
        4.0 * std::sqrt(want_far * (1.0 - want_far) / draws));
}

TEST_CASE("straight-through backward: gradient is gp * p * (1 - p) / temperature") {
  Tensor2 soft(1, 3), gp(1, 3);
  soft.v = {0.2, 0.5, 0.9};
  gp.v = {1.0, -2.0, 0.5};
  const double tau = 0.5;
  Tensor2 gs = binarize_train_bwd(gp, soft, tau);
  for (size_t i = 0; i < soft.v.size(); ++i) {
    const double want = gp.v[i] * soft.v[i] * (1.0 - soft.v[i]) / tau;
    CHECK(gs.v[i] == doctest::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("gate noise streams: reproducible, and distinct across layers and samples") {
  std::vector<double> a(8), b(8), c(8), d(8);
  fill_gate_noise(42, 1, 0, 8, a.data());
  fill_gate_noise(42, 1, 0, 8, b.data());
  fill_gate_noise(42, 1, 1, 8, c.data());
  fill_gate_noise(43, 1, 0, 8, d.data());
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a != d);
  for (double v : a) CHECK(std::isfinite(v));
}

}  // TEST_SUITE
