#include <cmath>
#include <vector>

#include "doctest.h"
#include "msgc/ops.hpp"
#include "msgc/rng.hpp"
#include "test_util.hpp"

using namespace msgc;
using testutil::max_abs_diff;
using testutil::rand_fill;

TEST_SUITE("ops") {

TEST_CASE("conv2d: 1x1 identity weight copies the input") {
  Rng rng(1);
  Tensor4 x(2, 3, 4, 4);
  rand_fill(x, rng);
  Tensor4 w(1, 1, 3, 3);
  for (int c = 0; c < 3; ++c) w.at(0, 0, c, c) = 1.0;
  Tensor4 y = conv2d_fwd(x, w, nullptr, 1, 0);
  CHECK(y.d == x.d);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d: hand example, 2x2 all-ones kernel sums the window") {
  Tensor4 x(1, 1, 2, 2);
  x.at(0, 0, 0, 0) = 1.0;
  x.at(0, 0, 0, 1) = 2.0;
  x.at(0, 0, 1, 0) = 3.0;
  x.at(0, 0, 1, 1) = 4.0;
  Tensor4 w(2, 2, 1, 1);
  for (double& v : w.v) v = 1.0;
  Tensor4 y = conv2d_fwd(x, w, nullptr, 1, 0);
  REQUIRE(y.d == std::array<int, 4>{1, 1, 1, 1});
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(10.0).epsilon(1e-14));
}

TEST_CASE("conv2d: matches the direct six-loop reference across shapes") {
  Rng rng(7);
  struct Shape {
    int n, cin, h, w, k, cout, stride, pad;
  };
  const Shape shapes[] = {
      {1, 1, 5, 5, 3, 2, 1, 1}, {2, 3, 6, 4, 3, 4, 2, 1},
      {1, 4, 7, 7, 1, 3, 1, 0}, {2, 2, 5, 6, 3, 2, 2, 0},
      {1, 3, 4, 4, 2, 5, 1, 1},
  };
  for (const Shape& s : shapes) {
    CAPTURE(s.k);
    CAPTURE(s.stride);
    CAPTURE(s.pad);
    Tensor4 x(s.n, s.cin, s.h, s.w), w(s.k, s.k, s.cin, s.cout);
    rand_fill(x, rng);
    rand_fill(w, rng);
    std::vector<double> bias(s.cout);
    for (double& b : bias) b = rng.uniform(-0.5, 0.5);
    Tensor4 got = conv2d_fwd(x, w, &bias, s.stride, s.pad);
    Tensor4 want = testutil::naive_conv2d(x, w, &bias, s.stride, s.pad);
    REQUIRE(got.d == want.d);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv2d: kernel larger than the padded input is rejected") {
  Tensor4 x(1, 1, 2, 2), w(5, 5, 1, 1);
  CHECK_THROWS_AS(conv2d_fwd(x, w, nullptr, 1, 0), Error);
  try {
    conv2d_fwd(x, w, nullptr, 1, 0);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
  }
}

TEST_CASE("conv2d backward: gradients match the reference forward by finite differences") {
  Rng rng(11);
  Tensor4 x(1, 2, 4, 4), w(3, 3, 2, 2);
  rand_fill(x, rng);
  rand_fill(w, rng);
  Tensor4 gy(1, 2, 4, 4);
  rand_fill(gy, rng);
  Conv2dGrads g = conv2d_bwd(gy, x, w, false, 1, 1);
  // Directional check: loss = <gy, conv(x, w)>; bump one x and one w entry.
  auto loss = [&]() {
    Tensor4 y = testutil::naive_conv2d(x, w, nullptr, 1, 1);
    double acc = 0.0;
    for (size_t i = 0; i < y.v.size(); ++i) acc += gy.v[i] * y.v[i];
    return acc;
  };
  const double eps = 1e-6;
  for (size_t i : {size_t(0), x.v.size() / 2, x.v.size() - 1}) {
    const double keep = x.v[i];
    x.v[i] = keep + eps;
    const double up = loss();
    x.v[i] = keep - eps;
    const double dn = loss();
    x.v[i] = keep;
    CHECK(g.gx.v[i] == doctest::Approx((up - dn) / (2 * eps)).epsilon(1e-5));
  }
  for (size_t i : {size_t(0), w.v.size() / 2, w.v.size() - 1}) {
    const double keep = w.v[i];
    w.v[i] = keep + eps;
    const double up = loss();
    w.v[i] = keep - eps;
    const double dn = loss();
    w.v[i] = keep;
    CHECK(g.gw.v[i] == doctest::Approx((up - dn) / (2 * eps)).epsilon(1e-5));
  }
}

TEST_CASE("global average pooling: mean forward, uniform spread backward") {
  Tensor4 x(1, 1, 2, 2);
  x.at(0, 0, 0, 0) = 1.0;
  x.at(0, 0, 0, 1) = 2.0;
  x.at(0, 0, 1, 0) = 3.0;
  x.at(0, 0, 1, 1) = 4.0;
  Tensor2 y = global_avg_pool(x);
  REQUIRE(y.rows == 1);
  REQUIRE(y.cols == 1);
  CHECK(y.at(0, 0) == doctest::Approx(2.5).epsilon(1e-15));

  Tensor2 gy(1, 1);
  gy.at(0, 0) = 1.0;
  Tensor4 gx = global_avg_pool_bwd(gy, 2, 2);
  for (double v : gx.v) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("linear: hand example and reference agreement") {
  Tensor2 x(1, 2);
  x.at(0, 0) = 1.0;
  x.at(0, 1) = 2.0;
  Tensor2 w(2, 2);
  w.at(0, 0) = 1.0;
  w.at(1, 1) = 1.0;
  std::vector<double> b{0.5, -0.5};
  Tensor2 y = linear_fwd(x, w, &b);
  CHECK(y.at(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(y.at(0, 1) == doctest::Approx(1.5).epsilon(1e-15));

  Rng rng(3);
  Tensor2 xr(4, 5), wr(5, 3);
  rand_fill(xr, rng);
  rand_fill(wr, rng);
  Tensor2 got = linear_fwd(xr, wr, nullptr);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 5; ++i) acc += xr.at(r, i) * wr.at(i, c);
      CHECK(got.at(r, c) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("batch norm 4d: training pass normalizes and updates running statistics") {
  Rng rng(5);
  Tensor4 x(4, 3, 5, 5);
  rand_fill(x, rng);
  std::vector<double> gamma(3, 1.0), beta(3, 0.0);
  std::vector<double> run_mean(3, 0.0), run_var(3, 1.0);
  BnCache cache;
  Tensor4 y = bn4d_fwd(x, gamma, beta, run_mean, run_var, true, 0.1, 1e-5, &cache);

  const double m = 4.0 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, mom2 = 0.0, batch_mean = 0.0, batch_var = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          mean += y.at(n, c, i, j);
          mom2 += y.at(n, c, i, j) * y.at(n, c, i, j);
          batch_mean += x.at(n, c, i, j);
        }
    mean /= m;
    mom2 /= m;
    batch_mean /= m;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          const double d = x.at(n, c, i, j) - batch_mean;
          batch_var += d * d;
        }
    batch_var /= m;  // biased
    CHECK(std::abs(mean) < 1e-12);
    CHECK(mom2 == doctest::Approx(batch_var / (batch_var + 1e-5)).epsilon(1e-9));
    // running = 0.9 * old + 0.1 * batch statistic
    CHECK(run_mean[c] == doctest::Approx(0.1 * batch_mean).epsilon(1e-12));
    CHECK(run_var[c] == doctest::Approx(0.9 + 0.1 * batch_var).epsilon(1e-12));
  }
}

TEST_CASE("batch norm 4d: evaluation normalizes with the running statistics") {
  Rng rng(6);
  Tensor4 x(2, 2, 3, 3);
  rand_fill(x, rng);
  std::vector<double> gamma{1.5, 0.5}, beta{0.25, -1.0};
  std::vector<double> run_mean{0.2, -0.3}, run_var{1.7, 0.9};
  Tensor4 y = bn4d_fwd(x, gamma, beta, run_mean, run_var, false, 0.1, 1e-5, nullptr);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const double want = gamma[c] * (x.at(n, c, i, j) - run_mean[c]) /
                                  std::sqrt(run_var[c] + 1e-5) +
                              beta[c];
          CHECK(y.at(n, c, i, j) == doctest::Approx(want).epsilon(1e-12));
        }
  // Evaluation must not move the running statistics.
  CHECK(run_mean[0] == 0.2);
  CHECK(run_var[1] == 0.9);
}

TEST_CASE("batch norm: training mode rejects a single element per feature") {
  Tensor4 x(1, 3, 1, 1);
  std::vector<double> gamma(3, 1.0), beta(3, 0.0), rm(3, 0.0), rv(3, 1.0);
  CHECK_THROWS_AS(bn4d_fwd(x, gamma, beta, rm, rv, true, 0.1, 1e-5, nullptr), Error);
}

TEST_CASE("batch norm 2d: per-column statistics over rows") {
  Rng rng(8);
  Tensor2 x(6, 3);
  rand_fill(x, rng);
  std::vector<double> gamma(3, 1.0), beta(3, 0.0), rm(3, 0.0), rv(3, 1.0);
  BnCache cache;
  Tensor2 y = bn2d_fwd(x, gamma, beta, rm, rv, true, 0.1, 1e-5, &cache);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int r = 0; r < 6; ++r) mean += y.at(r, c);
    CHECK(std::abs(mean / 6.0) < 1e-12);
  }
}

TEST_CASE("relu: clamps negatives and gates the gradient") {
  Tensor2 x(1, 3);
  x.at(0, 0) = -1.0;
  x.at(0, 1) = 0.5;
  x.at(0, 2) = 2.0;
  Tensor2 y = relu(x);
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(0, 1) == 0.5);
  CHECK(y.at(0, 2) == 2.0);
  Tensor2 gy(1, 3);
  gy.v = {3.0, 3.0, 3.0};
  Tensor2 gx = relu_bwd(gy, x);
  CHECK(gx.at(0, 0) == 0.0);
  CHECK(gx.at(0, 1) == 3.0);
  CHECK(gx.at(0, 2) == 3.0);
}

TEST_CASE("sigmoid: midpoint value and output-form derivative") {
  Tensor2 x(1, 2);
  x.at(0, 0) = 0.0;
  x.at(0, 1) = 2.0;
  Tensor2 y = sigmoid(x);
  CHECK(y.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.at(0, 1) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
  Tensor2 gy(1, 2);
  gy.v = {1.0, 1.0};
  Tensor2 gx = sigmoid_bwd(gy, y);
  CHECK(gx.at(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(gx.at(0, 1) ==
        doctest::Approx(y.at(0, 1) * (1.0 - y.at(0, 1))).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy: uniform logits cost ln(K)") {
  Tensor2 logits(2, 5);
  for (double& v : logits.v) v = 0.7;
  std::vector<uint32_t> labels{0, 3};
  CeResult r = softmax_ce_fwd(logits, labels);
  CHECK(r.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  for (int n = 0; n < 2; ++n) {
    double row = 0.0;
    for (int c = 0; c < 5; ++c) row += r.probs.at(n, c);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax cross entropy: two-class hand value and gradient") {
  Tensor2 logits(1, 2);
  logits.at(0, 0) = 1.0;
  logits.at(0, 1) = 0.0;
  std::vector<uint32_t> labels{0};
  CeResult r = softmax_ce_fwd(logits, labels);
  // -log(e^1 / (e^1 + e^0)) = log(1 + e^-1)
  CHECK(r.loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  Tensor2 g = softmax_ce_bwd(r.probs, labels);
  const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(g.at(0, 0) == doctest::Approx(p0 - 1.0).epsilon(1e-12));
  CHECK(g.at(0, 1) == doctest::Approx(1.0 - p0).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy: labels outside the class range are rejected") {
  Tensor2 logits(1, 3);
  std::vector<uint32_t> labels{3};
  CHECK_THROWS_AS(softmax_ce_fwd(logits, labels), Error);
}

}  // TEST_SUITE
