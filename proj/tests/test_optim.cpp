#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "msgc/optim.hpp"

using namespace msgc;

TEST_SUITE("optim") {

TEST_CASE("budget hinge: active above the target, silent at and below it") {
  // loss = max(lambda * (achieved/full - target), 0)
  CHECK(budget_loss(80.0, 100.0, 30.0, 0.5) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(budget_loss(50.0, 100.0, 30.0, 0.5) == 0.0);  // exactly at the target
  CHECK(budget_loss(20.0, 100.0, 30.0, 0.5) == 0.0);

  CHECK(budget_loss_bwd(80.0, 100.0, 30.0, 0.5) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(budget_loss_bwd(50.0, 100.0, 30.0, 0.5) == 0.0);
  CHECK(budget_loss_bwd(20.0, 100.0, 30.0, 0.5) == 0.0);
}

TEST_CASE("budget schedule: linear descent over the warm phase, flat afterwards") {
  BudgetSchedule sched;
  sched.lambda = 30.0;
  sched.target_start = 1.0;
  sched.target_end = 0.5;
  sched.warm_fraction = 0.5;
  sched.total_epochs = 20;
  sched.validate();
  CHECK(sched.target_at(0.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sched.target_at(5.0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(sched.target_at(10.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sched.target_at(15.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sched.target_at(20.0) == doctest::Approx(0.5).epsilon(1e-12));

  BudgetSchedule bad = sched;
  bad.target_end = 1.5;  // above the start
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = sched;
  bad.warm_fraction = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("cosine learning rate: endpoints and midpoint") {
  CHECK(lr_at(0.0, 10, 0.2) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(lr_at(5.0, 10, 0.2) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at(10.0, 10, 0.2) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("sgd: zero gradient and no decay leave parameters alone") {
  std::vector<double> theta{1.0, -2.0}, grad{0.0, 0.0};
  std::vector<ParamRef> params{{"p", theta.data(), grad.data(), 2, {2},
                                ParamGroup::backbone}};
  SgdConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.lr_backbone = 0.1;
  Sgd opt(cfg, params);
  opt.step(params, 1.0);
  CHECK(theta == std::vector<double>{1.0, -2.0});
}

TEST_CASE("sgd: a single step applies lr * (grad + decay * theta)") {
  std::vector<double> theta{1.0}, grad{0.5};
  std::vector<ParamRef> params{{"p", theta.data(), grad.data(), 1, {1},
                                ParamGroup::backbone}};
  SgdConfig cfg;
  cfg.momentum = 0.9;
  cfg.lr_backbone = 0.1;
  cfg.weight_decay = 0.01;
  Sgd opt(cfg, params);
  opt.step(params, 1.0);
  // v = 0.5 + 0.01 * 1.0 = 0.51; theta = 1.0 - 0.1 * 0.51
  CHECK(theta[0] == doctest::Approx(1.0 - 0.1 * 0.51).epsilon(1e-14));
}

TEST_CASE("sgd: two steps reproduce the hand-unrolled momentum recurrence") {
  std::vector<double> theta{2.0}, grad{1.0};
  std::vector<ParamRef> params{{"p", theta.data(), grad.data(), 1, {1},
                                ParamGroup::backbone}};
  SgdConfig cfg;
  cfg.momentum = 0.9;
  cfg.lr_backbone = 0.05;
  cfg.weight_decay = 0.1;
  Sgd opt(cfg, params);

  double t = 2.0, v = 0.0;
  for (int i = 0; i < 2; ++i) {
    v = 0.9 * v + 1.0 + 0.1 * t;
    t = t - 0.05 * v;
  }
  opt.step(params, 1.0);
  opt.step(params, 1.0);
  CHECK(theta[0] == doctest::Approx(t).epsilon(1e-14));
}

TEST_CASE("sgd: mask-generator parameters use their own rate and no decay") {
  std::vector<double> tb{1.0}, gb{1.0}, tm{1.0}, gm{1.0};
  std::vector<ParamRef> params{
      {"backbone.w", tb.data(), gb.data(), 1, {1}, ParamGroup::backbone},
      {"gate.w", tm.data(), gm.data(), 1, {1}, ParamGroup::mask_mlp},
  };
  SgdConfig cfg;
  cfg.momentum = 0.0;
  cfg.lr_backbone = 0.1;
  cfg.lr_mlp = 0.4;
  cfg.weight_decay = 0.5;
  Sgd opt(cfg, params);
  opt.step(params, 1.0);
  CHECK(tb[0] == doctest::Approx(1.0 - 0.1 * (1.0 + 0.5)).epsilon(1e-14));
  CHECK(tm[0] == doctest::Approx(1.0 - 0.4 * 1.0).epsilon(1e-14));  // no decay
}

TEST_CASE("sgd: the schedule factor scales both group rates") {
  std::vector<double> tb{1.0}, gb{1.0};
  std::vector<ParamRef> params{
      {"p", tb.data(), gb.data(), 1, {1}, ParamGroup::backbone}};
  SgdConfig cfg;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.lr_backbone = 0.2;
  Sgd opt(cfg, params);
  opt.step(params, 0.25);
  CHECK(tb[0] == doctest::Approx(1.0 - 0.25 * 0.2 * 1.0).epsilon(1e-14));
}

TEST_CASE("sgd: a non-finite gradient aborts with a numeric error naming the tensor") {
  std::vector<double> theta{1.0}, grad{std::numeric_limits<double>::quiet_NaN()};
  std::vector<ParamRef> params{{"stem.w", theta.data(), grad.data(), 1, {1},
                                ParamGroup::backbone}};
  Sgd opt(SgdConfig{}, params);
  try {
    opt.step(params, 1.0);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::numeric);
    CHECK(std::string(e.what()).find("stem.w") != std::string::npos);
  }
}

TEST_CASE("zero_grads clears every accumulator") {
  std::vector<double> t{1.0, 2.0}, g{3.0, -4.0};
  std::vector<ParamRef> params{{"p", t.data(), g.data(), 2, {2},
                                ParamGroup::backbone}};
  zero_grads(params);
  CHECK(g == std::vector<double>{0.0, 0.0});
}

}  // TEST_SUITE
