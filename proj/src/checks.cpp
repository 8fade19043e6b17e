#include <chrono>
#include <cmath>
#include <functional>

#include "msgc/gemm.hpp"
#include "msgc/gradcheck.hpp"
#include "msgc/train.hpp"

namespace msgc {

// Finite-difference verification of every backward pass.  All stochastic
// inputs (gate noise, data, projections) are frozen per seed, and the gated
// cases run in smooth-gate mode, where the implemented backward pass is the
// exact gradient of the evaluated loss, so central differences must agree to
// first order.

namespace {

Tensor4 rand4(Rng& rng, int a, int b, int c, int d, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(a, b, c, d);
  for (double& e : t.v) e = rng.uniform(lo, hi);
  return t;
}

Tensor2 rand2(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Tensor2 t(r, c);
  for (double& e : t.v) e = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero (for kinked activations).
Tensor4 rand4_offzero(Rng& rng, int a, int b, int c, int d) {
  Tensor4 t(a, b, c, d);
  for (double& e : t.v) {
    double m = rng.uniform(0.2, 1.5);
    e = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

std::vector<double> rand_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& e : v) e = rng.uniform(lo, hi);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct SeedResult {
  double err = 0.0;
  std::string slice;
};

struct CaseRunner {
  GradCheckSummary& summary;
  double tol;

  void run(const std::string& name, uint64_t seed_base, int seeds,
           const std::function<SeedResult(uint64_t)>& one_seed) {
    GradCheckCase c;
    c.name = name;
    for (int s = 0; s < seeds; ++s) {
      SeedResult r = one_seed(seed_base + 101 * s);
      if (r.err >= c.max_rel_err || !std::isfinite(r.err)) {
        c.max_rel_err = r.err;
        c.worst_param = r.slice;
      }
    }
    c.pass = std::isfinite(c.max_rel_err) && c.max_rel_err < tol;
    summary.worst = std::max(summary.worst, c.max_rel_err);
    summary.pass = summary.pass && c.pass;
    summary.cases.push_back(std::move(c));
  }
};

// Random projections keep every loss scalar while exercising all outputs.
SeedResult check_slices(const std::function<double()>& loss, std::vector<NamedSlice> slices) {
  NamedFdReport rep = finite_diff_check_all(loss, slices);
  if (!rep.report.finite)
    return {std::numeric_limits<double>::infinity(), rep.worst_slice};
  return {rep.report.max_rel_err, rep.worst_slice};
}

// ---- individual cases -----------------------------------------------------

SeedResult case_conv(uint64_t seed, int stride, int pad, int k) {
  Rng rng(seed);
  Tensor4 x = rand4(rng, 2, 3, 7, 6);
  Tensor4 w = rand4(rng, k, k, 3, 4, -0.6, 0.6);
  std::vector<double> bias = rand_vec(rng, 4);
  const int hout = conv_out_dim(7, k, stride, pad);
  const int wout = conv_out_dim(6, k, stride, pad);
  std::vector<double> proj = rand_vec(rng, static_cast<size_t>(2) * 4 * hout * wout);

  auto loss = [&] {
    Tensor4 y = conv2d_fwd(x, w, &bias, stride, pad);
    return dot(y.v, proj);
  };
  Tensor4 gy(2, 4, hout, wout);
  gy.v = proj;
  Conv2dGrads g = conv2d_bwd(gy, x, w, true, stride, pad);
  return check_slices(loss, {{"x", x.v.data(), g.gx.v.data(), x.v.size()},
                             {"w", w.v.data(), g.gw.v.data(), w.v.size()},
                             {"bias", bias.data(), g.gbias.data(), bias.size()}});
}

SeedResult case_linear(uint64_t seed) {
  Rng rng(seed);
  Tensor2 x = rand2(rng, 3, 5);
  Tensor2 w = rand2(rng, 5, 4);
  std::vector<double> b = rand_vec(rng, 4);
  std::vector<double> proj = rand_vec(rng, 12);
  auto loss = [&] {
    Tensor2 y = linear_fwd(x, w, &b);
    return dot(y.v, proj);
  };
  Tensor2 gy(3, 4);
  gy.v = proj;
  LinearGrads g = linear_bwd(gy, x, w, true);
  return check_slices(loss, {{"x", x.v.data(), g.gx.v.data(), x.v.size()},
                             {"w", w.v.data(), g.gw.v.data(), w.v.size()},
                             {"b", b.data(), g.gbias.data(), b.size()}});
}

SeedResult case_gap(uint64_t seed) {
  Rng rng(seed);
  Tensor4 x = rand4(rng, 2, 3, 4, 5);
  std::vector<double> proj = rand_vec(rng, 6);
  auto loss = [&] {
    Tensor2 y = global_avg_pool(x);
    return dot(y.v, proj);
  };
  Tensor2 gy(2, 3);
  gy.v = proj;
  Tensor4 gx = global_avg_pool_bwd(gy, 4, 5);
  return check_slices(loss, {{"x", x.v.data(), gx.v.data(), x.v.size()}});
}

SeedResult case_bn4d(uint64_t seed, bool train) {
  Rng rng(seed);
  Tensor4 x = rand4(rng, 3, 4, 3, 3);
  std::vector<double> gamma = rand_vec(rng, 4, 0.5, 1.5);
  std::vector<double> beta = rand_vec(rng, 4, -0.5, 0.5);
  std::vector<double> proj = rand_vec(rng, x.v.size());
  auto loss = [&] {
    std::vector<double> rm = rand_vec(rng, 0);  // placeholders below
    std::vector<double> rmean(4, 0.1), rvar(4, 0.9);
    Tensor4 y = bn4d_fwd(x, gamma, beta, rmean, rvar, train, 0.1, 1e-5, nullptr);
    return dot(y.v, proj);
  };
  std::vector<double> rmean(4, 0.1), rvar(4, 0.9);
  BnCache cache;
  bn4d_fwd(x, gamma, beta, rmean, rvar, train, 0.1, 1e-5, &cache);
  Tensor4 gy(3, 4, 3, 3);
  gy.v = proj;
  Bn4dGrads g = bn4d_bwd(gy, gamma, cache, x.d);
  return check_slices(loss, {{"x", x.v.data(), g.gx.v.data(), x.v.size()},
                             {"gamma", gamma.data(), g.ggamma.data(), gamma.size()},
                             {"beta", beta.data(), g.gbeta.data(), beta.size()}});
}

SeedResult case_bn2d(uint64_t seed) {
  Rng rng(seed);
  Tensor2 x = rand2(rng, 5, 3);
  std::vector<double> gamma = rand_vec(rng, 3, 0.5, 1.5);
  std::vector<double> beta = rand_vec(rng, 3, -0.5, 0.5);
  std::vector<double> proj = rand_vec(rng, x.v.size());
  auto loss = [&] {
    std::vector<double> rmean(3, 0.0), rvar(3, 1.0);
    Tensor2 y = bn2d_fwd(x, gamma, beta, rmean, rvar, true, 0.1, 1e-5, nullptr);
    return dot(y.v, proj);
  };
  std::vector<double> rmean(3, 0.0), rvar(3, 1.0);
  BnCache cache;
  bn2d_fwd(x, gamma, beta, rmean, rvar, true, 0.1, 1e-5, &cache);
  Tensor2 gy(5, 3);
  gy.v = proj;
  Bn2dGrads g = bn2d_bwd(gy, gamma, cache, 5, 3);
  return check_slices(loss, {{"x", x.v.data(), g.gx.v.data(), x.v.size()},
                             {"gamma", gamma.data(), g.ggamma.data(), gamma.size()},
                             {"beta", beta.data(), g.gbeta.data(), beta.size()}});
}

SeedResult case_relu(uint64_t seed) {
  Rng rng(seed);
  Tensor4 x = rand4_offzero(rng, 2, 3, 3, 3);
  std::vector<double> proj = rand_vec(rng, x.v.size());
  auto loss = [&] {
    Tensor4 y = relu(x);
    return dot(y.v, proj);
  };
  Tensor4 gy(2, 3, 3, 3);
  gy.v = proj;
  Tensor4 gx = relu_bwd(gy, x);
  return check_slices(loss, {{"x", x.v.data(), gx.v.data(), x.v.size()}});
}

SeedResult case_sigmoid(uint64_t seed) {
  Rng rng(seed);
  Tensor2 x = rand2(rng, 4, 5, -3.0, 3.0);
  std::vector<double> proj = rand_vec(rng, x.v.size());
  auto loss = [&] {
    Tensor2 y = sigmoid(x);
    return dot(y.v, proj);
  };
  Tensor2 gy(4, 5);
  gy.v = proj;
  Tensor2 y = sigmoid(x);
  Tensor2 gx = sigmoid_bwd(gy, y);
  return check_slices(loss, {{"x", x.v.data(), gx.v.data(), x.v.size()}});
}

SeedResult case_softmax_ce(uint64_t seed) {
  Rng rng(seed);
  Tensor2 logits = rand2(rng, 4, 6, -2.0, 2.0);
  std::vector<uint32_t> labels(4);
  for (auto& l : labels) l = static_cast<uint32_t>(rng.integer(6));
  auto loss = [&] { return softmax_ce_fwd(logits, labels).loss; };
  CeResult ce = softmax_ce_fwd(logits, labels);
  Tensor2 g = softmax_ce_bwd(ce.probs, labels);
  return check_slices(loss, {{"logits", logits.v.data(), g.v.data(), logits.v.size()}});
}

SeedResult case_mask_mlp(uint64_t seed) {
  Rng rng(seed);
  MaskMlp mlp;
  mlp.init(6, 3, 2, 6, 0.5, rng);
  Tensor2 pooled = rand2(rng, 4, 6);
  std::vector<double> proj = rand_vec(rng, 4ull * 2 * 6);
  auto loss = [&] {
    Tensor2 s = mlp.forward(pooled, true, nullptr);
    return dot(s.v, proj);
  };
  MaskMlpCache cache;
  mlp.forward(pooled, true, &cache);
  Tensor2 gs(4, 12);
  gs.v = proj;
  mlp.zero_grad();
  Tensor2 gin = mlp.backward(gs, cache);
  return check_slices(loss,
                      {{"pooled", pooled.v.data(), gin.v.data(), pooled.v.size()},
                       {"w1", mlp.w1.v.data(), mlp.g_w1.v.data(), mlp.w1.v.size()},
                       {"bn.gamma", mlp.bn.gamma.data(), mlp.bn.g_gamma.data(), mlp.bn.gamma.size()},
                       {"bn.beta", mlp.bn.beta.data(), mlp.bn.g_beta.data(), mlp.bn.beta.size()},
                       {"w2", mlp.w2.v.data(), mlp.g_w2.v.data(), mlp.w2.v.size()},
                       {"b2", mlp.b2.data(), mlp.g_b2.data(), mlp.b2.size()}});
}

SeedResult case_soft_gate(uint64_t seed) {
  Rng rng(seed);
  Tensor2 s = rand2(rng, 3, 8, -2.0, 2.0);
  Tensor2 noise(3, 8);
  for (double& e : noise.v) e = logistic_noise(rng);
  std::vector<double> proj = rand_vec(rng, s.v.size());
  const double tau = 2.0 / 3.0;
  auto loss = [&] {
    TrainGate g = binarize_train(s, noise, tau);
    return dot(g.soft.v, proj);
  };
  TrainGate g = binarize_train(s, noise, tau);
  Tensor2 gp(3, 8);
  gp.v = proj;
  Tensor2 gs = binarize_train_bwd(gp, g.soft, tau);
  return check_slices(loss, {{"s", s.v.data(), gs.v.data(), s.v.size()}});
}

SeedResult case_gated_conv(uint64_t seed) {
  Rng rng(seed);
  Tensor4 x = rand4(rng, 2, 4, 6, 6);
  Tensor4 dense = rand4(rng, 3, 3, 4, 6, -0.5, 0.5);
  GroupFilterBank bank = plug_in(dense, 2, 1, 1);
  Tensor2 scale = rand2(rng, 2, 8, 0.1, 1.0);
  std::vector<double> proj = rand_vec(rng, 2ull * 6 * 6 * 6);
  auto loss = [&] {
    Tensor4 y = gated_group_conv_fwd(x, bank, &scale);
    return dot(y.v, proj);
  };
  Tensor4 gy(2, 6, 6, 6);
  gy.v = proj;
  bank.zero_grad();
  GatedConvGrads g = gated_group_conv_bwd(gy, x, bank, &scale);
  std::vector<NamedSlice> slices = {
      {"x", x.v.data(), g.gx.v.data(), x.v.size()},
      {"scale", scale.v.data(), g.gscale.v.data(), scale.v.size()}};
  for (int gi = 0; gi < bank.group_count(); ++gi)
    slices.push_back({"w.g" + std::to_string(gi), bank.w[gi].v.data(),
                      bank.gw[gi].v.data(), bank.w[gi].v.size()});
  return check_slices(loss, slices);
}

SeedResult case_soft_macs(uint64_t seed) {
  Rng rng(seed);
  MsgcBlockConfig cfg;
  cfg.channels = {4, 6, 8};
  cfg.groups = {2, 2};
  cfg.kernels = {3, 3};
  cfg.strides = {1, 1};
  cfg.pads = {1, 1};
  cfg.attention = {false, false};
  cfg.shortcut_projection = true;
  cfg.validate();
  BlockGeometry geom = block_geometry(cfg, 6, 6);
  Tensor2 g1 = rand2(rng, 1, 2 * 4, 0.05, 0.95);
  Tensor2 g2 = rand2(rng, 1, 2 * 6, 0.05, 0.95);
  auto loss = [&] {
    std::vector<const double*> rows = {g1.row(0), g2.row(0)};
    return gated_macs_value(cfg, geom, rows, true, nullptr);
  };
  Tensor2 gg1(1, 8), gg2(1, 12);
  {
    std::vector<const double*> rows = {g1.row(0), g2.row(0)};
    std::vector<double*> grows = {gg1.row(0), gg2.row(0)};
    gated_macs_grad(cfg, geom, rows, 1.0, grows);
  }
  return check_slices(loss, {{"gates1", g1.v.data(), gg1.v.data(), g1.v.size()},
                             {"gates2", g2.v.data(), gg2.v.data(), g2.v.size()}});
}

// End-to-end losses in smooth-gate mode: classification + an active budget
// hinge, differentiated through every parameter of a miniature model.
SeedResult case_block_e2e(uint64_t seed, bool projection) {
  Rng rng(seed);
  MsgcBlockConfig cfg;
  if (projection) {
    cfg.channels = {4, 6, 8};
    cfg.strides = {2, 1};
    cfg.attention = {true, false};
    cfg.shortcut_projection = true;
  } else {
    cfg.channels = {4, 6, 4};
    cfg.strides = {1, 1};
    cfg.attention = {false, true};
    cfg.shortcut_projection = false;
  }
  cfg.groups = {2, 2};
  cfg.kernels = {3, 3};
  cfg.pads = {1, 1};
  cfg.gate_bias_init = 0.3;
  cfg.attn_bias_init = 0.4;
  MsgcBlock block;
  block.init(cfg, 0, rng);

  Tensor4 x = rand4(rng, 2, 4, 6, 6);
  std::vector<uint64_t> seeds = {splitmix64(seed + 1), splitmix64(seed + 2)};
  BlockGeometry geom = block_geometry(cfg, 6, 6);
  const double full = static_cast<double>(block_full_macs(cfg, geom));
  const int out_hw = geom.hout.back() * geom.wout.back();
  std::vector<double> proj = rand_vec(rng, 2ull * cfg.channels.back() * out_hw);
  const double beta = 0.7 / full;  // budget-like pressure per sample

  auto loss = [&] {
    std::vector<SampleMacs> macs(2);
    Tensor4 y = block.forward(x, true, GateMode::train_soft, &seeds, nullptr, &macs);
    return dot(y.v, proj) + beta * (macs[0].dynamic + macs[1].dynamic);
  };

  std::vector<SampleMacs> macs(2);
  MsgcBlockCache cache;
  Tensor4 y = block.forward(x, true, GateMode::train_soft, &seeds, &cache, &macs);
  Tensor4 gy(2, cfg.channels.back(), geom.hout.back(), geom.wout.back());
  gy.v = proj;
  block.zero_grad();
  std::vector<double> coeff(2, beta);
  Tensor4 gx = block.backward(gy, cache, &coeff);

  std::vector<ParamRef> params;
  block.collect("block", params);
  std::vector<NamedSlice> slices = {{"x", x.v.data(), gx.v.data(), x.v.size()}};
  for (const ParamRef& p : params)
    slices.push_back({p.name, p.value, p.grad, p.size});
  return check_slices(loss, slices);
}

SeedResult case_net_e2e(uint64_t seed) {
  Rng rng(seed);
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.in_h = 6;
  cfg.in_w = 6;
  cfg.stem_channels = 4;
  cfg.blocks = {{4, 1}, {6, 2}};
  cfg.num_classes = 3;
  cfg.groups = {1, 2};
  cfg.attention_layers = {2};
  cfg.reduction = 2;
  cfg.gate_bias_init = 0.3;
  cfg.attn_bias_init = 0.4;
  MsgcNet net;
  net.init(cfg, rng);

  Tensor4 x = rand4(rng, 2, 2, 6, 6);
  std::vector<uint32_t> labels = {static_cast<uint32_t>(rng.integer(3)),
                                  static_cast<uint32_t>(rng.integer(3))};
  std::vector<uint64_t> seeds = {splitmix64(seed + 11), splitmix64(seed + 12)};
  const NetMacReport report = net_mac_report(cfg);
  const double full = static_cast<double>(report.model_full());
  const double lambda = 5.0, target = 0.05;  // hinge surely active, far from the kink

  auto loss = [&] {
    std::vector<SampleMacs> macs;
    Tensor2 logits = net.forward(x, true, GateMode::train_soft, &seeds, nullptr, &macs);
    double mean_macs = 0.0;
    for (const SampleMacs& sm : macs) mean_macs += report.sample_total(sm);
    mean_macs /= macs.size();
    return softmax_ce_fwd(logits, labels).loss + budget_loss(mean_macs, full, lambda, target);
  };

  MsgcNet::Cache cache;
  std::vector<SampleMacs> macs;
  Tensor2 logits = net.forward(x, true, GateMode::train_soft, &seeds, &cache, &macs);
  double mean_macs = 0.0;
  for (const SampleMacs& sm : macs) mean_macs += report.sample_total(sm);
  mean_macs /= macs.size();
  CeResult ce = softmax_ce_fwd(logits, labels);
  const double dmean = budget_loss_bwd(mean_macs, full, lambda, target);
  std::vector<double> coeff(macs.size(), dmean / macs.size());
  Tensor2 glogits = softmax_ce_bwd(ce.probs, labels);
  net.zero_grad();
  net.backward(glogits, cache, &coeff);

  std::vector<NamedSlice> slices;
  for (const ParamRef& p : net.params())
    slices.push_back({p.name, p.value, p.grad, p.size});
  return check_slices(loss, slices);
}

SeedResult case_plain_net_e2e(uint64_t seed) {
  Rng rng(seed);
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.in_h = 6;
  cfg.in_w = 6;
  cfg.stem_channels = 4;
  cfg.blocks = {{4, 1}, {6, 2}};
  cfg.num_classes = 3;
  PlainNet net;
  net.init(cfg, rng);
  Tensor4 x = rand4(rng, 2, 2, 6, 6);
  std::vector<uint32_t> labels = {static_cast<uint32_t>(rng.integer(3)),
                                  static_cast<uint32_t>(rng.integer(3))};
  auto loss = [&] {
    PlainNet::Cache cache;
    Tensor2 logits = net.forward(x, true, &cache);
    return softmax_ce_fwd(logits, labels).loss;
  };
  PlainNet::Cache cache;
  Tensor2 logits = net.forward(x, true, &cache);
  CeResult ce = softmax_ce_fwd(logits, labels);
  net.zero_grad();
  net.backward(softmax_ce_bwd(ce.probs, labels), cache);
  std::vector<NamedSlice> slices;
  for (const ParamRef& p : net.params())
    slices.push_back({p.name, p.value, p.grad, p.size});
  return check_slices(loss, slices);
}

}  // namespace

GradCheckSummary run_grad_checks(uint64_t seed_base, int seeds_per_case, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckSummary summary;
  CaseRunner run{summary, tol};

  run.run("conv 3x3 s1", seed_base + 1, seeds_per_case,
          [](uint64_t s) { return case_conv(s, 1, 1, 3); });
  run.run("conv 3x3 s2", seed_base + 2, seeds_per_case,
          [](uint64_t s) { return case_conv(s, 2, 1, 3); });
  run.run("conv 1x1", seed_base + 3, seeds_per_case,
          [](uint64_t s) { return case_conv(s, 1, 0, 1); });
  run.run("linear", seed_base + 4, seeds_per_case, case_linear);
  run.run("global average pool", seed_base + 5, seeds_per_case, case_gap);
  run.run("batch norm 4d train", seed_base + 6, seeds_per_case,
          [](uint64_t s) { return case_bn4d(s, true); });
  run.run("batch norm 4d eval", seed_base + 7, seeds_per_case,
          [](uint64_t s) { return case_bn4d(s, false); });
  run.run("batch norm 2d train", seed_base + 8, seeds_per_case, case_bn2d);
  run.run("relu", seed_base + 9, seeds_per_case, case_relu);
  run.run("sigmoid", seed_base + 10, seeds_per_case, case_sigmoid);
  run.run("softmax cross entropy", seed_base + 11, seeds_per_case, case_softmax_ce);
  run.run("mask generator mlp", seed_base + 12, seeds_per_case, case_mask_mlp);
  run.run("smooth gate", seed_base + 13, seeds_per_case, case_soft_gate);
  run.run("gated group conv", seed_base + 14, seeds_per_case, case_gated_conv);
  run.run("multiply-count surrogate", seed_base + 15, seeds_per_case, case_soft_macs);
  run.run("block end-to-end (projection)", seed_base + 16, seeds_per_case,
          [](uint64_t s) { return case_block_e2e(s, true); });
  run.run("block end-to-end (identity)", seed_base + 17, seeds_per_case,
          [](uint64_t s) { return case_block_e2e(s, false); });
  run.run("gated net end-to-end", seed_base + 18, seeds_per_case, case_net_e2e);
  run.run("plain net end-to-end", seed_base + 19, seeds_per_case, case_plain_net_e2e);

  summary.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

}  // namespace msgc
