#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "msgc/msgc_block.hpp"
#include "msgc/rng.hpp"
#include "test_util.hpp"

using namespace msgc;
using testutil::max_abs_diff;
using testutil::rand_fill;

namespace {

MsgcBlockConfig two_layer_cfg() {
  MsgcBlockConfig cfg;
  cfg.channels = {4, 4, 4};
  cfg.groups = {2, 2};
  cfg.kernels = {3, 3};
  cfg.strides = {1, 1};
  cfg.pads = {1, 1};
  cfg.attention = {false, false};
  cfg.shortcut_projection = false;
  return cfg;
}

}  // namespace

TEST_SUITE("block") {

TEST_CASE("filter bank: splitting a dense weight and reassembling it round-trips") {
  Rng rng(2);
  Tensor4 full(3, 3, 6, 8);
  rand_fill(full, rng);
  GroupFilterBank bank = plug_in(full, 4, 2, 1);
  REQUIRE(bank.group_count() == 4);
  CHECK(bank.cout_per_group() == 2);
  CHECK(bank.cin() == 6);
  CHECK(bank.stride == 2);
  CHECK(bank.pad == 1);
  Tensor4 back = bank_concat(bank);
  REQUIRE(back.d == full.d);
  CHECK(max_abs_diff(back, full) == 0.0);
}

TEST_CASE("filter bank: the group count must divide the filter count") {
  Tensor4 full(3, 3, 4, 6);
  CHECK_THROWS_AS(plug_in(full, 4, 1, 1), Error);
}

TEST_CASE("gated conv: one group with no scale equals the dense convolution") {
  Rng rng(3);
  Tensor4 x(2, 3, 6, 6), full(3, 3, 3, 5);
  rand_fill(x, rng);
  rand_fill(full, rng);
  GroupFilterBank bank = plug_in(full, 1, 1, 1);
  Tensor4 got = gated_group_conv_fwd(x, bank, nullptr);
  Tensor4 want = conv2d_fwd(x, full, nullptr, 1, 1);
  REQUIRE(got.d == want.d);
  CHECK(max_abs_diff(got, want) < 1e-13);
}

TEST_CASE("gated conv: per-group scales match the direct reference") {
  Rng rng(4);
  struct Shape {
    int n, cin, h, w, k, cout, groups, stride, pad;
  };
  const Shape shapes[] = {
      {2, 4, 6, 6, 3, 8, 4, 1, 1},
      {1, 6, 5, 7, 3, 6, 2, 2, 1},
      {2, 3, 4, 4, 1, 9, 3, 1, 0},
  };
  for (const Shape& s : shapes) {
    CAPTURE(s.groups);
    Tensor4 x(s.n, s.cin, s.h, s.w), full(s.k, s.k, s.cin, s.cout);
    rand_fill(x, rng);
    rand_fill(full, rng);
    GroupFilterBank bank = plug_in(full, s.groups, s.stride, s.pad);
    Tensor2 scale(s.n, s.groups * s.cin);
    for (double& v : scale.v)
      v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.2, 1.0);
    Tensor4 got = gated_group_conv_fwd(x, bank, &scale);
    Tensor4 want = testutil::naive_gated_group_conv(x, bank, &scale);
    REQUIRE(got.d == want.d);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("gated conv: zeroing one group's input channel only silences that group") {
  Rng rng(5);
  Tensor4 x(1, 2, 4, 4), full(3, 3, 2, 4);
  rand_fill(x, rng);
  rand_fill(full, rng);
  GroupFilterBank bank = plug_in(full, 2, 1, 1);
  Tensor2 ones(1, 4);
  ones.v = {1.0, 1.0, 1.0, 1.0};
  Tensor2 cut = ones;
  cut.at(0, 0 * 2 + 1) = 0.0;  // group 0 stops reading channel 1
  Tensor4 base = gated_group_conv_fwd(x, bank, &ones);
  Tensor4 got = gated_group_conv_fwd(x, bank, &cut);
  // Group 1's outputs (channels 2, 3) are untouched.
  for (int o = 2; o < 4; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(got.at(0, o, i, j) == base.at(0, o, i, j));
  // Group 0's outputs now equal a convolution of the input with channel 1 zeroed.
  Tensor4 xz = x;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) xz.at(0, 1, i, j) = 0.0;
  Tensor4 ref = gated_group_conv_fwd(xz, bank, nullptr);
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(got.at(0, o, i, j) == doctest::Approx(ref.at(0, o, i, j)).epsilon(1e-12));
}

TEST_CASE("mask generator: hidden width rule and multiply count") {
  Rng rng(6);
  MaskMlp mlp;
  mlp.init(8, 2, 4, 8, 2.0, rng);
  CHECK(mlp.w1.rows == 8);
  CHECK(mlp.w1.cols == 2);
  CHECK(mlp.w2.rows == 2);
  CHECK(mlp.w2.cols == 32);
  CHECK(mlp.mac_count() == 8 * 2 + 2 * 32);
  for (double b : mlp.b2) CHECK(b == 2.0);

  Tensor2 pooled(3, 8);
  rand_fill(pooled, rng);
  Tensor2 s = mlp.forward(pooled, false, nullptr);
  CHECK(s.rows == 3);
  CHECK(s.cols == 32);
}

TEST_CASE("multiply ledger: frozen two-layer miniature with a fully unneeded group") {
  // Hand-walked expected counts.  Two 3x3 layers over 4x4 maps, 4 channels,
  // 2 groups each; layer 2's group 0 selects nothing, so with skip accounting
  // layer 1 only produces what layer 2's group 1 still reads.
  MsgcBlockConfig cfg = two_layer_cfg();
  BlockGeometry geom = block_geometry(cfg, 4, 4);
  REQUIRE(geom.hout == std::vector<int>{4, 4});

  const std::vector<double> m1{1, 0, 1, 0, 0, 0, 1, 1};  // layer 1: g0, g1
  const std::vector<double> m2{0, 0, 0, 0, 1, 1, 0, 1};  // layer 2: g0 empty
  std::vector<const double*> gates{m1.data(), m2.data()};

  std::vector<double> per_layer;
  const double with_skip = gated_macs_value(cfg, geom, gates, true, &per_layer);
  CHECK(with_skip == 1728.0);
  REQUIRE(per_layer.size() == 2);
  CHECK(per_layer[0] == 864.0);
  CHECK(per_layer[1] == 864.0);
  CHECK(gated_macs_value(cfg, geom, gates, false, nullptr) == 2016.0);

  // The independent instrumented counter agrees, layer by layer.
  std::vector<uint64_t> counted_layers;
  const uint64_t counted =
      testutil::counted_masked_macs(cfg, geom, gates, true, &counted_layers);
  CHECK(counted == 1728);
  CHECK(counted_layers == std::vector<uint64_t>{864, 864});
  CHECK(testutil::counted_masked_macs(cfg, geom, gates, false) == 2016);
}

TEST_CASE("multiply ledger: all-ones gates reproduce the dense count") {
  MsgcBlockConfig cfg = two_layer_cfg();
  BlockGeometry geom = block_geometry(cfg, 4, 4);
  const std::vector<double> ones(8, 1.0);
  std::vector<const double*> gates{ones.data(), ones.data()};
  const double full = static_cast<double>(block_full_macs(cfg, geom));
  CHECK(gated_macs_value(cfg, geom, gates, true, nullptr) == full);
  CHECK(gated_macs_value(cfg, geom, gates, false, nullptr) == full);
  CHECK(block_full_macs(cfg, geom) ==
        layer_full_macs(cfg, geom, 0) + layer_full_macs(cfg, geom, 1));
}

TEST_CASE("multiply ledger: surrogate gradient matches finite differences") {
  Rng rng(9);
  MsgcBlockConfig cfg = two_layer_cfg();
  BlockGeometry geom = block_geometry(cfg, 4, 4);
  std::vector<double> g1(8), g2(8);
  for (double& v : g1) v = rng.uniform(0.1, 0.9);
  for (double& v : g2) v = rng.uniform(0.1, 0.9);
  std::vector<const double*> gates{g1.data(), g2.data()};

  std::vector<double> a1(8, 0.0), a2(8, 0.0);
  gated_macs_grad(cfg, geom, gates, 1.0, {a1.data(), a2.data()});

  const double eps = 1e-6;
  auto value = [&]() { return gated_macs_value(cfg, geom, gates, true, nullptr); };
  for (std::vector<double>* layer : {&g1, &g2}) {
    std::vector<double>& analytic = layer == &g1 ? a1 : a2;
    for (size_t i = 0; i < layer->size(); ++i) {
      const double keep = (*layer)[i];
      (*layer)[i] = keep + eps;
      const double up = value();
      (*layer)[i] = keep - eps;
      const double dn = value();
      (*layer)[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      CHECK(analytic[i] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("block geometry: strides compose and odd sizes floor") {
  MsgcBlockConfig cfg = MsgcBlockConfig::basic(4, 8, 2, {1, 4}, {false, true},
                                               4, 2.0 / 3.0);
  CHECK(cfg.shortcut_projection);
  CHECK(cfg.total_stride() == 2);
  BlockGeometry geom = block_geometry(cfg, 9, 9);
  CHECK(geom.hout == std::vector<int>{5, 5});
  CHECK(geom.wout == std::vector<int>{5, 5});
}

TEST_CASE("block forward: forced-on gates cost exactly the dense count") {
  Rng rng(12);
  MsgcBlockConfig cfg = MsgcBlockConfig::basic(4, 8, 2, {1, 2}, {true, false},
                                               4, 2.0 / 3.0);
  MsgcBlock block;
  block.init(cfg, 0, rng);
  Tensor4 x(2, 4, 8, 8);
  rand_fill(x, rng);
  std::vector<SampleMacs> macs(2);
  Tensor4 y = block.forward(x, false, GateMode::force_all_on, nullptr, nullptr, &macs);
  CHECK(y.d == std::array<int, 4>{2, 8, 4, 4});
  BlockGeometry geom = block_geometry(cfg, 8, 8);
  const double full = static_cast<double>(block_full_macs(cfg, geom));
  for (const SampleMacs& sm : macs) {
    CHECK(sm.dynamic == full);
    CHECK(sm.dynamic_no_skip == full);
  }
}

TEST_CASE("block forward: evaluation counts are integers and repeatable") {
  Rng rng(13);
  MsgcBlockConfig cfg = MsgcBlockConfig::basic(4, 4, 1, {2, 2}, {false, true},
                                               4, 2.0 / 3.0);
  MsgcBlock block;
  block.init(cfg, 0, rng);
  Tensor4 x(3, 4, 6, 6);
  rand_fill(x, rng);
  std::vector<SampleMacs> macs1(3), macs2(3);
  Tensor4 y1 = block.forward(x, false, GateMode::eval, nullptr, nullptr, &macs1);
  Tensor4 y2 = block.forward(x, false, GateMode::eval, nullptr, nullptr, &macs2);
  CHECK(max_abs_diff(y1, y2) == 0.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(macs1[i].dynamic == std::floor(macs1[i].dynamic));
    CHECK(macs1[i].dynamic == macs2[i].dynamic);
    CHECK(macs1[i].dynamic <= macs1[i].dynamic_no_skip);
  }
}

TEST_CASE("block forward: training gate modes demand per-sample noise seeds") {
  Rng rng(14);
  MsgcBlockConfig cfg = MsgcBlockConfig::basic(4, 4, 1, {1, 2}, {false, false},
                                               4, 2.0 / 3.0);
  MsgcBlock block;
  block.init(cfg, 0, rng);
  Tensor4 x(2, 4, 6, 6);
  rand_fill(x, rng);
  MsgcBlockCache cache;
  CHECK_THROWS_AS(
      block.forward(x, true, GateMode::train_hard, nullptr, &cache, nullptr),
      Error);
  std::vector<uint64_t> seeds{1};  // wrong length
  CHECK_THROWS_AS(
      block.forward(x, true, GateMode::train_hard, &seeds, &cache, nullptr),
      Error);
}

TEST_CASE("block config: validation rejects widths the groups cannot split") {
  MsgcBlockConfig cfg = two_layer_cfg();
  cfg.channels = {4, 6, 4};  // 6 outputs over 4 consumer groups? fine; 6 % 2 == 0
  CHECK_NOTHROW(cfg.validate());
  cfg.channels = {4, 5, 4};
  CHECK_THROWS_AS(cfg.validate(), Error);
}

}  // TEST_SUITE
