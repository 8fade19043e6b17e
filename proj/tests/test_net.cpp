#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "msgc/data.hpp"
#include "msgc/net.hpp"
#include "msgc/rng.hpp"
#include "test_util.hpp"

using namespace msgc;
using testutil::rand_fill;

namespace {

NetConfig smoke_config() {
  NetConfig cfg;
  cfg.in_channels = 3;
  cfg.in_h = cfg.in_w = 16;
  cfg.stem_channels = 8;
  cfg.blocks = {{8, 1}, {16, 2}};
  cfg.num_classes = 8;
  cfg.groups = {1, 4};
  cfg.attention_layers = {1, 2};
  cfg.reduction = 4;
  return cfg;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("msgc_net_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_SUITE("net") {

TEST_CASE("config validation: gating plan and class count are checked") {
  NetConfig cfg = smoke_config();
  CHECK_NOTHROW(cfg.validate());

  NetConfig bad = cfg;
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = cfg;
  bad.attention_layers = {3};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = cfg;
  bad.groups = {1, 2, 4};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = cfg;
  bad.blocks.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("config validation: block widths must split across the groups") {
  NetConfig cfg = smoke_config();
  cfg.blocks = {{6, 1}};  // 6 filters cannot split into 4 groups
  Rng rng(1);
  MsgcNet net;
  CHECK_THROWS_AS(net.init(cfg, rng), Error);
}

TEST_CASE("forward shapes: both variants emit one logit row per sample") {
  Rng rng(2);
  NetConfig cfg = smoke_config();
  PlainNet plain;
  plain.init(cfg, rng);
  Tensor4 x(3, 3, 16, 16);
  rand_fill(x, rng);
  Tensor2 logits = plain.forward(x, false, nullptr);
  CHECK(logits.rows == 3);
  CHECK(logits.cols == 8);

  Rng rng2(2);
  MsgcNet gated;
  gated.init(cfg, rng2);
  Tensor2 glogits = gated.forward(x, false, GateMode::eval, nullptr, nullptr, nullptr);
  CHECK(glogits.rows == 3);
  CHECK(glogits.cols == 8);
}

TEST_CASE("plug-in conversion: forced-on gates reproduce the plain network") {
  Rng rng(3);
  NetConfig cfg = smoke_config();
  PlainNet plain;
  plain.init(cfg, rng);
  MsgcNet gated = convert_to_gated(plain, rng);

  Tensor4 x(4, 3, 16, 16);
  rand_fill(x, rng);
  Tensor2 want = plain.forward(x, false, nullptr);
  Tensor2 got = gated.forward(x, false, GateMode::force_all_on, nullptr, nullptr, nullptr);
  REQUIRE(got.rows == want.rows);
  REQUIRE(got.cols == want.cols);
  CHECK(testutil::max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("multiply report: frozen counts for the smoke architecture") {
  NetMacReport rep = net_mac_report(smoke_config());

  auto row = [&](const std::string& name) -> const MacRow& {
    for (const MacRow& r : rep.rows)
      if (r.name == name) return r;
    FAIL("missing row " << name);
    static MacRow none;
    return none;
  };
  // Hand-computed: k*k * Cin * Cout * Hout * Wout.
  CHECK(row("stem").full == 55296);          // 9*3*8 * 16*16
  CHECK(row("block1.conv1").full == 147456); // 9*8*8 * 16*16
  CHECK(row("block1.conv2").full == 147456);
  CHECK(row("block2.conv1").full == 73728);  // 9*8*16 * 8*8
  CHECK(row("block2.conv2").full == 147456); // 9*16*16 * 8*8
  CHECK(row("block2.sc_conv").full == 8192); // 1*8*16 * 8*8
  CHECK(row("classifier").full == 128);      // 16*8

  CHECK(row("stem").gated == false);
  CHECK(row("block1.conv1").gated == true);
  CHECK(row("block2.sc_conv").gated == false);

  CHECK(rep.gated_full == 147456u + 147456u + 73728u + 147456u);
  CHECK(rep.fixed == 55296u + 8192u + 128u);
  CHECK(rep.model_full() == rep.gated_full + rep.fixed);
  // Mask-generator cost: two MLPs per gated layer (gate + attention here),
  // each in*hidden + hidden*(G*C) multiplies, hidden = 8/4 = 2.
  CHECK(rep.mask_mlp == 576);
}

TEST_CASE("multiply report: sample ratio helper blends fixed and dynamic cost") {
  NetMacReport rep = net_mac_report(smoke_config());
  SampleMacs sm;
  sm.dynamic = static_cast<double>(rep.gated_full);  // everything on
  CHECK(rep.sample_ratio(sm) == doctest::Approx(1.0).epsilon(1e-12));
  sm.dynamic = 0.0;
  CHECK(rep.sample_total(sm) == doctest::Approx(double(rep.fixed)).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip: save, load, and save again byte-identically") {
  TempDir tmp;
  Rng rng(4);
  NetConfig cfg = smoke_config();

  SUBCASE("gated variant") {
    MsgcNet net;
    net.init(cfg, rng);
    const std::string a = tmp.file("gated_a.ckpt"), b = tmp.file("gated_b.ckpt");
    save_net(a, net);
    LoadedNet loaded = load_net(a);
    REQUIRE(loaded.gated);
    REQUIRE(loaded.msgc != nullptr);
    CHECK(loaded.config().num_classes == 8);
    save_net(b, *loaded.msgc);
    CHECK(slurp(a) == slurp(b));

    // The reloaded network behaves identically (weights live in float32).
    Tensor4 x(2, 3, 16, 16);
    rand_fill(x, rng);
    Tensor2 y0 = net.forward(x, false, GateMode::eval, nullptr, nullptr, nullptr);
    Tensor2 y1 = loaded.msgc->forward(x, false, GateMode::eval, nullptr, nullptr, nullptr);
    CHECK(testutil::max_abs_diff(y0, y1) < 1e-4);
  }

  SUBCASE("plain variant") {
    PlainNet net;
    net.init(cfg, rng);
    const std::string a = tmp.file("plain_a.ckpt"), b = tmp.file("plain_b.ckpt");
    save_net(a, net);
    LoadedNet loaded = load_net(a);
    REQUIRE(!loaded.gated);
    REQUIRE(loaded.plain != nullptr);
    save_net(b, *loaded.plain);
    CHECK(slurp(a) == slurp(b));
  }
}

TEST_CASE("checkpoint loading rejects tensors that do not match the model") {
  TempDir tmp;
  Rng rng(5);
  MsgcNet net;
  net.init(smoke_config(), rng);
  const std::string path = tmp.file("net.ckpt");
  save_net(path, net);

  SUBCASE("a renamed parameter is reported") {
    std::vector<NamedTensor> entries = load_checkpoint(path);
    bool renamed = false;
    for (NamedTensor& e : entries)
      if (e.name == "stem.w") {
        e.name = "stem.weight";
        renamed = true;
        break;
      }
    REQUIRE(renamed);
    const std::string bad = tmp.file("renamed.ckpt");
    save_checkpoint(bad, entries);
    try {
      load_net(bad);
      FAIL("expected a checkpoint mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::checkpoint_mismatch);
    }
  }

  SUBCASE("a reshaped parameter is reported") {
    std::vector<NamedTensor> entries = load_checkpoint(path);
    bool reshaped = false;
    for (NamedTensor& e : entries)
      if (e.name == "fc.b") {
        e.dims = {4, 2};  // same element count, wrong shape
        reshaped = true;
        break;
      }
    REQUIRE(reshaped);
    const std::string bad = tmp.file("reshaped.ckpt");
    save_checkpoint(bad, entries);
    try {
      load_net(bad);
      FAIL("expected a checkpoint mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::checkpoint_mismatch);
    }
  }
}

TEST_CASE("loading a non-checkpoint file raises the format errors") {
  TempDir tmp;
  const std::string missing = tmp.file("absent.ckpt");
  try {
    load_net(missing);
    FAIL("expected an io error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::io);
  }

  const std::string junk = tmp.file("junk.ckpt");
  std::ofstream(junk, std::ios::binary) << "JUNKJUNKJUNKJUNK";
  try {
    load_net(junk);
    FAIL("expected a bad magic error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::bad_magic);
  }
}

}  // TEST_SUITE
