#pragma once

#include <memory>
#include <string>
#include <vector>

#include "msgc/msgc_block.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// A small residual classifier: stem conv -> bn -> relu, a chain of two-layer
// residual blocks, global average pooling, and a linear classifier.  The
// gated variant adds per-sample channel gating inside every block.
// ---------------------------------------------------------------------------

struct BlockSpec {
  int out_channels = 0;
  int stride = 1;
};

struct NetConfig {
  int in_channels = 3, in_h = 32, in_w = 32;
  int stem_channels = 16;
  std::vector<BlockSpec> blocks{{16, 1}, {32, 2}, {64, 2}};
  int num_classes = 8;

  // Gating plan, used by the gated variant only.
  std::vector<int> groups{1, 4};           // per layer inside each block
  std::vector<int> attention_layers{1, 2}; // 1-based layer positions
  int reduction = 4;
  double temperature = 2.0 / 3.0;
  double gate_bias_init = 2.0;
  double attn_bias_init = 2.0;

  void validate() const;
  std::vector<bool> attention_flags() const;
};

// ---------------------------------------------------------------------------
// Plain variant
// ---------------------------------------------------------------------------

struct PlainBlock {
  ConvLayer conv1, conv2;
  BatchNorm bn1, bn2;
  std::optional<ConvLayer> sc_conv;
  std::optional<BatchNorm> sc_bn;

  struct Cache {
    Tensor4 x;
    std::array<int, 4> c1_dims{}, c2_dims{}, sc_dims{};
    BnCache bn1c, bn2c, scc;
    Tensor4 y1_pre;  // bn1 output before relu
    Tensor4 sum_pre; // residual sum before the final relu
  };

  void init(int cin, int cout, int stride, Rng& rng);
  Tensor4 forward(const Tensor4& x, bool train, Cache* cache);
  Tensor4 backward(const Tensor4& gy, const Cache& cache);
  void zero_grad();
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out);
};

struct PlainNet {
  NetConfig cfg;
  ConvLayer stem;
  BatchNorm stem_bn;
  std::vector<PlainBlock> blocks;
  LinearLayer fc;

  struct Cache {
    Tensor4 x;
    std::array<int, 4> stem_dims{};
    BnCache stem_bnc;
    Tensor4 stem_pre;  // stem bn output before relu
    std::vector<PlainBlock::Cache> blocks;
    Tensor2 pooled;
    std::array<int, 2> feat_hw{};
  };

  void init(const NetConfig& c, Rng& rng);
  Tensor2 forward(const Tensor4& x, bool train, Cache* cache);
  void backward(const Tensor2& glogits, const Cache& cache);
  void zero_grad();
  std::vector<ParamRef> params();
  std::vector<BufferRef> buffers();
};

// ---------------------------------------------------------------------------
// Gated variant
// ---------------------------------------------------------------------------

struct MsgcNet {
  NetConfig cfg;
  ConvLayer stem;
  BatchNorm stem_bn;
  std::vector<MsgcBlock> blocks;
  LinearLayer fc;

  struct Cache {
    Tensor4 x;
    std::array<int, 4> stem_dims{};
    BnCache stem_bnc;
    Tensor4 stem_pre;
    std::vector<MsgcBlockCache> blocks;
    Tensor2 pooled;
    std::array<int, 2> feat_hw{};
  };

  void init(const NetConfig& c, Rng& rng);
  Tensor2 forward(const Tensor4& x, bool train, GateMode gates,
                  const std::vector<uint64_t>* noise_seeds, Cache* cache,
                  std::vector<SampleMacs>* macs);
  // mac_coeff: per-sample d(loss)/d(dynamic multiply count), or null.
  void backward(const Tensor2& glogits, const Cache& cache,
                const std::vector<double>* mac_coeff);
  void zero_grad();
  std::vector<ParamRef> params();
  std::vector<BufferRef> buffers();
};

// Re-hosts a trained plain network inside the gated variant: backbone weights
// are sliced into group filter banks unchanged; mask generators are fresh.
// With every gate forced on the two produce identical outputs.
MsgcNet convert_to_gated(const PlainNet& plain, Rng& rng);

// ---------------------------------------------------------------------------
// Static multiply accounting (pure geometry, no parameters involved).
// ---------------------------------------------------------------------------

struct MacRow {
  std::string name;
  uint64_t full = 0;
  bool gated = false;
};

struct NetMacReport {
  uint64_t gated_full = 0;  // dense count of the gated convolutions
  uint64_t fixed = 0;       // stem + shortcuts + classifier, always executed
  uint64_t mask_mlp = 0;    // per-sample mask-generator multiplies
  std::vector<MacRow> rows;

  // Denominator of every reported ratio: the dense network's count.
  uint64_t model_full() const { return gated_full + fixed; }
  double sample_total(const SampleMacs& sm) const {
    return static_cast<double>(fixed) + sm.dynamic;
  }
  double sample_ratio(const SampleMacs& sm) const {
    return sample_total(sm) / static_cast<double>(model_full());
  }
};

NetMacReport net_mac_report(const NetConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpointing.  Either variant round-trips losslessly through its file;
// loading reconstructs the architecture from the stored description.
// ---------------------------------------------------------------------------

struct LoadedNet {
  bool gated = false;
  std::unique_ptr<PlainNet> plain;
  std::unique_ptr<MsgcNet> msgc;

  const NetConfig& config() const { return gated ? msgc->cfg : plain->cfg; }
};

void save_net(const std::string& path, PlainNet& net);
void save_net(const std::string& path, MsgcNet& net);
LoadedNet load_net(const std::string& path);

}  // namespace msgc
