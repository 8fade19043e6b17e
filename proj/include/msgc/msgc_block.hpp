#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "msgc/gating.hpp"
#include "msgc/layers.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Group filter bank: one convolution's filters partitioned into G groups of
// equal output width.  Every group still sees the full input; which input
// channels it actually reads is decided per sample by its gate row.
// ---------------------------------------------------------------------------

struct GroupFilterBank {
  std::vector<Tensor4> w;   // per group: (k, k, Cin, Cout/G)
  std::vector<Tensor4> gw;  // matching gradient accumulators
  int stride = 1, pad = 0;

  int group_count() const { return static_cast<int>(w.size()); }
  int kernel() const { return w.empty() ? 0 : w[0].d[0]; }
  int cin() const { return w.empty() ? 0 : w[0].d[2]; }
  int cout_per_group() const { return w.empty() ? 0 : w[0].d[3]; }
  int cout() const { return group_count() * cout_per_group(); }

  void zero_grad() {
    for (auto& g : gw) std::fill(g.v.begin(), g.v.end(), 0.0);
  }
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

// Splits a dense convolution weight (k, k, Cin, Cout) into G groups along the
// output axis.  Group g takes filters [g*Cout/G, (g+1)*Cout/G).
GroupFilterBank plug_in(const Tensor4& full, int groups, int stride, int pad);

// Inverse of plug_in: reassembles the dense weight.
Tensor4 bank_concat(const GroupFilterBank& bank);

// Convolution with per-sample, per-(group, input-channel) scale factors.
// scale has shape [N x G*Cin] (row layout g*Cin + c); a null scale means all
// ones, which reproduces a dense convolution of the concatenated bank.
Tensor4 gated_group_conv_fwd(const Tensor4& x, const GroupFilterBank& bank,
                             const Tensor2* scale);

struct GatedConvGrads {
  Tensor4 gx;
  Tensor2 gscale;  // zero-sized when scale was null
};

// Accumulates weight gradients into bank.gw.
GatedConvGrads gated_group_conv_bwd(const Tensor4& gy, const Tensor4& x,
                                    GroupFilterBank& bank, const Tensor2* scale);

// ---------------------------------------------------------------------------
// Mask generator: GAP features -> linear (no bias) -> batch norm -> relu ->
// linear (+bias) -> reshape to (G, C) saliencies.
// ---------------------------------------------------------------------------

struct MaskMlpCache {
  Tensor2 in, h, hb, ha;
  BnCache bn;
};

struct MaskMlp {
  Tensor2 w1, g_w1;  // [C_in x hidden]
  BatchNorm bn;      // over hidden features
  Tensor2 w2, g_w2;  // [hidden x G*C]
  std::vector<double> b2, g_b2;
  int groups = 0, channels = 0;

  void init(int in_features, int hidden, int g, int c, double bias_init, Rng& rng);
  Tensor2 forward(const Tensor2& pooled, bool train, MaskMlpCache* cache);
  // Accumulates parameter gradients; returns the gradient wrt the pooled input.
  Tensor2 backward(const Tensor2& gs, const MaskMlpCache& cache);
  void zero_grad();
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out);
  // Multiplies per sample: in*hidden + hidden*(G*C).
  uint64_t mac_count() const;
};

// ---------------------------------------------------------------------------
// Block configuration
// ---------------------------------------------------------------------------

struct MsgcBlockConfig {
  std::vector<int> channels;  // size M+1: input width, then each layer's output
  std::vector<int> groups;    // per layer
  std::vector<int> kernels, strides, pads;
  std::vector<bool> attention;  // per layer
  int reduction = 4;
  double temperature = 2.0 / 3.0;
  double gate_bias_init = 2.0;
  double attn_bias_init = 2.0;
  bool shortcut_projection = false;  // 1x1 conv + bn; otherwise identity
  bool final_relu = true;

  int layer_count() const { return static_cast<int>(groups.size()); }
  int hidden() const { return std::max(1, channels[0] / reduction); }
  int total_stride() const;
  void validate() const;

  // A standard two-layer residual block (3x3 convs), projecting the shortcut
  // when the stride or width changes.
  static MsgcBlockConfig basic(int cin, int cout, int stride,
                               const std::vector<int>& layer_groups,
                               const std::vector<bool>& layer_attention,
                               int reduction, double temperature);
};

// Spatial output sizes of each layer for a given block input size.
struct BlockGeometry {
  std::vector<int> hout, wout;
};
BlockGeometry block_geometry(const MsgcBlockConfig& cfg, int h, int w);

// ---------------------------------------------------------------------------
// Multiply counts.  One gate value per (group, input channel) per layer;
// gates[i] points at layer i's G_i*C_i values for a single sample.
//
// With skip accounting, an output channel of layer i is only produced when at
// least one group of layer i+1 reads it; the final layer's outputs are always
// produced.  With 0/1 gate values the result is an exact integer count; with
// soft probabilities it is the differentiable surrogate used for training.
// ---------------------------------------------------------------------------

double gated_macs_value(const MsgcBlockConfig& cfg, const BlockGeometry& geom,
                        const std::vector<const double*>& gates, bool with_skip,
                        std::vector<double>* per_layer);

// Adds coeff * d(count)/d(gate) into ggates (same layout as gates).
void gated_macs_grad(const MsgcBlockConfig& cfg, const BlockGeometry& geom,
                     const std::vector<const double*>& gates, double coeff,
                     const std::vector<double*>& ggates);

uint64_t layer_full_macs(const MsgcBlockConfig& cfg, const BlockGeometry& geom, int layer);
uint64_t block_full_macs(const MsgcBlockConfig& cfg, const BlockGeometry& geom);
uint64_t block_mask_mlp_macs(const MsgcBlockConfig& cfg);

// ---------------------------------------------------------------------------
// The block itself
// ---------------------------------------------------------------------------

// How gates behave during a forward pass.
enum class GateMode {
  eval,          // threshold the saliency at zero
  train_hard,    // noisy binary gates; straight-through backward
  train_soft,    // smooth probabilities everywhere (exact gradients, used by
                 // finite-difference checks)
  force_all_on,  // every channel selected and attention bypassed
};

// Per-sample multiply ledger for one forward pass, accumulated across blocks.
struct SampleMacs {
  double dynamic = 0.0;          // gated-conv count (smooth in train_soft mode)
  double dynamic_no_skip = 0.0;  // same but without skip accounting
  std::vector<double> per_layer;
};

struct MsgcBlockCache {
  struct Layer {
    Tensor4 conv_in;
    Tensor2 s;
    MaskMlpCache gate_mlp;
    Tensor2 attn_raw, attn;
    MaskMlpCache attn_mlp;
    Tensor2 soft;   // train modes only
    Tensor2 gate;   // the value entering the conv scale (hard, soft, or ones)
    Tensor2 scale;  // gate * attention
    BnCache bn;
    std::array<int, 4> conv_out_dims{};
    Tensor4 bn_out;  // kept when a relu follows
  };
  Tensor2 pooled;
  std::array<int, 4> in_dims{};
  std::vector<Layer> layers;
  BnCache sc_bn;
  std::array<int, 4> sc_out_dims{};
  Tensor4 sum_pre_relu;
  bool train = false;
  GateMode mode = GateMode::eval;
};

struct MsgcBlock {
  MsgcBlockConfig cfg;
  int stream_id = 0;  // decorrelates gate noise across blocks
  std::vector<GroupFilterBank> banks;
  std::vector<BatchNorm> bns;
  std::vector<MaskMlp> gate_mlps;
  std::vector<std::optional<MaskMlp>> attn_mlps;
  std::optional<ConvLayer> sc_conv;
  std::optional<BatchNorm> sc_bn;

  void init(const MsgcBlockConfig& c, int stream, Rng& rng);

  // noise_seeds (one per sample) are required in the train_* gate modes and
  // ignored otherwise.  If macs is non-null it must hold one entry per sample;
  // the block adds its own counts.
  Tensor4 forward(const Tensor4& x, bool train, GateMode gates,
                  const std::vector<uint64_t>* noise_seeds, MsgcBlockCache* cache,
                  std::vector<SampleMacs>* macs);

  // mac_coeff: optional per-sample d(loss)/d(dynamic count), folded into the
  // gate gradients (budget pressure).  Requires a train_* cache.
  Tensor4 backward(const Tensor4& gy, const MsgcBlockCache& cache,
                   const std::vector<double>* mac_coeff);

  void zero_grad();
  void collect(const std::string& prefix, std::vector<ParamRef>& out);
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out);
};

// Noise tensor for one (sample, block, layer) gate: G*C logistic draws from a
// stream derived with splitmix64 so results are independent of batch order
// and thread count.
void fill_gate_noise(uint64_t sample_seed, int stream_id, int layer, int count,
                     double* out);

}  // namespace msgc
