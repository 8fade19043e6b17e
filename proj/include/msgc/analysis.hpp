#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgc/train.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Mask diagnostics.  One deterministic evaluation pass collects, for every
// gated layer, how often each channel was selected by how many groups, plus
// per-sample multiply counts and correctness.  Four report families are
// rendered from the same pass: group curves + channel pyramid, per-layer
// remaining rates, per-sample cost histogram, and gate/attention matrices.
// Reports never modify the network; CSV files are the contract and each SVG
// is a convenience view of the same numbers.
// ---------------------------------------------------------------------------

struct LayerMaskStats {
  std::string name;  // e.g. "block1.conv2"
  int groups = 0, channels = 0;
  bool has_attention = false;
  // All counts accumulate over the evaluated samples.
  std::vector<int64_t> at_least;        // [G*C], (g,c): samples where channel c
                                        // was selected by >= g+1 groups
  int64_t canonical = 0;                // channel-instances selected by all groups
  int64_t partial = 0;                  // ... by some but not all
  int64_t discarded = 0;                // ... by none
  std::vector<double> gate_sum;         // [G*C] sum of binary gate values
  std::vector<double> attn_sum;         // [G*C] sum of attention values (empty
                                        // when the layer has no attention stage)

  double selection_rate(int g, int c, int64_t n) const {
    return gate_sum[static_cast<size_t>(g) * channels + c] / static_cast<double>(n);
  }
};

struct MaskAnalysis {
  int64_t sample_count = 0;
  double accuracy = 0.0;
  double mean_ratio = 0.0;
  std::vector<LayerMaskStats> layers;
  std::vector<EvalSample> samples;  // dataset order
};

MaskAnalysis analyze_masks(MsgcNet& net, const Dataset& ds, int batch_size);

// Each writer emits its files into `dir` (created if absent) and returns the
// paths written.  Headers document every CSV schema.
std::vector<std::string> write_group_analysis(const MaskAnalysis& a, const std::string& dir);
std::vector<std::string> write_layer_analysis(const MaskAnalysis& a, const std::string& dir);
std::vector<std::string> write_sample_analysis(const MaskAnalysis& a, const std::string& dir);
// Fails with a config error when no layer carries an attention stage.
std::vector<std::string> write_attention_analysis(const MaskAnalysis& a, const std::string& dir);

}  // namespace msgc
