#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msgc/tensor.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Image dataset.  Binary layout (all integers little-endian):
//   "MSGD" | u32 version=1 | u32 count | u32 channels | u32 height
//   | u32 width | u32 classes | count * C*H*W float32 (CHW planes)
//   | count * u32 labels
// Loading verifies the magic, the exact payload length, and that every label
// lies in [0, classes).
// ---------------------------------------------------------------------------

struct Dataset {
  uint32_t channels = 0, height = 0, width = 0, num_classes = 0;
  std::vector<float> images;  // count * channels * height * width
  std::vector<uint32_t> labels;

  size_t count() const { return labels.size(); }
  size_t sample_floats() const {
    return static_cast<size_t>(channels) * height * width;
  }
  // Copies the given sample indices into a batch tensor (doubles).
  Tensor4 gather(const std::vector<size_t>& idx) const;
  std::vector<uint32_t> gather_labels(const std::vector<size_t>& idx) const;
};

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Synthetic oriented-grating classification set.  Classes differ by grating
// orientation and spatial frequency; each image gets a random global phase, a
// per-channel phase offset, and white Gaussian pixel noise.
struct SynthSpec {
  uint64_t seed = 1;
  int per_class = 64;
  int classes = 8;
  int channels = 3;
  int size = 32;
  double noise = 0.2;
};

Dataset synth_dataset(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Checkpoint container: named float32 tensors.  Binary layout:
//   "MSGC" | u32 version=1 | u32 entry_count | entries... | u32 crc32
// entry: u32 name_len | name bytes | u32 rank | rank * u32 dims
//        | prod(dims) * float32
// The trailing checksum covers every byte between the 12-byte header and the
// checksum itself (CRC-32, reflected polynomial 0xEDB88320).
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<uint32_t> dims;
  std::vector<float> data;

  size_t element_count() const {
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
  }
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

uint32_t crc32(const uint8_t* data, size_t len);

// ---------------------------------------------------------------------------
// Run configuration: flat "key = value" lines, '#' starts a comment, unknown
// keys are rejected by name, missing keys fall back to defaults (each fallback
// is reported through `notices`).
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string train_data, val_data;

  // architecture
  int in_channels = 3, in_size = 32;
  int stem = 16;
  std::vector<std::pair<int, int>> blocks{{16, 1}, {32, 2}, {64, 2}};  // width:stride
  int classes = 8;

  // gating plan
  bool gated = true;
  std::vector<int> groups{1, 4};
  std::vector<int> attention{1, 2};
  int reduction = 4;
  double temperature = 2.0 / 3.0;
  double gate_bias_init = 2.0;
  double attention_bias_init = 2.0;

  // optimization
  double lambda = 30.0;
  double budget_target = 0.5;
  double warm_fraction = 0.5;
  int epochs = 30;
  int batch_size = 32;
  double lr_backbone = 0.015;
  double lr_mlp = 0.075;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
  bool augment = false;

  // outputs
  std::string out_checkpoint = "checkpoint.bin";
  std::string out_log = "train_log.csv";
};

RunConfig parse_run_config_text(const std::string& text, std::vector<std::string>* notices = nullptr);
RunConfig parse_run_config(const std::string& path, std::vector<std::string>* notices = nullptr);

}  // namespace msgc
