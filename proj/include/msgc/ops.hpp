#pragma once

#include <cstdint>
#include <vector>

#include "msgc/tensor.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Convolution.  Activations are (N, C, H, W); weights are (k, k, Cin, Cout)
// with square kernels and symmetric zero padding.  Output spatial size is
// floor((H + 2*pad - k) / stride) + 1 and must be at least 1.
// ---------------------------------------------------------------------------

Tensor4 conv2d_fwd(const Tensor4& x, const Tensor4& w,
                   const std::vector<double>* bias, int stride, int pad);

struct Conv2dGrads {
  Tensor4 gx;
  Tensor4 gw;
  std::vector<double> gbias;  // empty when the layer has no bias
};

Conv2dGrads conv2d_bwd(const Tensor4& gy, const Tensor4& x, const Tensor4& w,
                       bool has_bias, int stride, int pad);

// ---------------------------------------------------------------------------
// Global average pooling: (N, C, H, W) -> (N, C).
// ---------------------------------------------------------------------------

Tensor2 global_avg_pool(const Tensor4& x);
Tensor4 global_avg_pool_bwd(const Tensor2& gy, int h, int w);

// ---------------------------------------------------------------------------
// Fully connected: y[N x Out] = x[N x In] * w[In x Out] + bias.
// ---------------------------------------------------------------------------

Tensor2 linear_fwd(const Tensor2& x, const Tensor2& w,
                   const std::vector<double>* bias);

struct LinearGrads {
  Tensor2 gx;
  Tensor2 gw;
  std::vector<double> gbias;
};

LinearGrads linear_bwd(const Tensor2& gy, const Tensor2& x, const Tensor2& w,
                       bool has_bias);

// ---------------------------------------------------------------------------
// Batch normalization.  Training mode uses biased batch variance and updates
// the running statistics in place:
//   running = (1 - momentum) * running + momentum * batch_stat.
// Evaluation mode normalizes with the running statistics.  Training mode
// requires more than one element per feature (batch size >= 2).
// ---------------------------------------------------------------------------

struct BnCache {
  std::vector<double> xhat;     // normalized input, same layout as x
  std::vector<double> inv_std;  // per feature
  bool train = false;
  int features = 0;
  long long per_feature = 0;  // elements averaged per feature
};

// 4D variant: one feature per channel, statistics over (N, H, W).
Tensor4 bn4d_fwd(const Tensor4& x, const std::vector<double>& gamma,
                 const std::vector<double>& beta, std::vector<double>& run_mean,
                 std::vector<double>& run_var, bool train, double momentum,
                 double eps, BnCache* cache);

struct Bn4dGrads {
  Tensor4 gx;
  std::vector<double> ggamma, gbeta;
};

Bn4dGrads bn4d_bwd(const Tensor4& gy, const std::vector<double>& gamma,
                   const BnCache& cache, const std::array<int, 4>& xdims);

// 2D variant: one feature per column, statistics over rows.
Tensor2 bn2d_fwd(const Tensor2& x, const std::vector<double>& gamma,
                 const std::vector<double>& beta, std::vector<double>& run_mean,
                 std::vector<double>& run_var, bool train, double momentum,
                 double eps, BnCache* cache);

struct Bn2dGrads {
  Tensor2 gx;
  std::vector<double> ggamma, gbeta;
};

Bn2dGrads bn2d_bwd(const Tensor2& gy, const std::vector<double>& gamma,
                   const BnCache& cache, int rows, int cols);

// ---------------------------------------------------------------------------
// Elementwise activations.  Backward passes take the forward INPUT for relu
// and the forward OUTPUT for sigmoid.
// ---------------------------------------------------------------------------

Tensor4 relu(const Tensor4& x);
Tensor2 relu(const Tensor2& x);
Tensor4 relu_bwd(const Tensor4& gy, const Tensor4& x);
Tensor2 relu_bwd(const Tensor2& gy, const Tensor2& x);

Tensor2 sigmoid(const Tensor2& x);
Tensor2 sigmoid_bwd(const Tensor2& gy, const Tensor2& y);

// ---------------------------------------------------------------------------
// Softmax cross entropy, mean over the batch.  Labels must lie in
// [0, logits.cols).
// ---------------------------------------------------------------------------

struct CeResult {
  double loss = 0.0;
  Tensor2 probs;  // softmax of the logits, kept for the backward pass
};

CeResult softmax_ce_fwd(const Tensor2& logits, const std::vector<uint32_t>& labels);
Tensor2 softmax_ce_bwd(const Tensor2& probs, const std::vector<uint32_t>& labels);

}  // namespace msgc
