#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msgc/ops.hpp"
#include "msgc/rng.hpp"
#include "msgc/tensor.hpp"

namespace msgc {

// Parameter groups drive the optimizer: backbone weights take the base
// learning rate and weight decay, mask-generator weights take their own
// (larger) rate and no decay.
enum class ParamGroup { backbone, mask_mlp };

// A named view over one parameter tensor and its gradient accumulator.
struct ParamRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  size_t size = 0;
  std::vector<uint32_t> dims;
  ParamGroup group = ParamGroup::backbone;
};

// A named view over a non-trained buffer (running statistics).
struct BufferRef {
  std::string name;
  double* data = nullptr;
  size_t size = 0;
  std::vector<uint32_t> dims;
};

inline void he_normal(Tensor4& w, Rng& rng, int fan_in) {
  const double s = std::sqrt(2.0 / fan_in);
  for (double& e : w.v) e = rng.normal(0.0, s);
}

inline void he_normal(Tensor2& w, Rng& rng, int fan_in) {
  const double s = std::sqrt(2.0 / fan_in);
  for (double& e : w.v) e = rng.normal(0.0, s);
}

// ---------------------------------------------------------------------------
// Convolution layer (no bias; a batch norm always follows in the networks
// built here).
// ---------------------------------------------------------------------------

struct ConvLayer {
  Tensor4 w, gw;  // (k, k, Cin, Cout)
  int stride = 1, pad = 0;

  void init(int k, int cin, int cout, int stride_, int pad_, Rng& rng) {
    w = Tensor4(k, k, cin, cout);
    gw = Tensor4(k, k, cin, cout);
    stride = stride_;
    pad = pad_;
    he_normal(w, rng, k * k * cin);
  }

  Tensor4 forward(const Tensor4& x) const { return conv2d_fwd(x, w, nullptr, stride, pad); }

  // Accumulates the weight gradient; returns the input gradient.
  Tensor4 backward(const Tensor4& gy, const Tensor4& x) {
    Conv2dGrads g = conv2d_bwd(gy, x, w, false, stride, pad);
    for (size_t i = 0; i < gw.v.size(); ++i) gw.v[i] += g.gw.v[i];
    return std::move(g.gx);
  }

  void zero_grad() { std::fill(gw.v.begin(), gw.v.end(), 0.0); }
  void collect(const std::string& prefix, ParamGroup group, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w", w.v.data(), gw.v.data(), w.size(),
                   {uint32_t(w.d[0]), uint32_t(w.d[1]), uint32_t(w.d[2]), uint32_t(w.d[3])},
                   group});
  }
};

// ---------------------------------------------------------------------------
// Batch norm layer (both 4D and 2D inputs; one instance serves exactly one).
// ---------------------------------------------------------------------------

struct BatchNorm {
  std::vector<double> gamma, beta, g_gamma, g_beta, run_mean, run_var;
  double eps = 1e-5;
  double momentum = 0.1;

  void init(int features) {
    gamma.assign(features, 1.0);
    beta.assign(features, 0.0);
    g_gamma.assign(features, 0.0);
    g_beta.assign(features, 0.0);
    run_mean.assign(features, 0.0);
    run_var.assign(features, 1.0);
  }

  Tensor4 forward(const Tensor4& x, bool train, BnCache* cache) {
    return bn4d_fwd(x, gamma, beta, run_mean, run_var, train, momentum, eps, cache);
  }
  Tensor4 backward(const Tensor4& gy, const BnCache& cache, const std::array<int, 4>& xdims) {
    Bn4dGrads g = bn4d_bwd(gy, gamma, cache, xdims);
    for (size_t i = 0; i < g_gamma.size(); ++i) {
      g_gamma[i] += g.ggamma[i];
      g_beta[i] += g.gbeta[i];
    }
    return std::move(g.gx);
  }

  Tensor2 forward(const Tensor2& x, bool train, BnCache* cache) {
    return bn2d_fwd(x, gamma, beta, run_mean, run_var, train, momentum, eps, cache);
  }
  Tensor2 backward(const Tensor2& gy, const BnCache& cache, int rows, int cols) {
    Bn2dGrads g = bn2d_bwd(gy, gamma, cache, rows, cols);
    for (size_t i = 0; i < g_gamma.size(); ++i) {
      g_gamma[i] += g.ggamma[i];
      g_beta[i] += g.gbeta[i];
    }
    return std::move(g.gx);
  }

  void zero_grad() {
    std::fill(g_gamma.begin(), g_gamma.end(), 0.0);
    std::fill(g_beta.begin(), g_beta.end(), 0.0);
  }
  void collect(const std::string& prefix, ParamGroup group, std::vector<ParamRef>& out) {
    uint32_t n = static_cast<uint32_t>(gamma.size());
    out.push_back({prefix + ".gamma", gamma.data(), g_gamma.data(), gamma.size(), {n}, group});
    out.push_back({prefix + ".beta", beta.data(), g_beta.data(), beta.size(), {n}, group});
  }
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
    uint32_t n = static_cast<uint32_t>(gamma.size());
    out.push_back({prefix + ".run_mean", run_mean.data(), run_mean.size(), {n}});
    out.push_back({prefix + ".run_var", run_var.data(), run_var.size(), {n}});
  }
};

// ---------------------------------------------------------------------------
// Fully connected layer with bias.
// ---------------------------------------------------------------------------

struct LinearLayer {
  Tensor2 w, gw;  // (In, Out)
  std::vector<double> b, gb;

  void init(int in, int out, Rng& rng) {
    w = Tensor2(in, out);
    gw = Tensor2(in, out);
    b.assign(out, 0.0);
    gb.assign(out, 0.0);
    he_normal(w, rng, in);
  }

  Tensor2 forward(const Tensor2& x) const { return linear_fwd(x, w, &b); }

  Tensor2 backward(const Tensor2& gy, const Tensor2& x) {
    LinearGrads g = linear_bwd(gy, x, w, true);
    for (size_t i = 0; i < gw.v.size(); ++i) gw.v[i] += g.gw.v[i];
    for (size_t i = 0; i < gb.size(); ++i) gb[i] += g.gbias[i];
    return std::move(g.gx);
  }

  void zero_grad() {
    std::fill(gw.v.begin(), gw.v.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
  }
  void collect(const std::string& prefix, ParamGroup group, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w", w.v.data(), gw.v.data(), w.size(),
                   {uint32_t(w.rows), uint32_t(w.cols)}, group});
    out.push_back({prefix + ".b", b.data(), gb.data(), b.size(), {uint32_t(b.size())}, group});
  }
};

}  // namespace msgc
