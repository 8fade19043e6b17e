#pragma once

// Shared oracles for the test suites.  Everything here is written as the
// plainest possible loop so it can disagree with the production code: naive
// convolutions check the im2col path, and the instrumented multiply counter
// checks the closed-form ledger by actually walking the work a minimal
// executor would perform.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "msgc/msgc_block.hpp"
#include "msgc/rng.hpp"
#include "msgc/tensor.hpp"

namespace testutil {

inline void rand_fill(msgc::Tensor4& t, msgc::Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
  for (double& v : t.v) v = rng.uniform(lo, hi);
}

inline void rand_fill(msgc::Tensor2& t, msgc::Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
  for (double& v : t.v) v = rng.uniform(lo, hi);
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const msgc::Tensor4& a, const msgc::Tensor4& b) {
  return max_abs_diff(a.v, b.v);
}

inline double max_abs_diff(const msgc::Tensor2& a, const msgc::Tensor2& b) {
  return max_abs_diff(a.v, b.v);
}

inline int out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Direct six-loop convolution.  x: (N, Cin, H, W), w: (k, k, Cin, Cout).
inline msgc::Tensor4 naive_conv2d(const msgc::Tensor4& x, const msgc::Tensor4& w,
                                  const std::vector<double>* bias, int stride,
                                  int pad) {
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int k = w.d[0], cout = w.d[3];
  const int ho = out_dim(h, k, stride, pad), wo = out_dim(wd, k, stride, pad);
  msgc::Tensor4 y(n, cout, ho, wo);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < cout; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w.at(ky, kx, c, o) * x.at(b, c, iy, ix);
              }
          y.at(b, o, oy, ox) = acc;
        }
  return y;
}

// Direct grouped convolution with per-sample, per-(group, input channel)
// scale factors.  Mirrors gated_group_conv_fwd's contract: every group sees
// the full input, scaled by its own row of `scale` ([N x G*Cin], layout
// g*Cin + c); a null scale means all ones.
inline msgc::Tensor4 naive_gated_group_conv(const msgc::Tensor4& x,
                                            const msgc::GroupFilterBank& bank,
                                            const msgc::Tensor2* scale) {
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int g_count = bank.group_count();
  const int k = bank.kernel(), cpg = bank.cout_per_group();
  const int stride = bank.stride, pad = bank.pad;
  const int ho = out_dim(h, k, stride, pad), wo = out_dim(wd, k, stride, pad);
  msgc::Tensor4 y(n, g_count * cpg, ho, wo);
  for (int b = 0; b < n; ++b)
    for (int g = 0; g < g_count; ++g)
      for (int oc = 0; oc < cpg; ++oc)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            double acc = 0.0;
            for (int c = 0; c < cin; ++c) {
              const double s = scale ? scale->at(b, g * cin + c) : 1.0;
              if (s == 0.0) continue;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int iy = oy * stride - pad + ky;
                  const int ix = ox * stride - pad + kx;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                  acc += s * bank.w[g].at(ky, kx, c, oc) * x.at(b, c, iy, ix);
                }
            }
            y.at(b, g * cpg + oc, oy, ox) = acc;
          }
  return y;
}

// Instrumented multiply counter for one block's gated convolutions under
// binary masks.  Walks the work a minimal executor would do: for every layer,
// every group, every output channel that some consumer still reads, and every
// input channel the group's mask selects, the inner kernel costs k*k
// multiplies per output pixel.  With skip accounting, an output channel of
// layer i is consumed only when at least one group of layer i+1 selects it;
// the final layer's outputs always count.
inline uint64_t counted_masked_macs(const msgc::MsgcBlockConfig& cfg,
                                    const msgc::BlockGeometry& geom,
                                    const std::vector<const double*>& gates,
                                    bool with_skip,
                                    std::vector<uint64_t>* per_layer = nullptr) {
  const int layers = cfg.layer_count();
  if (per_layer) per_layer->assign(layers, 0);
  uint64_t total = 0;
  for (int i = 0; i < layers; ++i) {
    const int g_count = cfg.groups[i];
    const int cin = cfg.channels[i];
    const int cout = cfg.channels[i + 1];
    const int cpg = cout / g_count;
    const int k = cfg.kernels[i];
    const uint64_t per_pair =
        static_cast<uint64_t>(k) * k * geom.hout[i] * geom.wout[i];
    uint64_t layer_total = 0;
    for (int g = 0; g < g_count; ++g) {
      // Outputs of this group that anything downstream still reads.
      int needed = 0;
      for (int oc = 0; oc < cpg; ++oc) {
        const int o = g * cpg + oc;
        bool used = true;
        if (with_skip && i + 1 < layers) {
          used = false;
          const int g_next = cfg.groups[i + 1];
          for (int gn = 0; gn < g_next && !used; ++gn)
            used = gates[i + 1][static_cast<size_t>(gn) * cout + o] != 0.0;
        }
        if (used) ++needed;
      }
      int selected = 0;
      for (int c = 0; c < cin; ++c)
        if (gates[i][static_cast<size_t>(g) * cin + c] != 0.0) ++selected;
      layer_total += per_pair * static_cast<uint64_t>(selected) * needed;
    }
    if (per_layer) (*per_layer)[i] = layer_total;
    total += layer_total;
  }
  return total;
}

}  // namespace testutil
