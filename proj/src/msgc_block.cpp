#include "msgc/msgc_block.hpp"

#include <cmath>
#include <cstring>

#include "msgc/gemm.hpp"
#include "msgc/parallel.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Group filter bank
// ---------------------------------------------------------------------------

void GroupFilterBank::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  for (int g = 0; g < group_count(); ++g) {
    Tensor4& t = w[g];
    out.push_back({prefix + ".g" + std::to_string(g) + ".w", t.v.data(),
                   gw[g].v.data(), t.size(),
                   {uint32_t(t.d[0]), uint32_t(t.d[1]), uint32_t(t.d[2]), uint32_t(t.d[3])},
                   ParamGroup::backbone});
  }
}

GroupFilterBank plug_in(const Tensor4& full, int groups, int stride, int pad) {
  require(groups >= 1, ErrorCode::config, "group count must be positive");
  const int k = full.d[0], cin = full.d[2], cout = full.d[3];
  require(full.d[0] == full.d[1], ErrorCode::config, "kernels must be square");
  require(cout % groups == 0, ErrorCode::config,
          "group count " + std::to_string(groups) + " does not divide " +
              std::to_string(cout) + " filters");
  const int coutg = cout / groups;
  GroupFilterBank bank;
  bank.stride = stride;
  bank.pad = pad;
  bank.w.reserve(groups);
  for (int g = 0; g < groups; ++g) {
    Tensor4 t(k, k, cin, coutg);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < coutg; ++co)
            t.at(ky, kx, ci, co) = full.at(ky, kx, ci, g * coutg + co);
    bank.w.push_back(std::move(t));
    bank.gw.emplace_back(k, k, cin, coutg);
  }
  return bank;
}

Tensor4 bank_concat(const GroupFilterBank& bank) {
  const int k = bank.kernel(), cin = bank.cin(), coutg = bank.cout_per_group();
  const int g_count = bank.group_count();
  Tensor4 full(k, k, cin, g_count * coutg);
  for (int g = 0; g < g_count; ++g)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < coutg; ++co)
            full.at(ky, kx, ci, g * coutg + co) = bank.w[g].at(ky, kx, ci, co);
  return full;
}

// ---------------------------------------------------------------------------
// Gated grouped convolution.  The scale multiplies, for each sample, every
// weight of group g that reads input channel c by scale[n][g*Cin + c]; this
// is algebraically identical to scaling that group's view of the input.
// ---------------------------------------------------------------------------

namespace {

thread_local std::vector<double> tl_col;
thread_local std::vector<double> tl_wmat;
thread_local std::vector<double> tl_gcol;

// Dense [Cout x Cin*k*k] row matrix of the whole bank (group-major rows).
std::vector<double> bank_rows(const GroupFilterBank& bank) {
  const int k = bank.kernel(), cin = bank.cin(), coutg = bank.cout_per_group();
  const int g_count = bank.group_count();
  const int r_len = cin * k * k;
  std::vector<double> wmat(static_cast<size_t>(g_count) * coutg * r_len);
  for (int g = 0; g < g_count; ++g)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int ci = 0; ci < cin; ++ci) {
          int r = (ci * k + ky) * k + kx;
          const Tensor4& t = bank.w[g];
          const double* src = &t.v[((static_cast<size_t>(ky) * k + kx) * cin + ci) * coutg];
          for (int co = 0; co < coutg; ++co)
            wmat[(static_cast<size_t>(g) * coutg + co) * r_len + r] = src[co];
        }
  return wmat;
}

// Applies one sample's scale row to the dense weight matrix.
void scale_rows(const std::vector<double>& wmat, const double* scale_row, int g_count,
                int coutg, int cin, int k, double* out) {
  const int r_len = cin * k * k;
  const int kk = k * k;
  for (int g = 0; g < g_count; ++g)
    for (int co = 0; co < coutg; ++co) {
      const size_t row = static_cast<size_t>(g) * coutg + co;
      const double* src = wmat.data() + row * r_len;
      double* dst = out + row * r_len;
      for (int ci = 0; ci < cin; ++ci) {
        const double s = scale_row[g * cin + ci];
        const double* sp = src + static_cast<size_t>(ci) * kk;
        double* dp = dst + static_cast<size_t>(ci) * kk;
        for (int t = 0; t < kk; ++t) dp[t] = sp[t] * s;
      }
    }
}

void check_gated_args(const Tensor4& x, const GroupFilterBank& bank, const Tensor2* scale) {
  require(bank.group_count() >= 1, ErrorCode::config, "empty filter bank");
  require(x.d[1] == bank.cin(), ErrorCode::config,
          "input channels " + std::to_string(x.d[1]) + " do not match bank channels " +
              std::to_string(bank.cin()));
  for (const Tensor4& t : bank.w)
    require(t.d[0] == bank.kernel() && t.d[2] == bank.cin() && t.d[3] == bank.cout_per_group(),
            ErrorCode::config, "inconsistent filter bank shapes");
  if (scale)
    require(scale->rows == x.d[0] && scale->cols == bank.group_count() * bank.cin(),
            ErrorCode::config, "scale shape does not match batch and bank");
}

}  // namespace

Tensor4 gated_group_conv_fwd(const Tensor4& x, const GroupFilterBank& bank,
                             const Tensor2* scale) {
  check_gated_args(x, bank, scale);
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int k = bank.kernel(), g_count = bank.group_count(), coutg = bank.cout_per_group();
  const int cout = g_count * coutg;
  const int hout = conv_out_dim(h, k, bank.stride, bank.pad);
  const int wout = conv_out_dim(wd, k, bank.stride, bank.pad);
  const int r_len = cin * k * k;
  const size_t p_len = static_cast<size_t>(hout) * wout;

  const std::vector<double> wmat = bank_rows(bank);
  Tensor4 y(n, cout, hout, wout);
  parallel_for(n, [&](int i) {
    tl_col.resize(static_cast<size_t>(r_len) * p_len);
    const double* xi = &x.v[static_cast<size_t>(i) * cin * h * wd];
    im2col(xi, cin, h, wd, k, bank.stride, bank.pad, hout, wout, tl_col.data());
    const double* w_use = wmat.data();
    if (scale) {
      tl_wmat.resize(wmat.size());
      scale_rows(wmat, scale->row(i), g_count, coutg, cin, k, tl_wmat.data());
      w_use = tl_wmat.data();
    }
    gemm(w_use, tl_col.data(), &y.v[static_cast<size_t>(i) * cout * p_len], cout, r_len,
         static_cast<int>(p_len));
  });
  return y;
}

GatedConvGrads gated_group_conv_bwd(const Tensor4& gy, const Tensor4& x,
                                    GroupFilterBank& bank, const Tensor2* scale) {
  check_gated_args(x, bank, scale);
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int k = bank.kernel(), g_count = bank.group_count(), coutg = bank.cout_per_group();
  const int cout = g_count * coutg;
  const int hout = conv_out_dim(h, k, bank.stride, bank.pad);
  const int wout = conv_out_dim(wd, k, bank.stride, bank.pad);
  require(gy.d[0] == n && gy.d[1] == cout && gy.d[2] == hout && gy.d[3] == wout,
          ErrorCode::config, "upstream gradient shape mismatch " + shape_str(gy));
  const int r_len = cin * k * k;
  const int kk = k * k;
  const size_t p_len = static_cast<size_t>(hout) * wout;

  const std::vector<double> wmat = bank_rows(bank);
  GatedConvGrads out;
  out.gx = Tensor4(n, cin, h, wd);
  if (scale) out.gscale = Tensor2(n, g_count * cin);

  // d(loss)/d(scaled weight rows), one slab per sample; the serial reduction
  // below keeps weight gradients independent of the worker count.
  std::vector<double> slab(static_cast<size_t>(n) * cout * r_len);
  parallel_for(n, [&](int i) {
    tl_col.resize(static_cast<size_t>(r_len) * p_len);
    const double* xi = &x.v[static_cast<size_t>(i) * cin * h * wd];
    im2col(xi, cin, h, wd, k, bank.stride, bank.pad, hout, wout, tl_col.data());
    const double* gyi = &gy.v[static_cast<size_t>(i) * cout * p_len];
    double* gwmat = slab.data() + static_cast<size_t>(i) * cout * r_len;
    gemm_abt(gyi, tl_col.data(), gwmat, cout, static_cast<int>(p_len), r_len);

    const double* w_use = wmat.data();
    if (scale) {
      tl_wmat.resize(wmat.size());
      scale_rows(wmat, scale->row(i), g_count, coutg, cin, k, tl_wmat.data());
      w_use = tl_wmat.data();
    }
    tl_gcol.resize(static_cast<size_t>(r_len) * p_len);
    gemm_atb(w_use, gyi, tl_gcol.data(), r_len, cout, static_cast<int>(p_len));
    col2im(tl_gcol.data(), cin, h, wd, k, bank.stride, bank.pad, hout, wout,
           &out.gx.v[static_cast<size_t>(i) * cin * h * wd]);

    if (scale) {
      // d/d scale[g][ci] = sum over that group's filters and taps of
      // gwmat * unscaled weight.
      double* gs = out.gscale.row(i);
      for (int g = 0; g < g_count; ++g)
        for (int co = 0; co < coutg; ++co) {
          const size_t row = static_cast<size_t>(g) * coutg + co;
          const double* gm = gwmat + row * r_len;
          const double* wm = wmat.data() + row * r_len;
          for (int ci = 0; ci < cin; ++ci) {
            double s = 0.0;
            for (int t = 0; t < kk; ++t)
              s += gm[static_cast<size_t>(ci) * kk + t] * wm[static_cast<size_t>(ci) * kk + t];
            gs[g * cin + ci] += s;
          }
        }
    }
  });

  for (int i = 0; i < n; ++i) {
    const double* gwmat = slab.data() + static_cast<size_t>(i) * cout * r_len;
    const double* srow = scale ? scale->row(i) : nullptr;
    for (int g = 0; g < g_count; ++g) {
      Tensor4& gwg = bank.gw[g];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
          for (int ci = 0; ci < cin; ++ci) {
            const int r = (ci * k + ky) * k + kx;
            const double sc = srow ? srow[g * cin + ci] : 1.0;
            double* dst = &gwg.v[((static_cast<size_t>(ky) * k + kx) * cin + ci) * coutg];
            for (int co = 0; co < coutg; ++co)
              dst[co] += sc * gwmat[(static_cast<size_t>(g) * coutg + co) * r_len + r];
          }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask generator MLP
// ---------------------------------------------------------------------------

void MaskMlp::init(int in_features, int hidden, int g, int c, double bias_init, Rng& rng) {
  groups = g;
  channels = c;
  w1 = Tensor2(in_features, hidden);
  g_w1 = Tensor2(in_features, hidden);
  he_normal(w1, rng, in_features);
  bn.init(hidden);
  w2 = Tensor2(hidden, g * c);
  g_w2 = Tensor2(hidden, g * c);
  he_normal(w2, rng, hidden);
  b2.assign(static_cast<size_t>(g) * c, bias_init);
  g_b2.assign(static_cast<size_t>(g) * c, 0.0);
}

Tensor2 MaskMlp::forward(const Tensor2& pooled, bool train, MaskMlpCache* cache) {
  Tensor2 h = linear_fwd(pooled, w1, nullptr);
  MaskMlpCache local;
  MaskMlpCache& c = cache ? *cache : local;
  Tensor2 hb = bn.forward(h, train, &c.bn);
  Tensor2 ha = relu(hb);
  Tensor2 s = linear_fwd(ha, w2, &b2);
  if (cache) {
    c.in = pooled;
    c.h = std::move(h);
    c.hb = std::move(hb);
    c.ha = std::move(ha);
  }
  return s;
}

Tensor2 MaskMlp::backward(const Tensor2& gs, const MaskMlpCache& cache) {
  LinearGrads g2 = linear_bwd(gs, cache.ha, w2, true);
  for (size_t i = 0; i < g_w2.v.size(); ++i) g_w2.v[i] += g2.gw.v[i];
  for (size_t i = 0; i < g_b2.size(); ++i) g_b2[i] += g2.gbias[i];
  Tensor2 ghb = relu_bwd(g2.gx, cache.hb);
  Tensor2 gh = bn.backward(ghb, cache.bn, cache.hb.rows, cache.hb.cols);
  LinearGrads g1 = linear_bwd(gh, cache.in, w1, false);
  for (size_t i = 0; i < g_w1.v.size(); ++i) g_w1.v[i] += g1.gw.v[i];
  return std::move(g1.gx);
}

void MaskMlp::zero_grad() {
  std::fill(g_w1.v.begin(), g_w1.v.end(), 0.0);
  std::fill(g_w2.v.begin(), g_w2.v.end(), 0.0);
  std::fill(g_b2.begin(), g_b2.end(), 0.0);
  bn.zero_grad();
}

void MaskMlp::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w1", w1.v.data(), g_w1.v.data(), w1.size(),
                 {uint32_t(w1.rows), uint32_t(w1.cols)}, ParamGroup::mask_mlp});
  bn.collect(prefix + ".bn", ParamGroup::mask_mlp, out);
  out.push_back({prefix + ".w2", w2.v.data(), g_w2.v.data(), w2.size(),
                 {uint32_t(w2.rows), uint32_t(w2.cols)}, ParamGroup::mask_mlp});
  out.push_back({prefix + ".b2", b2.data(), g_b2.data(), b2.size(),
                 {uint32_t(b2.size())}, ParamGroup::mask_mlp});
}

void MaskMlp::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  bn.collect_buffers(prefix + ".bn", out);
}

uint64_t MaskMlp::mac_count() const {
  return static_cast<uint64_t>(w1.rows) * w1.cols +
         static_cast<uint64_t>(w2.rows) * w2.cols;
}

// ---------------------------------------------------------------------------
// Configuration and geometry
// ---------------------------------------------------------------------------

int MsgcBlockConfig::total_stride() const {
  int s = 1;
  for (int v : strides) s *= v;
  return s;
}

void MsgcBlockConfig::validate() const {
  const int m = layer_count();
  require(m >= 1, ErrorCode::config, "a block needs at least one layer");
  require(static_cast<int>(channels.size()) == m + 1, ErrorCode::config,
          "channel list must have one entry per layer plus the input width");
  require(static_cast<int>(kernels.size()) == m && static_cast<int>(strides.size()) == m &&
              static_cast<int>(pads.size()) == m && static_cast<int>(attention.size()) == m,
          ErrorCode::config, "per-layer lists must all have one entry per layer");
  for (int c : channels)
    require(c >= 1, ErrorCode::config, "channel widths must be positive");
  for (int i = 0; i < m; ++i) {
    require(groups[i] >= 1 && groups[i] <= channels[i], ErrorCode::config,
            "layer " + std::to_string(i + 1) + ": group count must lie in [1, " +
                std::to_string(channels[i]) + "]");
    require(channels[i + 1] % groups[i] == 0, ErrorCode::config,
            "layer " + std::to_string(i + 1) + ": group count " +
                std::to_string(groups[i]) + " must divide " +
                std::to_string(channels[i + 1]) + " filters");
    require(kernels[i] >= 1 && strides[i] >= 1 && pads[i] >= 0, ErrorCode::config,
            "invalid kernel geometry");
  }
  require(reduction >= 1, ErrorCode::config, "reduction factor must be positive");
  require(temperature > 0.0, ErrorCode::config, "temperature must be positive");
}

MsgcBlockConfig MsgcBlockConfig::basic(int cin, int cout, int stride,
                                       const std::vector<int>& layer_groups,
                                       const std::vector<bool>& layer_attention,
                                       int reduction, double temperature) {
  require(layer_groups.size() == 2 && layer_attention.size() == 2, ErrorCode::config,
          "a basic block has exactly two layers");
  MsgcBlockConfig c;
  c.channels = {cin, cout, cout};
  c.groups = layer_groups;
  c.kernels = {3, 3};
  c.strides = {stride, 1};
  c.pads = {1, 1};
  c.attention = layer_attention;
  c.reduction = reduction;
  c.temperature = temperature;
  c.shortcut_projection = (stride != 1 || cin != cout);
  c.final_relu = true;
  c.validate();
  return c;
}

BlockGeometry block_geometry(const MsgcBlockConfig& cfg, int h, int w) {
  BlockGeometry g;
  int ch = h, cw = w;
  for (int i = 0; i < cfg.layer_count(); ++i) {
    ch = conv_out_dim(ch, cfg.kernels[i], cfg.strides[i], cfg.pads[i]);
    cw = conv_out_dim(cw, cfg.kernels[i], cfg.strides[i], cfg.pads[i]);
    require(ch >= 1 && cw >= 1, ErrorCode::config, "layer output collapsed to zero size");
    g.hout.push_back(ch);
    g.wout.push_back(cw);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Multiply counts
// ---------------------------------------------------------------------------

namespace {

// Fraction (or 0/1 flag) of layer i's output channel o being needed. The last
// layer feeds the block output, so everything it produces is needed; earlier
// layers only compute channels that at least one group downstream reads.
inline double needed(const MsgcBlockConfig& cfg, const std::vector<const double*>& gates,
                     int layer, int o, bool with_skip) {
  const int m = cfg.layer_count();
  if (!with_skip || layer == m - 1) return 1.0;
  const int g_next = cfg.groups[layer + 1];
  const int c_next = cfg.channels[layer + 1];
  double prod = 1.0;
  for (int g = 0; g < g_next; ++g) prod *= 1.0 - gates[layer + 1][g * c_next + o];
  return 1.0 - prod;
}

}  // namespace

double gated_macs_value(const MsgcBlockConfig& cfg, const BlockGeometry& geom,
                        const std::vector<const double*>& gates, bool with_skip,
                        std::vector<double>* per_layer) {
  const int m = cfg.layer_count();
  require(static_cast<int>(gates.size()) == m, ErrorCode::config,
          "one gate row per layer required");
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const int g_count = cfg.groups[i], c_in = cfg.channels[i];
    const int coutg = cfg.channels[i + 1] / g_count;
    const double kappa = static_cast<double>(cfg.kernels[i]) * cfg.kernels[i] *
                         geom.hout[i] * geom.wout[i];
    double layer_total = 0.0;
    for (int g = 0; g < g_count; ++g) {
      double u = 0.0;
      for (int c = 0; c < c_in; ++c) u += gates[i][g * c_in + c];
      double f = 0.0;
      for (int ol = 0; ol < coutg; ++ol)
        f += needed(cfg, gates, i, g * coutg + ol, with_skip);
      layer_total += u * f;
    }
    layer_total *= kappa;
    if (per_layer) per_layer->push_back(layer_total);
    total += layer_total;
  }
  return total;
}

void gated_macs_grad(const MsgcBlockConfig& cfg, const BlockGeometry& geom,
                     const std::vector<const double*>& gates, double coeff,
                     const std::vector<double*>& ggates) {
  const int m = cfg.layer_count();
  require(static_cast<int>(gates.size()) == m && static_cast<int>(ggates.size()) == m,
          ErrorCode::config, "one gate row per layer required");
  for (int i = 0; i < m; ++i) {
    const int g_count = cfg.groups[i], c_in = cfg.channels[i];
    const int coutg = cfg.channels[i + 1] / g_count;
    const double kappa = static_cast<double>(cfg.kernels[i]) * cfg.kernels[i] *
                         geom.hout[i] * geom.wout[i];
    // Selecting one more input channel of group g costs kappa per needed
    // output of that group.
    for (int g = 0; g < g_count; ++g) {
      double f = 0.0;
      for (int ol = 0; ol < coutg; ++ol)
        f += needed(cfg, gates, i, g * coutg + ol, true);
      const double d = coeff * kappa * f;
      for (int c = 0; c < c_in; ++c) ggates[i][g * c_in + c] += d;
    }
    // A gate of layer i+1 also decides whether layer i computes that channel
    // at all: it adds kappa * u_i(producer group) when no other group of
    // layer i+1 reads the channel.
    if (i + 1 < m) {
      const int g_next = cfg.groups[i + 1];
      const int c_next = cfg.channels[i + 1];
      std::vector<double> u(g_count, 0.0);
      for (int g = 0; g < g_count; ++g)
        for (int c = 0; c < c_in; ++c) u[g] += gates[i][g * c_in + c];
      for (int o = 0; o < c_next; ++o) {
        const double u_prod = u[o / coutg];
        for (int h = 0; h < g_next; ++h) {
          double others = 1.0;
          for (int g = 0; g < g_next; ++g)
            if (g != h) others *= 1.0 - gates[i + 1][g * c_next + o];
          ggates[i + 1][h * c_next + o] += coeff * kappa * u_prod * others;
        }
      }
    }
  }
}

uint64_t layer_full_macs(const MsgcBlockConfig& cfg, const BlockGeometry& geom, int layer) {
  return static_cast<uint64_t>(cfg.kernels[layer]) * cfg.kernels[layer] *
         geom.hout[layer] * geom.wout[layer] * cfg.channels[layer] *
         cfg.channels[layer + 1];
}

uint64_t block_full_macs(const MsgcBlockConfig& cfg, const BlockGeometry& geom) {
  uint64_t total = 0;
  for (int i = 0; i < cfg.layer_count(); ++i) total += layer_full_macs(cfg, geom, i);
  return total;
}

uint64_t block_mask_mlp_macs(const MsgcBlockConfig& cfg) {
  const uint64_t c1 = cfg.channels[0];
  const uint64_t hid = cfg.hidden();
  uint64_t total = 0;
  for (int i = 0; i < cfg.layer_count(); ++i) {
    const uint64_t one = c1 * hid + hid * cfg.groups[i] * cfg.channels[i];
    total += one;
    if (cfg.attention[i]) total += one;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Gate noise
// ---------------------------------------------------------------------------

void fill_gate_noise(uint64_t sample_seed, int stream_id, int layer, int count,
                     double* out) {
  const uint64_t tag = 0x6d736763ull + static_cast<uint64_t>(stream_id) * 131ull +
                       static_cast<uint64_t>(layer);
  Rng rng(splitmix64(sample_seed ^ splitmix64(tag)));
  for (int j = 0; j < count; ++j) out[j] = logistic_noise(rng);
}

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

void MsgcBlock::init(const MsgcBlockConfig& c, int stream, Rng& rng) {
  c.validate();
  cfg = c;
  stream_id = stream;
  const int m = cfg.layer_count();
  banks.clear();
  bns.assign(m, {});
  gate_mlps.assign(m, {});
  attn_mlps.assign(m, {});
  for (int i = 0; i < m; ++i) {
    Tensor4 dense(cfg.kernels[i], cfg.kernels[i], cfg.channels[i], cfg.channels[i + 1]);
    he_normal(dense, rng, cfg.kernels[i] * cfg.kernels[i] * cfg.channels[i]);
    banks.push_back(plug_in(dense, cfg.groups[i], cfg.strides[i], cfg.pads[i]));
    bns[i].init(cfg.channels[i + 1]);
    gate_mlps[i].init(cfg.channels[0], cfg.hidden(), cfg.groups[i], cfg.channels[i],
                      cfg.gate_bias_init, rng);
    if (cfg.attention[i]) {
      attn_mlps[i].emplace();
      attn_mlps[i]->init(cfg.channels[0], cfg.hidden(), cfg.groups[i], cfg.channels[i],
                         cfg.attn_bias_init, rng);
    }
  }
  if (cfg.shortcut_projection) {
    sc_conv.emplace();
    sc_conv->init(1, cfg.channels[0], cfg.channels[m], cfg.total_stride(), 0, rng);
    sc_bn.emplace();
    sc_bn->init(cfg.channels[m]);
  } else {
    require(cfg.total_stride() == 1 && cfg.channels[0] == cfg.channels[m],
            ErrorCode::config, "identity shortcut requires matching input and output");
    sc_conv.reset();
    sc_bn.reset();
  }
}

Tensor4 MsgcBlock::forward(const Tensor4& x, bool train, GateMode mode,
                           const std::vector<uint64_t>* noise_seeds,
                           MsgcBlockCache* cache, std::vector<SampleMacs>* macs) {
  require(x.d[1] == cfg.channels[0], ErrorCode::config,
          "block input width " + std::to_string(x.d[1]) + " does not match " +
              std::to_string(cfg.channels[0]));
  const int n = x.d[0];
  const int m = cfg.layer_count();
  const bool gates_stochastic = (mode == GateMode::train_hard || mode == GateMode::train_soft);
  if (gates_stochastic)
    require(noise_seeds && static_cast<int>(noise_seeds->size()) == n, ErrorCode::config,
            "training gate modes need one noise seed per sample");
  if (macs)
    require(static_cast<int>(macs->size()) == n, ErrorCode::config,
            "one ledger entry per sample required");

  if (cache) {
    cache->layers.assign(m, {});
    cache->in_dims = x.d;
    cache->train = train;
    cache->mode = mode;
  }

  Tensor2 pooled = global_avg_pool(x);
  std::vector<Tensor2> gate_store(m);

  Tensor4 cur = x;
  for (int i = 0; i < m; ++i) {
    const int gc = cfg.groups[i] * cfg.channels[i];
    MsgcBlockCache::Layer* L = cache ? &cache->layers[i] : nullptr;

    Tensor2 gate;
    Tensor2 attn_val;
    bool has_attn = cfg.attention[i];
    if (mode == GateMode::force_all_on) {
      gate = Tensor2(n, gc);
      std::fill(gate.v.begin(), gate.v.end(), 1.0);
      has_attn = false;  // attention bypassed: scale stays exactly one
    } else {
      Tensor2 s = gate_mlps[i].forward(pooled, train, L ? &L->gate_mlp : nullptr);
      if (mode == GateMode::eval) {
        gate = binarize_eval(s);
      } else {
        Tensor2 noise(n, gc);
        for (int r = 0; r < n; ++r)
          fill_gate_noise((*noise_seeds)[r], stream_id, i, gc, noise.row(r));
        TrainGate tg = binarize_train(s, noise, cfg.temperature);
        gate = (mode == GateMode::train_hard) ? std::move(tg.hard) : tg.soft;
        if (L) L->soft = std::move(tg.soft);
      }
      if (L) L->s = std::move(s);
      if (has_attn) {
        Tensor2 araw = attn_mlps[i]->forward(pooled, train, L ? &L->attn_mlp : nullptr);
        attn_val = sigmoid(araw);
        if (L) L->attn_raw = std::move(araw);
      }
    }

    Tensor2 scale = gate;
    if (has_attn)
      for (size_t t = 0; t < scale.v.size(); ++t) scale.v[t] *= attn_val.v[t];

    Tensor4 conv_out = gated_group_conv_fwd(cur, banks[i], &scale);
    Tensor4 bn_out = bns[i].forward(conv_out, train, L ? &L->bn : nullptr);
    if (L) {
      L->conv_out_dims = conv_out.d;
      L->conv_in = std::move(cur);
      L->gate = gate;
      L->scale = std::move(scale);
      if (has_attn) L->attn = std::move(attn_val);
    }
    gate_store[i] = std::move(gate);

    if (i < m - 1) {
      Tensor4 nxt = relu(bn_out);
      if (L) L->bn_out = std::move(bn_out);
      cur = std::move(nxt);
    } else {
      cur = std::move(bn_out);
    }
  }

  Tensor4 sc;
  if (sc_conv) {
    const Tensor4& x_in = cache ? cache->layers[0].conv_in : x;
    Tensor4 sc_raw = sc_conv->forward(x_in);
    sc = sc_bn->forward(sc_raw, train, cache ? &cache->sc_bn : nullptr);
    if (cache) cache->sc_out_dims = sc_raw.d;
  } else {
    sc = cache ? cache->layers[0].conv_in : x;
  }
  require(sc.d == cur.d, ErrorCode::config, "shortcut and main path shapes differ");
  for (size_t t = 0; t < cur.v.size(); ++t) cur.v[t] += sc.v[t];

  if (cfg.final_relu) {
    if (cache) cache->sum_pre_relu = cur;
    cur = relu(cur);
  }

  if (macs) {
    const BlockGeometry geom = block_geometry(cfg, x.d[2], x.d[3]);
    for (int r = 0; r < n; ++r) {
      std::vector<const double*> rows(m);
      for (int i = 0; i < m; ++i) rows[i] = gate_store[i].row(r);
      std::vector<double> per_layer;
      const double dyn = gated_macs_value(cfg, geom, rows, true, &per_layer);
      const double dyn_ns = gated_macs_value(cfg, geom, rows, false, nullptr);
      SampleMacs& sm = (*macs)[r];
      sm.dynamic += dyn;
      sm.dynamic_no_skip += dyn_ns;
      for (double pl : per_layer) sm.per_layer.push_back(pl);
    }
  }

  if (cache) cache->pooled = std::move(pooled);
  return cur;
}

Tensor4 MsgcBlock::backward(const Tensor4& gy, const MsgcBlockCache& cache,
                            const std::vector<double>* mac_coeff) {
  require(cache.mode == GateMode::train_hard || cache.mode == GateMode::train_soft,
          ErrorCode::config, "backward needs a cache from a training gate mode");
  const int m = cfg.layer_count();
  const int n = cache.in_dims[0];
  if (mac_coeff)
    require(static_cast<int>(mac_coeff->size()) == n, ErrorCode::config,
            "one budget coefficient per sample required");

  Tensor4 g = gy;
  if (cfg.final_relu) g = relu_bwd(g, cache.sum_pre_relu);

  // Budget pressure on the gates; the skip rule couples adjacent layers, so
  // this runs over whole-sample gate rows before the layer walk.
  std::vector<Tensor2> ggate_budget(m);
  for (int i = 0; i < m; ++i)
    ggate_budget[i] = Tensor2(n, cfg.groups[i] * cfg.channels[i]);
  if (mac_coeff) {
    const BlockGeometry geom = block_geometry(cfg, cache.in_dims[2], cache.in_dims[3]);
    for (int r = 0; r < n; ++r) {
      if ((*mac_coeff)[r] == 0.0) continue;
      std::vector<const double*> rows(m);
      std::vector<double*> grows(m);
      for (int i = 0; i < m; ++i) {
        rows[i] = cache.layers[i].gate.row(r);
        grows[i] = ggate_budget[i].row(r);
      }
      gated_macs_grad(cfg, geom, rows, (*mac_coeff)[r], grows);
    }
  }

  // Shortcut branch.
  Tensor4 gx_total;
  if (sc_conv) {
    Tensor4 gsc = sc_bn->backward(g, cache.sc_bn, cache.sc_out_dims);
    gx_total = sc_conv->backward(gsc, cache.layers[0].conv_in);
  } else {
    gx_total = g;
  }

  // Main chain.
  Tensor2 gpooled(n, cfg.channels[0]);
  Tensor4 gcur = std::move(g);
  for (int i = m - 1; i >= 0; --i) {
    const MsgcBlockCache::Layer& L = cache.layers[i];
    Tensor4 gconv = bns[i].backward(gcur, L.bn, L.conv_out_dims);
    GatedConvGrads cg = gated_group_conv_bwd(gconv, L.conv_in, banks[i], &L.scale);

    // scale = gate * attention. Route the scale gradient to both factors and
    // add the budget term on the gate.
    Tensor2 ggate = std::move(cg.gscale);
    Tensor2 gattn;
    const bool has_attn = static_cast<bool>(attn_mlps[i]) && L.attn.size() > 0;
    if (has_attn) {
      gattn = Tensor2(ggate.rows, ggate.cols);
      for (size_t t = 0; t < ggate.v.size(); ++t) {
        gattn.v[t] = ggate.v[t] * L.gate.v[t];
        ggate.v[t] *= L.attn.v[t];
      }
    }
    for (size_t t = 0; t < ggate.v.size(); ++t) ggate.v[t] += ggate_budget[i].v[t];

    // Straight-through: the hard gate passes gradients as if it were the
    // smooth probability, which then differentiates through the saliency.
    Tensor2 gs = binarize_train_bwd(ggate, L.soft, cfg.temperature);
    Tensor2 gp1 = gate_mlps[i].backward(gs, L.gate_mlp);
    for (size_t t = 0; t < gpooled.v.size(); ++t) gpooled.v[t] += gp1.v[t];
    if (has_attn) {
      Tensor2 garaw = sigmoid_bwd(gattn, L.attn);
      Tensor2 gp2 = attn_mlps[i]->backward(garaw, L.attn_mlp);
      for (size_t t = 0; t < gpooled.v.size(); ++t) gpooled.v[t] += gp2.v[t];
    }

    if (i > 0) {
      gcur = relu_bwd(cg.gx, cache.layers[i - 1].bn_out);
    } else {
      for (size_t t = 0; t < gx_total.v.size(); ++t) gx_total.v[t] += cg.gx.v[t];
    }
  }

  Tensor4 gpool4 = global_avg_pool_bwd(gpooled, cache.in_dims[2], cache.in_dims[3]);
  for (size_t t = 0; t < gx_total.v.size(); ++t) gx_total.v[t] += gpool4.v[t];
  return gx_total;
}

void MsgcBlock::zero_grad() {
  for (auto& b : banks) b.zero_grad();
  for (auto& b : bns) b.zero_grad();
  for (auto& g : gate_mlps) g.zero_grad();
  for (auto& a : attn_mlps)
    if (a) a->zero_grad();
  if (sc_conv) sc_conv->zero_grad();
  if (sc_bn) sc_bn->zero_grad();
}

void MsgcBlock::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  for (int i = 0; i < cfg.layer_count(); ++i) {
    banks[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
    bns[i].collect(prefix + ".bn" + std::to_string(i + 1), ParamGroup::backbone, out);
    gate_mlps[i].collect(prefix + ".gate" + std::to_string(i + 1), out);
    if (attn_mlps[i]) attn_mlps[i]->collect(prefix + ".attn" + std::to_string(i + 1), out);
  }
  if (sc_conv) sc_conv->collect(prefix + ".sc_conv", ParamGroup::backbone, out);
  if (sc_bn) sc_bn->collect(prefix + ".sc_bn", ParamGroup::backbone, out);
}

void MsgcBlock::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  for (int i = 0; i < cfg.layer_count(); ++i) {
    bns[i].collect_buffers(prefix + ".bn" + std::to_string(i + 1), out);
    gate_mlps[i].collect_buffers(prefix + ".gate" + std::to_string(i + 1), out);
    if (attn_mlps[i])
      attn_mlps[i]->collect_buffers(prefix + ".attn" + std::to_string(i + 1), out);
  }
  if (sc_bn) sc_bn->collect_buffers(prefix + ".sc_bn", out);
}

}  // namespace msgc
