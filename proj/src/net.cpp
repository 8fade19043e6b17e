#include "msgc/net.hpp"

#include <algorithm>
#include <cmath>

#include "msgc/data.hpp"
#include "msgc/gemm.hpp"

namespace msgc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void NetConfig::validate() const {
  require(in_channels >= 1 && in_h >= 2 && in_w >= 2, ErrorCode::config,
          "input shape too small");
  require(stem_channels >= 1, ErrorCode::config, "stem width must be positive");
  require(!blocks.empty(), ErrorCode::config, "at least one block required");
  for (const BlockSpec& b : blocks)
    require(b.out_channels >= 1 && b.stride >= 1, ErrorCode::config,
            "block widths and strides must be positive");
  require(num_classes >= 2, ErrorCode::config, "at least two classes required");
  require(groups.size() == 2, ErrorCode::config,
          "the gating plan needs one group count per block layer (two)");
  for (int g : groups) require(g >= 1, ErrorCode::config, "group counts must be positive");
  for (int a : attention_layers)
    require(a >= 1 && a <= 2, ErrorCode::config,
            "attention layer indices must be 1 or 2");
  require(reduction >= 1, ErrorCode::config, "reduction factor must be positive");
  require(temperature > 0.0, ErrorCode::config, "temperature must be positive");
}

std::vector<bool> NetConfig::attention_flags() const {
  std::vector<bool> flags(groups.size(), false);
  for (int a : attention_layers) flags[a - 1] = true;
  return flags;
}

namespace {

MsgcBlockConfig block_config(const NetConfig& cfg, int cin, const BlockSpec& spec) {
  MsgcBlockConfig bc = MsgcBlockConfig::basic(cin, spec.out_channels, spec.stride,
                                              cfg.groups, cfg.attention_flags(),
                                              cfg.reduction, cfg.temperature);
  bc.gate_bias_init = cfg.gate_bias_init;
  bc.attn_bias_init = cfg.attn_bias_init;
  return bc;
}

struct NetGeometry {
  int stem_h = 0, stem_w = 0;
  std::vector<BlockGeometry> blocks;
  int feat_h = 0, feat_w = 0;
};

NetGeometry net_geometry(const NetConfig& cfg) {
  NetGeometry g;
  g.stem_h = conv_out_dim(cfg.in_h, 3, 1, 1);
  g.stem_w = conv_out_dim(cfg.in_w, 3, 1, 1);
  int h = g.stem_h, w = g.stem_w;
  int cin = cfg.stem_channels;
  for (const BlockSpec& b : cfg.blocks) {
    MsgcBlockConfig bc = block_config(cfg, cin, b);
    BlockGeometry bg = block_geometry(bc, h, w);
    h = bg.hout.back();
    w = bg.wout.back();
    cin = b.out_channels;
    g.blocks.push_back(std::move(bg));
  }
  g.feat_h = h;
  g.feat_w = w;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Plain block
// ---------------------------------------------------------------------------

void PlainBlock::init(int cin, int cout, int stride, Rng& rng) {
  conv1.init(3, cin, cout, stride, 1, rng);
  bn1.init(cout);
  conv2.init(3, cout, cout, 1, 1, rng);
  bn2.init(cout);
  if (stride != 1 || cin != cout) {
    sc_conv.emplace();
    sc_conv->init(1, cin, cout, stride, 0, rng);
    sc_bn.emplace();
    sc_bn->init(cout);
  }
}

Tensor4 PlainBlock::forward(const Tensor4& x, bool train, Cache* cache) {
  Tensor4 c1 = conv1.forward(x);
  Tensor4 y1 = bn1.forward(c1, train, cache ? &cache->bn1c : nullptr);
  Tensor4 a1 = relu(y1);
  Tensor4 c2 = conv2.forward(a1);
  Tensor4 y2 = bn2.forward(c2, train, cache ? &cache->bn2c : nullptr);
  Tensor4 sc;
  if (sc_conv) {
    Tensor4 s = sc_conv->forward(x);
    sc = sc_bn->forward(s, train, cache ? &cache->scc : nullptr);
    if (cache) cache->sc_dims = s.d;
  } else {
    sc = x;
  }
  require(sc.d == y2.d, ErrorCode::config, "shortcut and main path shapes differ");
  for (size_t t = 0; t < y2.v.size(); ++t) y2.v[t] += sc.v[t];
  if (cache) {
    cache->x = x;
    cache->c1_dims = c1.d;
    cache->c2_dims = c2.d;
    cache->y1_pre = std::move(y1);
    cache->sum_pre = y2;
  }
  return relu(y2);
}

Tensor4 PlainBlock::backward(const Tensor4& gy, const Cache& cache) {
  Tensor4 g = relu_bwd(gy, cache.sum_pre);
  Tensor4 gx;
  if (sc_conv) {
    Tensor4 gsc = sc_bn->backward(g, cache.scc, cache.sc_dims);
    gx = sc_conv->backward(gsc, cache.x);
  } else {
    gx = g;
  }
  Tensor4 gc2 = bn2.backward(g, cache.bn2c, cache.c2_dims);
  Tensor4 a1 = relu(cache.y1_pre);  // recomputed rather than cached
  Tensor4 ga1 = conv2.backward(gc2, a1);
  Tensor4 gy1 = relu_bwd(ga1, cache.y1_pre);
  Tensor4 gc1 = bn1.backward(gy1, cache.bn1c, cache.c1_dims);
  Tensor4 gx1 = conv1.backward(gc1, cache.x);
  for (size_t t = 0; t < gx.v.size(); ++t) gx.v[t] += gx1.v[t];
  return gx;
}

void PlainBlock::zero_grad() {
  conv1.zero_grad();
  conv2.zero_grad();
  bn1.zero_grad();
  bn2.zero_grad();
  if (sc_conv) sc_conv->zero_grad();
  if (sc_bn) sc_bn->zero_grad();
}

void PlainBlock::collect(const std::string& prefix, std::vector<ParamRef>& out) {
  conv1.collect(prefix + ".conv1", ParamGroup::backbone, out);
  bn1.collect(prefix + ".bn1", ParamGroup::backbone, out);
  conv2.collect(prefix + ".conv2", ParamGroup::backbone, out);
  bn2.collect(prefix + ".bn2", ParamGroup::backbone, out);
  if (sc_conv) sc_conv->collect(prefix + ".sc_conv", ParamGroup::backbone, out);
  if (sc_bn) sc_bn->collect(prefix + ".sc_bn", ParamGroup::backbone, out);
}

void PlainBlock::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
  if (sc_bn) sc_bn->collect_buffers(prefix + ".sc_bn", out);
}

// ---------------------------------------------------------------------------
// Plain network
// ---------------------------------------------------------------------------

void PlainNet::init(const NetConfig& c, Rng& rng) {
  c.validate();
  cfg = c;
  stem.init(3, cfg.in_channels, cfg.stem_channels, 1, 1, rng);
  stem_bn.init(cfg.stem_channels);
  blocks.assign(cfg.blocks.size(), {});
  int cin = cfg.stem_channels;
  for (size_t b = 0; b < cfg.blocks.size(); ++b) {
    blocks[b].init(cin, cfg.blocks[b].out_channels, cfg.blocks[b].stride, rng);
    cin = cfg.blocks[b].out_channels;
  }
  fc.init(cin, cfg.num_classes, rng);
}

Tensor2 PlainNet::forward(const Tensor4& x, bool train, Cache* cache) {
  require(x.d[1] == cfg.in_channels && x.d[2] == cfg.in_h && x.d[3] == cfg.in_w,
          ErrorCode::config, "input shape " + shape_str(x) + " does not match the model");
  Tensor4 s = stem.forward(x);
  Tensor4 sb = stem_bn.forward(s, train, cache ? &cache->stem_bnc : nullptr);
  Tensor4 cur = relu(sb);
  if (cache) {
    cache->x = x;
    cache->stem_dims = s.d;
    cache->stem_pre = std::move(sb);
    cache->blocks.assign(blocks.size(), {});
  }
  for (size_t b = 0; b < blocks.size(); ++b)
    cur = blocks[b].forward(cur, train, cache ? &cache->blocks[b] : nullptr);
  Tensor2 pooled = global_avg_pool(cur);
  if (cache) {
    cache->feat_hw = {cur.d[2], cur.d[3]};
    cache->pooled = pooled;
  }
  return fc.forward(pooled);
}

void PlainNet::backward(const Tensor2& glogits, const Cache& cache) {
  Tensor2 gpooled = fc.backward(glogits, cache.pooled);
  Tensor4 gcur = global_avg_pool_bwd(gpooled, cache.feat_hw[0], cache.feat_hw[1]);
  for (size_t b = blocks.size(); b-- > 0;)
    gcur = blocks[b].backward(gcur, cache.blocks[b]);
  Tensor4 gsb = relu_bwd(gcur, cache.stem_pre);
  Tensor4 gs = stem_bn.backward(gsb, cache.stem_bnc, cache.stem_dims);
  stem.backward(gs, cache.x);
}

void PlainNet::zero_grad() {
  stem.zero_grad();
  stem_bn.zero_grad();
  for (auto& b : blocks) b.zero_grad();
  fc.zero_grad();
}

std::vector<ParamRef> PlainNet::params() {
  std::vector<ParamRef> out;
  stem.collect("stem", ParamGroup::backbone, out);
  stem_bn.collect("stem_bn", ParamGroup::backbone, out);
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect("block" + std::to_string(b + 1), out);
  fc.collect("fc", ParamGroup::backbone, out);
  return out;
}

std::vector<BufferRef> PlainNet::buffers() {
  std::vector<BufferRef> out;
  stem_bn.collect_buffers("stem_bn", out);
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect_buffers("block" + std::to_string(b + 1), out);
  return out;
}

// ---------------------------------------------------------------------------
// Gated network
// ---------------------------------------------------------------------------

void MsgcNet::init(const NetConfig& c, Rng& rng) {
  c.validate();
  cfg = c;
  stem.init(3, cfg.in_channels, cfg.stem_channels, 1, 1, rng);
  stem_bn.init(cfg.stem_channels);
  blocks.assign(cfg.blocks.size(), {});
  int cin = cfg.stem_channels;
  for (size_t b = 0; b < cfg.blocks.size(); ++b) {
    blocks[b].init(block_config(cfg, cin, cfg.blocks[b]), static_cast<int>(b), rng);
    cin = cfg.blocks[b].out_channels;
  }
  fc.init(cin, cfg.num_classes, rng);
}

Tensor2 MsgcNet::forward(const Tensor4& x, bool train, GateMode gates,
                         const std::vector<uint64_t>* noise_seeds, Cache* cache,
                         std::vector<SampleMacs>* macs) {
  require(x.d[1] == cfg.in_channels && x.d[2] == cfg.in_h && x.d[3] == cfg.in_w,
          ErrorCode::config, "input shape " + shape_str(x) + " does not match the model");
  if (macs) {
    macs->assign(x.d[0], {});
  }
  Tensor4 s = stem.forward(x);
  Tensor4 sb = stem_bn.forward(s, train, cache ? &cache->stem_bnc : nullptr);
  Tensor4 cur = relu(sb);
  if (cache) {
    cache->x = x;
    cache->stem_dims = s.d;
    cache->stem_pre = std::move(sb);
    cache->blocks.assign(blocks.size(), {});
  }
  for (size_t b = 0; b < blocks.size(); ++b)
    cur = blocks[b].forward(cur, train, gates, noise_seeds,
                            cache ? &cache->blocks[b] : nullptr, macs);
  Tensor2 pooled = global_avg_pool(cur);
  if (cache) {
    cache->feat_hw = {cur.d[2], cur.d[3]};
    cache->pooled = pooled;
  }
  return fc.forward(pooled);
}

void MsgcNet::backward(const Tensor2& glogits, const Cache& cache,
                       const std::vector<double>* mac_coeff) {
  Tensor2 gpooled = fc.backward(glogits, cache.pooled);
  Tensor4 gcur = global_avg_pool_bwd(gpooled, cache.feat_hw[0], cache.feat_hw[1]);
  for (size_t b = blocks.size(); b-- > 0;)
    gcur = blocks[b].backward(gcur, cache.blocks[b], mac_coeff);
  Tensor4 gsb = relu_bwd(gcur, cache.stem_pre);
  Tensor4 gs = stem_bn.backward(gsb, cache.stem_bnc, cache.stem_dims);
  stem.backward(gs, cache.x);
}

void MsgcNet::zero_grad() {
  stem.zero_grad();
  stem_bn.zero_grad();
  for (auto& b : blocks) b.zero_grad();
  fc.zero_grad();
}

std::vector<ParamRef> MsgcNet::params() {
  std::vector<ParamRef> out;
  stem.collect("stem", ParamGroup::backbone, out);
  stem_bn.collect("stem_bn", ParamGroup::backbone, out);
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect("block" + std::to_string(b + 1), out);
  fc.collect("fc", ParamGroup::backbone, out);
  return out;
}

std::vector<BufferRef> MsgcNet::buffers() {
  std::vector<BufferRef> out;
  stem_bn.collect_buffers("stem_bn", out);
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect_buffers("block" + std::to_string(b + 1), out);
  return out;
}

// ---------------------------------------------------------------------------
// Conversion
// ---------------------------------------------------------------------------

MsgcNet convert_to_gated(const PlainNet& plain, Rng& rng) {
  MsgcNet net;
  net.init(plain.cfg, rng);  // fresh mask generators
  // Re-host the trained backbone weights unchanged.
  net.stem.w = plain.stem.w;
  net.stem_bn.gamma = plain.stem_bn.gamma;
  net.stem_bn.beta = plain.stem_bn.beta;
  net.stem_bn.run_mean = plain.stem_bn.run_mean;
  net.stem_bn.run_var = plain.stem_bn.run_var;
  for (size_t b = 0; b < plain.blocks.size(); ++b) {
    const PlainBlock& src = plain.blocks[b];
    MsgcBlock& dst = net.blocks[b];
    dst.banks[0] = plug_in(src.conv1.w, dst.cfg.groups[0], src.conv1.stride, src.conv1.pad);
    dst.banks[1] = plug_in(src.conv2.w, dst.cfg.groups[1], src.conv2.stride, src.conv2.pad);
    auto copy_bn = [](const BatchNorm& s, BatchNorm& d) {
      d.gamma = s.gamma;
      d.beta = s.beta;
      d.run_mean = s.run_mean;
      d.run_var = s.run_var;
    };
    copy_bn(src.bn1, dst.bns[0]);
    copy_bn(src.bn2, dst.bns[1]);
    if (src.sc_conv) {
      require(static_cast<bool>(dst.sc_conv), ErrorCode::config,
              "shortcut layout mismatch during conversion");
      dst.sc_conv->w = src.sc_conv->w;
      copy_bn(*src.sc_bn, *dst.sc_bn);
    }
  }
  net.fc.w = plain.fc.w;
  net.fc.b = plain.fc.b;
  return net;
}

// ---------------------------------------------------------------------------
// Static multiply accounting
// ---------------------------------------------------------------------------

NetMacReport net_mac_report(const NetConfig& cfg) {
  cfg.validate();
  NetGeometry geom = net_geometry(cfg);
  NetMacReport rep;
  const uint64_t stem_macs = 9ull * geom.stem_h * geom.stem_w * cfg.in_channels *
                             cfg.stem_channels;
  rep.fixed += stem_macs;
  rep.rows.push_back({"stem", stem_macs, false});
  int cin = cfg.stem_channels;
  for (size_t b = 0; b < cfg.blocks.size(); ++b) {
    MsgcBlockConfig bc = block_config(cfg, cin, cfg.blocks[b]);
    const BlockGeometry& bg = geom.blocks[b];
    const std::string prefix = "block" + std::to_string(b + 1);
    for (int i = 0; i < bc.layer_count(); ++i) {
      uint64_t full = layer_full_macs(bc, bg, i);
      rep.gated_full += full;
      rep.rows.push_back({prefix + ".conv" + std::to_string(i + 1), full, true});
    }
    if (bc.shortcut_projection) {
      uint64_t sc = static_cast<uint64_t>(bg.hout.back()) * bg.wout.back() *
                    bc.channels[0] * bc.channels.back();
      rep.fixed += sc;
      rep.rows.push_back({prefix + ".sc_conv", sc, false});
    }
    rep.mask_mlp += block_mask_mlp_macs(bc);
    cin = cfg.blocks[b].out_channels;
  }
  const uint64_t fc_macs = static_cast<uint64_t>(cin) * cfg.num_classes;
  rep.fixed += fc_macs;
  rep.rows.push_back({"classifier", fc_macs, false});
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kKindPlain = 0;
constexpr uint32_t kKindGated = 1;

NamedTensor meta_entry(const std::string& name, const std::vector<float>& vals) {
  NamedTensor e;
  e.name = name;
  e.dims = {static_cast<uint32_t>(vals.size())};
  e.data = vals;
  return e;
}

void append_meta(const NetConfig& cfg, bool gated, std::vector<NamedTensor>& out) {
  out.push_back(meta_entry("meta/kind", {gated ? float(kKindGated) : float(kKindPlain)}));
  out.push_back(meta_entry("meta/input", {float(cfg.in_channels), float(cfg.in_h), float(cfg.in_w)}));
  out.push_back(meta_entry("meta/stem", {float(cfg.stem_channels)}));
  std::vector<float> bl;
  for (const BlockSpec& b : cfg.blocks) {
    bl.push_back(float(b.out_channels));
    bl.push_back(float(b.stride));
  }
  out.push_back(meta_entry("meta/blocks", bl));
  out.push_back(meta_entry("meta/classes", {float(cfg.num_classes)}));
  if (gated) {
    std::vector<float> gr(cfg.groups.begin(), cfg.groups.end());
    out.push_back(meta_entry("meta/groups", gr));
    std::vector<float> at(cfg.attention_layers.begin(), cfg.attention_layers.end());
    out.push_back(meta_entry("meta/attention", at));
    out.push_back(meta_entry("meta/reduction", {float(cfg.reduction)}));
    out.push_back(meta_entry("meta/temperature", {float(cfg.temperature)}));
  }
}

const NamedTensor* find_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
  for (const NamedTensor& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

const NamedTensor& need_entry(const std::vector<NamedTensor>& entries, const std::string& name) {
  const NamedTensor* e = find_entry(entries, name);
  require(e != nullptr, ErrorCode::checkpoint_mismatch, "checkpoint lacks entry '" + name + "'");
  return *e;
}

void state_entries(std::vector<ParamRef> params, std::vector<BufferRef> bufs,
                   std::vector<NamedTensor>& out) {
  for (const ParamRef& p : params) {
    NamedTensor e;
    e.name = p.name;
    e.dims = p.dims;
    e.data.resize(p.size);
    for (size_t i = 0; i < p.size; ++i) e.data[i] = static_cast<float>(p.value[i]);
    out.push_back(std::move(e));
  }
  for (const BufferRef& b : bufs) {
    NamedTensor e;
    e.name = b.name;
    e.dims = b.dims;
    e.data.resize(b.size);
    for (size_t i = 0; i < b.size; ++i) e.data[i] = static_cast<float>(b.data[i]);
    out.push_back(std::move(e));
  }
}

std::string dims_str(const std::vector<uint32_t>& dims) {
  std::string out = "(";
  for (size_t i = 0; i < dims.size(); ++i)
    out += (i ? "," : "") + std::to_string(dims[i]);
  return out + ")";
}

void load_state(const std::vector<NamedTensor>& entries, std::vector<ParamRef> params,
                std::vector<BufferRef> bufs) {
  for (const ParamRef& p : params) {
    const NamedTensor& e = need_entry(entries, p.name);
    require(e.dims == p.dims, ErrorCode::checkpoint_mismatch,
            "entry '" + p.name + "' has shape " + dims_str(e.dims) +
                ", model expects " + dims_str(p.dims));
    for (size_t i = 0; i < p.size; ++i) p.value[i] = e.data[i];
  }
  for (const BufferRef& b : bufs) {
    const NamedTensor& e = need_entry(entries, b.name);
    require(e.dims == b.dims, ErrorCode::checkpoint_mismatch,
            "entry '" + b.name + "' has shape " + dims_str(e.dims) +
                ", model expects " + dims_str(b.dims));
    for (size_t i = 0; i < b.size; ++i) b.data[i] = e.data[i];
  }
}

std::vector<int> meta_ints(const NamedTensor& e) {
  std::vector<int> out;
  for (float f : e.data) out.push_back(static_cast<int>(std::lround(f)));
  return out;
}

}  // namespace

void save_net(const std::string& path, PlainNet& net) {
  std::vector<NamedTensor> entries;
  append_meta(net.cfg, false, entries);
  state_entries(net.params(), net.buffers(), entries);
  save_checkpoint(path, entries);
}

void save_net(const std::string& path, MsgcNet& net) {
  std::vector<NamedTensor> entries;
  append_meta(net.cfg, true, entries);
  state_entries(net.params(), net.buffers(), entries);
  save_checkpoint(path, entries);
}

LoadedNet load_net(const std::string& path) {
  std::vector<NamedTensor> entries = load_checkpoint(path);
  const NamedTensor& kind = need_entry(entries, "meta/kind");
  require(kind.data.size() == 1, ErrorCode::checkpoint_mismatch, "malformed meta/kind");

  NetConfig cfg;
  std::vector<int> input = meta_ints(need_entry(entries, "meta/input"));
  require(input.size() == 3, ErrorCode::checkpoint_mismatch, "malformed meta/input");
  cfg.in_channels = input[0];
  cfg.in_h = input[1];
  cfg.in_w = input[2];
  cfg.stem_channels = meta_ints(need_entry(entries, "meta/stem")).at(0);
  std::vector<int> bl = meta_ints(need_entry(entries, "meta/blocks"));
  require(!bl.empty() && bl.size() % 2 == 0, ErrorCode::checkpoint_mismatch,
          "malformed meta/blocks");
  cfg.blocks.clear();
  for (size_t i = 0; i < bl.size(); i += 2) cfg.blocks.push_back({bl[i], bl[i + 1]});
  cfg.num_classes = meta_ints(need_entry(entries, "meta/classes")).at(0);

  LoadedNet out;
  out.gated = std::lround(kind.data[0]) == kKindGated;
  Rng rng(0);  // parameters are overwritten below
  if (out.gated) {
    cfg.groups = meta_ints(need_entry(entries, "meta/groups"));
    cfg.attention_layers = meta_ints(need_entry(entries, "meta/attention"));
    cfg.reduction = meta_ints(need_entry(entries, "meta/reduction")).at(0);
    cfg.temperature = need_entry(entries, "meta/temperature").data.at(0);
    out.msgc = std::make_unique<MsgcNet>();
    out.msgc->init(cfg, rng);
    load_state(entries, out.msgc->params(), out.msgc->buffers());
  } else {
    out.plain = std::make_unique<PlainNet>();
    out.plain->init(cfg, rng);
    load_state(entries, out.plain->params(), out.plain->buffers());
  }
  return out;
}

}  // namespace msgc
