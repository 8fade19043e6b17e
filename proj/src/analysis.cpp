#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "msgc/analysis.hpp"

namespace msgc {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::ofstream open_out(const std::string& dir, const std::string& file,
                       std::vector<std::string>& written) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create directory '" + dir + "': " + ec.message());
  const std::string path = (std::filesystem::path(dir) / file).string();
  std::ofstream out(path, std::ios::binary);  // binary: no CRLF translation
  if (!out) fail(ErrorCode::io, "cannot open '" + path + "' for writing");
  written.push_back(path);
  return out;
}

void finish(std::ofstream& out, const std::string& path_hint) {
  out.flush();
  if (!out) fail(ErrorCode::io, "write failed for " + path_hint);
}

// ---- minimal SVG builder --------------------------------------------------

struct Svg {
  std::string body;
  double width = 0, height = 0;

  static std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
  }
  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0) {
    body += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) +
            "\" height=\"" + num(h) + "\" fill=\"" + fill + "\"";
    if (opacity < 1.0) body += " fill-opacity=\"" + num(opacity) + "\"";
    body += "/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double sw = 1.0) {
    body += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) +
            "\" y2=\"" + num(y2) + "\" stroke=\"" + stroke + "\" stroke-width=\"" +
            num(sw) + "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& stroke, double sw = 1.5) {
    if (pts.empty()) return;
    body += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" +
            num(sw) + "\" points=\"";
    for (const auto& [x, y] : pts) body += num(x) + "," + num(y) + " ";
    body += "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int px = 11,
            const std::string& fill = "#333") {
    body += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"" +
            std::to_string(px) + "\" font-family=\"sans-serif\" fill=\"" + fill +
            "\">" + s + "</text>\n";
  }
  std::string render() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) +
           "\" height=\"" + num(height) + "\" viewBox=\"0 0 " + num(width) + " " +
           num(height) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" +
           body + "</svg>\n";
  }
};

const char* kSeriesColor[8] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                               "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

// Blue heat for selection rates, orange heat for attention strengths.
std::string heat(double v, bool orange) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = orange ? 255 : static_cast<int>(255 - 200 * v);
  const int g = static_cast<int>(255 - (orange ? 130 : 120) * v);
  const int b = orange ? static_cast<int>(255 - 235 * v) : 255;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Collection pass
// ---------------------------------------------------------------------------

MaskAnalysis analyze_masks(MsgcNet& net, const Dataset& ds, int batch_size) {
  require(batch_size >= 1, ErrorCode::config, "analysis batch size must be >= 1");
  require(ds.count() > 0, ErrorCode::config, "analysis dataset is empty");

  MaskAnalysis a;
  a.sample_count = static_cast<int64_t>(ds.count());
  a.samples.resize(ds.count());

  // Layer descriptors in forward order.
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    const MsgcBlockConfig& cfg = net.blocks[b].cfg;
    for (int i = 0; i < cfg.layer_count(); ++i) {
      LayerMaskStats st;
      st.name = "block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1);
      st.groups = cfg.groups[i];
      st.channels = cfg.channels[i];
      st.has_attention = cfg.attention[i];
      st.at_least.assign(static_cast<size_t>(st.groups) * st.channels, 0);
      st.gate_sum.assign(st.at_least.size(), 0.0);
      if (st.has_attention) st.attn_sum.assign(st.at_least.size(), 0.0);
      a.layers.push_back(std::move(st));
    }
  }

  const NetMacReport report = net_mac_report(net.cfg);
  int64_t correct_total = 0;
  double ratio_total = 0.0;

  for (size_t start = 0; start < ds.count(); start += batch_size) {
    const size_t n = std::min<size_t>(batch_size, ds.count() - start);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Tensor4 x = ds.gather(idx);
    std::vector<uint32_t> labels = ds.gather_labels(idx);

    MsgcNet::Cache cache;
    std::vector<SampleMacs> macs;
    Tensor2 logits = net.forward(x, false, GateMode::eval, nullptr, &cache, &macs);

    for (size_t r = 0; r < n; ++r) {
      uint32_t pred = 0;
      double best = logits.at(r, 0);
      for (int c = 1; c < logits.cols; ++c)
        if (logits.at(r, c) > best) {
          best = logits.at(r, c);
          pred = static_cast<uint32_t>(c);
        }
      EvalSample& es = a.samples[start + r];
      es.macs = report.sample_total(macs[r]);
      es.ratio = report.sample_ratio(macs[r]);
      es.label = labels[r];
      es.pred = pred;
      es.correct = pred == labels[r];
      correct_total += es.correct ? 1 : 0;
      ratio_total += es.ratio;
    }

    size_t li = 0;
    for (const MsgcBlockCache& bc : cache.blocks) {
      for (const MsgcBlockCache::Layer& L : bc.layers) {
        LayerMaskStats& st = a.layers[li++];
        const int G = st.groups, C = st.channels;
        for (size_t r = 0; r < n; ++r) {
          const double* gate = L.gate.row(r);
          const double* attn = st.has_attention ? L.attn.row(r) : nullptr;
          for (size_t j = 0; j < st.gate_sum.size(); ++j) {
            st.gate_sum[j] += gate[j];
            if (attn) st.attn_sum[j] += attn[j];
          }
          for (int c = 0; c < C; ++c) {
            int k = 0;
            for (int g = 0; g < G; ++g) k += gate[g * C + c] > 0.5 ? 1 : 0;
            for (int g = 1; g <= k; ++g) st.at_least[(g - 1) * C + c] += 1;
            if (k == G)
              st.canonical += 1;
            else if (k == 0)
              st.discarded += 1;
            else
              st.partial += 1;
          }
        }
      }
    }
  }

  a.accuracy = static_cast<double>(correct_total) / static_cast<double>(ds.count());
  a.mean_ratio = ratio_total / static_cast<double>(ds.count());
  return a;
}

// ---------------------------------------------------------------------------
// Group-wise: sorted at-least-g selection curves and the channel pyramid
// ---------------------------------------------------------------------------

std::vector<std::string> write_group_analysis(const MaskAnalysis& a, const std::string& dir) {
  std::vector<std::string> written;
  const double n = static_cast<double>(a.sample_count);

  {
    std::ofstream out = open_out(dir, "group.csv", written);
    out << "layer,g,rank,channel,probability\n";
    for (const LayerMaskStats& st : a.layers) {
      for (int g = 1; g <= st.groups; ++g) {
        std::vector<int> order(st.channels);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
          return st.at_least[(g - 1) * st.channels + x] >
                 st.at_least[(g - 1) * st.channels + y];
        });
        for (int rank = 0; rank < st.channels; ++rank) {
          const int c = order[rank];
          const double p = st.at_least[(g - 1) * st.channels + c] / n;
          out << st.name << ',' << g << ',' << rank << ',' << c << ','
              << fmt("%.6f", p) << '\n';
        }
      }
    }
    finish(out, "group.csv");
  }

  {
    std::ofstream out = open_out(dir, "pyramid.csv", written);
    out << "layer,channels,samples,canonical_total,partial_total,discarded_total,"
           "canonical_mean,partial_mean,discarded_mean,mean_sum\n";
    for (const LayerMaskStats& st : a.layers) {
      const double cm = st.canonical / n, pm = st.partial / n, dm = st.discarded / n;
      out << st.name << ',' << st.channels << ',' << a.sample_count << ','
          << st.canonical << ',' << st.partial << ',' << st.discarded << ','
          << fmt("%.6f", cm) << ',' << fmt("%.6f", pm) << ',' << fmt("%.6f", dm)
          << ',' << fmt("%.6f", cm + pm + dm) << '\n';
    }
    finish(out, "pyramid.csv");
  }

  {
    // One panel per layer: sorted probability curves, one per g.
    const double pw = 230, ph = 140, pad = 34;
    const int layers = static_cast<int>(a.layers.size());
    Svg svg;
    svg.width = pw + 2 * pad;
    svg.height = layers * (ph + pad) + pad;
    for (int li = 0; li < layers; ++li) {
      const LayerMaskStats& st = a.layers[li];
      const double ox = pad, oy = pad + li * (ph + pad);
      svg.rect(ox, oy, pw, ph, "#f7f7f7");
      svg.line(ox, oy + ph, ox + pw, oy + ph, "#999");
      svg.line(ox, oy, ox, oy + ph, "#999");
      svg.text(ox, oy - 6, st.name + "  (channels sorted per curve; one curve per g)");
      for (int g = 1; g <= st.groups; ++g) {
        std::vector<double> probs(st.channels);
        for (int c = 0; c < st.channels; ++c)
          probs[c] = st.at_least[(g - 1) * st.channels + c] / n;
        std::sort(probs.begin(), probs.end(), std::greater<double>());
        std::vector<std::pair<double, double>> pts;
        for (int r = 0; r < st.channels; ++r) {
          const double x = ox + (st.channels == 1 ? 0.5 : r / double(st.channels - 1)) * pw;
          pts.emplace_back(x, oy + ph - probs[r] * ph);
        }
        svg.polyline(pts, kSeriesColor[(g - 1) % 8]);
        svg.text(ox + pw - 38, oy + 12 + 12 * (g - 1), "g>=" + std::to_string(g), 10,
                 kSeriesColor[(g - 1) % 8]);
      }
    }
    std::ofstream out = open_out(dir, "group.svg", written);
    out << svg.render();
    finish(out, "group.svg");
  }
  return written;
}

// ---------------------------------------------------------------------------
// Layer-wise: mean channels per group and remaining rate
// ---------------------------------------------------------------------------

std::vector<std::string> write_layer_analysis(const MaskAnalysis& a, const std::string& dir) {
  std::vector<std::string> written;
  const double n = static_cast<double>(a.sample_count);

  std::vector<double> mean_per_group(a.layers.size()), remaining(a.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerMaskStats& st = a.layers[i];
    const double total = std::accumulate(st.gate_sum.begin(), st.gate_sum.end(), 0.0);
    mean_per_group[i] = total / (n * st.groups);
    remaining[i] = mean_per_group[i] / st.channels;
  }

  {
    std::ofstream out = open_out(dir, "layer.csv", written);
    out << "layer,channels,groups,mean_channels_per_group,remaining_rate\n";
    for (size_t i = 0; i < a.layers.size(); ++i) {
      const LayerMaskStats& st = a.layers[i];
      out << st.name << ',' << st.channels << ',' << st.groups << ','
          << fmt("%.6f", mean_per_group[i]) << ',' << fmt("%.6f", remaining[i]) << '\n';
    }
    finish(out, "layer.csv");
  }

  {
    // Gray bars: layer width. Orange line: mean channels per group.
    // Blue line (right axis, 0..1): remaining rate.
    const double pad = 40, bw = 46, gap = 18, ph = 180;
    const int L = static_cast<int>(a.layers.size());
    int cmax = 1;
    for (const LayerMaskStats& st : a.layers) cmax = std::max(cmax, st.channels);
    Svg svg;
    svg.width = pad * 2 + L * (bw + gap);
    svg.height = ph + 2 * pad + 16;
    const double oy = pad + ph;
    std::vector<std::pair<double, double>> mean_pts, rate_pts;
    for (int i = 0; i < L; ++i) {
      const double x = pad + i * (bw + gap);
      const double hbar = a.layers[i].channels / double(cmax) * ph;
      svg.rect(x, oy - hbar, bw, hbar, "#cccccc");
      svg.text(x, oy + 14, a.layers[i].name, 9);
      const double cx = x + bw / 2;
      mean_pts.emplace_back(cx, oy - mean_per_group[i] / cmax * ph);
      rate_pts.emplace_back(cx, oy - remaining[i] * ph);
    }
    svg.polyline(mean_pts, "#ff7f0e", 2.0);
    svg.polyline(rate_pts, "#1f77b4", 2.0);
    svg.text(pad, pad - 18, "gray: channels | orange: mean channels per group | blue: remaining rate (0..1)");
    svg.line(pad - 6, oy, svg.width - pad + 6, oy, "#999");
    std::ofstream out = open_out(dir, "layer.svg", written);
    out << svg.render();
    finish(out, "layer.svg");
  }
  return written;
}

// ---------------------------------------------------------------------------
// Sample-wise: multiply-count histogram with per-bin accuracy, plus extremes
// ---------------------------------------------------------------------------

std::vector<std::string> write_sample_analysis(const MaskAnalysis& a, const std::string& dir) {
  std::vector<std::string> written;

  {
    std::ofstream out = open_out(dir, "sample_macs.csv", written);
    out << "sample,label,pred,correct,macs,ratio\n";
    for (size_t i = 0; i < a.samples.size(); ++i) {
      const EvalSample& s = a.samples[i];
      out << i << ',' << s.label << ',' << s.pred << ',' << (s.correct ? 1 : 0) << ','
          << fmt("%.0f", s.macs) << ',' << fmt("%.6f", s.ratio) << '\n';
    }
    finish(out, "sample_macs.csv");
  }

  double lo = a.samples[0].macs, hi = a.samples[0].macs;
  for (const EvalSample& s : a.samples) {
    lo = std::min(lo, s.macs);
    hi = std::max(hi, s.macs);
  }
  const int bins = hi > lo ? 16 : 1;
  std::vector<int64_t> count(bins, 0), correct(bins, 0);
  auto bin_of = [&](double m) {
    if (bins == 1) return 0;
    int b = static_cast<int>((m - lo) / (hi - lo) * bins);
    return std::clamp(b, 0, bins - 1);  // the maximum lands in the last bin
  };
  for (const EvalSample& s : a.samples) {
    const int b = bin_of(s.macs);
    count[b] += 1;
    correct[b] += s.correct ? 1 : 0;
  }

  {
    std::ofstream out = open_out(dir, "sample_histogram.csv", written);
    out << "bin,lo,hi,count,correct,accuracy\n";
    for (int b = 0; b < bins; ++b) {
      const double blo = bins == 1 ? lo : lo + (hi - lo) * b / bins;
      const double bhi = bins == 1 ? hi : lo + (hi - lo) * (b + 1) / bins;
      const double acc = count[b] ? static_cast<double>(correct[b]) / count[b] : 0.0;
      out << b << ',' << fmt("%.0f", blo) << ',' << fmt("%.0f", bhi) << ','
          << count[b] << ',' << correct[b] << ',' << fmt("%.6f", acc) << '\n';
    }
    finish(out, "sample_histogram.csv");
  }

  {
    std::vector<size_t> order(a.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) {
      return a.samples[x].macs < a.samples[y].macs;
    });
    const size_t k = std::min<size_t>(5, order.size());
    std::ofstream out = open_out(dir, "sample_extremes.csv", written);
    out << "kind,rank,sample,macs,ratio,label,pred,correct\n";
    auto row = [&](const char* kind, size_t rank, size_t id) {
      const EvalSample& s = a.samples[id];
      out << kind << ',' << rank << ',' << id << ',' << fmt("%.0f", s.macs) << ','
          << fmt("%.6f", s.ratio) << ',' << s.label << ',' << s.pred << ','
          << (s.correct ? 1 : 0) << '\n';
    };
    for (size_t r = 0; r < k; ++r) row("lowest", r, order[r]);
    for (size_t r = 0; r < k; ++r) row("highest", r, order[order.size() - 1 - r]);
    finish(out, "sample_extremes.csv");
  }

  {
    const double pad = 42, pw = 420, ph = 180;
    Svg svg;
    svg.width = pw + 2 * pad;
    svg.height = ph + 2 * pad + 10;
    const double oy = pad + ph;
    int64_t cmax = 1;
    for (int64_t c : count) cmax = std::max(cmax, c);
    const double bw = pw / bins;
    std::vector<std::pair<double, double>> acc_pts;
    for (int b = 0; b < bins; ++b) {
      const double hbar = count[b] / double(cmax) * ph;
      svg.rect(pad + b * bw + 1, oy - hbar, bw - 2, hbar, "#9ecae1");
      if (count[b]) {
        const double acc = static_cast<double>(correct[b]) / count[b];
        acc_pts.emplace_back(pad + (b + 0.5) * bw, oy - acc * ph);
      }
    }
    svg.polyline(acc_pts, "#1f77b4", 2.0);
    svg.line(pad - 6, oy, pad + pw + 6, oy, "#999");
    svg.text(pad, pad - 18, "per-sample multiply counts (bars: bin sizes, line: bin accuracy 0..1)");
    svg.text(pad, oy + 16, fmt("%.0f", lo) + " .. " + fmt("%.0f", hi) +
                               " multiplies; overall accuracy " + fmt("%.4f", a.accuracy));
    std::ofstream out = open_out(dir, "sample.svg", written);
    out << svg.render();
    finish(out, "sample.svg");
  }
  return written;
}

// ---------------------------------------------------------------------------
// Attention-wise: selection-rate and attention matrices
// ---------------------------------------------------------------------------

std::vector<std::string> write_attention_analysis(const MaskAnalysis& a, const std::string& dir) {
  bool any = false;
  for (const LayerMaskStats& st : a.layers) any = any || st.has_attention;
  require(any, ErrorCode::config,
          "attention report needs a model with attention stages; this checkpoint has none");

  std::vector<std::string> written;
  const double n = static_cast<double>(a.sample_count);

  {
    std::ofstream out = open_out(dir, "attention_gate.csv", written);
    out << "layer,group,channel,selection_rate\n";
    for (const LayerMaskStats& st : a.layers)
      for (int g = 0; g < st.groups; ++g)
        for (int c = 0; c < st.channels; ++c)
          out << st.name << ',' << g << ',' << c << ','
              << fmt("%.6f", st.gate_sum[static_cast<size_t>(g) * st.channels + c] / n)
              << '\n';
    finish(out, "attention_gate.csv");
  }

  {
    std::ofstream out = open_out(dir, "attention_value.csv", written);
    out << "layer,group,channel,mean_attention\n";
    for (const LayerMaskStats& st : a.layers) {
      if (!st.has_attention) continue;
      for (int g = 0; g < st.groups; ++g)
        for (int c = 0; c < st.channels; ++c)
          out << st.name << ',' << g << ',' << c << ','
              << fmt("%.6f", st.attn_sum[static_cast<size_t>(g) * st.channels + c] / n)
              << '\n';
    }
    finish(out, "attention_value.csv");
  }

  {
    // Per layer: a G x C selection-rate heatmap (blue), and for attention
    // layers a second heatmap of mean attention (orange).
    const double pad = 30, label_h = 16;
    double y = pad;
    double width = 0;
    Svg svg;
    for (const LayerMaskStats& st : a.layers) {
      const double cell = std::clamp(320.0 / st.channels, 3.0, 14.0);
      const int panels = st.has_attention ? 2 : 1;
      for (int p = 0; p < panels; ++p) {
        svg.text(pad, y + 11, st.name + (p == 0 ? "  selection rate" : "  mean attention"));
        y += label_h;
        for (int g = 0; g < st.groups; ++g)
          for (int c = 0; c < st.channels; ++c) {
            const size_t j = static_cast<size_t>(g) * st.channels + c;
            const double v = (p == 0 ? st.gate_sum[j] : st.attn_sum[j]) / n;
            svg.rect(pad + c * cell, y + g * cell, cell - 0.5, cell - 0.5, heat(v, p == 1));
          }
        y += st.groups * cell + 12;
        width = std::max(width, pad * 2 + st.channels * cell);
      }
      y += 8;
    }
    svg.width = std::max(width, 360.0);
    svg.height = y + pad;
    std::ofstream out = open_out(dir, "attention.svg", written);
    out << svg.render();
    finish(out, "attention.svg");
  }
  return written;
}

}  // namespace msgc
