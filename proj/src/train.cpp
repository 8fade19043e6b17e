#include "msgc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "msgc/ops.hpp"

namespace msgc {

NetConfig net_config_from(const RunConfig& rc) {
  NetConfig cfg;
  cfg.in_channels = rc.in_channels;
  cfg.in_h = rc.in_size;
  cfg.in_w = rc.in_size;
  cfg.stem_channels = rc.stem;
  cfg.blocks.clear();
  for (const auto& [w, s] : rc.blocks) cfg.blocks.push_back({w, s});
  cfg.num_classes = rc.classes;
  cfg.groups = rc.groups;
  cfg.attention_layers = rc.attention;
  cfg.reduction = rc.reduction;
  cfg.temperature = rc.temperature;
  cfg.gate_bias_init = rc.gate_bias_init;
  cfg.attn_bias_init = rc.attention_bias_init;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

void check_dataset_shape(const Dataset& ds, const NetConfig& cfg) {
  require(static_cast<int>(ds.channels) == cfg.in_channels &&
              static_cast<int>(ds.height) == cfg.in_h &&
              static_cast<int>(ds.width) == cfg.in_w,
          ErrorCode::config, "dataset shape does not match the model input");
  require(static_cast<int>(ds.num_classes) == cfg.num_classes, ErrorCode::config,
          "dataset class count does not match the model");
  require(ds.count() > 0, ErrorCode::config, "dataset is empty");
}

std::vector<size_t> batch_indices(size_t start, size_t stop) {
  std::vector<size_t> idx;
  idx.reserve(stop - start);
  for (size_t i = start; i < stop; ++i) idx.push_back(i);
  return idx;
}

uint32_t argmax_row(const Tensor2& logits, int row) {
  uint32_t best = 0;
  for (int j = 1; j < logits.cols; ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = static_cast<uint32_t>(j);
  return best;
}

}  // namespace

EvalResult evaluate_plain(PlainNet& net, const Dataset& ds, int batch,
                          bool collect_samples) {
  check_dataset_shape(ds, net.cfg);
  require(batch >= 1, ErrorCode::config, "batch size must be positive");
  EvalResult res;
  size_t correct = 0;
  for (size_t start = 0; start < ds.count(); start += batch) {
    const size_t stop = std::min(ds.count(), start + batch);
    std::vector<size_t> idx = batch_indices(start, stop);
    Tensor4 x = ds.gather(idx);
    std::vector<uint32_t> labels = ds.gather_labels(idx);
    Tensor2 logits = net.forward(x, false, nullptr);
    for (size_t i = 0; i < idx.size(); ++i) {
      uint32_t pred = argmax_row(logits, static_cast<int>(i));
      bool ok = pred == labels[i];
      correct += ok;
      if (collect_samples) {
        EvalSample s;
        s.label = labels[i];
        s.pred = pred;
        s.correct = ok;
        res.samples.push_back(s);
      }
    }
  }
  res.accuracy = static_cast<double>(correct) / ds.count();
  res.mean_ratio = 1.0;
  return res;
}

EvalResult evaluate_gated(MsgcNet& net, const Dataset& ds, int batch,
                          bool collect_samples) {
  check_dataset_shape(ds, net.cfg);
  require(batch >= 1, ErrorCode::config, "batch size must be positive");
  const NetMacReport report = net_mac_report(net.cfg);
  EvalResult res;
  size_t correct = 0;
  double ratio_sum = 0.0;
  for (size_t start = 0; start < ds.count(); start += batch) {
    const size_t stop = std::min(ds.count(), start + batch);
    std::vector<size_t> idx = batch_indices(start, stop);
    Tensor4 x = ds.gather(idx);
    std::vector<uint32_t> labels = ds.gather_labels(idx);
    std::vector<SampleMacs> macs;
    Tensor2 logits = net.forward(x, false, GateMode::eval, nullptr, nullptr, &macs);
    for (size_t i = 0; i < idx.size(); ++i) {
      uint32_t pred = argmax_row(logits, static_cast<int>(i));
      bool ok = pred == labels[i];
      correct += ok;
      const double ratio = report.sample_ratio(macs[i]);
      ratio_sum += ratio;
      if (collect_samples) {
        EvalSample s;
        s.macs = report.sample_total(macs[i]);
        s.ratio = ratio;
        s.label = labels[i];
        s.pred = pred;
        s.correct = ok;
        res.samples.push_back(s);
      }
    }
  }
  res.accuracy = static_cast<double>(correct) / ds.count();
  res.mean_ratio = ratio_sum / ds.count();
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// Random crop with a 4-pixel zero border (the only augmentation; the class
// identity of the synthetic gratings is orientation-sensitive, so flips are
// deliberately not offered).
void augment_batch(Tensor4& x, Rng& rng) {
  constexpr int kPad = 4;
  const int n = x.d[0], c = x.d[1], h = x.d[2], w = x.d[3];
  std::vector<double> plane(static_cast<size_t>(h) * w);
  for (int i = 0; i < n; ++i) {
    const int dy = static_cast<int>(rng.integer(2 * kPad + 1)) - kPad;
    const int dx = static_cast<int>(rng.integer(2 * kPad + 1)) - kPad;
    if (dy == 0 && dx == 0) continue;
    for (int ci = 0; ci < c; ++ci) {
      double* img = &x.v[(static_cast<size_t>(i) * c + ci) * h * w];
      std::fill(plane.begin(), plane.end(), 0.0);
      for (int y = 0; y < h; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (int xx = 0; xx < w; ++xx) {
          const int sx = xx + dx;
          if (sx < 0 || sx >= w) continue;
          plane[static_cast<size_t>(y) * w + xx] = img[static_cast<size_t>(sy) * w + sx];
        }
      }
      std::copy(plane.begin(), plane.end(), img);
    }
  }
}

std::string fmt_csv_line(int epoch, double task, double budget, double ratio, double acc) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f", epoch, task, budget, ratio, acc);
  return buf;
}

void write_log(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::io, "cannot write log '" + path + "'");
  f << "epoch,task_loss,budget_loss,mac_ratio,val_accuracy\n";
  for (const std::string& l : lines) f << l << "\n";
}

}  // namespace

TrainResult run_training(const RunConfig& rc, std::ostream& out) {
  require(!rc.train_data.empty(), ErrorCode::config, "config does not set train_data");
  require(!rc.val_data.empty(), ErrorCode::config, "config does not set val_data");
  const NetConfig ncfg = net_config_from(rc);
  const Dataset train_ds = load_dataset(rc.train_data);
  const Dataset val_ds = load_dataset(rc.val_data);
  check_dataset_shape(train_ds, ncfg);
  check_dataset_shape(val_ds, ncfg);
  require(train_ds.count() >= static_cast<size_t>(rc.batch_size), ErrorCode::config,
          "training set smaller than one batch");

  Rng rng(rc.seed);
  PlainNet plain;
  MsgcNet gated;
  if (rc.gated)
    gated.init(ncfg, rng);
  else
    plain.init(ncfg, rng);

  std::vector<ParamRef> params = rc.gated ? gated.params() : plain.params();
  Sgd opt(SgdConfig{rc.momentum, rc.lr_backbone, rc.lr_mlp, rc.weight_decay}, params);
  const NetMacReport report = net_mac_report(ncfg);
  BudgetSchedule sched;
  sched.lambda = rc.lambda;
  sched.target_end = rc.budget_target;
  sched.warm_fraction = rc.warm_fraction;
  sched.total_epochs = rc.epochs;
  sched.validate();

  const size_t num_batches = train_ds.count() / rc.batch_size;
  const double full = static_cast<double>(report.model_full());
  const uint64_t noise_base = splitmix64(rc.seed + 0x5eed);

  out << "samples " << train_ds.count() << " (" << num_batches << " batches of "
      << rc.batch_size << "), val " << val_ds.count() << ", dense multiplies/sample "
      << report.model_full() << "\n";

  std::vector<std::string> log_lines;
  std::vector<size_t> order(train_ds.count());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  uint64_t step = 0;
  bool saved_once = false;

  auto abort_numeric = [&](const std::string& what, int epoch) {
    std::string note = saved_once
                           ? "; last good state is '" + rc.out_checkpoint + "'"
                           : "; no checkpoint was saved yet";
    fail(ErrorCode::numeric, what + " at epoch " + std::to_string(epoch + 1) + note);
  };

  TrainResult result;
  result.checkpoint_path = rc.out_checkpoint;
  result.log_path = rc.out_log;

  for (int epoch = 0; epoch < rc.epochs; ++epoch) {
    // Fisher-Yates shuffle driven by the run seed.
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = rng.integer(i);
      std::swap(order[i - 1], order[j]);
    }

    double task_sum = 0.0, budget_sum = 0.0, ratio_sum = 0.0;
    for (size_t b = 0; b < num_batches; ++b, ++step) {
      const double frac_epoch = epoch + static_cast<double>(b) / num_batches;
      const double lr_factor = lr_at(frac_epoch, rc.epochs, 1.0);
      const double target = sched.target_at(frac_epoch);

      std::vector<size_t> idx(order.begin() + b * rc.batch_size,
                              order.begin() + (b + 1) * rc.batch_size);
      Tensor4 x = train_ds.gather(idx);
      std::vector<uint32_t> labels = train_ds.gather_labels(idx);
      if (rc.augment) augment_batch(x, rng);

      double task = 0.0, budget = 0.0, ratio = 1.0;
      if (rc.gated) {
        const uint64_t step_seed = splitmix64(noise_base ^ step);
        std::vector<uint64_t> seeds(idx.size());
        for (size_t i = 0; i < idx.size(); ++i)
          seeds[i] = splitmix64(step_seed ^ (idx[i] + 1));

        MsgcNet::Cache cache;
        std::vector<SampleMacs> macs;
        Tensor2 logits = gated.forward(x, true, GateMode::train_hard, &seeds, &cache, &macs);
        CeResult ce = softmax_ce_fwd(logits, labels);
        double mean_macs = 0.0;
        for (const SampleMacs& sm : macs) mean_macs += report.sample_total(sm);
        mean_macs /= static_cast<double>(macs.size());
        task = ce.loss;
        budget = budget_loss(mean_macs, full, rc.lambda, target);
        ratio = mean_macs / full;
        if (!std::isfinite(task + budget)) abort_numeric("non-finite loss", epoch);

        const double dmean = budget_loss_bwd(mean_macs, full, rc.lambda, target);
        std::vector<double> coeff(macs.size(), dmean / static_cast<double>(macs.size()));
        Tensor2 glogits = softmax_ce_bwd(ce.probs, labels);
        gated.zero_grad();
        gated.backward(glogits, cache, &coeff);
      } else {
        PlainNet::Cache cache;
        Tensor2 logits = plain.forward(x, true, &cache);
        CeResult ce = softmax_ce_fwd(logits, labels);
        task = ce.loss;
        if (!std::isfinite(task)) abort_numeric("non-finite loss", epoch);
        Tensor2 glogits = softmax_ce_bwd(ce.probs, labels);
        plain.zero_grad();
        plain.backward(glogits, cache);
      }

      try {
        opt.step(params, lr_factor);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::numeric) abort_numeric(e.what(), epoch);
        throw;
      }
      task_sum += task;
      budget_sum += budget;
      ratio_sum += ratio;
    }

    EvalResult val = rc.gated ? evaluate_gated(gated, val_ds, rc.batch_size, false)
                              : evaluate_plain(plain, val_ds, rc.batch_size, false);
    log_lines.push_back(fmt_csv_line(epoch, task_sum / num_batches,
                                     budget_sum / num_batches, ratio_sum / num_batches,
                                     val.accuracy));
    write_log(rc.out_log, log_lines);
    if (rc.gated)
      save_net(rc.out_checkpoint, gated);
    else
      save_net(rc.out_checkpoint, plain);
    saved_once = true;
    out << log_lines.back() << "\n";
    result.final_val_accuracy = val.accuracy;
    result.final_val_ratio = val.mean_ratio;
  }
  return result;
}

}  // namespace msgc
