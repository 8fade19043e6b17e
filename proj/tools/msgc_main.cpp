// msgc: train, evaluate, verify, and analyze budget-gated grouped-convolution
// classifiers.  Every failure exits nonzero with one machine-parseable line:
//   error: <category>: <message>
// Categories: config, usage, io, bad_magic, truncated, crc_mismatch,
// label_range, checkpoint_mismatch, numeric.

#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "msgc/analysis.hpp"

namespace {

using namespace msgc;

int cmd_train(const std::string& config_path) {
  std::vector<std::string> notices;
  RunConfig rc = parse_run_config(config_path, &notices);
  for (const std::string& n : notices) std::printf("note: %s\n", n.c_str());
  TrainResult res = run_training(rc, std::cout);
  std::printf("final:      val_accuracy %.4f  mac_ratio %.4f\n",
              res.final_val_accuracy, res.final_val_ratio);
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  std::printf("log:        %s\n", res.log_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, int batch) {
  LoadedNet net = load_net(ckpt);
  Dataset ds = load_dataset(data);
  EvalResult r = net.gated ? evaluate_gated(*net.msgc, ds, batch, false)
                           : evaluate_plain(*net.plain, ds, batch, false);
  std::printf("samples        %zu\n", ds.count());
  std::printf("accuracy       %.4f\n", r.accuracy);
  std::printf("mean_mac_ratio %.4f\n", r.mean_ratio);
  return 0;
}

int cmd_macs(const std::string& config_path, const std::string& ckpt) {
  require(config_path.empty() != ckpt.empty(), ErrorCode::usage,
          "give exactly one of --config or --ckpt");
  NetConfig cfg;
  if (!config_path.empty()) {
    cfg = net_config_from(parse_run_config(config_path));
  } else {
    cfg = load_net(ckpt).config();
  }
  const NetMacReport rep = net_mac_report(cfg);
  std::printf("%-18s %14s  %s\n", "layer", "multiplies", "gated");
  for (const MacRow& row : rep.rows)
    std::printf("%-18s %14" PRIu64 "  %s\n", row.name.c_str(), row.full,
                row.gated ? "yes" : "no");
  std::printf("\n");
  std::printf("%-18s %14" PRIu64 "\n", "dense total", rep.model_full());
  std::printf("%-18s %14" PRIu64 "\n", "always-on", rep.fixed);
  std::printf("%-18s %14" PRIu64 "\n", "gated (dense)", rep.gated_full);
  std::printf("%-18s %14" PRIu64 "  (%.4f%% of dense total)\n", "mask generators",
              rep.mask_mlp, 100.0 * rep.mask_mlp / static_cast<double>(rep.model_full()));
  return 0;
}

int cmd_gradcheck(const std::string& config_path, uint64_t seed, int per_case,
                  double tol) {
  if (!config_path.empty()) {
    RunConfig rc = parse_run_config(config_path);
    net_config_from(rc).validate();
    std::printf("config %s parses and validates\n", config_path.c_str());
  }
  GradCheckSummary s = run_grad_checks(seed, per_case, tol);
  for (const GradCheckCase& c : s.cases) {
    std::printf("%-32s max_rel_err %.3e  %s", c.name.c_str(), c.max_rel_err,
                c.pass ? "ok" : "FAIL");
    if (!c.pass && !c.worst_param.empty())
      std::printf("  (worst block: %s)", c.worst_param.c_str());
    std::printf("\n");
  }
  std::printf("worst %.3e over %zu checks x %d seeds (%.1fs)\n", s.worst,
              s.cases.size(), per_case, s.seconds);
  if (!s.pass) {
    std::string bad;
    for (const GradCheckCase& c : s.cases)
      if (!c.pass) bad += (bad.empty() ? "" : ", ") + c.name;
    fail(ErrorCode::numeric, "derivative check failed: " + bad);
  }
  std::printf("all derivative checks pass (tolerance %.1e)\n", tol);
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& data,
                const std::string& which, const std::string& out_dir, int batch) {
  LoadedNet net = load_net(ckpt);
  require(net.gated, ErrorCode::config,
          "mask reports need a gated checkpoint; this one is a plain model");
  Dataset ds = load_dataset(data);
  MaskAnalysis a = analyze_masks(*net.msgc, ds, batch);
  std::vector<std::string> files;
  if (which == "group") {
    files = write_group_analysis(a, out_dir);
  } else if (which == "layer") {
    files = write_layer_analysis(a, out_dir);
  } else if (which == "sample") {
    files = write_sample_analysis(a, out_dir);
  } else {
    files = write_attention_analysis(a, out_dir);
  }
  std::printf("samples %" PRId64 "  accuracy %.4f  mean_mac_ratio %.4f\n",
              a.sample_count, a.accuracy, a.mean_ratio);
  for (const std::string& f : files) std::printf("wrote %s\n", f.c_str());
  return 0;
}

int cmd_synth(uint64_t seed, const std::string& out, int per_class, int classes,
              int size, int channels, double noise) {
  SynthSpec spec;
  spec.seed = seed;
  spec.per_class = per_class;
  spec.classes = classes;
  spec.size = size;
  spec.channels = channels;
  spec.noise = noise;
  Dataset ds = synth_dataset(spec);
  save_dataset(out, ds);
  std::printf("wrote %s: %zu samples, %d classes, %dx%dx%d\n", out.c_str(),
              ds.count(), classes, channels, size, size);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"budget-gated grouped-convolution classifiers"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, data_path, out_path, which;
  int batch = 64;
  uint64_t seed = 1;
  int per_case = 3;
  double tol = 1e-4;
  int per_class = 64, classes = 8, size = 32, channels = 3;
  double noise = 0.2;

  auto* train = app.add_subcommand("train", "Train a model described by a config file");
  train->add_option("--config", config_path, "run configuration file")->required();

  auto* eval = app.add_subcommand("eval", "Accuracy and multiply cost on a dataset");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_path, "dataset file")->required();
  eval->add_option("--batch", batch, "evaluation batch size");

  auto* macs = app.add_subcommand("macs", "Static per-layer multiply table");
  macs->add_option("--config", config_path, "run configuration file");
  macs->add_option("--ckpt", ckpt_path, "checkpoint file");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Finite-difference verification of every backward pass");
  gradcheck->add_option("--config", config_path,
                        "optional config to parse and validate first");
  gradcheck->add_option("--seed", seed, "base seed");
  gradcheck->add_option("--seeds-per-case", per_case, "seeds per check")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", tol, "max relative error allowed");

  auto* analyze = app.add_subcommand("analyze", "Mask diagnostics to CSV + SVG");
  analyze->add_option("--ckpt", ckpt_path, "gated checkpoint")->required();
  analyze->add_option("--data", data_path, "dataset file")->required();
  analyze->add_option("--which", which, "group | layer | sample | attention")
      ->required()
      ->check(CLI::IsMember({"group", "layer", "sample", "attention"}));
  analyze->add_option("--out", out_path, "output directory")->required();
  analyze->add_option("--batch", batch, "evaluation batch size");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic grating dataset");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out_path, "output dataset path")->required();
  synth->add_option("--per-class", per_class, "samples per class");
  synth->add_option("--classes", classes, "number of classes");
  synth->add_option("--size", size, "image height and width");
  synth->add_option("--channels", channels, "image channels");
  synth->add_option("--noise", noise, "additive noise level");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return error_exit_code(ErrorCode::usage);
  }

  try {
    if (train->parsed()) return cmd_train(config_path);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_path, batch);
    if (macs->parsed()) return cmd_macs(config_path, ckpt_path);
    if (gradcheck->parsed()) return cmd_gradcheck(config_path, seed, per_case, tol);
    if (analyze->parsed())
      return cmd_analyze(ckpt_path, data_path, which, out_path, batch);
    if (synth->parsed())
      return cmd_synth(seed, out_path, per_class, classes, size, channels, noise);
  } catch (const Error& e) {
    std::cerr << "error: " << error_category(e.code()) << ": " << e.what() << "\n";
    return error_exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return error_exit_code(ErrorCode::io);
  }
  return 0;
}
