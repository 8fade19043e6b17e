#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "msgc/data.hpp"
#include "msgc/net.hpp"
#include "msgc/optim.hpp"

namespace msgc {

NetConfig net_config_from(const RunConfig& rc);

// ---------------------------------------------------------------------------
// Evaluation (deterministic gates, running batch-norm statistics).
// ---------------------------------------------------------------------------

struct EvalSample {
  double macs = 0.0;   // fixed + dynamic multiplies for this sample
  double ratio = 1.0;  // macs / dense count
  uint32_t label = 0, pred = 0;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_ratio = 1.0;  // 1.0 for the plain variant
  std::vector<EvalSample> samples;
};

EvalResult evaluate_plain(PlainNet& net, const Dataset& ds, int batch,
                          bool collect_samples);
EvalResult evaluate_gated(MsgcNet& net, const Dataset& ds, int batch,
                          bool collect_samples);

// ---------------------------------------------------------------------------
// Training.  Writes a CSV log (epoch,task_loss,budget_loss,mac_ratio,
// val_accuracy) and a checkpoint after every epoch; a non-finite loss or
// gradient aborts with a numeric error naming the last saved state.
// ---------------------------------------------------------------------------

struct TrainResult {
  double final_val_accuracy = 0.0;
  double final_val_ratio = 1.0;
  std::string checkpoint_path, log_path;
};

TrainResult run_training(const RunConfig& rc, std::ostream& out);

// ---------------------------------------------------------------------------
// Gradient verification: finite differences against the hand-written backward
// passes, over every op and gated end-to-end losses with frozen gate noise
// (smooth-gate mode, where the implemented backward is the exact gradient).
// ---------------------------------------------------------------------------

struct GradCheckCase {
  std::string name;
  std::string worst_param;  // parameter block with the largest deviation
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckSummary {
  std::vector<GradCheckCase> cases;
  double worst = 0.0;
  bool pass = true;
  double seconds = 0.0;
};

GradCheckSummary run_grad_checks(uint64_t seed_base, int seeds_per_case, double tol);

}  // namespace msgc
