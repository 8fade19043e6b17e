#pragma once

#include <span>
#include <vector>

#include "msgc/layers.hpp"

namespace msgc {

// Budget pressure: a one-sided hinge on the achieved-to-full multiply ratio.
//   loss = max(lambda * (achieved / full - target), 0)
// The derivative wrt `achieved` is lambda / full when the hinge is strictly
// active and zero otherwise.
double budget_loss(double achieved, double full, double lambda, double target);
double budget_loss_bwd(double achieved, double full, double lambda, double target);

// Budget target schedule: linear descent from start to end over the first
// warm_fraction of training, constant afterwards.  `epoch` may be fractional.
struct BudgetSchedule {
  double lambda = 30.0;
  double target_start = 1.0;
  double target_end = 0.5;
  double warm_fraction = 0.5;
  int total_epochs = 1;

  void validate() const;
  double target_at(double epoch) const;
};

// Cosine-annealed learning rate factor over whole training (no restarts):
//   base * 0.5 * (1 + cos(pi * epoch / total)).
double lr_at(double epoch, int total_epochs, double base);

// SGD with classical momentum and decoupled parameter groups.  Mask-generator
// parameters use their own learning rate and never receive weight decay.
//   v <- momentum * v + grad + weight_decay * theta
//   theta <- theta - lr * v
struct SgdConfig {
  double momentum = 0.9;
  double lr_backbone = 0.015;
  double lr_mlp = 0.075;
  double weight_decay = 1e-4;
};

class Sgd {
 public:
  Sgd(const SgdConfig& cfg, const std::vector<ParamRef>& params);

  // lr_factor scales both group rates (cosine schedule).  Throws a numeric
  // error naming the parameter if any gradient is non-finite.
  void step(const std::vector<ParamRef>& params, double lr_factor);

 private:
  SgdConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

void zero_grads(const std::vector<ParamRef>& params);

}  // namespace msgc
