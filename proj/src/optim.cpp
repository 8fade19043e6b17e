#include "msgc/optim.hpp"

#include <cmath>

namespace msgc {

double budget_loss(double achieved, double full, double lambda, double target) {
  require(full > 0.0, ErrorCode::config, "full multiply count must be positive");
  const double v = lambda * (achieved / full - target);
  return v > 0.0 ? v : 0.0;
}

double budget_loss_bwd(double achieved, double full, double lambda, double target) {
  require(full > 0.0, ErrorCode::config, "full multiply count must be positive");
  return lambda * (achieved / full - target) > 0.0 ? lambda / full : 0.0;
}

void BudgetSchedule::validate() const {
  require(lambda >= 0.0, ErrorCode::config, "lambda must be non-negative");
  require(target_end > 0.0 && target_end <= target_start, ErrorCode::config,
          "target must descend from start to a positive end");
  require(warm_fraction > 0.0 && warm_fraction <= 1.0, ErrorCode::config,
          "warm fraction must lie in (0, 1]");
  require(total_epochs >= 1, ErrorCode::config, "training needs at least one epoch");
}

double BudgetSchedule::target_at(double epoch) const {
  const double warm = warm_fraction * total_epochs;
  if (epoch >= warm) return target_end;
  const double t = epoch / warm;
  return target_start + (target_end - target_start) * t;
}

double lr_at(double epoch, int total_epochs, double base) {
  require(total_epochs >= 1, ErrorCode::config, "training needs at least one epoch");
  return base * 0.5 * (1.0 + std::cos(M_PI * epoch / total_epochs));
}

Sgd::Sgd(const SgdConfig& cfg, const std::vector<ParamRef>& params) : cfg_(cfg) {
  velocity_.reserve(params.size());
  for (const ParamRef& p : params) velocity_.emplace_back(p.size, 0.0);
}

void Sgd::step(const std::vector<ParamRef>& params, double lr_factor) {
  require(params.size() == velocity_.size(), ErrorCode::config,
          "parameter list changed between steps");
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const ParamRef& p = params[pi];
    std::vector<double>& vel = velocity_[pi];
    require(vel.size() == p.size, ErrorCode::config,
            "parameter size changed between steps");
    const bool mlp = p.group == ParamGroup::mask_mlp;
    const double lr = (mlp ? cfg_.lr_mlp : cfg_.lr_backbone) * lr_factor;
    const double wd = mlp ? 0.0 : cfg_.weight_decay;
    for (size_t i = 0; i < p.size; ++i) {
      const double g = p.grad[i];
      if (!std::isfinite(g))
        fail(ErrorCode::numeric, "non-finite gradient in " + p.name);
      vel[i] = cfg_.momentum * vel[i] + g + wd * p.value[i];
      p.value[i] -= lr * vel[i];
    }
  }
}

void zero_grads(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params)
    std::fill(p.grad, p.grad + p.size, 0.0);
}

}  // namespace msgc
