#include "msgc/gating.hpp"

#include <cmath>

namespace msgc {

double logistic_noise(Rng& rng) {
  double v = rng.uniform();
  while (v <= 0.0 || v >= 1.0) v = rng.uniform();
  return std::log(v / (1.0 - v));
}

double binarize_eval(double s) { return s >= 0.0 ? 1.0 : 0.0; }

Tensor2 binarize_eval(const Tensor2& s) {
  Tensor2 b = s;
  for (double& e : b.v) e = binarize_eval(e);
  return b;
}

TrainGate binarize_train(const Tensor2& s, const Tensor2& noise, double temperature) {
  require(s.rows == noise.rows && s.cols == noise.cols, ErrorCode::config,
          "noise shape does not match saliency shape");
  require(temperature > 0.0, ErrorCode::config, "temperature must be positive");
  TrainGate g;
  g.soft = Tensor2(s.rows, s.cols);
  g.hard = Tensor2(s.rows, s.cols);
  for (size_t i = 0; i < s.v.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-(s.v[i] + noise.v[i]) / temperature));
    g.soft.v[i] = p;
    g.hard.v[i] = p >= 0.5 ? 1.0 : 0.0;
  }
  return g;
}

Tensor2 binarize_train_bwd(const Tensor2& gp, const Tensor2& soft, double temperature) {
  require(gp.rows == soft.rows && gp.cols == soft.cols, ErrorCode::config,
          "gradient shape does not match gate shape");
  Tensor2 gs = gp;
  for (size_t i = 0; i < gs.v.size(); ++i)
    gs.v[i] *= soft.v[i] * (1.0 - soft.v[i]) / temperature;
  return gs;
}

}  // namespace msgc
