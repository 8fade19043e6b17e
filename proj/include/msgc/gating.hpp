#pragma once

#include "msgc/rng.hpp"
#include "msgc/tensor.hpp"

namespace msgc {

// Stochastic relaxation of a hard threshold.  A saliency s is binarized as
//   eval:   b = 1 if s >= 0 else 0            (ties resolve to 1)
//   train:  p = sigmoid((s + L) / temperature),  L ~ Logistic(0, 1)
//           b = 1 if p >= 0.5 else 0
// so that over the noise the selection frequency of a unit is exactly
// sigmoid(s) regardless of the temperature.  The backward pass treats the
// hard value as if it were p (straight-through) and differentiates p wrt s.

// One draw of standard logistic noise: log(v / (1 - v)) with v uniform in
// (0, 1); endpoint draws are rejected and resampled.
double logistic_noise(Rng& rng);

// Hard threshold at zero, ties to 1.
double binarize_eval(double s);
Tensor2 binarize_eval(const Tensor2& s);

struct TrainGate {
  Tensor2 soft;  // p, kept for the backward pass
  Tensor2 hard;  // thresholded p
};

TrainGate binarize_train(const Tensor2& s, const Tensor2& noise, double temperature);

// d loss / d s given d loss / d p (straight-through estimator).
Tensor2 binarize_train_bwd(const Tensor2& gp, const Tensor2& soft, double temperature);

}  // namespace msgc
