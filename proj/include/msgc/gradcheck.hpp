#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace msgc {

struct FdReport {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double worst_fd = 0.0, worst_analytic = 0.0;
  bool finite = true;
};

// Central-difference gradient check.  `loss` re-evaluates the scalar loss from
// the current contents of `theta`; `analytic` holds the gradient under test.
// Step size is 1e-5 * max(1, |theta_i|); the error for one coordinate is
// |fd - analytic| / max(1e-8, |fd| + |analytic|).  `theta` is perturbed in
// place and restored.
FdReport finite_diff_check(const std::function<double()>& loss,
                           std::span<double> theta,
                           std::span<const double> analytic);

// Convenience: checks several named parameter slices against one loss and
// returns the worst report together with the slice name it came from.
struct NamedSlice {
  std::string name;
  double* data = nullptr;
  const double* grad = nullptr;
  size_t size = 0;
};

struct NamedFdReport {
  FdReport report;
  std::string worst_slice;
};

NamedFdReport finite_diff_check_all(const std::function<double()>& loss,
                                    const std::vector<NamedSlice>& slices);

}  // namespace msgc
