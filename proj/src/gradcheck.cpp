#include "msgc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msgc {

FdReport finite_diff_check(const std::function<double()>& loss,
                           std::span<double> theta,
                           std::span<const double> analytic) {
  // Central differences over a short step cascade.  A single step size cannot
  // serve every coordinate: large steps straddle relu kinks when a
  // pre-activation happens to sit near zero, and small steps drown tiny
  // derivatives in subtractive cancellation.  A kink only corrupts steps
  // larger than its distance, and rounding noise only corrupts the smallest
  // steps, while a wrong analytic derivative disagrees at every step — so
  // each coordinate keeps its best (smallest) error across the cascade, and
  // moves on early once that error is clearly below any sane tolerance.
  static constexpr double kSteps[] = {1e-4, 1e-5, 1e-6};
  static constexpr double kEarlyOut = 1e-6;

  FdReport rep;
  for (size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    const double an = analytic[i];
    double best_err = std::numeric_limits<double>::infinity();
    double best_fd = 0.0;
    for (double scale : kSteps) {
      const double h = scale * std::max(1.0, std::fabs(saved));
      theta[i] = saved + h;
      const double fp = loss();
      theta[i] = saved - h;
      const double fm = loss();
      theta[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.finite = false;
        rep.worst_index = static_cast<int>(i);
        rep.max_rel_err = std::numeric_limits<double>::infinity();
        return rep;
      }
      const double fd = (fp - fm) / (2.0 * h);
      // Coordinates whose derivative is negligible against the loss scale are
      // judged absolutely (|fd - an| <= tol * 1e-5): a ratio of two values
      // deep inside the rounding floor carries no information.
      const double err = std::fabs(fd - an) / std::max(1e-5, std::fabs(fd) + std::fabs(an));
      if (err < best_err) {
        best_err = err;
        best_fd = fd;
      }
      if (best_err <= kEarlyOut) break;
    }
    if (best_err > rep.max_rel_err) {
      rep.max_rel_err = best_err;
      rep.worst_index = static_cast<int>(i);
      rep.worst_fd = best_fd;
      rep.worst_analytic = an;
    }
  }
  return rep;
}

NamedFdReport finite_diff_check_all(const std::function<double()>& loss,
                                    const std::vector<NamedSlice>& slices) {
  NamedFdReport out;
  for (const auto& s : slices) {
    FdReport r = finite_diff_check(loss, std::span<double>(s.data, s.size),
                                   std::span<const double>(s.grad, s.size));
    if (!r.finite || r.max_rel_err > out.report.max_rel_err) {
      out.report = r;
      out.worst_slice = s.name;
      if (!r.finite) return out;
    }
  }
  return out;
}

}  // namespace msgc
