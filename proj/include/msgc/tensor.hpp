#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace msgc {

// Error taxonomy shared by the library and the CLI.  Each code maps to a
// stable category token (printed by the CLI) and a process exit code.
enum class ErrorCode {
  config,               // invalid configuration or shape mismatch
  io,                   // file cannot be opened / read / written
  bad_magic,            // file exists but is not the expected format
  truncated,            // file ends before the declared payload
  crc_mismatch,         // checkpoint payload checksum failure
  label_range,          // dataset label outside [0, classes)
  checkpoint_mismatch,  // checkpoint tensors do not match the model
  numeric,              // non-finite value where a finite one is required
  usage,                // bad command line
};

const char* error_category(ErrorCode code);
int error_exit_code(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }
  const char* category() const { return error_category(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool ok, ErrorCode code, const std::string& message) {
  if (!ok) fail(code, message);
}

// Dense rank-4 tensor of doubles.  Activations use (N, C, H, W); convolution
// weights use (k, k, Cin, Cout).  Row-major in the declared order.
struct Tensor4 {
  std::array<int, 4> d{0, 0, 0, 0};
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int d0, int d1, int d2, int d3) : d{d0, d1, d2, d3} {
    require(d0 >= 0 && d1 >= 0 && d2 >= 0 && d3 >= 0, ErrorCode::config,
            "tensor dimensions must be non-negative");
    v.assign(static_cast<size_t>(d0) * d1 * d2 * d3, 0.0);
  }

  size_t size() const { return v.size(); }

  size_t index(int i0, int i1, int i2, int i3) const {
    return ((static_cast<size_t>(i0) * d[1] + i1) * d[2] + i2) * d[3] + i3;
  }
  double& at(int i0, int i1, int i2, int i3) { return v[index(i0, i1, i2, i3)]; }
  double at(int i0, int i1, int i2, int i3) const { return v[index(i0, i1, i2, i3)]; }

  bool same_shape(const Tensor4& o) const { return d == o.d; }
};

// Dense rank-2 tensor (rows x cols), row-major.
struct Tensor2 {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Tensor2() = default;
  Tensor2(int r, int c) : rows(r), cols(c) {
    require(r >= 0 && c >= 0, ErrorCode::config,
            "tensor dimensions must be non-negative");
    v.assign(static_cast<size_t>(r) * c, 0.0);
  }

  size_t size() const { return v.size(); }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
};

template <typename T>
bool all_finite(const T& t) {
  for (double x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline std::string shape_str(const Tensor4& t) {
  return "(" + std::to_string(t.d[0]) + "," + std::to_string(t.d[1]) + "," +
         std::to_string(t.d[2]) + "," + std::to_string(t.d[3]) + ")";
}

}  // namespace msgc
