#include "msgc/gemm.hpp"

#include <cstring>

#include "msgc/tensor.hpp"

namespace msgc {

void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm(const double* a, const double* b, double* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
  gemm_acc(a, b, c, m, k, n);
}

void gemm_abt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void gemm_atb(const double* a, const double* b, double* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<size_t>(p) * m;
    const double* bp = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

int conv_out_dim(int size, int k, int stride, int pad) {
  int span = size + 2 * pad - k;
  require(span >= 0, ErrorCode::config, "kernel larger than padded input");
  return span / stride + 1;
}

void im2col(const double* img, int c, int h, int w, int k, int stride, int pad,
            int hout, int wout, double* col) {
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t out_plane = static_cast<size_t>(hout) * wout;
  for (int ci = 0; ci < c; ++ci) {
    const double* src = img + ci * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + ((static_cast<size_t>(ci) * k + ky) * k + kx) * out_plane;
        for (int oy = 0; oy < hout; ++oy) {
          int iy = oy * stride - pad + ky;
          double* drow = dst + static_cast<size_t>(oy) * wout;
          if (iy < 0 || iy >= h) {
            std::memset(drow, 0, sizeof(double) * wout);
            continue;
          }
          const double* srow = src + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            int ix = ox * stride - pad + kx;
            drow[ox] = (ix < 0 || ix >= w) ? 0.0 : srow[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, int c, int h, int w, int k, int stride, int pad,
            int hout, int wout, double* img) {
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t out_plane = static_cast<size_t>(hout) * wout;
  for (int ci = 0; ci < c; ++ci) {
    double* dst = img + ci * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + ((static_cast<size_t>(ci) * k + ky) * k + kx) * out_plane;
        for (int oy = 0; oy < hout; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* srow = src + static_cast<size_t>(oy) * wout;
          double* drow = dst + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace msgc
