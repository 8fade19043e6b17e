#include "msgc/ops.hpp"

#include <cmath>
#include <cstring>

#include "msgc/gemm.hpp"
#include "msgc/parallel.hpp"

namespace msgc {

namespace {

thread_local std::vector<double> tl_col;
thread_local std::vector<double> tl_buf;

void check_conv_args(const Tensor4& x, const Tensor4& w, int stride, int pad) {
  require(w.d[0] == w.d[1], ErrorCode::config,
          "convolution kernels must be square, got " + shape_str(w));
  require(w.d[0] >= 1, ErrorCode::config, "kernel size must be positive");
  require(x.d[1] == w.d[2], ErrorCode::config,
          "input channels " + std::to_string(x.d[1]) +
              " do not match kernel channels " + std::to_string(w.d[2]));
  require(stride >= 1, ErrorCode::config, "stride must be at least 1");
  require(pad >= 0, ErrorCode::config, "padding must be non-negative");
  require(x.d[0] >= 1, ErrorCode::config, "batch must be non-empty");
}

// Weight tensor (k, k, Cin, Cout) flattened to [Cout x Cin*k*k] so that a
// patch-matrix product yields the convolution.
void weights_to_rows(const Tensor4& w, double* wmat) {
  const int k = w.d[0], cin = w.d[2], cout = w.d[3];
  const int r_len = cin * k * k;
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx)
      for (int ci = 0; ci < cin; ++ci) {
        int r = (ci * k + ky) * k + kx;
        const double* src = &w.v[((static_cast<size_t>(ky) * k + kx) * cin + ci) * cout];
        for (int co = 0; co < cout; ++co)
          wmat[static_cast<size_t>(co) * r_len + r] = src[co];
      }
}

}  // namespace

Tensor4 conv2d_fwd(const Tensor4& x, const Tensor4& w,
                   const std::vector<double>* bias, int stride, int pad) {
  check_conv_args(x, w, stride, pad);
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int k = w.d[0], cout = w.d[3];
  if (bias)
    require(static_cast<int>(bias->size()) == cout, ErrorCode::config,
            "bias length does not match output channels");
  const int hout = conv_out_dim(h, k, stride, pad);
  const int wout = conv_out_dim(wd, k, stride, pad);
  const int r_len = cin * k * k;
  const size_t p_len = static_cast<size_t>(hout) * wout;

  std::vector<double> wmat(static_cast<size_t>(cout) * r_len);
  weights_to_rows(w, wmat.data());

  Tensor4 y(n, cout, hout, wout);
  parallel_for(n, [&](int i) {
    tl_col.resize(static_cast<size_t>(r_len) * p_len);
    const double* xi = &x.v[static_cast<size_t>(i) * cin * h * wd];
    im2col(xi, cin, h, wd, k, stride, pad, hout, wout, tl_col.data());
    double* yi = &y.v[static_cast<size_t>(i) * cout * p_len];
    gemm(wmat.data(), tl_col.data(), yi, cout, r_len, static_cast<int>(p_len));
    if (bias)
      for (int co = 0; co < cout; ++co) {
        double b = (*bias)[co];
        double* row = yi + co * p_len;
        for (size_t q = 0; q < p_len; ++q) row[q] += b;
      }
  });
  return y;
}

Conv2dGrads conv2d_bwd(const Tensor4& gy, const Tensor4& x, const Tensor4& w,
                       bool has_bias, int stride, int pad) {
  check_conv_args(x, w, stride, pad);
  const int n = x.d[0], cin = x.d[1], h = x.d[2], wd = x.d[3];
  const int k = w.d[0], cout = w.d[3];
  const int hout = conv_out_dim(h, k, stride, pad);
  const int wout = conv_out_dim(wd, k, stride, pad);
  require(gy.d[0] == n && gy.d[1] == cout && gy.d[2] == hout && gy.d[3] == wout,
          ErrorCode::config, "upstream gradient shape mismatch " + shape_str(gy));
  const int r_len = cin * k * k;
  const size_t p_len = static_cast<size_t>(hout) * wout;

  std::vector<double> wmat(static_cast<size_t>(cout) * r_len);
  weights_to_rows(w, wmat.data());

  Conv2dGrads g;
  g.gx = Tensor4(n, cin, h, wd);
  g.gw = Tensor4(k, k, cin, cout);
  if (has_bias) g.gbias.assign(cout, 0.0);

  // Per-sample weight-gradient slabs, reduced serially afterwards so the
  // result does not depend on the worker count.
  std::vector<double> gw_slab(static_cast<size_t>(n) * cout * r_len);
  parallel_for(n, [&](int i) {
    tl_col.resize(static_cast<size_t>(r_len) * p_len);
    const double* xi = &x.v[static_cast<size_t>(i) * cin * h * wd];
    im2col(xi, cin, h, wd, k, stride, pad, hout, wout, tl_col.data());
    const double* gyi = &gy.v[static_cast<size_t>(i) * cout * p_len];
    double* gwmat = gw_slab.data() + static_cast<size_t>(i) * cout * r_len;
    gemm_abt(gyi, tl_col.data(), gwmat, cout, static_cast<int>(p_len), r_len);
    // grad wrt the patch matrix, then scatter back to image layout
    tl_buf.resize(static_cast<size_t>(r_len) * p_len);
    gemm_atb(wmat.data(), gyi, tl_buf.data(), r_len, cout, static_cast<int>(p_len));
    double* gxi = &g.gx.v[static_cast<size_t>(i) * cin * h * wd];
    col2im(tl_buf.data(), cin, h, wd, k, stride, pad, hout, wout, gxi);
  });

  for (int i = 0; i < n; ++i) {
    const double* gwmat = gw_slab.data() + static_cast<size_t>(i) * cout * r_len;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx)
        for (int ci = 0; ci < cin; ++ci) {
          int r = (ci * k + ky) * k + kx;
          double* dst = &g.gw.v[((static_cast<size_t>(ky) * k + kx) * cin + ci) * cout];
          for (int co = 0; co < cout; ++co)
            dst[co] += gwmat[static_cast<size_t>(co) * r_len + r];
        }
  }

  if (has_bias) {
    for (int i = 0; i < n; ++i)
      for (int co = 0; co < cout; ++co) {
        const double* row = &gy.v[(static_cast<size_t>(i) * cout + co) * p_len];
        double s = 0.0;
        for (size_t q = 0; q < p_len; ++q) s += row[q];
        g.gbias[co] += s;
      }
  }
  return g;
}

Tensor2 global_avg_pool(const Tensor4& x) {
  const int n = x.d[0], c = x.d[1];
  const size_t plane = static_cast<size_t>(x.d[2]) * x.d[3];
  require(plane > 0, ErrorCode::config, "pooling over an empty plane");
  Tensor2 y(n, c);
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* src = &x.v[(static_cast<size_t>(i) * c + ci) * plane];
      double s = 0.0;
      for (size_t q = 0; q < plane; ++q) s += src[q];
      y.at(i, ci) = s / static_cast<double>(plane);
    }
  return y;
}

Tensor4 global_avg_pool_bwd(const Tensor2& gy, int h, int w) {
  Tensor4 gx(gy.rows, gy.cols, h, w);
  const size_t plane = static_cast<size_t>(h) * w;
  const double inv = 1.0 / static_cast<double>(plane);
  for (int i = 0; i < gy.rows; ++i)
    for (int ci = 0; ci < gy.cols; ++ci) {
      double g = gy.at(i, ci) * inv;
      double* dst = &gx.v[(static_cast<size_t>(i) * gy.cols + ci) * plane];
      for (size_t q = 0; q < plane; ++q) dst[q] = g;
    }
  return gx;
}

Tensor2 linear_fwd(const Tensor2& x, const Tensor2& w,
                   const std::vector<double>* bias) {
  require(x.cols == w.rows, ErrorCode::config,
          "linear: input width " + std::to_string(x.cols) +
              " does not match weight rows " + std::to_string(w.rows));
  if (bias)
    require(static_cast<int>(bias->size()) == w.cols, ErrorCode::config,
            "linear: bias length does not match output width");
  Tensor2 y(x.rows, w.cols);
  gemm(x.v.data(), w.v.data(), y.v.data(), x.rows, x.cols, w.cols);
  if (bias)
    for (int i = 0; i < y.rows; ++i)
      for (int j = 0; j < y.cols; ++j) y.at(i, j) += (*bias)[j];
  return y;
}

LinearGrads linear_bwd(const Tensor2& gy, const Tensor2& x, const Tensor2& w,
                       bool has_bias) {
  require(gy.rows == x.rows && gy.cols == w.cols, ErrorCode::config,
          "linear: upstream gradient shape mismatch");
  LinearGrads g;
  g.gx = Tensor2(x.rows, x.cols);
  g.gw = Tensor2(w.rows, w.cols);
  gemm_abt(gy.v.data(), w.v.data(), g.gx.v.data(), gy.rows, gy.cols, w.rows);
  gemm_atb(x.v.data(), gy.v.data(), g.gw.v.data(), w.rows, x.rows, w.cols);
  if (has_bias) {
    g.gbias.assign(w.cols, 0.0);
    for (int i = 0; i < gy.rows; ++i)
      for (int j = 0; j < gy.cols; ++j) g.gbias[j] += gy.at(i, j);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

namespace {

// Shared statistics step for both layouts.  `gather(f, fn)` must invoke fn on
// every element of feature f.
struct BnStats {
  std::vector<double> mean, var, inv_std;
};

}  // namespace

Tensor4 bn4d_fwd(const Tensor4& x, const std::vector<double>& gamma,
                 const std::vector<double>& beta, std::vector<double>& run_mean,
                 std::vector<double>& run_var, bool train, double momentum,
                 double eps, BnCache* cache) {
  const int n = x.d[0], c = x.d[1];
  const size_t plane = static_cast<size_t>(x.d[2]) * x.d[3];
  const long long m = static_cast<long long>(n) * plane;
  require(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c &&
              static_cast<int>(run_mean.size()) == c && static_cast<int>(run_var.size()) == c,
          ErrorCode::config, "batch norm parameter length does not match channels");
  require(!train || n >= 2, ErrorCode::config,
          "batch norm in training mode needs batch size >= 2");

  std::vector<double> mean(c), inv_std(c);
  if (train) {
    std::vector<double> var(c);
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* src = &x.v[(static_cast<size_t>(i) * c + ci) * plane];
        for (size_t q = 0; q < plane; ++q) s += src[q];
      }
      mean[ci] = s / static_cast<double>(m);
      double sv = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* src = &x.v[(static_cast<size_t>(i) * c + ci) * plane];
        for (size_t q = 0; q < plane; ++q) {
          double d = src[q] - mean[ci];
          sv += d * d;
        }
      }
      var[ci] = sv / static_cast<double>(m);
      inv_std[ci] = 1.0 / std::sqrt(var[ci] + eps);
      run_mean[ci] = (1.0 - momentum) * run_mean[ci] + momentum * mean[ci];
      run_var[ci] = (1.0 - momentum) * run_var[ci] + momentum * var[ci];
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[ci] = run_mean[ci];
      inv_std[ci] = 1.0 / std::sqrt(run_var[ci] + eps);
    }
  }

  Tensor4 y(x.d[0], x.d[1], x.d[2], x.d[3]);
  if (cache) {
    cache->xhat.resize(x.size());
    cache->inv_std = inv_std;
    cache->train = train;
    cache->features = c;
    cache->per_feature = m;
  }
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const double* src = &x.v[(static_cast<size_t>(i) * c + ci) * plane];
      double* dst = &y.v[(static_cast<size_t>(i) * c + ci) * plane];
      double* xh = cache ? &cache->xhat[(static_cast<size_t>(i) * c + ci) * plane] : nullptr;
      double mu = mean[ci], is = inv_std[ci], ga = gamma[ci], be = beta[ci];
      for (size_t q = 0; q < plane; ++q) {
        double h = (src[q] - mu) * is;
        if (xh) xh[q] = h;
        dst[q] = ga * h + be;
      }
    }
  return y;
}

Bn4dGrads bn4d_bwd(const Tensor4& gy, const std::vector<double>& gamma,
                   const BnCache& cache, const std::array<int, 4>& xdims) {
  const int n = xdims[0], c = xdims[1];
  const size_t plane = static_cast<size_t>(xdims[2]) * xdims[3];
  require(gy.d == xdims, ErrorCode::config, "batch norm gradient shape mismatch");
  require(cache.features == c && cache.xhat.size() == gy.size(), ErrorCode::config,
          "batch norm cache does not match input");
  Bn4dGrads g;
  g.gx = Tensor4(xdims[0], xdims[1], xdims[2], xdims[3]);
  g.ggamma.assign(c, 0.0);
  g.gbeta.assign(c, 0.0);
  const double m = static_cast<double>(cache.per_feature);
  for (int ci = 0; ci < c; ++ci) {
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* gyp = &gy.v[(static_cast<size_t>(i) * c + ci) * plane];
      const double* xh = &cache.xhat[(static_cast<size_t>(i) * c + ci) * plane];
      for (size_t q = 0; q < plane; ++q) {
        sum_gy += gyp[q];
        sum_gy_xhat += gyp[q] * xh[q];
      }
    }
    g.gbeta[ci] = sum_gy;
    g.ggamma[ci] = sum_gy_xhat;
    double ga_is = gamma[ci] * cache.inv_std[ci];
    for (int i = 0; i < n; ++i) {
      const double* gyp = &gy.v[(static_cast<size_t>(i) * c + ci) * plane];
      const double* xh = &cache.xhat[(static_cast<size_t>(i) * c + ci) * plane];
      double* gxp = &g.gx.v[(static_cast<size_t>(i) * c + ci) * plane];
      if (cache.train) {
        for (size_t q = 0; q < plane; ++q)
          gxp[q] = ga_is * (gyp[q] - sum_gy / m - xh[q] * sum_gy_xhat / m);
      } else {
        for (size_t q = 0; q < plane; ++q) gxp[q] = ga_is * gyp[q];
      }
    }
  }
  return g;
}

Tensor2 bn2d_fwd(const Tensor2& x, const std::vector<double>& gamma,
                 const std::vector<double>& beta, std::vector<double>& run_mean,
                 std::vector<double>& run_var, bool train, double momentum,
                 double eps, BnCache* cache) {
  const int n = x.rows, c = x.cols;
  require(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c &&
              static_cast<int>(run_mean.size()) == c && static_cast<int>(run_var.size()) == c,
          ErrorCode::config, "batch norm parameter length does not match features");
  require(!train || n >= 2, ErrorCode::config,
          "batch norm in training mode needs batch size >= 2");

  std::vector<double> mean(c), inv_std(c);
  if (train) {
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += x.at(i, j);
      mean[j] = s / n;
      double sv = 0.0;
      for (int i = 0; i < n; ++i) {
        double d = x.at(i, j) - mean[j];
        sv += d * d;
      }
      double var = sv / n;
      inv_std[j] = 1.0 / std::sqrt(var + eps);
      run_mean[j] = (1.0 - momentum) * run_mean[j] + momentum * mean[j];
      run_var[j] = (1.0 - momentum) * run_var[j] + momentum * var;
    }
  } else {
    for (int j = 0; j < c; ++j) {
      mean[j] = run_mean[j];
      inv_std[j] = 1.0 / std::sqrt(run_var[j] + eps);
    }
  }

  Tensor2 y(n, c);
  if (cache) {
    cache->xhat.resize(x.size());
    cache->inv_std = inv_std;
    cache->train = train;
    cache->features = c;
    cache->per_feature = n;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double h = (x.at(i, j) - mean[j]) * inv_std[j];
      if (cache) cache->xhat[static_cast<size_t>(i) * c + j] = h;
      y.at(i, j) = gamma[j] * h + beta[j];
    }
  return y;
}

Bn2dGrads bn2d_bwd(const Tensor2& gy, const std::vector<double>& gamma,
                   const BnCache& cache, int rows, int cols) {
  require(gy.rows == rows && gy.cols == cols, ErrorCode::config,
          "batch norm gradient shape mismatch");
  require(cache.features == cols && cache.xhat.size() == gy.size(), ErrorCode::config,
          "batch norm cache does not match input");
  Bn2dGrads g;
  g.gx = Tensor2(rows, cols);
  g.ggamma.assign(cols, 0.0);
  g.gbeta.assign(cols, 0.0);
  const double m = static_cast<double>(cache.per_feature);
  for (int j = 0; j < cols; ++j) {
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int i = 0; i < rows; ++i) {
      double gj = gy.at(i, j);
      sum_gy += gj;
      sum_gy_xhat += gj * cache.xhat[static_cast<size_t>(i) * cols + j];
    }
    g.gbeta[j] = sum_gy;
    g.ggamma[j] = sum_gy_xhat;
    double ga_is = gamma[j] * cache.inv_std[j];
    for (int i = 0; i < rows; ++i) {
      double gj = gy.at(i, j);
      double xh = cache.xhat[static_cast<size_t>(i) * cols + j];
      g.gx.at(i, j) = cache.train
                          ? ga_is * (gj - sum_gy / m - xh * sum_gy_xhat / m)
                          : ga_is * gj;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace {
template <typename T>
T relu_impl(const T& x) {
  T y = x;
  for (double& e : y.v) e = e > 0.0 ? e : 0.0;
  return y;
}
template <typename T>
T relu_bwd_impl(const T& gy, const T& x) {
  require(gy.size() == x.size(), ErrorCode::config, "relu gradient size mismatch");
  T g = gy;
  for (size_t i = 0; i < g.v.size(); ++i)
    if (x.v[i] <= 0.0) g.v[i] = 0.0;
  return g;
}
}  // namespace

Tensor4 relu(const Tensor4& x) { return relu_impl(x); }
Tensor2 relu(const Tensor2& x) { return relu_impl(x); }
Tensor4 relu_bwd(const Tensor4& gy, const Tensor4& x) { return relu_bwd_impl(gy, x); }
Tensor2 relu_bwd(const Tensor2& gy, const Tensor2& x) { return relu_bwd_impl(gy, x); }

Tensor2 sigmoid(const Tensor2& x) {
  Tensor2 y = x;
  for (double& e : y.v) e = 1.0 / (1.0 + std::exp(-e));
  return y;
}

Tensor2 sigmoid_bwd(const Tensor2& gy, const Tensor2& y) {
  require(gy.size() == y.size(), ErrorCode::config, "sigmoid gradient size mismatch");
  Tensor2 g = gy;
  for (size_t i = 0; i < g.v.size(); ++i) g.v[i] *= y.v[i] * (1.0 - y.v[i]);
  return g;
}

CeResult softmax_ce_fwd(const Tensor2& logits, const std::vector<uint32_t>& labels) {
  const int n = logits.rows, k = logits.cols;
  require(n >= 1 && k >= 1, ErrorCode::config, "empty logits");
  require(static_cast<int>(labels.size()) == n, ErrorCode::config,
          "label count does not match batch size");
  CeResult r;
  r.probs = Tensor2(n, k);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    require(labels[i] < static_cast<uint32_t>(k), ErrorCode::label_range,
            "label " + std::to_string(labels[i]) + " outside [0, " +
                std::to_string(k) + ")");
    const double* row = logits.row(i);
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    double logz = std::log(z) + mx;
    for (int j = 0; j < k; ++j) r.probs.at(i, j) = std::exp(row[j] - logz);
    loss -= row[labels[i]] - logz;
  }
  r.loss = loss / n;
  return r;
}

Tensor2 softmax_ce_bwd(const Tensor2& probs, const std::vector<uint32_t>& labels) {
  const int n = probs.rows, k = probs.cols;
  require(static_cast<int>(labels.size()) == n, ErrorCode::config,
          "label count does not match batch size");
  Tensor2 g(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      g.at(i, j) = (probs.at(i, j) - (labels[i] == static_cast<uint32_t>(j) ? 1.0 : 0.0)) / n;
  return g;
}

}  // namespace msgc
