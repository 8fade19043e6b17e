#pragma once

#include <cstddef>
#include <vector>

namespace msgc {

// Plain row-major matrix products on raw buffers.  These are the hot loops
// behind convolution and the fully connected layers; everything else in the
// library goes through them.

// c[m x n] = a[m x k] * b[k x n]
void gemm(const double* a, const double* b, double* c, int m, int k, int n);

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n);

// c[m x n] = a[m x k] * b[n x k]^T
void gemm_abt(const double* a, const double* b, double* c, int m, int k, int n);

// c[m x n] = a[k x m]^T * b[k x n]
void gemm_atb(const double* a, const double* b, double* c, int m, int k, int n);

// Unrolls one image (C, H, W) into a patch matrix of shape
// [C*k*k x Hout*Wout]; row index is (c*k + ky)*k + kx, column index is
// oy*Wout + ox.  Out-of-bounds taps are zero.
void im2col(const double* img, int c, int h, int w, int k, int stride, int pad,
            int hout, int wout, double* col);

// Transpose of im2col: scatters a patch matrix back onto an image (+=).
// The image buffer must be zeroed by the caller.
void col2im(const double* col, int c, int h, int w, int k, int stride, int pad,
            int hout, int wout, double* img);

// Output spatial size for one axis: floor((size + 2*pad - k) / stride) + 1.
int conv_out_dim(int size, int k, int stride, int pad);

}  // namespace msgc
