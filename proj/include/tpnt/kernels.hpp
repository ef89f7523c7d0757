#pragma once

// Stride-1 "same" convolution kernels over H x W x C row-major maps with
// m x m x D x C weights. The serial namespace holds the plain nested-loop
// reference; the top-level functions are the OpenMP versions used by the
// layers. Each output element is summed in a fixed order, so the parallel
// results do not depend on the thread count.

namespace tpnt::kernels {

struct ConvDims {
  int height = 0;
  int width = 0;
  int in_ch = 0;
  int out_ch = 0;
  int ksize = 1;
  int pad = 0;
};

namespace serial {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const ConvDims& d);
void conv2d_weight_grad(const float* x, const float* gy, float* dw, float* db, const ConvDims& d);

}  // namespace serial

// bias and db may be null.
void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const ConvDims& d);
void conv2d_weight_grad(const float* x, const float* gy, float* dw, float* db, const ConvDims& d);

// W[i][j][c][d] = w[m-1-i][m-1-j][d][c]
void flip_kernel(const float* w, float* out, int ksize, int in_ch, int out_ch);

// Number of threads the parallel kernels will use (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace tpnt::kernels
