#include "tpnt/kernels.hpp"

namespace tpnt::kernels::serial {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const ConvDims& d) {
  const int m = d.ksize;
  for (int h = 0; h < d.height; ++h) {
    for (int col = 0; col < d.width; ++col) {
      for (int c = 0; c < d.out_ch; ++c) {
        double acc = bias ? bias[c] : 0.0;
        for (int i = 0; i < m; ++i) {
          const int hh = h + i - d.pad;
          if (hh < 0 || hh >= d.height) continue;
          for (int j = 0; j < m; ++j) {
            const int ww = col + j - d.pad;
            if (ww < 0 || ww >= d.width) continue;
            for (int k = 0; k < d.in_ch; ++k) {
              acc += static_cast<double>(x[(hh * d.width + ww) * d.in_ch + k]) *
                     w[((i * m + j) * d.in_ch + k) * d.out_ch + c];
            }
          }
        }
        y[(h * d.width + col) * d.out_ch + c] = static_cast<float>(acc);
      }
    }
  }
}

void conv2d_weight_grad(const float* x, const float* gy, float* dw, float* db, const ConvDims& d) {
  const int m = d.ksize;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      for (int k = 0; k < d.in_ch; ++k) {
        for (int c = 0; c < d.out_ch; ++c) {
          double acc = 0.0;
          for (int h = 0; h < d.height; ++h) {
            const int hh = h + i - d.pad;
            if (hh < 0 || hh >= d.height) continue;
            for (int col = 0; col < d.width; ++col) {
              const int ww = col + j - d.pad;
              if (ww < 0 || ww >= d.width) continue;
              acc += static_cast<double>(x[(hh * d.width + ww) * d.in_ch + k]) *
                     gy[(h * d.width + col) * d.out_ch + c];
            }
          }
          dw[((i * m + j) * d.in_ch + k) * d.out_ch + c] = static_cast<float>(acc);
        }
      }
    }
  }
  if (db) {
    for (int c = 0; c < d.out_ch; ++c) {
      double acc = 0.0;
      for (int p = 0; p < d.height * d.width; ++p) acc += gy[p * d.out_ch + c];
      db[c] = static_cast<float>(acc);
    }
  }
}

}  // namespace tpnt::kernels::serial
