#include <vector>

#include "tpnt/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tpnt::kernels {

namespace {
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr long kParallelWork = 1L << 16;
}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const ConvDims& d) {
  const int m = d.ksize;
  const int pixels = d.height * d.width;
  const long work = static_cast<long>(pixels) * m * m * d.in_ch * d.out_ch;
#pragma omp parallel if (work > kParallelWork)
  {
    std::vector<double> acc(static_cast<std::size_t>(d.out_ch));
#pragma omp for schedule(static)
    for (int p = 0; p < pixels; ++p) {
      const int h = p / d.width;
      const int col = p % d.width;
      for (int c = 0; c < d.out_ch; ++c) acc[c] = bias ? bias[c] : 0.0;
      for (int i = 0; i < m; ++i) {
        const int hh = h + i - d.pad;
        if (hh < 0 || hh >= d.height) continue;
        for (int j = 0; j < m; ++j) {
          const int ww = col + j - d.pad;
          if (ww < 0 || ww >= d.width) continue;
          const float* xp = x + (hh * d.width + ww) * d.in_ch;
          const float* wp = w + ((i * m + j) * d.in_ch) * d.out_ch;
          for (int k = 0; k < d.in_ch; ++k) {
            const double xv = xp[k];
            if (xv == 0.0) continue;
            const float* wk = wp + k * d.out_ch;
            for (int c = 0; c < d.out_ch; ++c) acc[c] += xv * wk[c];
          }
        }
      }
      float* yp = y + p * d.out_ch;
      for (int c = 0; c < d.out_ch; ++c) yp[c] = static_cast<float>(acc[c]);
    }
  }
}

void conv2d_weight_grad(const float* x, const float* gy, float* dw, float* db, const ConvDims& d) {
  const int m = d.ksize;
  const long work = static_cast<long>(d.height) * d.width * m * m * d.in_ch * d.out_ch;
#pragma omp parallel if (work > kParallelWork)
  {
    std::vector<double> acc(static_cast<std::size_t>(d.out_ch));
#pragma omp for schedule(static) collapse(2)
    for (int tap = 0; tap < m * m; ++tap) {
      for (int k = 0; k < d.in_ch; ++k) {
        const int i = tap / m;
        const int j = tap % m;
        for (int c = 0; c < d.out_ch; ++c) acc[c] = 0.0;
        for (int h = 0; h < d.height; ++h) {
          const int hh = h + i - d.pad;
          if (hh < 0 || hh >= d.height) continue;
          for (int col = 0; col < d.width; ++col) {
            const int ww = col + j - d.pad;
            if (ww < 0 || ww >= d.width) continue;
            const double xv = x[(hh * d.width + ww) * d.in_ch + k];
            if (xv == 0.0) continue;
            const float* gp = gy + (h * d.width + col) * d.out_ch;
            for (int c = 0; c < d.out_ch; ++c) acc[c] += xv * gp[c];
          }
        }
        float* out = dw + ((i * m + j) * d.in_ch + k) * d.out_ch;
        for (int c = 0; c < d.out_ch; ++c) out[c] = static_cast<float>(acc[c]);
      }
    }
  }
  if (db) {
    std::vector<double> acc(static_cast<std::size_t>(d.out_ch), 0.0);
    for (int p = 0; p < d.height * d.width; ++p)
      for (int c = 0; c < d.out_ch; ++c) acc[c] += gy[p * d.out_ch + c];
    for (int c = 0; c < d.out_ch; ++c) db[c] = static_cast<float>(acc[c]);
  }
}

void flip_kernel(const float* w, float* out, int ksize, int in_ch, int out_ch) {
  const int m = ksize;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int c = 0; c < out_ch; ++c)
        for (int k = 0; k < in_ch; ++k)
          out[((i * m + j) * out_ch + c) * in_ch + k] = w[(((m - 1 - i) * m + (m - 1 - j)) * in_ch + k) * out_ch + c];
}

}  // namespace tpnt::kernels
