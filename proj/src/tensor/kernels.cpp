#include "kernels.hpp"

#include <cstring>

namespace fflab::kernels {

void im2col(const double* src, const ConvGeometry& g, double* col) {
  const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  double* dst = col;
  for (int c = 0; c < g.channels; ++c) {
    const double* s = src + c * plane;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        for (int y = 0; y < g.out_h; ++y) {
          const int iy = y * g.stride - g.padding + i;
          if (iy < 0 || iy >= g.in_h) {
            std::memset(dst, 0, sizeof(double) * g.out_w);
            dst += g.out_w;
            continue;
          }
          const double* row = s + static_cast<std::size_t>(iy) * g.in_w;
          if (g.stride == 1) {
            const int offset = j - g.padding;
            for (int x = 0; x < g.out_w; ++x) {
              const int ix = x + offset;
              dst[x] = (ix >= 0 && ix < g.in_w) ? row[ix] : 0.0;
            }
          } else {
            for (int x = 0; x < g.out_w; ++x) {
              const int ix = x * g.stride - g.padding + j;
              dst[x] = (ix >= 0 && ix < g.in_w) ? row[ix] : 0.0;
            }
          }
          dst += g.out_w;
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dst) {
  const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const double* src = col;
  for (int c = 0; c < g.channels; ++c) {
    double* d = dst + c * plane;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        for (int y = 0; y < g.out_h; ++y) {
          const int iy = y * g.stride - g.padding + i;
          if (iy < 0 || iy >= g.in_h) {
            src += g.out_w;
            continue;
          }
          double* row = d + static_cast<std::size_t>(iy) * g.in_w;
          for (int x = 0; x < g.out_w; ++x) {
            const int ix = x * g.stride - g.padding + j;
            if (ix >= 0 && ix < g.in_w) row[ix] += src[x];
          }
          src += g.out_w;
        }
      }
    }
  }
}

void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out + i * p;
    const double* ar = a + i * k;
    for (std::size_t r = 0; r < k; ++r) {
      const double v = ar[r];
      if (v == 0.0) continue;
      const double* br = b + r * p;
      for (std::size_t q = 0; q < p; ++q) o[q] += v * br[q];
    }
  }
}

void gemm_tn(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * p;
    for (std::size_t r = 0; r < k; ++r) {
      const double v = ar[r];
      if (v == 0.0) continue;
      double* o = out + r * p;
      for (std::size_t q = 0; q < p; ++q) o[q] += v * br[q];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * p;
    for (std::size_t r = 0; r < k; ++r) {
      const double* br = b + r * p;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t q = 0;
      for (; q + 4 <= p; q += 4) {
        s0 += ar[q] * br[q];
        s1 += ar[q + 1] * br[q + 1];
        s2 += ar[q + 2] * br[q + 2];
        s3 += ar[q + 3] * br[q + 3];
      }
      for (; q < p; ++q) s0 += ar[q] * br[q];
      out[i * k + r] += (s0 + s1) + (s2 + s3);
    }
  }
}

}  // namespace fflab::kernels
