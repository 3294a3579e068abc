#pragma once

#include <cstddef>

// Dense loops shared by the convolution family. All matrices are row-major
// and every routine accumulates into its output.
namespace fflab::kernels {

struct ConvGeometry {
  int channels;  // channels of the im2col source
  int in_h, in_w;
  int kh, kw;
  int stride, padding;
  int out_h, out_w;

  std::size_t rows() const { return static_cast<std::size_t>(channels) * kh * kw; }
  std::size_t cols() const { return static_cast<std::size_t>(out_h) * out_w; }
};

/// col[(c*kh + i)*kw + j][p] = src[c][y*stride - pad + i][x*stride - pad + j]
void im2col(const double* src, const ConvGeometry& g, double* col);
/// Adjoint of im2col: scatters col back into dst (accumulating).
void col2im_add(const double* col, const ConvGeometry& g, double* dst);

/// out (m x p) += a (m x k) * b (k x p)
void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p);
/// out (k x p) += a^T * b, with a (m x k) and b (m x p)
void gemm_tn(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p);
/// out (m x k) += a * b^T, with a (m x p) and b (k x p)
void gemm_nt(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t p);

}  // namespace fflab::kernels
