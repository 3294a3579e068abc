#pragma once

#include <span>
#include <vector>

#include "fflab/tensor.hpp"

// Differentiable operations over rank-4 tensors. Every function records a
// backward rule in the thread's Graph when grad mode is on and an operand
// requires grad.
namespace fflab::ops {

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Output extent of a convolution along one axis.
int conv_out_extent(int in, int kernel, int stride, int padding);
/// Output extent of a transposed convolution along one axis.
int conv_transpose_out_extent(int in, int kernel, int stride, int padding);

/// Cross-correlation of x (n, cin, h, w) with kernel (cout, cin/groups, kh, kw).
/// `bias` may be undefined; otherwise it holds cout values.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              ConvOptions options = {});

/// Adjoint of conv2d with groups = 1. The kernel uses the (cin, cout, kh, kw)
/// layout, so passing a conv2d kernel unchanged yields its exact transpose.
Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel,
                        const Tensor& bias, int stride, int padding);

/// Stride-1 convolution where sample b of x uses its own kernel, stored at
/// rows [b*cout, (b+1)*cout) of `kernels` (shape n*cout, cin, kh, kw).
Tensor conv2d_per_sample(const Tensor& x, const Tensor& kernels, int padding);

/// Attention-weighted aggregation of `count` base kernels.
///
/// base: (count*cout, cin, kh, kw). Attentions are (n, len, 1, 1) with len
/// count, kh*kw, cin and cout respectively. Returns (n*cout, cin, kh, kw) with
///   out[b,o,i,s] = a_spatial[b,s] * a_in[b,i] * a_out[b,o]
///                  * sum_k a_kernel[b,k] * base[k,o,i,s].
Tensor aggregate_kernels(const Tensor& base, const Tensor& a_kernel,
                         const Tensor& a_spatial, const Tensor& a_in,
                         const Tensor& a_out);

enum class NormMode { kTrain, kEval };

/// Per-channel batch normalization. In train mode the batch statistics are
/// used and the running estimates are updated in place (unbiased variance);
/// in eval mode the running estimates are used.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, NormMode mode,
                    double momentum, double eps);

/// Normalizes across channels at each pixel, then applies gamma/beta.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, double eps);

// Broadcasting binary ops: an operand extent of 1 repeats along that axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
/// Softmax across the channel axis at each (n, h, w).
Tensor softmax_channels(const Tensor& x);

Tensor global_avg_pool(const Tensor& x);  // (n, c, 1, 1)
Tensor channel_mean(const Tensor& x);     // (n, 1, h, w)
Tensor sum(const Tensor& x);              // (1, 1, 1, 1)
Tensor mean(const Tensor& x);             // (1, 1, 1, 1)
Tensor l1_norm(const Tensor& x);          // (1, 1, 1, 1)

Tensor concat_channels(std::span<const Tensor> inputs);
Tensor concat_batch(std::span<const Tensor> inputs);
/// Sample `index` of the batch, shape (1, c, h, w).
Tensor select_sample(const Tensor& x, int index);
Tensor reshape(const Tensor& x, Shape shape);

/// Affine map of x (n, d, 1, 1) by weight (d, e, 1, 1) plus bias (e values).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x / (sum(x) + guard), differentiable through the sum.
Tensor normalize_mass(const Tensor& x, double guard);

/// <coefficients, x> with coefficients held constant; the gradient w.r.t. x
/// is `coefficients` itself.
Tensor dot_constant(const Tensor& x, std::span<const double> coefficients);

}  // namespace fflab::ops
