#pragma once

#include <random>
#include <string>
#include <vector>

#include "fflab/ops.hpp"
#include "fflab/tensor.hpp"

namespace fflab {

using Rng = std::mt19937_64;

/// A trainable tensor with its dotted name. `decay` is false for biases and
/// normalization affine terms, which the optimizer leaves undecayed.
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

/// Non-trainable state that still belongs in a checkpoint.
struct BufferRef {
  std::string name;
  Tensor tensor;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix,
                                  std::vector<ParamRef>& out) const = 0;
  virtual void collect_buffers(const std::string& /*prefix*/,
                               std::vector<BufferRef>& /*out*/) const {}
  virtual void set_training(bool /*on*/) {}
};

std::string join_name(const std::string& prefix, const std::string& name);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill.
void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng);

class Conv2d : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, Rng& rng,
         ops::ConvOptions options = {}, bool bias = true);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Tensor weight;
  Tensor bias;  // undefined when constructed without bias
  ops::ConvOptions options;
};

class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride,
                  Rng& rng, int padding = 0);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Tensor weight;  // (in, out, k, k)
  Tensor bias;
  int stride;
  int padding;
};

class Linear : public Module {
 public:
  Linear(int in_features, int out_features, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Tensor weight;  // (in, out, 1, 1)
  Tensor bias;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x);
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;
  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef>& out) const override;
  void set_training(bool on) override { training = on; }

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum;
  double eps;
  bool training = true;
};

/// Per-pixel normalization across channels (ConvNeXt style).
class ChannelLayerNorm : public Module {
 public:
  explicit ChannelLayerNorm(int channels, double eps = 1e-6);

  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Tensor gamma;
  Tensor beta;
  double eps;
};

/// sigma(MLP(AvgPool(F))) * F with a c -> c/r -> c MLP (ReLU between).
class ChannelAttention : public Module {
 public:
  ChannelAttention(int channels, int reduction, Rng& rng);

  /// The per-channel gate, shape (n, c, 1, 1).
  Tensor weights(const Tensor& f) const;
  Tensor forward(const Tensor& f) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Linear squeeze;
  Linear expand;
};

/// sigma(Conv(mean_c(P))) * P with a single k x k convolution.
class SpatialAttention : public Module {
 public:
  explicit SpatialAttention(Rng& rng, int kernel = 7);

  /// The per-pixel gate, shape (n, 1, h, w).
  Tensor weights(const Tensor& p) const;
  Tensor forward(const Tensor& p) const;
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  Conv2d conv;
};

enum class KernelAttention { kSigmoid, kSoftmax };

struct DynamicConvOptions {
  int kernels = 4;
  int reduction = 4;
  int kernel_size = 3;
  KernelAttention kernel_attention = KernelAttention::kSigmoid;
};

/// Attention vectors along the kernel-count, spatial, input-channel and
/// output-channel axes, each shaped (n, len, 1, 1).
struct DynamicAttention {
  Tensor kernel;
  Tensor spatial;
  Tensor in;
  Tensor out;

  /// Every entry set to `value` (used to pin the attentions in tests).
  static DynamicAttention constant(int batch, int kernels, int taps, int in_channels,
                                   int out_channels, double value);
};

/// Omni-dimensional dynamic convolution.
///
/// The attention path is AvgPool -> FC(cin -> cin/r) -> four FC heads ->
/// activation. The effective kernel for sample b is
///   W_b = A_s[b] * A_i[b] * A_o[b] * sum_k A_n[b,k] W_k
/// broadcast over taps, input channels and output channels, and the layer
/// returns the stride-1, same-padded convolution of x with W_b. The heads
/// realize the "Conv" applied to the pooled 1x1 descriptor as FC layers.
class DynamicConv2d : public Module {
 public:
  DynamicConv2d(int in_channels, int out_channels, DynamicConvOptions options,
                Rng& rng);

  DynamicAttention attention(const Tensor& x) const;
  Tensor forward_with(const Tensor& x, const DynamicAttention& a) const;
  Tensor forward(const Tensor& x) const { return forward_with(x, attention(x)); }
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  int hidden() const { return fc.weight.shape().c; }
  const DynamicConvOptions& options() const { return options_; }

  Tensor base;  // (kernels * cout, cin, k, k)
  Linear fc;
  Linear head_kernel;
  Linear head_spatial;
  Linear head_in;
  Linear head_out;

 private:
  int in_channels_;
  int out_channels_;
  DynamicConvOptions options_;
};

/// Hidden width of the attention bottleneck: max(1, channels / reduction).
int reduced_width(int channels, int reduction);

}  // namespace fflab
