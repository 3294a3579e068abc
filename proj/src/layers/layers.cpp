#include "fflab/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace fflab {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
}

int reduced_width(int channels, int reduction) {
  if (reduction < 1) throw std::invalid_argument("reduction ratio must be >= 1");
  return std::max(1, channels / reduction);
}

namespace {

void require_positive(int v, const char* what) {
  if (v < 1) throw std::invalid_argument(std::string(what) + " must be >= 1");
}

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, Rng& rng,
               ops::ConvOptions opt, bool with_bias)
    : options(opt) {
  require_positive(in_channels, "conv in_channels");
  require_positive(out_channels, "conv out_channels");
  const int cin_g = in_channels / opt.groups;
  weight = Tensor::zeros({out_channels, cin_g, kernel, kernel}, true);
  const int fan_in = cin_g * kernel * kernel;
  init_uniform_fan_in(weight, fan_in, rng);
  if (with_bias) {
    bias = Tensor::zeros({1, out_channels, 1, 1}, true);
    init_uniform_fan_in(bias, fan_in, rng);
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  return ops::conv2d(x, weight, bias, options);
}

void Conv2d::collect_parameters(const std::string& prefix,
                                std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "weight"), weight, true});
  if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias, false});
}

ConvTranspose2d::ConvTranspose2d(int in_channels, int out_channels, int kernel,
                                 int stride_, Rng& rng, int padding_)
    : stride(stride_), padding(padding_) {
  require_positive(in_channels, "transposed conv in_channels");
  require_positive(out_channels, "transposed conv out_channels");
  weight = Tensor::zeros({in_channels, out_channels, kernel, kernel}, true);
  bias = Tensor::zeros({1, out_channels, 1, 1}, true);
  const int fan_in = out_channels * kernel * kernel;
  init_uniform_fan_in(weight, fan_in, rng);
  init_uniform_fan_in(bias, fan_in, rng);
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
  return ops::conv_transpose2d(x, weight, bias, stride, padding);
}

void ConvTranspose2d::collect_parameters(const std::string& prefix,
                                         std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "weight"), weight, true});
  out.push_back({join_name(prefix, "bias"), bias, false});
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
  require_positive(in_features, "linear in_features");
  require_positive(out_features, "linear out_features");
  weight = Tensor::zeros({in_features, out_features, 1, 1}, true);
  bias = Tensor::zeros({1, out_features, 1, 1}, true);
  init_uniform_fan_in(weight, in_features, rng);
  init_uniform_fan_in(bias, in_features, rng);
}

Tensor Linear::forward(const Tensor& x) const {
  return ops::linear(x, weight, bias);
}

void Linear::collect_parameters(const std::string& prefix,
                                std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "weight"), weight, true});
  out.push_back({join_name(prefix, "bias"), bias, false});
}

BatchNorm2d::BatchNorm2d(int channels, double momentum_, double eps_)
    : gamma(Tensor::full({1, channels, 1, 1}, 1.0, true)),
      beta(Tensor::zeros({1, channels, 1, 1}, true)),
      running_mean(Tensor::zeros({1, channels, 1, 1})),
      running_var(Tensor::full({1, channels, 1, 1}, 1.0)),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm2d::forward(const Tensor& x) {
  return ops::batch_norm2d(x, gamma, beta, running_mean, running_var,
                           training ? ops::NormMode::kTrain : ops::NormMode::kEval,
                           momentum, eps);
}

void BatchNorm2d::collect_parameters(const std::string& prefix,
                                     std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "gamma"), gamma, false});
  out.push_back({join_name(prefix, "beta"), beta, false});
}

void BatchNorm2d::collect_buffers(const std::string& prefix,
                                  std::vector<BufferRef>& out) const {
  out.push_back({join_name(prefix, "running_mean"), running_mean});
  out.push_back({join_name(prefix, "running_var"), running_var});
}

ChannelLayerNorm::ChannelLayerNorm(int channels, double eps_)
    : gamma(Tensor::full({1, channels, 1, 1}, 1.0, true)),
      beta(Tensor::zeros({1, channels, 1, 1}, true)),
      eps(eps_) {}

Tensor ChannelLayerNorm::forward(const Tensor& x) const {
  return ops::layer_norm_channels(x, gamma, beta, eps);
}

void ChannelLayerNorm::collect_parameters(const std::string& prefix,
                                          std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "gamma"), gamma, false});
  out.push_back({join_name(prefix, "beta"), beta, false});
}

ChannelAttention::ChannelAttention(int channels, int reduction, Rng& rng)
    : squeeze(channels, reduced_width(channels, reduction), rng),
      expand(reduced_width(channels, reduction), channels, rng) {}

Tensor ChannelAttention::weights(const Tensor& f) const {
  return ops::sigmoid(expand.forward(ops::relu(squeeze.forward(ops::global_avg_pool(f)))));
}

Tensor ChannelAttention::forward(const Tensor& f) const {
  return ops::mul(f, weights(f));
}

void ChannelAttention::collect_parameters(const std::string& prefix,
                                          std::vector<ParamRef>& out) const {
  squeeze.collect_parameters(join_name(prefix, "squeeze"), out);
  expand.collect_parameters(join_name(prefix, "expand"), out);
}

SpatialAttention::SpatialAttention(Rng& rng, int kernel)
    : conv(1, 1, kernel, rng, {.stride = 1, .padding = kernel / 2}) {
  if (kernel % 2 == 0)
    throw std::invalid_argument("spatial attention kernel must be odd");
}

Tensor SpatialAttention::weights(const Tensor& p) const {
  return ops::sigmoid(conv.forward(ops::channel_mean(p)));
}

Tensor SpatialAttention::forward(const Tensor& p) const {
  return ops::mul(p, weights(p));
}

void SpatialAttention::collect_parameters(const std::string& prefix,
                                          std::vector<ParamRef>& out) const {
  conv.collect_parameters(join_name(prefix, "conv"), out);
}

DynamicAttention DynamicAttention::constant(int batch, int kernels, int taps,
                                            int in_channels, int out_channels,
                                            double value) {
  return {Tensor::full({batch, kernels, 1, 1}, value),
          Tensor::full({batch, taps, 1, 1}, value),
          Tensor::full({batch, in_channels, 1, 1}, value),
          Tensor::full({batch, out_channels, 1, 1}, value)};
}

DynamicConv2d::DynamicConv2d(int in_channels, int out_channels,
                             DynamicConvOptions options, Rng& rng)
    : fc(in_channels, reduced_width(in_channels, options.reduction), rng),
      head_kernel(reduced_width(in_channels, options.reduction), options.kernels, rng),
      head_spatial(reduced_width(in_channels, options.reduction),
                   options.kernel_size * options.kernel_size, rng),
      head_in(reduced_width(in_channels, options.reduction), in_channels, rng),
      head_out(reduced_width(in_channels, options.reduction), out_channels, rng),
      in_channels_(in_channels),
      out_channels_(out_channels),
      options_(options) {
  require_positive(options.kernels, "dynamic conv kernel count");
  if (options.kernel_size % 2 == 0)
    throw std::invalid_argument("dynamic conv kernel size must be odd for same padding");
  const int k = options.kernel_size;
  base = Tensor::zeros({options.kernels * out_channels, in_channels, k, k}, true);
  init_uniform_fan_in(base, in_channels * k * k, rng);
}

DynamicAttention DynamicConv2d::attention(const Tensor& x) const {
  if (x.shape().c != in_channels_)
    throw ShapeError("dynamic conv expects " + std::to_string(in_channels_) +
                     " input channels, got input " + x.shape().str());
  const Tensor hidden = fc.forward(ops::global_avg_pool(x));
  const Tensor kernel_logits = head_kernel.forward(hidden);
  return {options_.kernel_attention == KernelAttention::kSoftmax
              ? ops::softmax_channels(kernel_logits)
              : ops::sigmoid(kernel_logits),
          ops::sigmoid(head_spatial.forward(hidden)), ops::sigmoid(head_in.forward(hidden)),
          ops::sigmoid(head_out.forward(hidden))};
}

Tensor DynamicConv2d::forward_with(const Tensor& x, const DynamicAttention& a) const {
  if (x.shape().c != in_channels_)
    throw ShapeError("dynamic conv expects " + std::to_string(in_channels_) +
                     " input channels, got input " + x.shape().str());
  const Tensor kernels = ops::aggregate_kernels(base, a.kernel, a.spatial, a.in, a.out);
  return ops::conv2d_per_sample(x, kernels, options_.kernel_size / 2);
}

void DynamicConv2d::collect_parameters(const std::string& prefix,
                                       std::vector<ParamRef>& out) const {
  out.push_back({join_name(prefix, "base"), base, true});
  fc.collect_parameters(join_name(prefix, "fc"), out);
  head_kernel.collect_parameters(join_name(prefix, "head_kernel"), out);
  head_spatial.collect_parameters(join_name(prefix, "head_spatial"), out);
  head_in.collect_parameters(join_name(prefix, "head_in"), out);
  head_out.collect_parameters(join_name(prefix, "head_out"), out);
}

}  // namespace fflab
