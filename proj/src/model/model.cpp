#include <numeric>

#include "fflab/model.hpp"

namespace fflab {

namespace {

/// A backbone step with a single input and output.
class Layer : public Module {
 public:
  virtual Tensor forward(const Tensor& x) = 0;
};

/// conv -> BN -> ReLU (toy stem and downsampling).
class ConvBnRelu : public Layer {
 public:
  ConvBnRelu(int cin, int cout, int kernel, int stride, Rng& rng)
      : conv(cin, cout, kernel, rng, {.stride = stride}, false), norm(cout) {}
  Tensor forward(const Tensor& x) override { return ops::relu(norm.forward(conv.forward(x))); }
  void collect_parameters(const std::string& p, std::vector<ParamRef>& out) const override {
    conv.collect_parameters(join_name(p, "conv"), out);
    norm.collect_parameters(join_name(p, "norm"), out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef>& out) const override {
    norm.collect_buffers(join_name(p, "norm"), out);
  }
  void set_training(bool on) override { norm.set_training(on); }

  Conv2d conv;
  BatchNorm2d norm;
};

/// x + relu(bn(conv3x3(x))).
class PlainBlock : public Layer {
 public:
  PlainBlock(int c, Rng& rng) : conv(c, c, 3, rng, {.padding = 1}, false), norm(c) {}
  Tensor forward(const Tensor& x) override {
    return ops::add(x, ops::relu(norm.forward(conv.forward(x))));
  }
  void collect_parameters(const std::string& p, std::vector<ParamRef>& out) const override {
    conv.collect_parameters(join_name(p, "conv"), out);
    norm.collect_parameters(join_name(p, "norm"), out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef>& out) const override {
    norm.collect_buffers(join_name(p, "norm"), out);
  }
  void set_training(bool on) override { norm.set_training(on); }

  Conv2d conv;
  BatchNorm2d norm;
};

/// Patchify stem (conv then LN) or downsampling (LN then conv).
class NormConv : public Layer {
 public:
  NormConv(int cin, int cout, int kernel, bool norm_first, Rng& rng)
      : conv(cin, cout, kernel, rng, {.stride = kernel}),
        norm(norm_first ? cin : cout),
        norm_first_(norm_first) {}
  Tensor forward(const Tensor& x) override {
    return norm_first_ ? conv.forward(norm.forward(x)) : norm.forward(conv.forward(x));
  }
  void collect_parameters(const std::string& p, std::vector<ParamRef>& out) const override {
    conv.collect_parameters(join_name(p, "conv"), out);
    norm.collect_parameters(join_name(p, "norm"), out);
  }

  Conv2d conv;
  ChannelLayerNorm norm;

 private:
  bool norm_first_;
};

/// dw7x7 -> LN -> pw (4x) -> GELU -> pw -> layer scale, plus the residual.
class ConvNeXtBlock : public Layer {
 public:
  ConvNeXtBlock(int c, Rng& rng)
      : dwconv(c, c, 7, rng, {.padding = 3, .groups = c}),
        norm(c),
        pw1(c, 4 * c, 1, rng),
        pw2(4 * c, c, 1, rng),
        layer_scale(Tensor::full({1, c, 1, 1}, 1e-6, true)) {}
  Tensor forward(const Tensor& x) override {
    Tensor y = pw2.forward(ops::gelu(pw1.forward(norm.forward(dwconv.forward(x)))));
    return ops::add(x, ops::mul(y, layer_scale));
  }
  void collect_parameters(const std::string& p, std::vector<ParamRef>& out) const override {
    dwconv.collect_parameters(join_name(p, "dwconv"), out);
    norm.collect_parameters(join_name(p, "norm"), out);
    pw1.collect_parameters(join_name(p, "pw1"), out);
    pw2.collect_parameters(join_name(p, "pw2"), out);
    out.push_back({join_name(p, "layer_scale"), layer_scale, false});
  }

  Conv2d dwconv;
  ChannelLayerNorm norm;
  Conv2d pw1;
  Conv2d pw2;
  Tensor layer_scale;
};

}  // namespace

struct Backbone::Stage {
  std::unique_ptr<Layer> entry;
  std::vector<std::unique_ptr<Layer>> blocks;
};

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  const int stem = config.stem_stride();
  const bool convnext = config.block == BlockKind::kConvNeXt;
  for (std::size_t i = 0; i < config.stage_channels.size(); ++i) {
    auto stage = std::make_unique<Stage>();
    const int c = config.stage_channels[i];
    const int cin = i == 0 ? config.input_channels : config.stage_channels[i - 1];
    const int kernel = i == 0 ? stem : 2;
    if (convnext)
      stage->entry = std::make_unique<NormConv>(cin, c, kernel, i != 0, rng);
    else
      stage->entry = std::make_unique<ConvBnRelu>(cin, c, kernel, kernel, rng);
    for (int d = 0; d < config.stage_depths[i]; ++d) {
      if (convnext)
        stage->blocks.push_back(std::make_unique<ConvNeXtBlock>(c, rng));
      else
        stage->blocks.push_back(std::make_unique<PlainBlock>(c, rng));
    }
    stages_.push_back(std::move(stage));
  }
}

Backbone::~Backbone() = default;

MultiScaleFeatures Backbone::forward(const Tensor& image) {
  std::vector<Tensor> outs;
  Tensor x = image;
  for (auto& stage : stages_) {
    x = stage->entry->forward(x);
    for (auto& b : stage->blocks) x = b->forward(x);
    outs.push_back(x);
  }
  const std::size_t n = outs.size();
  return {outs[n - 3], outs[n - 2], outs[n - 1]};
}

void Backbone::collect_parameters(const std::string& prefix,
                                  std::vector<ParamRef>& out) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string s = join_name(prefix, "stage" + std::to_string(i));
    stages_[i]->entry->collect_parameters(join_name(s, i == 0 ? "stem" : "down"), out);
    for (std::size_t j = 0; j < stages_[i]->blocks.size(); ++j)
      stages_[i]->blocks[j]->collect_parameters(join_name(s, "block" + std::to_string(j)), out);
  }
}

void Backbone::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string s = join_name(prefix, "stage" + std::to_string(i));
    stages_[i]->entry->collect_buffers(join_name(s, i == 0 ? "stem" : "down"), out);
    for (std::size_t j = 0; j < stages_[i]->blocks.size(); ++j)
      stages_[i]->blocks[j]->collect_buffers(join_name(s, "block" + std::to_string(j)), out);
  }
}

void Backbone::set_training(bool on) {
  for (auto& stage : stages_) {
    stage->entry->set_training(on);
    for (auto& b : stage->blocks) b->set_training(on);
  }
}

DynamicBlock::DynamicBlock(int in_channels, int out_channels,
                           const DynamicConvOptions& options, Rng& rng)
    : conv(in_channels, out_channels, options, rng), norm(out_channels) {}

Tensor DynamicBlock::forward(const Tensor& x) {
  return norm.forward(ops::relu(conv.forward(x)));
}

void DynamicBlock::collect_parameters(const std::string& prefix,
                                      std::vector<ParamRef>& out) const {
  conv.collect_parameters(join_name(prefix, "conv"), out);
  norm.collect_parameters(join_name(prefix, "norm"), out);
}

void DynamicBlock::collect_buffers(const std::string& prefix,
                                   std::vector<BufferRef>& out) const {
  norm.collect_buffers(join_name(prefix, "norm"), out);
}

FocusTransition::FocusTransition(int in_channels, int out_channels,
                                 const FTMConfig& config, Rng& rng)
    : channel_attention(in_channels, config.channel_reduction, rng),
      spatial_attention(rng, config.spatial_kernel),
      in_channels_(in_channels),
      out_channels_(out_channels) {
  if (in_channels != out_channels)
    projection.emplace(in_channels, out_channels, 1, rng, ops::ConvOptions{}, false);
  const int count = config.outer_double ? 4 : 3;
  transforms.reserve(count);
  for (int i = 0; i < count; ++i)
    transforms.emplace_back(out_channels, out_channels, config.dynamic, rng);
}

Tensor FocusTransition::forward(const Tensor& s) {
  if (s.shape().c != in_channels_)
    throw ShapeError("focus transition expects " + std::to_string(in_channels_) +
                     " channels, got input " + s.shape().str());
  Tensor c = channel_attention.forward(s);
  if (projection) c = projection->forward(c);
  const Tensor a = ops::add(transforms[0].forward(c), c);
  const Tensor b = ops::add(transforms[1].forward(a), a);
  Tensor p = transforms[2].forward(b);
  if (transforms.size() == 4) p = transforms[3].forward(p);
  return spatial_attention.forward(p);
}

void FocusTransition::collect_parameters(const std::string& prefix,
                                         std::vector<ParamRef>& out) const {
  channel_attention.collect_parameters(join_name(prefix, "channel_attention"), out);
  if (projection) projection->collect_parameters(join_name(prefix, "projection"), out);
  for (std::size_t i = 0; i < transforms.size(); ++i)
    transforms[i].collect_parameters(join_name(prefix, "y" + std::to_string(i + 1)), out);
  spatial_attention.collect_parameters(join_name(prefix, "spatial_attention"), out);
}

void FocusTransition::collect_buffers(const std::string& prefix,
                                      std::vector<BufferRef>& out) const {
  for (std::size_t i = 0; i < transforms.size(); ++i)
    transforms[i].collect_buffers(join_name(prefix, "y" + std::to_string(i + 1)), out);
}

void FocusTransition::set_training(bool on) {
  for (auto& t : transforms) t.set_training(on);
}

Fusion::Fusion(const FusionConfig& config, std::array<int, 3> w, Rng& rng)
    : config_(config) {
  switch (config.strategy) {
    case FusionStrategy::kConcatenate:
      up2.emplace(w[1], w[1], 2, 2, rng);
      up3.emplace(w[2], w[2], 4, 4, rng);
      output_channels_ = w[0] + w[1] + w[2];
      break;
    case FusionStrategy::kAddition: {
      const int common = config.common_width > 0 ? config.common_width : w[0];
      if (w[0] != common) reduce1.emplace(w[0], common, 1, rng);
      if (w[1] != common) reduce2.emplace(w[1], common, 1, rng);
      if (w[2] != common) reduce3.emplace(w[2], common, 1, rng);
      up2.emplace(common, common, 2, 2, rng);
      up3.emplace(common, common, 4, 4, rng);
      output_channels_ = common;
      break;
    }
    case FusionStrategy::kStepwiseAddition:
      reduce3.emplace(w[2], w[1], 1, rng);
      up3.emplace(w[1], w[1], 2, 2, rng);
      reduce2.emplace(w[1], w[0], 1, rng);
      up2.emplace(w[0], w[0], 2, 2, rng);
      output_channels_ = w[0];
      break;
  }
}

Tensor Fusion::forward(const std::array<Tensor, 3>& br) const {
  auto maybe = [](const std::optional<Conv2d>& conv, const Tensor& x) {
    return conv ? conv->forward(x) : x;
  };
  switch (config_.strategy) {
    case FusionStrategy::kConcatenate: {
      const std::array<Tensor, 3> parts{br[0], up2->forward(br[1]), up3->forward(br[2])};
      return ops::concat_channels(parts);
    }
    case FusionStrategy::kAddition:
      return ops::add(ops::add(maybe(reduce1, br[0]), up2->forward(maybe(reduce2, br[1]))),
                      up3->forward(maybe(reduce3, br[2])));
    case FusionStrategy::kStepwiseAddition: {
      const Tensor t2 = ops::add(br[1], up3->forward(reduce3->forward(br[2])));
      return ops::add(br[0], up2->forward(reduce2->forward(t2)));
    }
  }
  throw std::logic_error("unhandled fusion strategy");
}

void Fusion::collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) const {
  if (reduce1) reduce1->collect_parameters(join_name(prefix, "reduce1"), out);
  if (reduce2) reduce2->collect_parameters(join_name(prefix, "reduce2"), out);
  if (reduce3) reduce3->collect_parameters(join_name(prefix, "reduce3"), out);
  if (up2) up2->collect_parameters(join_name(prefix, "up2"), out);
  if (up3) up3->collect_parameters(join_name(prefix, "up3"), out);
}

namespace {

Rng& seeded(Rng& rng, const ModelConfig& config) {
  config.validate();
  rng.seed(config.init_seed);
  return rng;
}

thread_local Rng init_rng;

std::vector<FocusTransition> make_ftms(const ModelConfig& config, Rng& rng) {
  std::vector<FocusTransition> out;
  if (!config.ftm.enabled) return out;
  const auto in = config.backbone.exported_channels();
  const auto width = config.branch_channels();
  for (int i = 0; i < 3; ++i) out.emplace_back(in[i], width[i], config.ftm, rng);
  return out;
}

}  // namespace

FFNet::FFNet(const ModelConfig& config)
    : backbone(config.backbone, seeded(init_rng, config)),
      ftms(make_ftms(config, init_rng)),
      fusion(config.fusion, config.branch_channels(), init_rng),
      density_head(fusion.output_channels(), 1, 1, init_rng),
      config_(config) {
  // A fan-in bias can start the ReLU head dead on every cell, which stalls
  // training; start it slightly positive instead.
  for (double& v : density_head.bias.data()) v = kHeadBiasInit;
}

void FFNet::check_input(const Shape& s) const {
  if (s.c != config_.backbone.input_channels)
    throw ShapeError("model expects " + std::to_string(config_.backbone.input_channels) +
                     "-channel images, got input " + s.str());
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0)
    throw ShapeError("image extent must be a positive multiple of 32, got input " + s.str());
}

MultiScaleFeatures FFNet::backbone_forward(const Tensor& image) {
  check_input(image.shape());
  return backbone.forward(image);
}

std::array<Tensor, 3> FFNet::branch_forward(const Tensor& image) {
  const MultiScaleFeatures f = backbone_forward(image);
  if (ftms.empty()) return {f.s1, f.s2, f.s3};
  return {ftms[0].forward(f.s1), ftms[1].forward(f.s2), ftms[2].forward(f.s3)};
}

Tensor FFNet::fuse(const std::array<Tensor, 3>& branches) const {
  return fusion.forward(branches);
}

Tensor FFNet::head(const Tensor& fused) const {
  return ops::relu(density_head.forward(fused));
}

Tensor FFNet::forward(const Tensor& image) { return head(fuse(branch_forward(image))); }

void FFNet::collect_parameters(const std::string& prefix, std::vector<ParamRef>& out) const {
  backbone.collect_parameters(join_name(prefix, "backbone"), out);
  for (std::size_t i = 0; i < ftms.size(); ++i)
    ftms[i].collect_parameters(join_name(prefix, "ftm" + std::to_string(i + 1)), out);
  fusion.collect_parameters(join_name(prefix, "fusion"), out);
  density_head.collect_parameters(join_name(prefix, "head"), out);
}

void FFNet::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) const {
  backbone.collect_buffers(join_name(prefix, "backbone"), out);
  for (std::size_t i = 0; i < ftms.size(); ++i)
    ftms[i].collect_buffers(join_name(prefix, "ftm" + std::to_string(i + 1)), out);
}

void FFNet::set_training(bool on) {
  backbone.set_training(on);
  for (auto& f : ftms) f.set_training(on);
}

std::vector<ParamRef> FFNet::parameters() const {
  std::vector<ParamRef> out;
  collect_parameters("", out);
  return out;
}

std::vector<BufferRef> FFNet::buffers() const {
  std::vector<BufferRef> out;
  collect_buffers("", out);
  return out;
}

std::size_t FFNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace fflab
