#pragma once

#include <array>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fflab/layers.hpp"

namespace fflab {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BackboneVariant { kToy, kConvNeXtTinyStructural };
enum class BlockKind { kPlain, kConvNeXt };
enum class FusionStrategy { kConcatenate, kAddition, kStepwiseAddition };

std::string to_string(FusionStrategy s);
FusionStrategy parse_fusion(const std::string& tag);

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::kToy;
  // The last three stages are exported at strides 8, 16 and 32.
  std::vector<int> stage_channels{8, 16, 32};
  std::vector<int> stage_depths{1, 1, 1};
  BlockKind block = BlockKind::kPlain;
  int input_channels = 1;

  int stem_stride() const;
  std::array<int, 3> exported_channels() const;
};

struct FTMConfig {
  bool enabled = true;
  // Per-branch output widths; empty means min(in / 2, 96) for each branch.
  std::vector<int> out_channels{8, 8, 8};
  // Apply the final dynamic transform twice, Y(Y(b)), as written in the
  // module equation; false keeps a single Y(b).
  bool outer_double = true;
  int channel_reduction = 4;
  int spatial_kernel = 7;
  DynamicConvOptions dynamic{};
};

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::kConcatenate;
  // Addition only: shared width, 0 means the first branch's width.
  int common_width = 0;
};

struct ModelConfig {
  BackboneConfig backbone;
  FTMConfig ftm;
  FusionConfig fusion;
  std::uint64_t init_seed = 0;

  /// "toy" (8/16/32 widths, FTM width 8) or "convnext_tiny_structural".
  static ModelConfig preset(const std::string& name);

  /// Output width of each branch after its FTM (or the backbone width when
  /// the FTM is disabled).
  std::array<int, 3> branch_channels() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Starts from the preset named by backbone.variant and overlays the given
/// keys. Unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// The three backbone feature maps at strides 8, 16 and 32.
struct MultiScaleFeatures {
  Tensor s1;
  Tensor s2;
  Tensor s3;
};

class Backbone : public Module {
 public:
  Backbone(const BackboneConfig& config, Rng& rng);
  ~Backbone() override;

  MultiScaleFeatures forward(const Tensor& image);
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;
  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef>& out) const override;
  void set_training(bool on) override;

  const BackboneConfig& config() const { return config_; }

 private:
  struct Stage;
  BackboneConfig config_;
  std::vector<std::unique_ptr<Stage>> stages_;
};

/// Dynamic convolution followed by ReLU then BatchNorm.
class DynamicBlock : public Module {
 public:
  DynamicBlock(int in_channels, int out_channels, const DynamicConvOptions& options,
               Rng& rng);

  Tensor forward(const Tensor& x);
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;
  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef>& out) const override;
  void set_training(bool on) override { norm.set_training(on); }

  DynamicConv2d conv;
  BatchNorm2d norm;
};

/// Focus transition module for one branch:
///   C = channel_attention(S), projected to the output width when it differs,
///   a = Y1(C) + C, b = Y2(a) + a, P = Y4(Y3(b)) (or Y3(b)),
///   output = spatial_attention(P).
class FocusTransition : public Module {
 public:
  FocusTransition(int in_channels, int out_channels, const FTMConfig& config, Rng& rng);

  Tensor forward(const Tensor& s);
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;
  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef>& out) const override;
  void set_training(bool on) override;

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }

  ChannelAttention channel_attention;
  std::optional<Conv2d> projection;  // 1x1, no bias, only when widths differ
  std::vector<DynamicBlock> transforms;
  SpatialAttention spatial_attention;

 private:
  int in_channels_;
  int out_channels_;
};

class Fusion : public Module {
 public:
  Fusion(const FusionConfig& config, std::array<int, 3> widths, Rng& rng);

  /// Combines the branches onto the first branch's grid.
  Tensor forward(const std::array<Tensor, 3>& branches) const;
  int output_channels() const { return output_channels_; }
  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;

 private:
  FusionConfig config_;
  int output_channels_;

 public:
  // Concatenate: up2, up3. Addition: reduce1..3 to the common width (absent
  // when already equal), up2, up3. Stepwise: reduce3 (S3 -> S2 width), up3
  // (x2), reduce2 (S2 -> S1 width), up2 (x2).
  std::optional<Conv2d> reduce1, reduce2, reduce3;
  std::optional<ConvTranspose2d> up2, up3;
};

/// Backbone -> three FTMs -> fusion -> 1x1 conv -> ReLU density head.
class FFNet : public Module {
 public:
  static constexpr double kHeadBiasInit = 0.1;

  explicit FFNet(const ModelConfig& config);

  /// Rejects inputs whose extent is not a multiple of 32 or whose channel
  /// count differs from the configured input channels.
  void check_input(const Shape& s) const;

  MultiScaleFeatures backbone_forward(const Tensor& image);
  /// Per-branch features after the FTMs (or straight from the backbone).
  std::array<Tensor, 3> branch_forward(const Tensor& image);
  Tensor fuse(const std::array<Tensor, 3>& branches) const;
  Tensor head(const Tensor& fused) const;
  /// Non-negative density map of shape (n, 1, h/8, w/8).
  Tensor forward(const Tensor& image);

  void collect_parameters(const std::string& prefix,
                          std::vector<ParamRef>& out) const override;
  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef>& out) const override;
  void set_training(bool on) override;

  std::vector<ParamRef> parameters() const;
  std::vector<BufferRef> buffers() const;
  std::size_t parameter_count() const;

  const ModelConfig& config() const { return config_; }

  Backbone backbone;
  std::vector<FocusTransition> ftms;  // empty when disabled
  Fusion fusion;
  Conv2d density_head;

 private:
  ModelConfig config_;
};

}  // namespace fflab
