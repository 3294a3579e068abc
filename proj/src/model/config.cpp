#include <algorithm>
#include <set>

#include "fflab/model.hpp"

namespace fflab {

using nlohmann::json;

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::kConcatenate: return "concat";
    case FusionStrategy::kAddition: return "add";
    case FusionStrategy::kStepwiseAddition: return "stepwise";
  }
  return "concat";
}

FusionStrategy parse_fusion(const std::string& tag) {
  if (tag == "concat" || tag == "concatenate") return FusionStrategy::kConcatenate;
  if (tag == "add" || tag == "addition") return FusionStrategy::kAddition;
  if (tag == "stepwise" || tag == "stepwise_addition") return FusionStrategy::kStepwiseAddition;
  throw ConfigError("unknown fusion strategy '" + tag +
                    "' (expected concat, add or stepwise)");
}

int BackboneConfig::stem_stride() const {
  const int stages = static_cast<int>(stage_channels.size());
  if (stages < 3 || stages > 6)
    throw ConfigError("backbone needs between 3 and 6 stages, got " + std::to_string(stages));
  return 32 >> (stages - 1);
}

std::array<int, 3> BackboneConfig::exported_channels() const {
  const std::size_t n = stage_channels.size();
  if (n < 3) throw ConfigError("backbone needs at least 3 stages");
  return {stage_channels[n - 3], stage_channels[n - 2], stage_channels[n - 1]};
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "toy") return c;
  if (name == "convnext_tiny_structural") {
    c.backbone.variant = BackboneVariant::kConvNeXtTinyStructural;
    c.backbone.stage_channels = {96, 192, 384, 768};
    c.backbone.stage_depths = {3, 3, 9, 3};
    c.backbone.block = BlockKind::kConvNeXt;
    c.backbone.input_channels = 3;
    c.ftm.out_channels = {64, 64, 64};
    return c;
  }
  throw ConfigError("unknown model preset '" + name +
                    "' (expected toy or convnext_tiny_structural)");
}

std::array<int, 3> ModelConfig::branch_channels() const {
  const auto in = backbone.exported_channels();
  if (!ftm.enabled) return in;
  std::array<int, 3> out{};
  for (int i = 0; i < 3; ++i)
    out[i] = ftm.out_channels.empty() ? std::max(1, std::min(in[i] / 2, 96))
                                      : ftm.out_channels[i];
  return out;
}

void ModelConfig::validate() const {
  const auto& b = backbone;
  if (b.stage_channels.size() != b.stage_depths.size())
    throw ConfigError("stage_channels and stage_depths differ in length");
  b.stem_stride();
  for (int c : b.stage_channels)
    if (c < 1) throw ConfigError("stage widths must be positive");
  for (int d : b.stage_depths)
    if (d < 0) throw ConfigError("stage depths must be non-negative");
  if (b.input_channels < 1) throw ConfigError("input_channels must be positive");
  if (!ftm.out_channels.empty() && ftm.out_channels.size() != 3)
    throw ConfigError("ftm.out_channels needs exactly 3 entries");
  for (int c : ftm.out_channels)
    if (c < 1) throw ConfigError("ftm.out_channels entries must be positive");
  if (ftm.enabled) {
    const auto in = b.exported_channels();
    const auto out = branch_channels();
    for (int i = 0; i < 3; ++i)
      if (out[i] > in[i])
        throw ConfigError("ftm branch " + std::to_string(i + 1) + " widens " +
                          std::to_string(in[i]) + " -> " + std::to_string(out[i]) +
                          " channels; out_channels must not exceed the input width");
  }
  if (ftm.channel_reduction < 1 || ftm.dynamic.reduction < 1)
    throw ConfigError("reduction ratios must be >= 1");
  if (ftm.dynamic.kernels < 1) throw ConfigError("ftm.dynamic.kernels must be >= 1");
  if (ftm.dynamic.kernel_size < 1 || ftm.dynamic.kernel_size % 2 == 0)
    throw ConfigError("ftm.dynamic.kernel_size must be odd");
  if (ftm.spatial_kernel < 1 || ftm.spatial_kernel % 2 == 0)
    throw ConfigError("ftm.spatial_kernel must be odd");
  if (fusion.common_width < 0) throw ConfigError("fusion.common_width must be >= 0");
}

namespace {

std::string variant_name(BackboneVariant v) {
  return v == BackboneVariant::kToy ? "toy" : "convnext_tiny_structural";
}

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> names(allowed.begin(), allowed.end());
  for (const auto& item : j.items())
    if (!names.count(item.key()))
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for " + where + "." + key);
  }
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  const auto& d = c.ftm.dynamic;
  j = json{
      {"backbone",
       {{"variant", variant_name(c.backbone.variant)},
        {"stage_channels", c.backbone.stage_channels},
        {"stage_depths", c.backbone.stage_depths},
        {"block", c.backbone.block == BlockKind::kPlain ? "plain" : "convnext"},
        {"input_channels", c.backbone.input_channels}}},
      {"ftm",
       {{"enabled", c.ftm.enabled},
        {"out_channels", c.ftm.out_channels},
        {"outer_double", c.ftm.outer_double},
        {"channel_reduction", c.ftm.channel_reduction},
        {"spatial_kernel", c.ftm.spatial_kernel},
        {"dynamic",
         {{"kernels", d.kernels},
          {"reduction", d.reduction},
          {"kernel_size", d.kernel_size},
          {"kernel_attention",
           d.kernel_attention == KernelAttention::kSigmoid ? "sigmoid" : "softmax"}}}}},
      {"fusion",
       {{"strategy", to_string(c.fusion.strategy)}, {"common_width", c.fusion.common_width}}},
      {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, "model", {"backbone", "ftm", "fusion", "init_seed"});
  std::string variant = "toy";
  if (j.contains("backbone")) read(j["backbone"], "variant", variant, "backbone");
  ModelConfig c = ModelConfig::preset(variant);

  if (j.contains("backbone")) {
    const json& b = j["backbone"];
    reject_unknown(b, "backbone",
                   {"variant", "stage_channels", "stage_depths", "block", "input_channels"});
    read(b, "stage_channels", c.backbone.stage_channels, "backbone");
    read(b, "stage_depths", c.backbone.stage_depths, "backbone");
    read(b, "input_channels", c.backbone.input_channels, "backbone");
    std::string block = c.backbone.block == BlockKind::kPlain ? "plain" : "convnext";
    read(b, "block", block, "backbone");
    if (block == "plain") c.backbone.block = BlockKind::kPlain;
    else if (block == "convnext") c.backbone.block = BlockKind::kConvNeXt;
    else throw ConfigError("backbone.block must be plain or convnext");
  }
  if (j.contains("ftm")) {
    const json& f = j["ftm"];
    reject_unknown(f, "ftm",
                   {"enabled", "out_channels", "outer_double", "channel_reduction",
                    "spatial_kernel", "dynamic"});
    read(f, "enabled", c.ftm.enabled, "ftm");
    read(f, "out_channels", c.ftm.out_channels, "ftm");
    read(f, "outer_double", c.ftm.outer_double, "ftm");
    read(f, "channel_reduction", c.ftm.channel_reduction, "ftm");
    read(f, "spatial_kernel", c.ftm.spatial_kernel, "ftm");
    if (f.contains("dynamic")) {
      const json& d = f["dynamic"];
      reject_unknown(d, "ftm.dynamic", {"kernels", "reduction", "kernel_size", "kernel_attention"});
      read(d, "kernels", c.ftm.dynamic.kernels, "ftm.dynamic");
      read(d, "reduction", c.ftm.dynamic.reduction, "ftm.dynamic");
      read(d, "kernel_size", c.ftm.dynamic.kernel_size, "ftm.dynamic");
      std::string act = "sigmoid";
      read(d, "kernel_attention", act, "ftm.dynamic");
      if (act == "sigmoid") c.ftm.dynamic.kernel_attention = KernelAttention::kSigmoid;
      else if (act == "softmax") c.ftm.dynamic.kernel_attention = KernelAttention::kSoftmax;
      else throw ConfigError("ftm.dynamic.kernel_attention must be sigmoid or softmax");
    }
  }
  if (j.contains("fusion")) {
    const json& f = j["fusion"];
    reject_unknown(f, "fusion", {"strategy", "common_width"});
    std::string strategy = to_string(c.fusion.strategy);
    read(f, "strategy", strategy, "fusion");
    c.fusion.strategy = parse_fusion(strategy);
    read(f, "common_width", c.fusion.common_width, "fusion");
  }
  read(j, "init_seed", c.init_seed, "model");
  c.validate();
  return c;
}

}  // namespace fflab
