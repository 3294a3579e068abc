#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "fflab/analysis.hpp"

namespace fflab {

using nlohmann::json;

namespace cost {

namespace {

std::uint64_t u(long v) { return static_cast<std::uint64_t>(v); }
std::uint64_t elements(const Shape& s) { return u(s.n) * u(s.c) * u(s.h) * u(s.w); }

}  // namespace

LayerCost conv2d(const std::string& name, const Shape& in, int cout, int kernel, int stride,
                 int padding, int groups, bool bias) {
  if (in.c % groups || cout % groups) throw std::invalid_argument(name + ": bad groups");
  const int ho = (in.h + 2 * padding - kernel) / stride + 1;
  const int wo = (in.w + 2 * padding - kernel) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError(name + ": kernel larger than padded input " + in.str());
  const std::uint64_t per = u(kernel) * u(kernel) * u(in.c / groups) * u(cout);
  LayerCost c{name, groups == 1 ? "conv" : "conv_grouped", per + (bias ? u(cout) : 0),
              per * u(ho) * u(wo) * u(in.n), {in.n, cout, ho, wo}};
  return c;
}

LayerCost conv_transpose2d(const std::string& name, const Shape& in, int cout, int kernel,
                           int stride) {
  const std::uint64_t per = u(kernel) * u(kernel) * u(in.c) * u(cout);
  const int ho = (in.h - 1) * stride + kernel, wo = (in.w - 1) * stride + kernel;
  return {name, "conv_transpose", per + u(cout), per * u(in.h) * u(in.w) * u(in.n),
          {in.n, cout, ho, wo}};
}

LayerCost linear(const std::string& name, int batch, int fin, int fout) {
  return {name, "linear", u(fin) * u(fout) + u(fout), u(fin) * u(fout) * u(batch),
          {batch, fout, 1, 1}};
}

LayerCost elementwise(const std::string& name, const std::string& kind, const Shape& out) {
  return {name, kind, 0, elements(out), out};
}

LayerCost norm(const std::string& name, const std::string& kind, const Shape& x) {
  return {name, kind, 2 * u(x.c), elements(x), x};
}

LayerCost dynamic_conv(const std::string& name, const Shape& in, int cout, int kernel,
                       int kernels, int hidden) {
  const std::uint64_t taps = u(kernel) * u(kernel);
  const std::uint64_t heads = u(kernels) + taps + u(in.c) + u(cout);
  const std::uint64_t params = u(kernels) * u(cout) * u(in.c) * taps + u(in.c) * u(hidden) +
                               u(hidden) + u(hidden) * heads + heads;
  const std::uint64_t plane = u(in.h) * u(in.w);
  const std::uint64_t per_sample = u(in.c) * plane + u(in.c) * u(hidden) + u(hidden) * heads +
                                   heads + (u(kernels) + 3) * u(cout) * u(in.c) * taps +
                                   taps * u(in.c) * u(cout) * plane;
  return {name, "dynamic_conv", params, per_sample * u(in.n), {in.n, cout, in.h, in.w}};
}

}  // namespace cost

namespace {

class Walker {
 public:
  explicit Walker(AnalysisReport& r) : report_(r) {}

  Shape add(LayerCost c) {
    report_.total_params += c.params;
    report_.total_macs += c.macs;
    report_.rows.push_back(c);
    return c.output;
  }
  // Rows sharing one name; the pieces are summed and the last shape kept.
  Shape add_group(const std::string& name, const std::string& kind,
                  const std::vector<LayerCost>& parts, const Shape& out) {
    LayerCost c{name, kind, 0, 0, out};
    for (const LayerCost& p : parts) {
      c.params += p.params;
      c.macs += p.macs;
    }
    return add(c);
  }

 private:
  AnalysisReport& report_;
};

std::string dot(const std::string& a, const std::string& b) { return a + "." + b; }

Shape walk_backbone(Walker& w, const BackboneConfig& b, Shape x, std::vector<Shape>& outs) {
  const bool convnext = b.block == BlockKind::kConvNeXt;
  const int stem = b.stem_stride();
  for (std::size_t i = 0; i < b.stage_channels.size(); ++i) {
    const std::string s = "backbone.stage" + std::to_string(i);
    const int c = b.stage_channels[i];
    const int k = i == 0 ? stem : 2;
    const std::string entry = dot(s, i == 0 ? "stem" : "down");
    if (convnext) {
      if (i == 0) {
        x = w.add(cost::conv2d(dot(entry, "conv"), x, c, k, k, 0, 1, true));
        x = w.add(cost::norm(dot(entry, "norm"), "layer_norm", x));
      } else {
        x = w.add(cost::norm(dot(entry, "norm"), "layer_norm", x));
        x = w.add(cost::conv2d(dot(entry, "conv"), x, c, k, k, 0, 1, true));
      }
    } else {
      x = w.add(cost::conv2d(dot(entry, "conv"), x, c, k, k, 0, 1, false));
      x = w.add(cost::norm(dot(entry, "norm"), "batch_norm", x));
      x = w.add(cost::elementwise(dot(entry, "relu"), "relu", x));
    }
    for (int d = 0; d < b.stage_depths[i]; ++d) {
      const std::string blk = dot(s, "block" + std::to_string(d));
      if (convnext) {
        Shape y = w.add(cost::conv2d(dot(blk, "dwconv"), x, c, 7, 1, 3, c, true));
        y = w.add(cost::norm(dot(blk, "norm"), "layer_norm", y));
        y = w.add(cost::conv2d(dot(blk, "pw1"), y, 4 * c, 1, 1, 0, 1, true));
        y = w.add(cost::elementwise(dot(blk, "gelu"), "gelu", y));
        y = w.add(cost::conv2d(dot(blk, "pw2"), y, c, 1, 1, 0, 1, true));
        w.add({dot(blk, "layer_scale"), "scale", static_cast<std::uint64_t>(c),
               static_cast<std::uint64_t>(y.numel()), y});
        x = w.add(cost::elementwise(dot(blk, "add"), "add", x));
      } else {
        Shape y = w.add(cost::conv2d(dot(blk, "conv"), x, c, 3, 1, 1, 1, false));
        y = w.add(cost::norm(dot(blk, "norm"), "batch_norm", y));
        y = w.add(cost::elementwise(dot(blk, "relu"), "relu", y));
        x = w.add(cost::elementwise(dot(blk, "add"), "add", x));
      }
    }
    outs.push_back(x);
  }
  return x;
}

Shape walk_ftm(Walker& w, const std::string& p, const FTMConfig& f, Shape x, int out) {
  const int in = x.c;
  const int r = reduced_width(in, f.channel_reduction);
  const Shape pooled{x.n, in, 1, 1};
  w.add_group(dot(p, "channel_attention"), "channel_attention",
              {cost::elementwise("pool", "pool", x), cost::linear("squeeze", x.n, in, r),
               cost::elementwise("relu", "relu", {x.n, r, 1, 1}),
               cost::linear("expand", x.n, r, in), cost::elementwise("sigmoid", "sigmoid", pooled),
               cost::elementwise("gate", "mul", x)},
              x);
  if (in != out) x = w.add(cost::conv2d(dot(p, "projection"), x, out, 1, 1, 0, 1, false));
  const DynamicConvOptions& d = f.dynamic;
  const int hidden = reduced_width(out, d.reduction);
  const int count = f.outer_double ? 4 : 3;
  for (int i = 0; i < count; ++i) {
    const std::string y = dot(p, "y" + std::to_string(i + 1));
    x = w.add(cost::dynamic_conv(dot(y, "conv"), x, out, d.kernel_size, d.kernels, hidden));
    x = w.add(cost::elementwise(dot(y, "relu"), "relu", x));
    x = w.add(cost::norm(dot(y, "norm"), "batch_norm", x));
    if (i < 2) w.add(cost::elementwise(dot(p, "residual" + std::to_string(i + 1)), "add", x));
  }
  const int k = f.spatial_kernel;
  const Shape plane{x.n, 1, x.h, x.w};
  w.add_group(dot(p, "spatial_attention"), "spatial_attention",
              {cost::elementwise("mean", "mean", x),
               cost::conv2d("conv", plane, 1, k, 1, k / 2, 1, true),
               cost::elementwise("sigmoid", "sigmoid", plane),
               cost::elementwise("gate", "mul", x)},
              x);
  return x;
}

Shape walk_fusion(Walker& w, const FusionConfig& f, const std::array<Shape, 3>& b) {
  switch (f.strategy) {
    case FusionStrategy::kConcatenate: {
      const Shape u2 = w.add(cost::conv_transpose2d("fusion.up2", b[1], b[1].c, 2, 2));
      const Shape u3 = w.add(cost::conv_transpose2d("fusion.up3", b[2], b[2].c, 4, 4));
      // Concatenation only moves data.
      return w.add({"fusion.concat", "concat", 0, 0, {b[0].n, b[0].c + u2.c + u3.c, b[0].h, b[0].w}});
    }
    case FusionStrategy::kAddition: {
      const int common = f.common_width > 0 ? f.common_width : b[0].c;
      std::array<Shape, 3> r = b;
      for (int i = 0; i < 3; ++i)
        if (b[i].c != common)
          r[i] = w.add(cost::conv2d("fusion.reduce" + std::to_string(i + 1), b[i], common, 1, 1,
                                    0, 1, true));
      w.add(cost::conv_transpose2d("fusion.up2", r[1], common, 2, 2));
      w.add(cost::conv_transpose2d("fusion.up3", r[2], common, 4, 4));
      const Shape out{b[0].n, common, b[0].h, b[0].w};
      w.add({"fusion.add", "add", 0, 2 * out.numel(), out});
      return out;
    }
    case FusionStrategy::kStepwiseAddition: {
      Shape t = w.add(cost::conv2d("fusion.reduce3", b[2], b[1].c, 1, 1, 0, 1, true));
      t = w.add(cost::conv_transpose2d("fusion.up3", t, b[1].c, 2, 2));
      w.add(cost::elementwise("fusion.add3", "add", t));
      t = w.add(cost::conv2d("fusion.reduce2", t, b[0].c, 1, 1, 0, 1, true));
      t = w.add(cost::conv_transpose2d("fusion.up2", t, b[0].c, 2, 2));
      return w.add(cost::elementwise("fusion.add2", "add", t));
    }
  }
  throw std::logic_error("unhandled fusion strategy");
}

}  // namespace

AnalysisReport count_params_flops(const ModelConfig& config, const Shape& input) {
  config.validate();
  if (input.c != config.backbone.input_channels || input.h % 32 || input.w % 32 || input.h < 32 ||
      input.w < 32 || input.n < 1)
    throw ShapeError("analysis: input " + input.str() + " does not fit the model");
  AnalysisReport report;
  report.input = input;
  Walker w(report);
  std::vector<Shape> outs;
  walk_backbone(w, config.backbone, input, outs);
  const std::size_t n = outs.size();
  std::array<Shape, 3> branches{outs[n - 3], outs[n - 2], outs[n - 1]};
  if (config.ftm.enabled) {
    const auto widths = config.branch_channels();
    for (int i = 0; i < 3; ++i)
      branches[i] =
          walk_ftm(w, "ftm" + std::to_string(i + 1), config.ftm, branches[i], widths[i]);
  }
  Shape fused = walk_fusion(w, config.fusion, branches);
  fused = w.add(cost::conv2d("head", fused, 1, 1, 1, 0, 1, true));
  w.add(cost::elementwise("head.relu", "relu", fused));
  return report;
}

std::string format_report(const AnalysisReport& r) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "input %s\n", r.input.str().c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-44s %-18s %12s %16s %16s\n", "layer", "kind", "params",
                "MACs", "FLOPs");
  out << line;
  for (const LayerCost& c : r.rows) {
    std::snprintf(line, sizeof line, "%-44s %-18s %12llu %16llu %16llu\n", c.name.c_str(),
                  c.kind.c_str(), static_cast<unsigned long long>(c.params),
                  static_cast<unsigned long long>(c.macs),
                  static_cast<unsigned long long>(c.flops()));
    out << line;
  }
  std::snprintf(line, sizeof line, "%-44s %-18s %12llu %16llu %16llu\n", "total", "",
                static_cast<unsigned long long>(r.total_params),
                static_cast<unsigned long long>(r.total_macs),
                static_cast<unsigned long long>(r.total_flops()));
  out << line;
  std::snprintf(line, sizeof line, "params %.4fM  MACs %.4fG  FLOPs %.4fG\n",
                r.total_params / 1e6, r.total_macs / 1e9, r.total_flops() / 1e9);
  out << line;
  return out.str();
}

json report_to_json(const AnalysisReport& r) {
  json rows = json::array();
  for (const LayerCost& c : r.rows)
    rows.push_back({{"name", c.name},
                    {"kind", c.kind},
                    {"params", c.params},
                    {"macs", c.macs},
                    {"flops", c.flops()},
                    {"output", {c.output.n, c.output.c, c.output.h, c.output.w}}});
  return json{{"input", {r.input.n, r.input.c, r.input.h, r.input.w}},
              {"rows", rows},
              {"total_params", r.total_params},
              {"total_macs", r.total_macs},
              {"total_flops", r.total_flops()}};
}

}  // namespace fflab
