#include <doctest.h>

#include <cmath>
#include <map>

#include "fflab/model.hpp"
#include "support/model_fixtures.hpp"
#include "support/oracles.hpp"

using namespace fflab;
using fflab::testing::conv2d_loop;
using fflab::testing::conv_transpose_loop;
using fflab::testing::gradient_check;
using fflab::testing::max_abs_diff;
using fflab::testing::probe_loss;
using fflab::testing::random_tensor;

namespace {

using Vec = std::vector<double>;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor param(const FFNet& net, const std::string& name) {
  for (const auto& p : net.parameters())
    if (p.name == name) return p.tensor;
  FAIL("missing parameter " << name);
  return {};
}

Tensor buffer(const FFNet& net, const std::string& name) {
  for (const auto& b : net.buffers())
    if (b.name == name) return b.tensor;
  FAIL("missing buffer " << name);
  return {};
}

/// Random affine terms and running statistics so eval-mode BN is not an identity.
void randomize_norms(const std::vector<ParamRef>& params, const std::vector<BufferRef>& bufs,
                     Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5), v(-0.3, 0.3);
  for (const auto& p : params)
    if (p.name.ends_with("norm.gamma"))
      for (double& x : Tensor(p.tensor).data()) x = u(rng);
    else if (p.name.ends_with("norm.beta"))
      for (double& x : Tensor(p.tensor).data()) x = v(rng);
  for (const auto& b : bufs)
    for (double& x : Tensor(b.tensor).data()) x = b.name.ends_with("var") ? u(rng) : v(rng);
}

Vec bn_eval(const Vec& x, Shape s, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
            const Tensor& var, double eps = 1e-5) {
  Vec y(x.size());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h * s.w; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w + i;
        y[k] = gamma.data()[c] * (x[k] - mean.data()[c]) / std::sqrt(var.data()[c] + eps) +
               beta.data()[c];
      }
  return y;
}

Vec relu(Vec x) {
  for (double& v : x) v = std::max(0.0, v);
  return x;
}

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Tensor as_tensor(Shape s, Vec v) { return Tensor::from(s, std::move(v)); }

Vec affine(const Vec& x, const Linear& l) {
  const int d = l.weight.shape().n, e = l.weight.shape().c;
  Vec y(e);
  for (int j = 0; j < e; ++j) {
    y[j] = l.bias.data()[j];
    for (int i = 0; i < d; ++i) y[j] += x[i] * l.weight.at(i, j, 0, 0);
  }
  return y;
}

Vec pooled(const Tensor& x, int n) {
  const Shape s = x.shape();
  Vec p(s.c, 0.0);
  for (int c = 0; c < s.c; ++c) {
    for (int i = 0; i < s.h * s.w; ++i) p[c] += x.data()[(n * s.c + c) * s.h * s.w + i];
    p[c] /= s.h * s.w;
  }
  return p;
}

Vec channel_attention_oracle(const ChannelAttention& ca, const Tensor& x) {
  const Shape s = x.shape();
  Vec y(x.numel());
  for (int n = 0; n < s.n; ++n) {
    Vec hidden = relu(affine(pooled(x, n), ca.squeeze));
    const Vec gate = affine(hidden, ca.expand);
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h * s.w; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w + i;
        y[k] = sig(gate[c]) * x.data()[k];
      }
  }
  return y;
}

Vec dynamic_conv_oracle(const DynamicConv2d& layer, const Tensor& x) {
  const Shape s = x.shape();
  const int cin = layer.in_channels(), cout = layer.out_channels();
  const int kn = layer.options().kernels, k = layer.options().kernel_size;
  Vec out;
  for (int b = 0; b < s.n; ++b) {
    const Vec hidden = affine(pooled(x, b), layer.fc);
    Vec ak = affine(hidden, layer.head_kernel), as = affine(hidden, layer.head_spatial),
        ai = affine(hidden, layer.head_in), ao = affine(hidden, layer.head_out);
    for (Vec* v : {&ak, &as, &ai, &ao})
      for (double& e : *v) e = sig(e);
    Tensor w = Tensor::zeros({cout, cin, k, k});
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < cin; ++i)
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) {
            double mix = 0;
            for (int q = 0; q < kn; ++q) mix += ak[q] * layer.base.at(q * cout + o, i, u, v);
            w.at(o, i, u, v) = as[u * k + v] * ai[i] * ao[o] * mix;
          }
    Tensor xb = Tensor::zeros({1, s.c, s.h, s.w});
    const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
    for (std::size_t i = 0; i < per; ++i) xb.data()[i] = x.data()[b * per + i];
    const Vec yb = conv2d_loop(xb, w, {}, 1, k / 2);
    out.insert(out.end(), yb.begin(), yb.end());
  }
  return out;
}

Vec dynamic_block_oracle(const DynamicBlock& blk, const Tensor& x) {
  const Shape s{x.shape().n, blk.conv.out_channels(), x.shape().h, x.shape().w};
  return bn_eval(relu(dynamic_conv_oracle(blk.conv, x)), s, blk.norm.gamma, blk.norm.beta,
                 blk.norm.running_mean, blk.norm.running_var);
}

Vec spatial_attention_oracle(const SpatialAttention& sa, const Tensor& p) {
  const Shape s = p.shape();
  Tensor mean = Tensor::zeros({s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        double acc = 0;
        for (int c = 0; c < s.c; ++c) acc += p.at(n, c, h, w);
        mean.at(n, 0, h, w) = acc / s.c;
      }
  const Vec logits = conv2d_loop(mean, sa.conv.weight, sa.conv.bias.values(), 1,
                                 sa.conv.options.padding);
  Vec y(p.numel());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h * s.w; ++i) {
        const std::size_t k = (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w + i;
        y[k] = sig(logits[n * s.h * s.w + i]) * p.data()[k];
      }
  return y;
}

}  // namespace

TEST_CASE("backbone exports strides 8, 16 and 32") {
  FFNet net(ModelConfig::preset("toy"));
  for (auto [side, a, b, c] : {std::tuple{256, 32, 16, 8}, std::tuple{512, 64, 32, 16}}) {
    NoGradGuard guard;
    const auto f = net.backbone_forward(Tensor::zeros({1, 1, side, side}));
    CHECK(f.s1.shape() == Shape{1, 8, a, a});
    CHECK(f.s2.shape() == Shape{1, 16, b, b});
    CHECK(f.s3.shape() == Shape{1, 32, c, c});
  }
  CHECK_THROWS_AS(net.backbone_forward(Tensor::zeros({1, 1, 48, 64})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 3, 64, 64})), ShapeError);
}

TEST_CASE("toy backbone matches a layer-by-layer loop composition") {
  FFNet net(ModelConfig::preset("toy"));
  net.set_training(false);
  Rng rng(21);
  randomize_norms(net.parameters(), net.buffers(), rng);
  const Tensor x = random_tensor({2, 1, 64, 64}, rng, 0, 1);

  auto bn = [&](const Vec& v, Shape s, const std::string& prefix) {
    return bn_eval(v, s, param(net, prefix + ".gamma"), param(net, prefix + ".beta"),
                   buffer(net, prefix + ".running_mean"), buffer(net, prefix + ".running_var"));
  };
  std::vector<Vec> outs;
  Tensor h = x;
  const int widths[3] = {8, 16, 32};
  for (int i = 0; i < 3; ++i) {
    const std::string st = "backbone.stage" + std::to_string(i);
    const std::string entry = st + (i == 0 ? ".stem" : ".down");
    const int stride = i == 0 ? 8 : 2;
    const int side = h.shape().h / stride;
    const Shape s{2, widths[i], side, side};
    Vec v = relu(bn(conv2d_loop(h, param(net, entry + ".conv.weight"), {}, stride, 0), s,
                    entry + ".norm"));
    const Tensor e = as_tensor(s, v);
    const Vec inner = conv2d_loop(e, param(net, st + ".block0.conv.weight"), {}, 1, 1);
    v = plus(v, relu(bn(inner, s, st + ".block0.norm")));
    outs.push_back(v);
    h = as_tensor(s, v);
  }
  NoGradGuard guard;
  const auto f = net.backbone_forward(x);
  CHECK(max_abs_diff(f.s1.data(), outs[0]) < 1e-10);
  CHECK(max_abs_diff(f.s2.data(), outs[1]) < 1e-10);
  CHECK(max_abs_diff(f.s3.data(), outs[2]) < 1e-10);
}

TEST_CASE("focus transition output shape and channel reduction") {
  Rng rng(22);
  FocusTransition ftm(192, 96, FTMConfig{}, rng);
  NoGradGuard guard;
  const Tensor y = ftm.forward(random_tensor({1, 192, 32, 32}, rng));
  CHECK(y.shape() == Shape{1, 96, 32, 32});
  CHECK(ftm.projection.has_value());
  CHECK(ftm.transforms.size() == 4);
  CHECK_THROWS_AS(ftm.forward(Tensor::zeros({1, 64, 32, 32})), ShapeError);

  FTMConfig single;
  single.outer_double = false;
  FocusTransition short_ftm(8, 8, single, rng);
  CHECK(short_ftm.transforms.size() == 3);
  CHECK_FALSE(short_ftm.projection.has_value());
}

TEST_CASE("focus transition maps zero input to zero output in eval mode") {
  Rng rng(23);
  FocusTransition ftm(12, 6, FTMConfig{}, rng);
  ftm.set_training(false);
  NoGradGuard guard;
  const Tensor y = ftm.forward(Tensor::zeros({2, 12, 8, 8}));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("focus transition matches a step-by-step composition") {
  Rng rng(24);
  for (bool outer_double : {true, false}) {
    FTMConfig cfg;
    cfg.outer_double = outer_double;
    cfg.channel_reduction = 2;
    cfg.spatial_kernel = 3;
    cfg.dynamic.kernels = 3;
    FocusTransition ftm(6, 4, cfg, rng);
    ftm.set_training(false);
    std::vector<ParamRef> ps;
    std::vector<BufferRef> bs;
    ftm.collect_parameters("", ps);
    ftm.collect_buffers("", bs);
    randomize_norms(ps, bs, rng);
    const Tensor s = random_tensor({2, 6, 5, 5}, rng);

    const Shape cs{2, 4, 5, 5};
    const Tensor ca = as_tensor(s.shape(), channel_attention_oracle(ftm.channel_attention, s));
    const Tensor c = as_tensor(cs, conv2d_loop(ca, ftm.projection->weight, {}, 1, 0));
    const Tensor a = as_tensor(cs, plus(dynamic_block_oracle(ftm.transforms[0], c), c.values()));
    const Tensor b = as_tensor(cs, plus(dynamic_block_oracle(ftm.transforms[1], a), a.values()));
    Tensor p = as_tensor(cs, dynamic_block_oracle(ftm.transforms[2], b));
    if (outer_double) p = as_tensor(cs, dynamic_block_oracle(ftm.transforms[3], p));
    const Vec expected = spatial_attention_oracle(ftm.spatial_attention, p);

    NoGradGuard guard;
    CHECK(max_abs_diff(ftm.forward(s).data(), expected) < 1e-10);
  }
}

TEST_CASE("fusion output widths") {
  Rng rng(25);
  NoGradGuard guard;
  const std::array<Tensor, 3> br{random_tensor({1, 96, 32, 32}, rng),
                                 random_tensor({1, 96, 16, 16}, rng),
                                 random_tensor({1, 96, 8, 8}, rng)};
  Fusion concat({FusionStrategy::kConcatenate}, {96, 96, 96}, rng);
  CHECK(concat.forward(br).shape() == Shape{1, 288, 32, 32});
  Fusion add({FusionStrategy::kAddition, 96}, {96, 96, 96}, rng);
  CHECK(add.forward(br).shape() == Shape{1, 96, 32, 32});
  CHECK_THROWS_AS(parse_fusion("mean"), ConfigError);
}

TEST_CASE("every fusion strategy lands on the first branch grid") {
  Rng rng(26);
  NoGradGuard guard;
  const std::array<int, 3> width_sets[] = {{8, 8, 8}, {4, 6, 10}, {12, 5, 3}};
  for (auto strategy : {FusionStrategy::kConcatenate, FusionStrategy::kAddition,
                        FusionStrategy::kStepwiseAddition})
    for (const auto& w : width_sets)
      for (auto [h, wd] : {std::pair{4, 4}, std::pair{8, 12}, std::pair{16, 8}}) {
        Fusion f({strategy}, w, rng);
        const std::array<Tensor, 3> br{random_tensor({2, w[0], h, wd}, rng),
                                       random_tensor({2, w[1], h / 2, wd / 2}, rng),
                                       random_tensor({2, w[2], h / 4, wd / 4}, rng)};
        const Tensor y = f.forward(br);
        CHECK(y.shape() == Shape{2, f.output_channels(), h, wd});
      }
}

TEST_CASE("addition and stepwise fusion match loop compositions") {
  Rng rng(27);
  const std::array<int, 3> w{3, 4, 5};
  const std::array<Tensor, 3> br{random_tensor({1, 3, 8, 8}, rng),
                                 random_tensor({1, 4, 4, 4}, rng),
                                 random_tensor({1, 5, 2, 2}, rng)};
  auto up = [](const ConvTranspose2d& t, const Tensor& x) {
    Vec y = conv_transpose_loop(x, t.weight, t.stride, t.padding);
    const int oh = x.shape().h * t.stride, c = t.weight.shape().c;
    for (int o = 0; o < c; ++o)
      for (int i = 0; i < oh * oh; ++i) y[o * oh * oh + i] += t.bias.data()[o];
    return y;
  };
  auto one_by_one = [](const Conv2d& conv, const Tensor& x) {
    return conv2d_loop(x, conv.weight, conv.bias.values(), 1, 0);
  };
  NoGradGuard guard;
  {
    Fusion f({FusionStrategy::kAddition}, w, rng);
    CHECK_FALSE(f.reduce1.has_value());
    const Tensor r2 = as_tensor({1, 3, 4, 4}, one_by_one(*f.reduce2, br[1]));
    const Tensor r3 = as_tensor({1, 3, 2, 2}, one_by_one(*f.reduce3, br[2]));
    const Vec expected = plus(plus(br[0].values(), up(*f.up2, r2)), up(*f.up3, r3));
    CHECK(max_abs_diff(f.forward(br).data(), expected) < 1e-12);
  }
  {
    Fusion f({FusionStrategy::kStepwiseAddition}, w, rng);
    const Tensor m3 = as_tensor({1, 4, 2, 2}, one_by_one(*f.reduce3, br[2]));
    const Tensor t2 = as_tensor({1, 4, 4, 4}, plus(br[1].values(), up(*f.up3, m3)));
    const Tensor m2 = as_tensor({1, 3, 4, 4}, one_by_one(*f.reduce2, t2));
    const Vec expected = plus(br[0].values(), up(*f.up2, m2));
    CHECK(max_abs_diff(f.forward(br).data(), expected) < 1e-12);
  }
}

TEST_CASE("density head") {
  NoGradGuard guard;
  Rng rng(28);
  FFNet net(ModelConfig::preset("toy"));
  const Tensor x = random_tensor({2, 1, 64, 96}, rng, 0, 1);
  const Tensor y = net.forward(x);
  CHECK(y.shape() == Shape{2, 1, 8, 12});
  for (double v : y.data()) CHECK(v >= 0.0);

  for (double& v : net.density_head.weight.data()) v = 0.0;
  for (double& v : net.density_head.bias.data()) v = 0.0;
  const Tensor zero_map = net.forward(x);
  for (double v : zero_map.data()) CHECK(v == 0.0);
}

TEST_CASE("disabled focus transition feeds backbone features straight to fusion") {
  ModelConfig cfg = ModelConfig::preset("toy");
  cfg.ftm.enabled = false;
  FFNet net(cfg);
  CHECK(net.ftms.empty());
  CHECK(net.fusion.output_channels() == 8 + 16 + 32);
  NoGradGuard guard;
  CHECK(net.forward(Tensor::zeros({1, 1, 64, 64})).shape() == Shape{1, 1, 8, 8});
}

TEST_CASE("same seed builds identical models") {
  FFNet a(ModelConfig::preset("toy")), b(ModelConfig::preset("toy"));
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.values() == pb[i].tensor.values());
  }
  ModelConfig other = ModelConfig::preset("toy");
  other.init_seed = 1;
  CHECK(FFNet(other).parameters()[0].tensor.values() != pa[0].tensor.values());
}

TEST_CASE("end-to-end gradient of a small model passes finite differences") {
  FFNet net(fflab::testing::tiny_model_config());
  CHECK(net.parameter_count() <= 5000);
  Rng rng(29);
  Tensor x = random_tensor({2, 1, 64, 64}, rng, 0, 1);
  fflab::testing::prepare_eval_point(net, x, 30);
  std::vector<Tensor> leaves{x};
  for (const auto& p : net.parameters()) leaves.push_back(p.tensor);
  auto f = [&] { return probe_loss(net.forward(x)); };
  CHECK(gradient_check(f, leaves) < 1e-4);
}

TEST_CASE("model config json") {
  ModelConfig c = ModelConfig::preset("toy");
  c.fusion.strategy = FusionStrategy::kStepwiseAddition;
  c.ftm.outer_double = false;
  c.ftm.dynamic.kernel_attention = KernelAttention::kSoftmax;
  nlohmann::json j = c;
  const ModelConfig back = model_config_from_json(j);
  CHECK(nlohmann::json(back) == j);

  CHECK_THROWS_AS(model_config_from_json({{"fusion", {{"stratgy", "add"}}}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json({{"fusion", {{"strategy", "mean"}}}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json({{"ftm", {{"out_channels", {16, 8, 8}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(model_config_from_json({{"backbone", {{"stage_depths", {1, 1}}}}}),
                  ConfigError);

  const ModelConfig cx =
      model_config_from_json({{"backbone", {{"variant", "convnext_tiny_structural"}}}});
  CHECK(cx.backbone.stage_channels == std::vector<int>{96, 192, 384, 768});
  CHECK(cx.backbone.stem_stride() == 4);
  CHECK(cx.backbone.input_channels == 3);

  ModelConfig halves = ModelConfig::preset("toy");
  halves.ftm.out_channels.clear();
  CHECK(halves.branch_channels() == std::array<int, 3>{4, 8, 16});
}

TEST_CASE("structural convnext backbone exports strides 8, 16 and 32") {
  ModelConfig c = ModelConfig::preset("convnext_tiny_structural");
  c.backbone.stage_depths = {1, 1, 1, 1};
  FFNet net(c);
  NoGradGuard guard;
  const auto f = net.backbone_forward(Tensor::zeros({1, 3, 64, 64}));
  CHECK(f.s1.shape() == Shape{1, 192, 8, 8});
  CHECK(f.s2.shape() == Shape{1, 384, 4, 4});
  CHECK(f.s3.shape() == Shape{1, 768, 2, 2});
  CHECK(net.forward(Tensor::zeros({1, 3, 64, 64})).shape() == Shape{1, 1, 8, 8});
}
