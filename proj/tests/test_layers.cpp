#include <doctest.h>

#include <cmath>
#include <random>

#include "fflab/layers.hpp"
#include "support/oracles.hpp"

using namespace fflab;
using fflab::testing::gradient_check;
using fflab::testing::max_abs_diff;
using fflab::testing::probe_loss;
using fflab::testing::random_tensor;

namespace {

void zero_parameters(const Module& m) {
  std::vector<ParamRef> params;
  m.collect_parameters("", params);
  for (auto& p : params)
    for (double& v : p.tensor.data()) v = 0.0;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Hand-rolled y = x W + b for a (d, e, 1, 1) weight.
std::vector<double> affine(const std::vector<double>& x, const Linear& l) {
  const int d = l.weight.shape().n, e = l.weight.shape().c;
  std::vector<double> y(e);
  for (int j = 0; j < e; ++j) {
    y[j] = l.bias.data()[j];
    for (int i = 0; i < d; ++i) y[j] += x[i] * l.weight.at(i, j, 0, 0);
  }
  return y;
}

std::vector<double> pooled(const Tensor& x, int n) {
  const Shape s = x.shape();
  std::vector<double> p(s.c, 0.0);
  for (int c = 0; c < s.c; ++c) {
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) p[c] += x.at(n, c, h, w);
    p[c] /= s.h * s.w;
  }
  return p;
}

}  // namespace

TEST_CASE("dynamic conv attention with zeroed heads is one half everywhere") {
  Rng rng(1);
  DynamicConv2d layer(3, 4, {}, rng);
  zero_parameters(layer);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const DynamicAttention a = layer.attention(x);
  for (const Tensor* t : {&a.kernel, &a.spatial, &a.in, &a.out})
    for (double v : t->data()) CHECK(v == 0.5);
  CHECK(a.kernel.shape() == Shape{2, 4, 1, 1});
  CHECK(a.spatial.shape() == Shape{2, 9, 1, 1});
  CHECK(a.in.shape() == Shape{2, 3, 1, 1});
  CHECK(a.out.shape() == Shape{2, 4, 1, 1});
}

TEST_CASE("dynamic conv attentions stay inside (0, 1)") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    DynamicConv2d layer(2 + trial % 3, 3, {.kernels = 1 + trial % 4}, rng);
    const Tensor x = random_tensor({2, layer.in_channels(), 4, 4}, rng, -5, 5);
    const DynamicAttention a = layer.attention(x);
    for (const Tensor* t : {&a.kernel, &a.spatial, &a.in, &a.out})
      for (double v : t->data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
  }
}

TEST_CASE("dynamic conv attention matches a step-by-step composition") {
  Rng rng(3);
  DynamicConv2d layer(2, 3, {.kernels = 2, .reduction = 1}, rng);
  const Tensor x = random_tensor({1, 2, 4, 4}, rng);
  const DynamicAttention a = layer.attention(x);
  const auto hidden = affine(pooled(x, 0), layer.fc);
  auto check_head = [&](const Linear& head, const Tensor& got) {
    const auto logits = affine(hidden, head);
    REQUIRE(logits.size() == got.numel());
    for (std::size_t i = 0; i < logits.size(); ++i)
      CHECK(std::fabs(sig(logits[i]) - got.data()[i]) < 1e-12);
  };
  check_head(layer.head_kernel, a.kernel);
  check_head(layer.head_spatial, a.spatial);
  check_head(layer.head_in, a.in);
  check_head(layer.head_out, a.out);

  CHECK_THROWS_AS(layer.attention(Tensor::zeros({1, 3, 4, 4})), ShapeError);
}

TEST_CASE("dynamic conv reduces to plain conv with one kernel and unit attention") {
  Rng rng(4);
  DynamicConv2d layer(3, 2, {.kernels = 1}, rng);
  const Tensor x = random_tensor({2, 3, 6, 5}, rng);
  const auto ones = DynamicAttention::constant(2, 1, 9, 3, 2, 1.0);
  const Tensor y = layer.forward_with(x, ones);
  const Tensor ref = ops::conv2d(x, layer.base, {}, {.padding = 1});
  CHECK(y.values() == ref.values());

  const auto zeros = DynamicAttention::constant(2, 1, 9, 3, 2, 0.0);
  const Tensor gated = layer.forward_with(x, zeros);
  for (double v : gated.data()) CHECK(v == 0.0);
}

TEST_CASE("dynamic conv matches explicit kernel aggregation and loop convolution") {
  Rng rng(5);
  DynamicConv2d layer(2, 3, {.kernels = 2}, rng);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  const Tensor y = layer.forward(x);
  const DynamicAttention a = layer.attention(x);
  for (int b = 0; b < 2; ++b) {
    Tensor w = Tensor::zeros({3, 2, 3, 3});
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 2; ++i)
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) {
            double mix = 0;
            for (int k = 0; k < 2; ++k)
              mix += a.kernel.at(b, k, 0, 0) * layer.base.at(k * 3 + o, i, u, v);
            w.at(o, i, u, v) = a.spatial.at(b, u * 3 + v, 0, 0) * a.in.at(b, i, 0, 0) *
                               a.out.at(b, o, 0, 0) * mix;
          }
    Tensor xb = Tensor::zeros({1, 2, 5, 5});
    for (int i = 0; i < 50; ++i) xb.data()[i] = x.data()[b * 50 + i];
    const auto ref = fflab::testing::conv2d_loop(xb, w, {}, 1, 1);
    CHECK(max_abs_diff(y.data().subspan(b * 75, 75), ref) < 1e-10);
  }
}

TEST_CASE("dynamic conv gradients pass finite differences") {
  Rng rng(6);
  for (auto mode : {KernelAttention::kSigmoid, KernelAttention::kSoftmax}) {
    DynamicConv2d layer(2, 2, {.kernels = 2, .kernel_attention = mode}, rng);
    std::vector<ParamRef> params;
    layer.collect_parameters("", params);
    std::size_t count = 0;
    std::vector<Tensor> leaves;
    for (auto& p : params) {
      count += p.tensor.numel();
      leaves.push_back(p.tensor);
    }
    CHECK(count <= 500);
    Tensor x = random_tensor({2, 2, 4, 4}, rng);
    leaves.push_back(x);
    auto f = [&] { return probe_loss(layer.forward(x)); };
    CHECK(gradient_check(f, leaves) < 1e-4);
  }
}

TEST_CASE("channel attention") {
  Rng rng(7);
  ChannelAttention ca(4, 2, rng);
  Tensor f = random_tensor({2, 4, 3, 3}, rng);

  SUBCASE("composition oracle") {
    const Tensor y = ca.forward(f);
    CHECK(y.shape() == f.shape());
    for (int n = 0; n < 2; ++n) {
      auto hidden = affine(pooled(f, n), ca.squeeze);
      for (double& h : hidden) h = std::max(0.0, h);
      const auto logits = affine(hidden, ca.expand);
      for (int c = 0; c < 4; ++c)
        for (int h = 0; h < 3; ++h)
          for (int w = 0; w < 3; ++w)
            CHECK(std::fabs(y.at(n, c, h, w) - sig(logits[c]) * f.at(n, c, h, w)) < 1e-12);
    }
  }
  SUBCASE("zero channel stays zero") {
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) f.at(1, 2, h, w) = 0.0;
    const Tensor y = ca.forward(f);
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) CHECK(y.at(1, 2, h, w) == 0.0);
  }
  SUBCASE("zero MLP halves the input") {
    zero_parameters(ca);
    CHECK(max_abs_diff(ca.forward(f).data(), ops::scale(f, 0.5).data()) == 0.0);
  }
  SUBCASE("gradient") {
    auto fn = [&] { return probe_loss(ca.forward(f)); };
    std::vector<ParamRef> ps;
    ca.collect_parameters("", ps);
    std::vector<Tensor> leaves{f};
    for (auto& p : ps) leaves.push_back(p.tensor);
    CHECK(gradient_check(fn, leaves) < 1e-4);
  }
}

TEST_CASE("spatial attention") {
  Rng rng(8);
  SpatialAttention sa(rng, 3);
  Tensor p = random_tensor({2, 3, 5, 4}, rng);

  SUBCASE("composition oracle") {
    const Tensor y = sa.forward(p);
    CHECK(y.shape() == p.shape());
    const Tensor mean = ops::channel_mean(p);
    const auto logits = fflab::testing::conv2d_loop(mean, sa.conv.weight, sa.conv.bias.values(), 1, 1);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int h = 0; h < 5; ++h)
          for (int w = 0; w < 4; ++w) {
            const double gate = sig(logits[(n * 5 + h) * 4 + w]);
            CHECK(std::fabs(y.at(n, c, h, w) - gate * p.at(n, c, h, w)) < 1e-12);
          }
  }
  SUBCASE("zero pixel stays zero") {
    for (int c = 0; c < 3; ++c) p.at(0, c, 2, 1) = 0.0;
    const Tensor y = sa.forward(p);
    for (int c = 0; c < 3; ++c) CHECK(y.at(0, c, 2, 1) == 0.0);
  }
  SUBCASE("zero conv halves the input") {
    zero_parameters(sa);
    CHECK(max_abs_diff(sa.forward(p).data(), ops::scale(p, 0.5).data()) == 0.0);
  }
  SUBCASE("default kernel is 7x7 with padding 3") {
    SpatialAttention def(rng);
    CHECK(def.conv.weight.shape() == Shape{1, 1, 7, 7});
    CHECK(def.conv.options.padding == 3);
  }
}

TEST_CASE("parameter naming and decay flags") {
  Rng rng(9);
  DynamicConv2d layer(4, 4, {}, rng);
  std::vector<ParamRef> ps;
  layer.collect_parameters("ftm.y1", ps);
  CHECK(ps.front().name == "ftm.y1.base");
  for (const auto& p : ps)
    if (p.name.ends_with("bias")) CHECK_FALSE(p.decay);
  BatchNorm2d bn(3);
  std::vector<BufferRef> bufs;
  bn.collect_buffers("bn", bufs);
  CHECK(bufs.size() == 2);
  CHECK(bufs[1].name == "bn.running_var");
}
