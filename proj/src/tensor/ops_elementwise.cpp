#include <cmath>
#include <numbers>

#include "fflab/ops.hpp"

namespace fflab::ops {

namespace {

struct Broadcast {
  Shape out;
  // Element strides of each operand in the output index space; 0 on
  // broadcast axes.
  std::size_t sa[4];
  std::size_t sb[4];
};

int broadcast_extent(int a, int b, const Shape& sa, const Shape& sb,
                     const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError(std::string(op) + ": shapes " + sa.str() + " and " + sb.str() +
                   " are not broadcastable");
}

void strides_for(const Shape& s, const Shape& out, std::size_t* st) {
  const std::size_t full[4] = {static_cast<std::size_t>(s.c) * s.h * s.w,
                               static_cast<std::size_t>(s.h) * s.w,
                               static_cast<std::size_t>(s.w), 1};
  const int ext[4] = {s.n, s.c, s.h, s.w};
  const int oext[4] = {out.n, out.c, out.h, out.w};
  for (int i = 0; i < 4; ++i) st[i] = (ext[i] == 1 && oext[i] != 1) ? 0 : full[i];
}

Broadcast plan(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.out = {broadcast_extent(a.n, b.n, a, b, op), broadcast_extent(a.c, b.c, a, b, op),
            broadcast_extent(a.h, b.h, a, b, op), broadcast_extent(a.w, b.w, a, b, op)};
  strides_for(a, bc.out, bc.sa);
  strides_for(b, bc.out, bc.sb);
  return bc;
}

// Visits every output element with the matching operand offsets.
template <typename F>
void for_each(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < bc.out.n; ++n)
    for (int c = 0; c < bc.out.c; ++c)
      for (int h = 0; h < bc.out.h; ++h) {
        const std::size_t ia = n * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2];
        const std::size_t ib = n * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2];
        for (int w = 0; w < bc.out.w; ++w, ++o) f(o, ia + w * bc.sa[3], ib + w * bc.sb[3]);
      }
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const Broadcast bc = plan(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(bc.out);
  auto od = out.data();
  const auto ad = a.data();
  const auto bd = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t count = od.size();
    switch (kind) {
      case Binary::kAdd: for (std::size_t i = 0; i < count; ++i) od[i] = ad[i] + bd[i]; break;
      case Binary::kSub: for (std::size_t i = 0; i < count; ++i) od[i] = ad[i] - bd[i]; break;
      case Binary::kMul: for (std::size_t i = 0; i < count; ++i) od[i] = ad[i] * bd[i]; break;
    }
  } else {
    for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::kAdd: od[o] = ad[ia] + bd[ib]; break;
        case Binary::kSub: od[o] = ad[ia] - bd[ib]; break;
        case Binary::kMul: od[o] = ad[ia] * bd[ib]; break;
      }
    });
  }
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  Graph::current().record(out, {ai, bi}, [=](const std::vector<double>& go) {
    double* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
    double* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
    const double* av = ai->data.data();
    const double* bv = bi->data.data();
    for_each(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::kAdd:
          if (ga) ga[ia] += go[o];
          if (gb) gb[ib] += go[o];
          break;
        case Binary::kSub:
          if (ga) ga[ia] += go[o];
          if (gb) gb[ib] -= go[o];
          break;
        case Binary::kMul:
          if (ga) ga[ia] += go[o] * bv[ib];
          if (gb) gb[ib] += go[o] * av[ia];
          break;
      }
    });
  });
  return out;
}

// Pointwise map with derivative expressed through (input, output).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros(x.shape());
  auto od = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(xd[i]);
  auto xi = x.impl_ptr();
  auto oi = out.impl_ptr();
  // The output impl is referenced weakly to avoid a self-cycle.
  std::weak_ptr<detail::TensorImpl> ow = oi;
  Graph::current().record(out, {xi}, [xi, ow, deriv](const std::vector<double>& go) {
    auto o = ow.lock();
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < go.size(); ++i)
      gx[i] += go[i] * deriv(xi->data[i], o->data[i]);
  });
  return out;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      // NaN passes through so divergence stays visible downstream.
      x, [](double v) { return v > 0 || std::isnan(v) ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor softmax_channels(const Tensor& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor out = Tensor::zeros(s);
  auto od = out.data();
  const auto xd = x.data();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
      double mx = -INFINITY;
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, xd[base + c * plane]);
      double z = 0;
      for (int c = 0; c < s.c; ++c) z += (od[base + c * plane] = std::exp(xd[base + c * plane] - mx));
      for (int c = 0; c < s.c; ++c) od[base + c * plane] /= z;
    }
  auto xi = x.impl_ptr();
  std::weak_ptr<detail::TensorImpl> ow = out.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto o = ow.lock();
    auto& gx = xi->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
        double dot = 0;
        for (int c = 0; c < s.c; ++c) dot += go[base + c * plane] * o->data[base + c * plane];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = base + c * plane;
          gx[i] += o->data[i] * (go[i] - dot);
        }
      }
  });
  return out;
}

}  // namespace fflab::ops
