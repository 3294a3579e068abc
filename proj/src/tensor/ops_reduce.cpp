#include <cmath>
#include <numeric>

#include "fflab/ops.hpp"

namespace fflab::ops {

Tensor global_avg_pool(const Tensor& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor out = Tensor::zeros({s.n, s.c, 1, 1});
  auto od = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    double acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += xd[i * plane + p];
    od[i] = acc / static_cast<double>(plane);
  }
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double g = go[i] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] += g;
    }
  });
  return out;
}

Tensor channel_mean(const Tensor& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor out = Tensor::zeros({s.n, 1, s.h, s.w});
  auto od = out.data();
  const auto xd = x.data();
  for (int n = 0; n < s.n; ++n) {
    double* o = od.data() + n * plane;
    for (int c = 0; c < s.c; ++c) {
      const double* src = xd.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) o[p] += src[p];
    }
    for (std::size_t p = 0; p < plane; ++p) o[p] /= s.c;
  }
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto& gx = xi->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        double* dst = gx.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += go[n * plane + p] / s.c;
      }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  Tensor out = Tensor::scalar(std::accumulate(xd.begin(), xd.end(), 0.0));
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    for (double& g : xi->grad_buffer()) g += go[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor l1_norm(const Tensor& x) {
  const auto xd = x.data();
  double acc = 0;
  for (double v : xd) acc += std::fabs(v);
  Tensor out = Tensor::scalar(acc);
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xi->data[i];
      gx[i] += go[0] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
    }
  });
  return out;
}

Tensor concat_channels(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = inputs[0].shape();
  int channels = 0;
  for (const Tensor& t : inputs) {
    const Shape s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("concat_channels: " + s.str() + " does not match " + first.str());
    channels += s.c;
  }
  const std::size_t plane = first.plane();
  Tensor out = Tensor::zeros({first.n, channels, first.h, first.w});
  auto od = out.data();
  std::vector<detail::ImplPtr> impls;
  std::vector<int> offsets;
  int offset = 0;
  for (const Tensor& t : inputs) {
    const Shape s = t.shape();
    for (int n = 0; n < s.n; ++n) {
      const auto src = t.data().subspan(static_cast<std::size_t>(n) * s.c * plane, s.c * plane);
      std::copy(src.begin(), src.end(),
                od.begin() + (static_cast<std::size_t>(n) * channels + offset) * plane);
    }
    impls.push_back(t.impl_ptr());
    offsets.push_back(offset);
    offset += s.c;
  }
  Graph::current().record(out, impls, [=](const std::vector<double>& go) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      const auto& impl = impls[k];
      if (!impl->requires_grad) continue;
      auto& g = impl->grad_buffer();
      const int c = impl->shape.c;
      for (int n = 0; n < first.n; ++n) {
        const double* src = go.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * plane;
        double* dst = g.data() + static_cast<std::size_t>(n) * c * plane;
        for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

Tensor concat_batch(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("concat_batch: no inputs");
  const Shape first = inputs[0].shape();
  int count = 0;
  for (const Tensor& t : inputs) {
    const Shape s = t.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w)
      throw ShapeError("concat_batch: " + s.str() + " does not match " + first.str());
    count += s.n;
  }
  Tensor out = Tensor::zeros({count, first.c, first.h, first.w});
  auto od = out.data();
  std::vector<detail::ImplPtr> impls;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& t : inputs) {
    std::copy(t.data().begin(), t.data().end(), od.begin() + offset);
    impls.push_back(t.impl_ptr());
    offsets.push_back(offset);
    offset += t.numel();
  }
  Graph::current().record(out, impls, [=](const std::vector<double>& go) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (!impls[k]->requires_grad) continue;
      auto& g = impls[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[offsets[k] + i];
    }
  });
  return out;
}

Tensor select_sample(const Tensor& x, int index) {
  const Shape s = x.shape();
  if (index < 0 || index >= s.n)
    throw ShapeError("select_sample: index " + std::to_string(index) + " outside " + s.str());
  const std::size_t chunk = static_cast<std::size_t>(s.c) * s.plane();
  const auto src = x.data().subspan(index * chunk, chunk);
  Tensor out = Tensor::from({1, s.c, s.h, s.w}, std::vector<double>(src.begin(), src.end()));
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < chunk; ++i) g[index * chunk + i] += go[i];
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.numel() != x.numel())
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  Tensor out = Tensor::from(shape, x.values());
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int d = xs.c * xs.h * xs.w;
  if (ws.n != d || ws.h != 1 || ws.w != 1)
    throw ShapeError("linear: input " + xs.str() + " does not match weight " + ws.str());
  const int e = ws.c;
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(e))
    throw ShapeError("linear: bias of " + std::to_string(bias.numel()) +
                     " values for weight " + ws.str());
  Tensor out = Tensor::zeros({xs.n, e, 1, 1});
  auto od = out.data();
  const auto xd = x.data();
  const auto wd = weight.data();
  for (int n = 0; n < xs.n; ++n) {
    double* o = od.data() + n * e;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
    for (int i = 0; i < d; ++i) {
      const double v = xd[n * d + i];
      const double* wr = wd.data() + static_cast<std::size_t>(i) * e;
      for (int j = 0; j < e; ++j) o[j] += v * wr[j];
    }
  }
  auto xi = x.impl_ptr();
  auto wi = weight.impl_ptr();
  auto bi = bias.impl_ptr();
  Graph::current().record(out, {xi, wi, bi}, [=](const std::vector<double>& go) {
    for (int n = 0; n < xs.n; ++n) {
      const double* g = go.data() + n * e;
      for (int i = 0; i < d; ++i) {
        const double* wr = wi->data.data() + static_cast<std::size_t>(i) * e;
        if (xi->requires_grad) {
          double s = 0;
          for (int j = 0; j < e; ++j) s += g[j] * wr[j];
          xi->grad_buffer()[n * d + i] += s;
        }
        if (wi->requires_grad) {
          const double v = xi->data[n * d + i];
          double* gw = wi->grad_buffer().data() + static_cast<std::size_t>(i) * e;
          for (int j = 0; j < e; ++j) gw[j] += v * g[j];
        }
      }
      if (bi && bi->requires_grad)
        for (int j = 0; j < e; ++j) bi->grad_buffer()[j] += g[j];
    }
  });
  return out;
}

Tensor normalize_mass(const Tensor& x, double guard) {
  const auto xd = x.data();
  const double total = std::accumulate(xd.begin(), xd.end(), 0.0);
  const double denom = total + guard;
  Tensor out = Tensor::zeros(x.shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] / denom;
  auto xi = x.impl_ptr();
  Graph::current().record(out, {xi}, [=](const std::vector<double>& go) {
    // d(x_i / D)/dx_j = delta_ij / D - x_i / D^2
    double dot = 0;
    for (std::size_t i = 0; i < go.size(); ++i) dot += go[i] * xi->data[i];
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] / denom - dot / (denom * denom);
  });
  return out;
}

Tensor dot_constant(const Tensor& x, std::span<const double> coefficients) {
  if (coefficients.size() != x.numel())
    throw ShapeError("dot_constant: " + std::to_string(coefficients.size()) +
                     " coefficients for tensor " + x.shape().str());
  const auto xd = x.data();
  double acc = 0;
  for (std::size_t i = 0; i < xd.size(); ++i) acc += coefficients[i] * xd[i];
  Tensor out = Tensor::scalar(acc);
  auto xi = x.impl_ptr();
  std::vector<double> coef(coefficients.begin(), coefficients.end());
  Graph::current().record(out, {xi}, [xi, coef = std::move(coef)](const std::vector<double>& go) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[0] * coef[i];
  });
  return out;
}

}  // namespace fflab::ops
