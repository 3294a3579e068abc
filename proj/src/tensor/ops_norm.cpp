#include <cmath>

#include "fflab/ops.hpp"

namespace fflab::ops {

namespace {

void check_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const char* op) {
  const auto c = static_cast<std::size_t>(x.shape().c);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError(std::string(op) + ": input " + x.shape().str() + " has " +
                     std::to_string(c) + " channels but gamma/beta hold " +
                     std::to_string(gamma.numel()) + "/" + std::to_string(beta.numel()));
}

}  // namespace

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, NormMode mode,
                    double momentum, double eps) {
  check_affine(x, gamma, beta, "batch_norm2d");
  if (!(eps > 0)) throw std::invalid_argument("batch_norm2d: eps must be > 0");
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const std::size_t per_channel = static_cast<std::size_t>(s.n) * plane;
  const auto xd = x.data();
  std::vector<double> mu(s.c), inv_std(s.c);

  if (mode == NormMode::kTrain) {
    if (per_channel < 2)
      throw ShapeError("batch_norm2d: train mode needs more than one value per channel, got " +
                       s.str());
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (int c = 0; c < s.c; ++c) {
      double acc = 0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = xd.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double m = acc / per_channel;
      double sq = 0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = xd.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      const double var = sq / per_channel;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * sq / (per_channel - 1);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (int c = 0; c < s.c; ++c) {
      mu[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }

  Tensor out = Tensor::zeros(s);
  auto od = out.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
      const double a = gd[c] * inv_std[c];
      const double b = bd[c] - a * mu[c];
      for (std::size_t i = 0; i < plane; ++i) od[off + i] = a * xd[off + i] + b;
    }

  auto xi = x.impl_ptr();
  auto gi = gamma.impl_ptr();
  auto bi = beta.impl_ptr();
  const bool train = mode == NormMode::kTrain;
  Graph::current().record(out, {xi, gi, bi}, [=](const std::vector<double>& go) {
    for (int c = 0; c < s.c; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xh = (xi->data[off + i] - mu[c]) * inv_std[c];
          sum_g += go[off + i];
          sum_gx += go[off + i] * xh;
        }
      }
      if (gi->requires_grad) gi->grad_buffer()[c] += sum_gx;
      if (bi->requires_grad) bi->grad_buffer()[c] += sum_g;
      if (!xi->requires_grad) continue;
      auto& gx = xi->grad_buffer();
      const double a = gi->data[c] * inv_std[c];
      const double mean_g = sum_g / per_channel;
      const double mean_gx = sum_gx / per_channel;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (train) {
            const double xh = (xi->data[off + i] - mu[c]) * inv_std[c];
            gx[off + i] += a * (go[off + i] - mean_g - xh * mean_gx);
          } else {
            gx[off + i] += a * go[off + i];
          }
        }
      }
    }
  });
  return out;
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, double eps) {
  check_affine(x, gamma, beta, "layer_norm_channels");
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const auto xd = x.data();
  std::vector<double> mu(s.n * plane), inv_std(s.n * plane);
  Tensor out = Tensor::zeros(s);
  auto od = out.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
      double m = 0;
      for (int c = 0; c < s.c; ++c) m += xd[base + c * plane];
      m /= s.c;
      double var = 0;
      for (int c = 0; c < s.c; ++c) {
        const double d = xd[base + c * plane] - m;
        var += d * d;
      }
      var /= s.c;
      const double is = 1.0 / std::sqrt(var + eps);
      mu[n * plane + p] = m;
      inv_std[n * plane + p] = is;
      for (int c = 0; c < s.c; ++c)
        od[base + c * plane] = gd[c] * (xd[base + c * plane] - m) * is + bd[c];
    }
  auto xi = x.impl_ptr();
  auto gi = gamma.impl_ptr();
  auto bi = beta.impl_ptr();
  Graph::current().record(out, {xi, gi, bi}, [=](const std::vector<double>& go) {
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
        const double m = mu[n * plane + p];
        const double is = inv_std[n * plane + p];
        double mean_g = 0, mean_gx = 0;
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = base + c * plane;
          const double xh = (xi->data[i] - m) * is;
          const double gxh = go[i] * gi->data[c];
          mean_g += gxh;
          mean_gx += gxh * xh;
          if (gi->requires_grad) gi->grad_buffer()[c] += go[i] * xh;
          if (bi->requires_grad) bi->grad_buffer()[c] += go[i];
        }
        if (!xi->requires_grad) continue;
        mean_g /= s.c;
        mean_gx /= s.c;
        auto& gx = xi->grad_buffer();
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = base + c * plane;
          const double xh = (xi->data[i] - m) * is;
          gx[i] += is * (go[i] * gi->data[c] - mean_g - xh * mean_gx);
        }
      }
  });
  return out;
}

}  // namespace fflab::ops
