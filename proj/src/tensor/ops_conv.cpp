#include <algorithm>
#include <vector>

#include "fflab/ops.hpp"
#include "kernels.hpp"

namespace fflab::ops {

using kernels::ConvGeometry;

int conv_out_extent(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

int conv_transpose_out_extent(int in, int kernel, int stride, int padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

namespace {

void check_conv_args(const Tensor& x, const Tensor& kernel, int in_channels,
                     int stride, int padding, const char* op) {
  if (stride < 1 || padding < 0)
    throw ShapeError(std::string(op) + ": stride must be >= 1 and padding >= 0");
  if (x.shape().c != in_channels)
    throw ShapeError(std::string(op) + ": input " + x.shape().str() +
                     " does not match kernel " + kernel.shape().str());
}

void add_bias(double* out, const Tensor& bias, int channels, std::size_t plane) {
  if (!bias.defined()) return;
  const auto b = bias.data();
  for (int c = 0; c < channels; ++c)
    std::fill(out + c * plane, out + (c + 1) * plane, b[c]);
}

void bias_grad(const std::vector<double>& g, detail::TensorImpl& bias, int n,
               int channels, std::size_t plane) {
  auto& gb = bias.grad_buffer();
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < channels; ++c) {
      const double* row = g.data() + (static_cast<std::size_t>(b) * channels + c) * plane;
      double s = 0;
      for (std::size_t q = 0; q < plane; ++q) s += row[q];
      gb[c] += s;
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              ConvOptions opt) {
  const Shape xs = x.shape();
  const Shape ks = kernel.shape();
  if (opt.groups < 1 || xs.c % opt.groups != 0 || ks.n % opt.groups != 0)
    throw ShapeError("conv2d: groups must divide input " + xs.str() +
                     " and kernel " + ks.str());
  check_conv_args(x, kernel, ks.c * opt.groups, opt.stride, opt.padding,
                  "conv2d");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ks.n))
    throw ShapeError("conv2d: bias of " + std::to_string(bias.numel()) +
                     " values for kernel " + ks.str());
  const int oh = conv_out_extent(xs.h, ks.h, opt.stride, opt.padding);
  const int ow = conv_out_extent(xs.w, ks.w, opt.stride, opt.padding);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d: kernel " + ks.str() + " larger than padded input " +
                     xs.str());

  const int groups = opt.groups;
  const int cin_g = ks.c;
  const int cout_g = ks.n / groups;
  const ConvGeometry geo{cin_g, xs.h, xs.w, ks.h, ks.w, opt.stride, opt.padding,
                         oh, ow};
  const bool direct = ks.h == 1 && ks.w == 1 && opt.stride == 1 && opt.padding == 0;
  const std::size_t krow = geo.rows();
  const std::size_t plane_in = xs.plane();
  const std::size_t plane_out = geo.cols();

  Tensor out = Tensor::zeros({xs.n, ks.n, oh, ow});
  auto od = out.data();
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<double> col(direct ? 0 : krow * plane_out);
  for (int b = 0; b < xs.n; ++b) {
    double* ob = od.data() + static_cast<std::size_t>(b) * ks.n * plane_out;
    add_bias(ob, bias, ks.n, plane_out);
    for (int g = 0; g < groups; ++g) {
      const double* src = xd.data() + (static_cast<std::size_t>(b) * xs.c + g * cin_g) * plane_in;
      const double* cm = src;
      if (!direct) {
        kernels::im2col(src, geo, col.data());
        cm = col.data();
      }
      kernels::gemm_nn(kd.data() + g * cout_g * krow, cm, ob + g * cout_g * plane_out,
                       cout_g, krow, plane_out);
    }
  }

  auto xi = x.impl_ptr();
  auto ki = kernel.impl_ptr();
  auto bi = bias.impl_ptr();
  Graph::current().record(out, {xi, ki, bi}, [=](const std::vector<double>& go) {
    std::vector<double> colb(direct ? 0 : krow * plane_out);
    std::vector<double> dcol(krow * plane_out);
    for (int b = 0; b < xs.n; ++b) {
      const double* gb = go.data() + static_cast<std::size_t>(b) * ks.n * plane_out;
      for (int g = 0; g < groups; ++g) {
        const double* gg = gb + g * cout_g * plane_out;
        const std::size_t xoff = (static_cast<std::size_t>(b) * xs.c + g * cin_g) * plane_in;
        if (ki->requires_grad) {
          const double* cm = xi->data.data() + xoff;
          if (!direct) {
            kernels::im2col(cm, geo, colb.data());
            cm = colb.data();
          }
          kernels::gemm_nt(gg, cm, ki->grad_buffer().data() + g * cout_g * krow,
                           cout_g, krow, plane_out);
        }
        if (xi->requires_grad) {
          double* dx = xi->grad_buffer().data() + xoff;
          const double* kg = ki->data.data() + g * cout_g * krow;
          if (direct) {
            kernels::gemm_tn(kg, gg, dx, cout_g, krow, plane_out);
          } else {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            kernels::gemm_tn(kg, gg, dcol.data(), cout_g, krow, plane_out);
            kernels::col2im_add(dcol.data(), geo, dx);
          }
        }
      }
    }
    if (bi && bi->requires_grad) bias_grad(go, *bi, xs.n, ks.n, plane_out);
  });
  return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel,
                        const Tensor& bias, int stride, int padding) {
  const Shape xs = x.shape();
  const Shape ks = kernel.shape();  // (cin, cout, kh, kw)
  check_conv_args(x, kernel, ks.n, stride, padding, "conv_transpose2d");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ks.c))
    throw ShapeError("conv_transpose2d: bias of " + std::to_string(bias.numel()) +
                     " values for kernel " + ks.str());
  const int oh = conv_transpose_out_extent(xs.h, ks.h, stride, padding);
  const int ow = conv_transpose_out_extent(xs.w, ks.w, stride, padding);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv_transpose2d: empty output for input " + xs.str() +
                     " and kernel " + ks.str());
  // Geometry of the forward conv this operator transposes: it maps the
  // output grid (cout channels) back onto the input grid.
  const ConvGeometry geo{ks.c, oh, ow, ks.h, ks.w, stride, padding, xs.h, xs.w};
  if (conv_out_extent(oh, ks.h, stride, padding) != xs.h ||
      conv_out_extent(ow, ks.w, stride, padding) != xs.w)
    throw ShapeError("conv_transpose2d: inconsistent geometry for input " +
                     xs.str());
  const std::size_t krow = geo.rows();
  const std::size_t plane_in = xs.plane();
  const std::size_t plane_out = static_cast<std::size_t>(oh) * ow;

  Tensor out = Tensor::zeros({xs.n, ks.c, oh, ow});
  auto od = out.data();
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<double> col(krow * plane_in);
  for (int b = 0; b < xs.n; ++b) {
    double* ob = od.data() + static_cast<std::size_t>(b) * ks.c * plane_out;
    add_bias(ob, bias, ks.c, plane_out);
    std::fill(col.begin(), col.end(), 0.0);
    kernels::gemm_tn(kd.data(), xd.data() + static_cast<std::size_t>(b) * xs.c * plane_in,
                     col.data(), ks.n, krow, plane_in);
    kernels::col2im_add(col.data(), geo, ob);
  }

  auto xi = x.impl_ptr();
  auto ki = kernel.impl_ptr();
  auto bi = bias.impl_ptr();
  Graph::current().record(out, {xi, ki, bi}, [=](const std::vector<double>& go) {
    std::vector<double> colb(krow * plane_in);
    for (int b = 0; b < xs.n; ++b) {
      kernels::im2col(go.data() + static_cast<std::size_t>(b) * ks.c * plane_out, geo,
                      colb.data());
      const std::size_t xoff = static_cast<std::size_t>(b) * xs.c * plane_in;
      if (xi->requires_grad)
        kernels::gemm_nn(ki->data.data(), colb.data(), xi->grad_buffer().data() + xoff,
                         ks.n, krow, plane_in);
      if (ki->requires_grad)
        kernels::gemm_nt(xi->data.data() + xoff, colb.data(),
                         ki->grad_buffer().data(), ks.n, krow, plane_in);
    }
    if (bi && bi->requires_grad) bias_grad(go, *bi, xs.n, ks.c, plane_out);
  });
  return out;
}

Tensor conv2d_per_sample(const Tensor& x, const Tensor& kernels_t, int padding) {
  const Shape xs = x.shape();
  const Shape ks = kernels_t.shape();
  if (xs.n == 0 || ks.n % xs.n != 0)
    throw ShapeError("conv2d_per_sample: kernels " + ks.str() +
                     " do not split over batch of input " + xs.str());
  check_conv_args(x, kernels_t, ks.c, 1, padding, "conv2d_per_sample");
  const int cout = ks.n / xs.n;
  const int oh = conv_out_extent(xs.h, ks.h, 1, padding);
  const int ow = conv_out_extent(xs.w, ks.w, 1, padding);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d_per_sample: kernel " + ks.str() +
                     " larger than padded input " + xs.str());
  const ConvGeometry geo{xs.c, xs.h, xs.w, ks.h, ks.w, 1, padding, oh, ow};
  const std::size_t krow = geo.rows();
  const std::size_t plane_in = xs.plane();
  const std::size_t plane_out = geo.cols();

  Tensor out = Tensor::zeros({xs.n, cout, oh, ow});
  auto od = out.data();
  std::vector<double> col(krow * plane_out);
  for (int b = 0; b < xs.n; ++b) {
    kernels::im2col(x.data().data() + static_cast<std::size_t>(b) * xs.c * plane_in, geo,
                    col.data());
    kernels::gemm_nn(kernels_t.data().data() + static_cast<std::size_t>(b) * cout * krow,
                     col.data(), od.data() + static_cast<std::size_t>(b) * cout * plane_out,
                     cout, krow, plane_out);
  }

  auto xi = x.impl_ptr();
  auto ki = kernels_t.impl_ptr();
  Graph::current().record(out, {xi, ki}, [=](const std::vector<double>& go) {
    std::vector<double> colb(krow * plane_out);
    for (int b = 0; b < xs.n; ++b) {
      const double* gb = go.data() + static_cast<std::size_t>(b) * cout * plane_out;
      const std::size_t xoff = static_cast<std::size_t>(b) * xs.c * plane_in;
      const std::size_t koff = static_cast<std::size_t>(b) * cout * krow;
      if (ki->requires_grad) {
        kernels::im2col(xi->data.data() + xoff, geo, colb.data());
        kernels::gemm_nt(gb, colb.data(), ki->grad_buffer().data() + koff, cout, krow,
                         plane_out);
      }
      if (xi->requires_grad) {
        std::fill(colb.begin(), colb.end(), 0.0);
        kernels::gemm_tn(ki->data.data() + koff, gb, colb.data(), cout, krow, plane_out);
        kernels::col2im_add(colb.data(), geo, xi->grad_buffer().data() + xoff);
      }
    }
  });
  return out;
}

Tensor aggregate_kernels(const Tensor& base, const Tensor& a_kernel,
                         const Tensor& a_spatial, const Tensor& a_in,
                         const Tensor& a_out) {
  const Shape bs = base.shape();
  const int n = a_kernel.shape().n;
  const int count = a_kernel.shape().c;
  const int taps = bs.h * bs.w;
  const int cin = bs.c;
  if (count <= 0 || bs.n % count != 0)
    throw ShapeError("aggregate_kernels: base " + bs.str() +
                     " does not split into " + std::to_string(count) + " kernels");
  const int cout = bs.n / count;
  auto expect = [&](const Tensor& t, int len, const char* name) {
    if (t.shape() != Shape{n, len, 1, 1})
      throw ShapeError(std::string("aggregate_kernels: ") + name + " attention " +
                       t.shape().str() + " expected " + Shape{n, len, 1, 1}.str());
  };
  expect(a_spatial, taps, "spatial");
  expect(a_in, cin, "input-channel");
  expect(a_out, cout, "output-channel");

  const std::size_t kernel_size = static_cast<std::size_t>(cout) * cin * taps;
  Tensor out = Tensor::zeros({n * cout, cin, bs.h, bs.w});
  auto od = out.data();
  const auto bd = base.data();
  const auto an = a_kernel.data();
  const auto as = a_spatial.data();
  const auto ai = a_in.data();
  const auto ao = a_out.data();
  // mixed[b] = sum_k a_kernel[b,k] * base[k]; out = mixed * (a_out x a_in x a_spatial).
  std::vector<double> mixed(static_cast<std::size_t>(n) * kernel_size, 0.0);
  for (int b = 0; b < n; ++b) {
    double* mb = mixed.data() + b * kernel_size;
    for (int k = 0; k < count; ++k) {
      const double wk = an[b * count + k];
      const double* src = bd.data() + k * kernel_size;
      for (std::size_t e = 0; e < kernel_size; ++e) mb[e] += wk * src[e];
    }
    double* ob = od.data() + b * kernel_size;
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < cin; ++i) {
        const double f = ao[b * cout + o] * ai[b * cin + i];
        const std::size_t off = (static_cast<std::size_t>(o) * cin + i) * taps;
        for (int s = 0; s < taps; ++s) ob[off + s] = f * as[b * taps + s] * mb[off + s];
      }
  }

  auto bi = base.impl_ptr();
  auto ni = a_kernel.impl_ptr();
  auto si = a_spatial.impl_ptr();
  auto ii = a_in.impl_ptr();
  auto oi = a_out.impl_ptr();
  const bool kept = Graph::current().wants_grad({&base, &a_kernel, &a_spatial, &a_in, &a_out});
  if (!kept) return out;
  Graph::current().record(
      out, {bi, ni, si, ii, oi},
      [=, mixed = std::move(mixed)](const std::vector<double>& go) {
        for (int b = 0; b < n; ++b) {
          const double* gb = go.data() + b * kernel_size;
          const double* mb = mixed.data() + b * kernel_size;
          std::vector<double> gmixed(kernel_size);
          for (int o = 0; o < cout; ++o)
            for (int i = 0; i < cin; ++i) {
              const double vo = oi->data[b * cout + o];
              const double vi = ii->data[b * cin + i];
              const std::size_t off = (static_cast<std::size_t>(o) * cin + i) * taps;
              double go_dot = 0, gi_dot = 0;
              for (int s = 0; s < taps; ++s) {
                const double vs = si->data[b * taps + s];
                const double gm = gb[off + s] * mb[off + s];
                gmixed[off + s] = gb[off + s] * vo * vi * vs;
                go_dot += gm * vi * vs;
                gi_dot += gm * vo * vs;
                if (si->requires_grad) si->grad_buffer()[b * taps + s] += gm * vo * vi;
              }
              if (oi->requires_grad) oi->grad_buffer()[b * cout + o] += go_dot;
              if (ii->requires_grad) ii->grad_buffer()[b * cin + i] += gi_dot;
            }
          for (int k = 0; k < count; ++k) {
            const double* src = bi->data.data() + k * kernel_size;
            if (ni->requires_grad) {
              double s = 0;
              for (std::size_t e = 0; e < kernel_size; ++e) s += gmixed[e] * src[e];
              ni->grad_buffer()[b * count + k] += s;
            }
            if (bi->requires_grad) {
              const double wk = ni->data[b * count + k];
              double* dst = bi->grad_buffer().data() + k * kernel_size;
              for (std::size_t e = 0; e < kernel_size; ++e) dst[e] += wk * gmixed[e];
            }
          }
        }
      });
  return out;
}

}  // namespace fflab::ops
