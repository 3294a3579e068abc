#include <cmath>
#include <numeric>

#include "fflab/loss.hpp"
#include "fflab/ops.hpp"

namespace fflab {

namespace {

void require_same(const Tensor& z, const Tensor& zhat, const char* what) {
  if (!(z.shape() == zhat.shape()))
    throw ShapeError(std::string(what) + ": dot map " + z.shape().str() +
                     " and density map " + zhat.shape().str() + " differ");
}

double total_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

Tensor count_loss(const Tensor& z, const Tensor& zhat) {
  require_same(z, zhat, "count_loss");
  return ops::abs(ops::add_scalar(ops::sum(zhat), -total_of(z.data())));
}

Tensor variation_loss(const Tensor& z, const Tensor& zhat, VariationMode mode) {
  require_same(z, zhat, "variation_loss");
  const double mass = total_of(z.data());
  if (mode == VariationMode::kWeighted)
    return ops::scale(ops::l1_norm(ops::sub(z.detach(), zhat)), mass);
  if (mass == 0.0) return ops::scale(ops::sum(zhat), 0.0);
  const Tensor zn = ops::scale(z.detach(), 1.0 / mass);
  return ops::scale(ops::l1_norm(ops::sub(zn, ops::normalize_mass(zhat, kMassGuard))), mass);
}

std::vector<double> source_weights(std::span<const double> zhat) {
  const std::size_t m = zhat.size();
  const double total = total_of(zhat);
  std::vector<double> a(m);
  if (!(total > 0)) {
    std::fill(a.begin(), a.end(), 1.0 / m);
    return a;
  }
  double renorm = 0;
  for (std::size_t i = 0; i < m; ++i) {
    a[i] = std::max(zhat[i] / total, 1e-16);
    renorm += a[i];
  }
  for (double& v : a) v /= renorm;
  return a;
}

Tensor ot_loss(const Tensor& zhat, std::span<const double> beta) {  // beta: grid potential
  if (beta.size() != zhat.numel())
    throw ShapeError("ot_loss: " + std::to_string(beta.size()) + " potentials for map " +
                     zhat.shape().str());
  const auto d = zhat.data();
  const double s = total_of(d);
  const double denom = s * s + kMassGuard;
  double inner = 0;
  for (std::size_t i = 0; i < d.size(); ++i) inner += beta[i] * d[i];
  std::vector<double> coef(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) coef[i] = beta[i] * s / denom - inner / denom;
  return ops::dot_constant(zhat, coef);
}

double combine_terms(const LossWeights& w, double count, double ot, double variation) {
  return count + w.ot * ot + w.variation * variation;
}

LossOutput total_loss(const Tensor& zhat, const Tensor& z, const std::vector<PointSet>& points,
                      const LossConfig& config) {
  require_same(z, zhat, "total_loss");
  const Shape s = zhat.shape();
  if (s.c != 1) throw ShapeError("total_loss expects one-channel maps, got " + s.str());
  if (points.size() != static_cast<std::size_t>(s.n))
    throw std::invalid_argument("total_loss: " + std::to_string(points.size()) +
                                " point sets for a batch of " + std::to_string(s.n));
  const double inv_n = 1.0 / s.n;
  LossOutput out;
  Tensor total;
  auto accumulate = [&](const Tensor& term, double weight) {
    const Tensor w = ops::scale(term, weight * inv_n);
    total = total.defined() ? ops::add(total, w) : w;
  };
  for (int i = 0; i < s.n; ++i) {
    const Tensor zi = ops::select_sample(z, i);
    const Tensor pi = ops::select_sample(zhat, i);
    const Tensor lc = count_loss(zi, pi);
    const Tensor lv = variation_loss(zi, pi, config.variation);
    accumulate(lc, 1.0);
    accumulate(lv, config.weights.variation);
    out.report.count += lc.item() * inv_n;
    out.report.variation += lv.item() * inv_n;
    if (points[i].empty()) continue;

    SinkhornProblem problem;
    problem.a = source_weights(pi.data());
    problem.b.assign(points[i].size(), 1.0 / points[i].size());
    problem.cost = grid_point_cost(s.h, s.w, points[i], config.stride);
    problem.options = config.sinkhorn;
    const SinkhornResult r = sinkhorn(problem);
    const Tensor lot = ot_loss(pi, r.alpha);
    accumulate(lot, config.weights.ot);
    out.report.ot += lot.item() * inv_n;
    out.report.wasserstein += r.transport_cost;
    ++out.report.ot_images;
    if (!r.converged) ++out.report.unconverged;
  }
  if (out.report.ot_images > 0) out.report.wasserstein /= out.report.ot_images;
  out.report.total =
      combine_terms(config.weights, out.report.count, out.report.ot, out.report.variation);
  out.total = total;
  return out;
}

}  // namespace fflab
