#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fflab/loss.hpp"
#include "fflab/ops.hpp"
#include "support/lp_oracle.hpp"
#include "support/oracles.hpp"

using namespace fflab;
using fflab::testing::exact_ot_cost;
using fflab::testing::random_tensor;

namespace {

using Vec = std::vector<double>;
using Rng = std::mt19937_64;

Vec random_simplex(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  Vec w(n);
  for (double& v : w) v = u(rng);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= s;
  return w;
}

struct Instance {
  Vec a, b, cost;
};

/// Points scattered in a 4 x 4 square; squared Euclidean costs.
Instance random_instance(int m, int k, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 4.0);
  std::vector<std::pair<double, double>> src(m), dst(k);
  for (auto& p : src) p = {u(rng), u(rng)};
  for (auto& p : dst) p = {u(rng), u(rng)};
  Instance in{random_simplex(m, rng), random_simplex(k, rng), Vec(m * k)};
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) {
      const double dx = src[i].first - dst[j].first, dy = src[i].second - dst[j].second;
      in.cost[i * k + j] = dx * dx + dy * dy;
    }
  return in;
}

SinkhornResult solve(const Instance& in, double eps, int iters = 200000, double tol = 1e-8) {
  return sinkhorn({in.a, in.b, in.cost, {eps, iters, tol}});
}

double plan_mass(const SinkhornResult& r) { return std::accumulate(r.plan.begin(), r.plan.end(), 0.0); }

double sum_of(const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0); }

Tensor random_density(Shape s, Rng& rng) { return random_tensor(s, rng, 0.0, 0.2); }

/// Sparse non-negative dot map with a few integer counts.
Tensor random_dots(Shape s, Rng& rng) {
  Tensor z = Tensor::zeros(s);
  std::uniform_int_distribution<int> cell(0, static_cast<int>(s.numel()) - 1), count(0, 4);
  for (int i = 0; i < count(rng); ++i) z.data()[cell(rng)] += 1.0;
  return z;
}

PointSet random_points(int h, int w, int count, Rng& rng) {
  std::uniform_real_distribution<double> ux(0.0, 8.0 * w), uy(0.0, 8.0 * h);
  PointSet p(count);
  for (auto& q : p) q = {ux(rng), uy(rng)};
  return p;
}

}  // namespace

TEST_CASE("exact LP oracle agrees with brute-force assignment on uniform marginals") {
  Rng rng(40);
  for (int n : {2, 3, 4})
    for (int trial = 0; trial < 10; ++trial) {
      Instance in = random_instance(n, n, rng);
      in.a.assign(n, 1.0 / n);
      in.b.assign(n, 1.0 / n);
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      double best = 1e300;
      do {
        double c = 0;
        for (int i = 0; i < n; ++i) c += in.cost[i * n + perm[i]] / n;
        best = std::min(best, c);
      } while (std::next_permutation(perm.begin(), perm.end()));
      CHECK(std::fabs(exact_ot_cost(in.a, in.b, in.cost) - best) < 1e-12);
    }
}

TEST_CASE("sinkhorn on a single cell and point") {
  const auto r = sinkhorn({{1.0}, {1.0}, {2.5}, {}});
  REQUIRE(r.plan.size() == 1);
  CHECK(std::fabs(r.plan[0] - 1.0) < 1e-12);
  CHECK(std::fabs(r.transport_cost - 2.5) < 1e-12);
  CHECK(r.converged);
}

TEST_CASE("sinkhorn with matching supports concentrates on the diagonal") {
  Rng rng(41);
  for (int n : {2, 3, 4}) {
    Instance in = random_instance(n, n, rng);
    in.b = in.a;
    // Same support on both sides: zero diagonal, separated off-diagonal.
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) in.cost[i * n + j] = i == j ? 0.0 : 1.0 + (i + j) % 3;
    const auto r = solve(in, 0.01);
    CHECK(r.transport_cost < 1e-3);
    CHECK(r.marginal_error < 1e-6);
  }
}

TEST_CASE("sinkhorn suite against the exact LP at small epsilon") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = trial % 2 == 0 ? 3 : 4, k = 4;
    const Instance in = random_instance(m, k, rng);
    const double exact = exact_ot_cost(in.a, in.b, in.cost);
    const auto r = solve(in, 0.01);
    CAPTURE(trial);
    CHECK(r.converged);
    CHECK(r.marginal_error < 1e-6);
    CHECK(std::fabs(plan_mass(r) - 1.0) < 1e-9);
    CHECK(std::fabs(r.transport_cost - exact) <= 0.02 * exact);
    for (double p : r.plan) CHECK(p >= 0.0);
  }
}

TEST_CASE("sinkhorn at epsilon 0.05 on random 3x4 instances") {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const Instance in = random_instance(3, 4, rng);
    const double exact = exact_ot_cost(in.a, in.b, in.cost);
    const auto r = solve(in, 0.05);
    CHECK(std::fabs(r.transport_cost - exact) <= 0.02 * exact);
  }
}

TEST_CASE("entropic cost approaches the LP cost as epsilon shrinks") {
  Rng rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    const Instance in = random_instance(4, 4, rng);
    const double exact = exact_ot_cost(in.a, in.b, in.cost);
    double previous = std::numeric_limits<double>::infinity();
    for (double eps : {1.0, 0.1, 0.01}) {
      const auto r = solve(in, eps);
      const double gap = r.transport_cost - exact;
      // A feasible plan never beats the LP optimum; the slack covers the
      // remaining marginal residual.
      const double max_cost = *std::max_element(in.cost.begin(), in.cost.end());
      CHECK(gap >= -2.0 * r.marginal_error * max_cost);
      CHECK(gap <= previous + 1e-12);
      previous = gap;
    }
    CHECK(previous < 0.02 * exact);
  }
}

TEST_CASE("sinkhorn marginal error decreases monotonically") {
  Rng rng(45);
  auto monotone = [](const SinkhornResult& r) {
    for (std::size_t i = 1; i < r.error_history.size(); ++i)
      if (r.error_history[i] > r.error_history[i - 1] * (1 + 1e-12)) return false;
    return true;
  };
  for (int trial = 0; trial < 20; ++trial) {
    const Instance in = random_instance(3 + trial % 2, 4, rng);
    for (double eps : {10.0, 1.0}) {
      const auto r = sinkhorn({in.a, in.b, in.cost, {eps, 500, 1e-6}});
      CHECK(r.converged);
      CHECK(r.marginal_error < 1e-6);
      CHECK(monotone(r));
    }
    for (double eps : {0.1, 0.01}) {
      const auto r = solve(in, eps);
      CHECK(r.converged);
      CHECK(monotone(r));
    }
  }
}

TEST_CASE("sinkhorn on a full prediction grid with default settings") {
  Rng rng(46);
  const PointSet pts = random_points(32, 32, 40, rng);
  Vec zhat(32 * 32);
  for (double& v : zhat) v = std::uniform_real_distribution<double>(0, 1)(rng);
  SinkhornProblem p{source_weights(zhat), Vec(40, 1.0 / 40), grid_point_cost(32, 32, pts, 8), {}};
  const auto r1 = sinkhorn(p);
  const auto r2 = sinkhorn(p);
  CHECK(r1.plan == r2.plan);
  CHECK(r1.alpha == r2.alpha);
  CHECK(std::fabs(plan_mass(r1) - 1.0) < 1e-9);
  for (double v : r1.alpha) CHECK(std::isfinite(v));

  // A small epsilon on the same grid underflows the plain kernel.
  p.options = {0.05, 300, 1e-6};
  const auto r3 = sinkhorn(p);
  for (double v : r3.plan) CHECK(std::isfinite(v));
  CHECK(std::fabs(plan_mass(r3) - 1.0) < 1e-9);
}

TEST_CASE("sinkhorn input validation") {
  CHECK_THROWS_AS(sinkhorn({{1.0}, {}, {}, {}}), EmptyTargetError);
  CHECK_THROWS_AS(sinkhorn({{0.5, 0.6}, {1.0}, {0, 0}, {}}), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn({{1.0}, {1.0}, {-1.0}, {}}), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn({{1.0}, {1.0}, {1.0}, {0.0, 10, 1e-6}}), std::invalid_argument);
}

TEST_CASE("grid cost uses cell centres in stride units") {
  const PointSet pts{{4.0, 4.0}, {12.0, 4.0}, {0.0, 0.0}};
  const Vec c = grid_point_cost(2, 2, pts, 8);
  REQUIRE(c.size() == 4 * 3);
  CHECK(c[0 * 3 + 0] == 0.0);   // cell (0,0) centre is pixel (4,4)
  CHECK(c[1 * 3 + 1] == 0.0);   // cell (0,1) centre is pixel (12,4)
  CHECK(c[0 * 3 + 1] == 1.0);
  CHECK(c[3 * 3 + 2] == 4.5);   // (1.5^2 + 1.5^2)
}

TEST_CASE("source weights floor empty cells") {
  const Vec a = source_weights(Vec{0.0, 2.0, 2.0});
  CHECK(a[0] > 0.0);
  CHECK(std::fabs(std::accumulate(a.begin(), a.end(), 0.0) - 1.0) < 1e-15);
  CHECK(std::fabs(a[1] - 0.5) < 1e-15);
  const Vec u = source_weights(Vec{0.0, 0.0});
  CHECK(u[0] == 0.5);
}

TEST_CASE("count loss") {
  const Tensor z = Tensor::from({1, 1, 1, 3}, {2, 2, 1});
  CHECK(count_loss(z, Tensor::from({1, 1, 1, 3}, {1, 1, 3})).item() == 0.0);
  Tensor zhat = Tensor::from({1, 1, 1, 3}, {2.5, 2.5, 2.5}, true);
  const Tensor small = Tensor::from({1, 1, 1, 3}, {1, 1, 1});
  const Tensor l = count_loss(small, zhat);
  CHECK(l.item() == doctest::Approx(4.5).epsilon(1e-15));
  backward(l);
  for (double g : zhat.grad()) CHECK(g == 1.0);

  Tensor under = Tensor::from({1, 1, 1, 3}, {0.1, 0.1, 0.1}, true);
  backward(count_loss(small, under));
  for (double g : under.grad()) CHECK(g == -1.0);

  Tensor tie = Tensor::from({1, 1, 1, 3}, {1, 1, 1}, true);
  backward(count_loss(small, tie));
  for (double g : tie.grad()) CHECK(g == 0.0);

  CHECK_THROWS_AS(count_loss(small, Tensor::zeros({1, 1, 3, 1})), ShapeError);
}

TEST_CASE("variation loss") {
  const Tensor z = Tensor::from({1, 1, 1, 2}, {1, 1});
  CHECK(variation_loss(z, z).item() == 0.0);
  const Tensor zhat = Tensor::from({1, 1, 1, 2}, {1.25, 0.75});
  CHECK(variation_loss(z, zhat).item() == doctest::Approx(1.0).epsilon(1e-15));
  // Twice the mass, same residual.
  const Tensor z2 = Tensor::from({1, 1, 1, 2}, {2, 2});
  const Tensor zhat2 = Tensor::from({1, 1, 1, 2}, {2.25, 1.75});
  CHECK(variation_loss(z2, zhat2).item() == doctest::Approx(2.0).epsilon(1e-15));
  // The weight is ||z||_1, so swapping the arguments changes the value.
  const Tensor light = Tensor::from({1, 1, 1, 2}, {2.5, 1.0});
  CHECK(variation_loss(z2, light).item() == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(variation_loss(light, z2).item() == doctest::Approx(5.25).epsilon(1e-15));

  const Tensor zn = Tensor::from({1, 1, 1, 2}, {3, 1});
  const Tensor pn = Tensor::from({1, 1, 1, 2}, {1, 1});
  const double expected = 4.0 * (std::fabs(0.75 - 1.0 / (2.0 + kMassGuard)) +
                                 std::fabs(0.25 - 1.0 / (2.0 + kMassGuard)));
  CHECK(std::fabs(variation_loss(zn, pn, VariationMode::kNormalized).item() - expected) < 1e-12);
  CHECK(variation_loss(Tensor::zeros({1, 1, 1, 2}), pn, VariationMode::kNormalized).item() == 0.0);
}

TEST_CASE("count and variation losses match direct recomputation") {
  Rng rng(47);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{1, 1, 4, 5};
    const Tensor z = random_dots(s, rng);
    const Tensor zhat = random_density(s, rng);
    double sz = 0, sp = 0, resid = 0;
    for (std::size_t i = 0; i < s.numel(); ++i) {
      sz += std::fabs(z.data()[i]);
      sp += std::fabs(zhat.data()[i]);
      resid += std::fabs(z.data()[i] - zhat.data()[i]);
    }
    const double lc = std::fabs(sz - sp), lv = sz * resid;
    CHECK(std::fabs(count_loss(z, zhat).item() - lc) < 1e-10);
    CHECK(std::fabs(count_loss(zhat, z).item() - lc) < 1e-10);
    CHECK(std::fabs(variation_loss(z, zhat).item() - lv) < 1e-10);
    const double lot = u(rng);
    CHECK(std::fabs(combine_terms({}, lc, lot, lv) - (lc + 0.1 * lot + 0.01 * lv)) < 1e-10);
  }
}

TEST_CASE("total loss weights") {
  const LossWeights w;
  CHECK(w.ot == 0.1);
  CHECK(w.variation == 0.01);
  CHECK(combine_terms(w, 2, 10, 100) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(combine_terms(w, 0, 0, 0) == 0.0);
}

TEST_CASE("ot loss value") {
  SUBCASE("uniform prediction with constant potential cancels") {
    const Tensor zhat = Tensor::full({1, 1, 3, 3}, 0.4);
    const Vec beta(9, 2.5);
    CHECK(std::fabs(ot_loss(zhat, beta).item()) < 1e-12);
  }
  SUBCASE("single cell and point") {
    const Tensor zhat = Tensor::full({1, 1, 1, 1}, 3.0);
    const auto r = sinkhorn({{1.0}, {1.0}, {0.5}, {}});
    const double s = 3.0, b = r.alpha[0];
    const double by_hand = (b / s - b * s / (s * s)) * s;
    CHECK(std::fabs(ot_loss(zhat, r.alpha).item() - by_hand) < 1e-12);
  }
  SUBCASE("matches the closed form on random maps") {
    Rng rng(48);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor zhat = random_density({1, 1, 3, 4}, rng);
      const Vec beta = random_tensor({1, 1, 3, 4}, rng, -5, 5).values();
      const double s = sum_of(zhat);
      double inner = 0;
      for (int i = 0; i < 12; ++i) inner += beta[i] * zhat.data()[i];
      double direct = 0;
      for (int i = 0; i < 12; ++i) direct += (beta[i] / s - inner / (s * s)) * zhat.data()[i];
      CHECK(std::fabs(ot_loss(zhat, beta).item() - direct) < 1e-10);
    }
  }
  CHECK_THROWS_AS(ot_loss(Tensor::zeros({1, 1, 2, 2}), Vec(3, 0.0)), ShapeError);
}

TEST_CASE("ot loss gradient with frozen potentials matches finite differences") {
  Rng rng(49);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor zhat = random_tensor({1, 1, 4, 4}, rng, 0.05, 1.0, true);
    const PointSet pts = random_points(4, 4, 5, rng);
    const auto r = sinkhorn({source_weights(zhat.data()), Vec(5, 0.2),
                             grid_point_cost(4, 4, pts, 8), {1.0, 1000, 1e-9}});
    backward(ot_loss(zhat, r.alpha));
    // With the potential frozen, the term is <beta, zhat / ||zhat||_1>.
    auto objective = [&](const Vec& x) {
      const double s = std::accumulate(x.begin(), x.end(), 0.0) + kMassGuard;
      double acc = 0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += r.alpha[i] * x[i] / s;
      return acc;
    };
    Vec x = zhat.values(), numeric(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + 1e-6;
      const double up = objective(x);
      x[i] = keep - 1e-6;
      const double down = objective(x);
      x[i] = keep;
      numeric[i] = (up - down) / 2e-6;
    }
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      diff += std::pow(zhat.grad()[i] - numeric[i], 2);
      norm += numeric[i] * numeric[i];
    }
    CHECK(std::sqrt(diff / norm) < 1e-4);
  }
}

TEST_CASE("total loss recombines the separately computed terms") {
  Rng rng(50);
  const Shape s{3, 1, 4, 4};
  Tensor zhat = random_density(s, rng);
  zhat.set_requires_grad(true);
  std::vector<PointSet> pts{random_points(4, 4, 3, rng), {}, random_points(4, 4, 6, rng)};
  Tensor z = Tensor::zeros(s);
  for (int i = 0; i < 3; ++i)
    for (const auto& p : pts[i]) z.at(i, 0, int(p.y / 8), int(p.x / 8)) += 1.0;
  LossConfig cfg;
  cfg.sinkhorn = {1.0, 500, 1e-9};
  const LossOutput out = total_loss(zhat, z, pts, cfg);

  double lc = 0, lv = 0, lot = 0;
  for (int i = 0; i < 3; ++i) {
    NoGradGuard guard;
    const Tensor zi = ops::select_sample(z, i), pi = ops::select_sample(zhat, i);
    lc += count_loss(zi, pi).item() / 3;
    lv += variation_loss(zi, pi).item() / 3;
    if (pts[i].empty()) continue;
    const auto r = sinkhorn({source_weights(pi.data()), Vec(pts[i].size(), 1.0 / pts[i].size()),
                             grid_point_cost(4, 4, pts[i], 8), cfg.sinkhorn});
    lot += ot_loss(pi, r.alpha).item() / 3;
  }
  CHECK(std::fabs(out.report.count - lc) < 1e-12);
  CHECK(std::fabs(out.report.variation - lv) < 1e-12);
  CHECK(std::fabs(out.report.ot - lot) < 1e-12);
  CHECK(std::fabs(out.total.item() - (lc + 0.1 * lot + 0.01 * lv)) < 1e-12);
  CHECK(std::fabs(out.report.total - out.total.item()) < 1e-12);
  CHECK(out.report.ot_images == 2);
  CHECK(out.report.wasserstein > 0.0);

  backward(out.total);
  double gnorm = 0;
  for (double g : zhat.grad()) gnorm += g * g;
  CHECK(gnorm > 0.0);
  CHECK_THROWS_AS(total_loss(zhat, z, {pts[0]}, cfg), std::invalid_argument);
}
