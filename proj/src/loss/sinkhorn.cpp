#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fflab/loss.hpp"

namespace fflab {

namespace {

// Scalings beyond e^kAbsorb are folded into the potentials.
constexpr double kAbsorb = 50.0;

void validate(const SinkhornProblem& p) {
  const std::size_t m = p.m(), k = p.k();
  if (k == 0) throw EmptyTargetError("sinkhorn: empty target (no annotation points)");
  if (m == 0) throw std::invalid_argument("sinkhorn: empty source");
  if (p.cost.size() != m * k)
    throw std::invalid_argument("sinkhorn: cost has " + std::to_string(p.cost.size()) +
                                " entries, expected " + std::to_string(m * k));
  if (!(p.options.epsilon > 0)) throw std::invalid_argument("sinkhorn: epsilon must be > 0");
  if (p.options.max_iters < 1) throw std::invalid_argument("sinkhorn: max_iters must be >= 1");
  auto check_weights = [](const std::vector<double>& w, const char* name) {
    double total = 0;
    for (double v : w) {
      if (!(v > 0) || !std::isfinite(v))
        throw std::invalid_argument(std::string("sinkhorn: ") + name +
                                    " weights must be positive and finite");
      total += v;
    }
    if (std::fabs(total - 1.0) > 1e-9)
      throw std::invalid_argument(std::string("sinkhorn: ") + name + " weights sum to " +
                                  std::to_string(total) + ", expected 1");
  };
  check_weights(p.a, "source");
  check_weights(p.b, "target");
  for (double c : p.cost)
    if (!(c >= 0) || !std::isfinite(c))
      throw std::invalid_argument("sinkhorn: costs must be finite and non-negative");
}

struct State {
  std::size_t m, k;
  double eps;
  const std::vector<double>& cost;
  std::vector<double> f, g, u, v, kernel;

  State(std::size_t m_, std::size_t k_, double eps_, const std::vector<double>& c)
      : m(m_), k(k_), eps(eps_), cost(c), f(m, 0.0), g(k, 0.0), u(m, 1.0), v(k, 1.0),
        kernel(m * k) {
    rebuild();
  }

  void rebuild() {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j)
        kernel[i * k + j] = std::exp((f[i] + g[j] - cost[i * k + j]) / eps);
  }

  void absorb() {
    for (std::size_t i = 0; i < m; ++i) f[i] += eps * std::log(u[i]);
    for (std::size_t j = 0; j < k; ++j) g[j] += eps * std::log(v[j]);
    std::fill(u.begin(), u.end(), 1.0);
    std::fill(v.begin(), v.end(), 1.0);
  }

  // Exact log-domain updates: g_j = eps log b_j - eps LSE_i((f_i - C_ij)/eps).
  void exact_columns(const std::vector<double>& b) {
    for (std::size_t j = 0; j < k; ++j) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) top = std::max(top, (f[i] - cost[i * k + j]) / eps);
      double acc = 0;
      for (std::size_t i = 0; i < m; ++i) acc += std::exp((f[i] - cost[i * k + j]) / eps - top);
      g[j] = eps * (std::log(b[j]) - top - std::log(acc));
    }
  }

  void exact_rows(const std::vector<double>& a) {
    for (std::size_t i = 0; i < m; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) top = std::max(top, (g[j] - cost[i * k + j]) / eps);
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += std::exp((g[j] - cost[i * k + j]) / eps - top);
      f[i] = eps * (std::log(a[i]) - top - std::log(acc));
    }
  }

  bool scalings_large() const {
    auto big = [](double s) { return std::fabs(std::log(s)) > kAbsorb; };
    return std::any_of(u.begin(), u.end(), big) || std::any_of(v.begin(), v.end(), big);
  }
};

// A scaling is usable when it is a positive finite number.
bool usable(double s) { return s > 0 && std::isfinite(s); }

}  // namespace

SinkhornResult sinkhorn(const SinkhornProblem& p) {
  validate(p);
  const std::size_t m = p.m(), k = p.k();
  State st(m, k, p.options.epsilon, p.cost);
  SinkhornResult out;
  std::vector<double> col(k), row(m);

  for (int it = 0; it < p.options.max_iters; ++it) {
    // Column half-step.
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double ui = st.u[i];
      const double* kr = &st.kernel[i * k];
      for (std::size_t j = 0; j < k; ++j) col[j] += kr[j] * ui;
    }
    bool ok = true;
    for (std::size_t j = 0; j < k; ++j) ok = ok && usable(col[j] = p.b[j] / col[j]);
    if (ok) {
      st.v.swap(col);
    } else {
      st.absorb();
      st.exact_columns(p.b);
      st.rebuild();
    }

    // Row residual; columns are exact at this point.
    double err = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double* kr = &st.kernel[i * k];
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += kr[j] * st.v[j];
      row[i] = acc;
      err += std::fabs(st.u[i] * acc - p.a[i]);
    }
    out.error_history.push_back(err);
    out.iterations = it + 1;
    if (err < p.options.tolerance) {
      out.converged = true;
      break;
    }

    // Row half-step.
    ok = true;
    for (std::size_t i = 0; i < m; ++i) ok = ok && usable(row[i] = p.a[i] / row[i]);
    if (ok) {
      st.u.swap(row);
    } else {
      st.absorb();
      st.exact_rows(p.a);
      st.rebuild();
    }
    if (st.scalings_large()) {
      st.absorb();
      st.rebuild();
    }
  }

  out.alpha.resize(m);
  out.beta.resize(k);
  for (std::size_t i = 0; i < m; ++i) out.alpha[i] = st.f[i] + st.eps * std::log(st.u[i]);
  for (std::size_t j = 0; j < k; ++j) out.beta[j] = st.g[j] + st.eps * std::log(st.v[j]);
  out.plan.resize(m * k);
  std::vector<double> rows(m, 0.0), cols(k, 0.0);
  double cost = 0, entropy = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double pij = st.u[i] * st.kernel[i * k + j] * st.v[j];
      out.plan[i * k + j] = pij;
      rows[i] += pij;
      cols[j] += pij;
      cost += pij * p.cost[i * k + j];
      if (pij > 0) entropy += pij * std::log(pij);
    }
  double err = 0;
  for (std::size_t i = 0; i < m; ++i) err += std::fabs(rows[i] - p.a[i]);
  for (std::size_t j = 0; j < k; ++j) err += std::fabs(cols[j] - p.b[j]);
  out.marginal_error = err;
  out.transport_cost = cost;
  out.entropic_objective = cost + st.eps * entropy;
  return out;
}

std::vector<double> grid_point_cost(int grid_h, int grid_w, const PointSet& points,
                                    int stride) {
  if (grid_h < 1 || grid_w < 1 || stride < 1)
    throw std::invalid_argument("grid_point_cost: grid and stride must be positive");
  const std::size_t k = points.size();
  std::vector<double> cost(static_cast<std::size_t>(grid_h) * grid_w * k);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      const double cy = r + 0.5, cx = c + 0.5;
      const std::size_t cell = static_cast<std::size_t>(r) * grid_w + c;
      for (std::size_t j = 0; j < k; ++j) {
        const double dx = cx - points[j].x / stride, dy = cy - points[j].y / stride;
        cost[cell * k + j] = dx * dx + dy * dy;
      }
    }
  return cost;
}

}  // namespace fflab
