#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "fflab/points.hpp"
#include "fflab/tensor.hpp"

namespace fflab {

/// Raised when an OT problem has no target points; the caller skips the OT
/// term for that image.
class EmptyTargetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SinkhornOptions {
  double epsilon = 10.0;  // in squared grid-cell units
  int max_iters = 100;
  double tolerance = 1e-6;  // L1 marginal error
};

/// Entropic OT between source weights a (length m) and target weights b
/// (length k) under a row-major m x k cost.
struct SinkhornProblem {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> cost;
  SinkhornOptions options;

  std::size_t m() const { return a.size(); }
  std::size_t k() const { return b.size(); }
};

struct SinkhornResult {
  std::vector<double> alpha;  // source potential, length m
  std::vector<double> beta;   // target potential, length k
  std::vector<double> plan;   // row-major m x k
  int iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;  // L1 over both marginals of the returned plan
  std::vector<double> error_history;
  double transport_cost = 0.0;      // <plan, cost>
  double entropic_objective = 0.0;  // <plan, cost> + eps * sum plan * log(plan)
};

/// Stabilized Sinkhorn: scaling iterations on a kernel whose potentials are
/// absorbed whenever the scalings grow large, with an exact log-domain
/// half-step when the kernel underflows. Deterministic.
SinkhornResult sinkhorn(const SinkhornProblem& problem);

/// Squared distances between the centres of an h x w grid of stride-sized
/// cells, (col + 0.5, row + 0.5) in cell units, and the points divided by
/// the stride. Row-major (h*w) x k.
std::vector<double> grid_point_cost(int grid_h, int grid_w, const PointSet& points,
                                    int stride);

struct LossWeights {
  double ot = 0.1;
  double variation = 0.01;
};

enum class VariationMode { kWeighted, kNormalized };

struct LossConfig {
  LossWeights weights;
  SinkhornOptions sinkhorn;
  VariationMode variation = VariationMode::kWeighted;
  int stride = 8;
};

/// Guard added to ||zhat||_1 wherever it is a denominator.
inline constexpr double kMassGuard = 1e-8;

/// | ||z||_1 - ||zhat||_1 | for one map; z is treated as a constant.
Tensor count_loss(const Tensor& z, const Tensor& zhat);

/// kWeighted: ||z||_1 * ||z - zhat||_1.
/// kNormalized: ||z||_1 * || z/||z||_1 - zhat/||zhat||_1 ||_1 (0 when z is empty).
Tensor variation_loss(const Tensor& z, const Tensor& zhat,
                      VariationMode mode = VariationMode::kWeighted);

/// Source weights for the OT problem: zhat / ||zhat||_1 with every cell
/// floored at 1e-16 and renormalized (uniform when zhat sums to zero).
std::vector<double> source_weights(std::span<const double> zhat);

/// The OT term for one map.
///
/// The dual entering the loss must live on the grid to pair with zhat, so
/// `grid_potential` is the source-side potential (SinkhornResult::alpha),
/// one value per cell. With beta = grid_potential and S = ||zhat||_1 the
/// returned scalar is
///   < beta * S/(S^2+d) - <beta, zhat>/(S^2+d), zhat >
/// with the bracket held constant, so its value is zero up to the guard d
/// while its gradient is that of <beta, zhat/S>.
Tensor ot_loss(const Tensor& zhat, std::span<const double> grid_potential);

/// L_c + w_ot * L_ot + w_var * L_v.
double combine_terms(const LossWeights& w, double count, double ot, double variation);

struct LossReport {
  double count = 0.0;
  double ot = 0.0;
  double variation = 0.0;
  double total = 0.0;
  double wasserstein = 0.0;  // mean transport cost over images with points
  int ot_images = 0;
  int unconverged = 0;
};

struct LossOutput {
  Tensor total;  // scalar, differentiable w.r.t. zhat
  LossReport report;
};

/// Batch loss, each term averaged over the batch. zhat and z are
/// (n, 1, h, w); points[i] holds image i's annotations in pixel units.
LossOutput total_loss(const Tensor& zhat, const Tensor& z,
                      const std::vector<PointSet>& points, const LossConfig& config);

}  // namespace fflab
