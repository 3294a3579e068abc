#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fflab/data.hpp"
#include "fflab/model.hpp"

namespace fflab {

/// Cost of one layer. FLOPs are always 2 * MACs. Parameter-free elementwise
/// steps (activations, gates, residual adds, normalizations) cost one MAC
/// per output element.
struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  Shape output;

  std::uint64_t flops() const { return 2 * macs; }
};

struct AnalysisReport {
  Shape input;
  std::vector<LayerCost> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;

  std::uint64_t total_flops() const { return 2 * total_macs; }
};

/// Closed-form per-layer costs. Shapes are (n, c, h, w) inputs.
namespace cost {

/// params = k*k*(cin/groups)*cout (+ cout), MACs = k*k*(cin/groups)*cout*h_out*w_out*n.
LayerCost conv2d(const std::string& name, const Shape& in, int cout, int kernel, int stride,
                 int padding, int groups, bool bias);
/// params = k*k*cin*cout + cout, MACs = k*k*cin*cout*h_in*w_in*n (every input
/// pixel scatters one k x k stamp per output channel).
LayerCost conv_transpose2d(const std::string& name, const Shape& in, int cout, int kernel,
                           int stride);
/// params = fin*fout + fout, MACs = fin*fout*n.
LayerCost linear(const std::string& name, int batch, int fin, int fout);
/// Parameter-free elementwise step over `out`.
LayerCost elementwise(const std::string& name, const std::string& kind, const Shape& out);
/// Affine normalization with 2c parameters, one MAC per element.
LayerCost norm(const std::string& name, const std::string& kind, const Shape& x);
/// Dynamic convolution with `kernels` base kernels and hidden width `hidden`:
///   params = K*cout*cin*k*k + (cin*h + h) + h*(K + k*k + cin + cout) + (K + k*k + cin + cout)
///   MACs per sample = cin*H*W (pool) + cin*h + h*(K + k*k + cin + cout) (attention FCs)
///                   + (K + k*k + cin + cout) (activations)
///                   + (K + 3)*cout*cin*k*k (aggregation) + k*k*cin*cout*H*W (convolution)
LayerCost dynamic_conv(const std::string& name, const Shape& in, int cout, int kernel,
                       int kernels, int hidden);

}  // namespace cost

/// Walks the architecture described by `config` without building it.
AnalysisReport count_params_flops(const ModelConfig& config, const Shape& input);

std::string format_report(const AnalysisReport& report);
nlohmann::json report_to_json(const AnalysisReport& report);

/// Normalized |d y_center / d x| on the input grid. Values lie in [0, 1] with
/// max 1 unless the gradient vanishes everywhere.
struct ERFMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major
  std::string tag;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  /// Pixels strictly above `threshold`.
  std::size_t area(double threshold) const;
};

/// ERF of any differentiable map from images to (n, c, h, w) features: the
/// summed channels of the centre output cell, averaged over `probes` uniform
/// random images of shape `input`.
ERFMap effective_receptive_field(const std::function<Tensor(const Tensor&)>& net,
                                 const Shape& input, int probes, std::uint64_t seed,
                                 const std::string& tag = "");

/// ERF of FFNet branch 1, 2 or 3 (after the FTM when enabled). The model is
/// evaluated in eval mode.
ERFMap branch_erf(FFNet& model, int branch, int size = 128, int probes = 16,
                  std::uint64_t seed = 0);

/// Theoretical receptive field of a chain of convolutions: output cell r
/// depends on input pixels [start + r*jump, start + r*jump + size).
struct ReceptiveField {
  long size = 1;
  long jump = 1;
  long start = 0;

  ReceptiveField then(int kernel, int stride, int padding) const;
  /// Inclusive-exclusive pixel range covered by output cell `index`.
  std::pair<long, long> span(long index) const {
    return {start + index * jump, start + index * jump + size};
  }
};

/// Receptive field of backbone stage `stage` (0-based) output cells.
ReceptiveField backbone_receptive_field(const BackboneConfig& config, int stage);

/// Grid in [0, 1] with the input's height and width.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
};

/// Channel mean of |branch features| for a (1, c, h, w) image, min-max
/// normalized (all zero when constant) and upsampled by nearest neighbour.
Heatmap branch_heatmap(FFNet& model, const Tensor& image, int branch);

/// Grayscale 8-bit rendering of a [0, 1] grid.
Image grid_to_image(int height, int width, const std::vector<double>& values);

/// Writes the density as a max-normalized PGM and a CSV whose first line is
/// `count,<predicted count>` followed by `row,col,value` rows. Returns the
/// predicted count.
double export_density(FFNet& model, const Image& image, const std::filesystem::path& pgm_path,
                      const std::filesystem::path& csv_path);

/// Pearson correlation of two equally sized grids; 0 when either is constant.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace fflab
