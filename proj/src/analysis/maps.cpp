#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "fflab/analysis.hpp"
#include "fflab/ops.hpp"
#include "fflab/trainer.hpp"

namespace fflab {

std::size_t ERFMap::area(double threshold) const {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [&](double v) { return v > threshold; }));
}

ERFMap effective_receptive_field(const std::function<Tensor(const Tensor&)>& net,
                                 const Shape& input, int probes, std::uint64_t seed,
                                 const std::string& tag) {
  if (probes < 1) throw std::invalid_argument("erf: probes must be >= 1");
  if (input.n != 1) throw ShapeError("erf: probe input must hold one image, got " + input.str());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> acc(input.numel(), 0.0);
  for (int p = 0; p < probes; ++p) {
    Tensor x = Tensor::zeros(input, true);
    for (double& v : x.data()) v = unit(rng);
    const Tensor y = net(x);
    const Shape s = y.shape();
    std::vector<double> pick(y.numel(), 0.0);
    for (int c = 0; c < s.c; ++c)
      pick[(static_cast<std::size_t>(c) * s.h + s.h / 2) * s.w + s.w / 2] = 1.0;
    backward(ops::dot_constant(y, pick));
    const auto g = x.grad();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::fabs(g[i]);
  }
  // Sum over input channels, then max-normalize.
  ERFMap map;
  map.height = input.h;
  map.width = input.w;
  map.tag = tag;
  map.values.assign(input.plane(), 0.0);
  for (int c = 0; c < input.c; ++c)
    for (std::size_t i = 0; i < input.plane(); ++i) map.values[i] += acc[c * input.plane() + i];
  const double top = *std::max_element(map.values.begin(), map.values.end());
  if (top > 0)
    for (double& v : map.values) v /= top;
  return map;
}

namespace {

void check_branch(int branch) {
  if (branch < 1 || branch > 3)
    throw std::invalid_argument("unknown branch " + std::to_string(branch) + ", expected 1..3");
}

}  // namespace

ERFMap branch_erf(FFNet& model, int branch, int size, int probes, std::uint64_t seed) {
  check_branch(branch);
  model.set_training(false);
  const Shape input{1, model.config().backbone.input_channels, size, size};
  model.check_input(input);
  return effective_receptive_field(
      [&](const Tensor& x) { return model.branch_forward(x)[branch - 1]; }, input, probes, seed,
      "branch" + std::to_string(branch));
}

ReceptiveField ReceptiveField::then(int kernel, int stride, int padding) const {
  return {size + (kernel - 1) * jump, jump * stride, start - padding * jump};
}

ReceptiveField backbone_receptive_field(const BackboneConfig& config, int stage) {
  if (stage < 0 || stage >= static_cast<int>(config.stage_channels.size()))
    throw std::invalid_argument("receptive field: no stage " + std::to_string(stage));
  const bool convnext = config.block == BlockKind::kConvNeXt;
  ReceptiveField rf;
  for (int i = 0; i <= stage; ++i) {
    const int k = i == 0 ? config.stem_stride() : 2;
    rf = rf.then(k, k, 0);
    for (int d = 0; d < config.stage_depths[i]; ++d)
      rf = convnext ? rf.then(7, 1, 3) : rf.then(3, 1, 1);
  }
  return rf;
}

Heatmap branch_heatmap(FFNet& model, const Tensor& image, int branch) {
  check_branch(branch);
  if (image.shape().n != 1) throw ShapeError("heatmap expects one image, got " + image.shape().str());
  model.set_training(false);
  NoGradGuard guard;
  const Tensor f = model.branch_forward(image)[branch - 1];
  const Shape s = f.shape();
  std::vector<double> grid(s.plane(), 0.0);
  for (int c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < s.plane(); ++i)
      grid[i] += std::fabs(f.data()[c * s.plane() + i]) / s.c;
  const auto [lo, hi] = std::minmax_element(grid.begin(), grid.end());
  const double low = *lo, range = *hi - *lo;
  for (double& v : grid) v = range > 0 ? (v - low) / range : 0.0;

  Heatmap map;
  map.height = image.shape().h;
  map.width = image.shape().w;
  map.values.resize(static_cast<std::size_t>(map.height) * map.width);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const int gy = std::min(s.h - 1, y * s.h / map.height);
      const int gx = std::min(s.w - 1, x * s.w / map.width);
      map.values[static_cast<std::size_t>(y) * map.width + x] = grid[gy * s.w + gx];
    }
  return map;
}

Image grid_to_image(int height, int width, const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("grid_to_image: size mismatch");
  Image img;
  img.width = width;
  img.height = height;
  img.pixels.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255));
  return img;
}

double export_density(FFNet& model, const Image& image, const std::filesystem::path& pgm_path,
                      const std::filesystem::path& csv_path) {
  model.set_training(false);
  const Tensor d = predict_density(model, image);
  const Shape s = d.shape();
  double count = 0, top = 0;
  for (double v : d.data()) {
    count += v;
    top = std::max(top, v);
  }
  std::vector<double> norm(d.values());
  for (double& v : norm) v = top > 0 ? v / top : 0.0;
  write_image(pgm_path, grid_to_image(s.h, s.w, norm));

  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + csv_path.string());
  char line[128];
  std::snprintf(line, sizeof line, "count,%.17g\nrow,col,value\n", count);
  out << line;
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c) {
      std::snprintf(line, sizeof line, "%d,%d,%.17g\n", r, c, d.at(0, 0, r, c));
      out << line;
    }
  if (!out) throw std::ios_base::failure("short write to " + csv_path.string());
  return count;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: size mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace fflab
