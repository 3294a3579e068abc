#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fflab/points.hpp"
#include "fflab/tensor.hpp"

namespace fflab {

/// Malformed or inconsistent dataset files. The message names the file and
/// the byte offset or line where parsing failed.
class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit image, row-major, channels interleaved.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Synthetic crowd scene parameters.
///
/// Heads follow a Thomas cluster process: Poisson(parent_intensity) parents
/// uniform in the image, each with Poisson(offspring_mean) offspring at
/// Gaussian(sigma = cluster_spread) offsets, wrapped toroidally so the mean
/// count is exactly parent_intensity * offspring_mean. Each head is drawn as
/// a Gaussian blob whose radius and amplitude grow linearly from the top row
/// to the bottom row, over a vertical background gradient plus Gaussian
/// pixel noise, clipped to [0, 1] and quantized to 8 bits.
struct SceneConfig {
  int width = 256;
  int height = 256;
  int channels = 1;
  double parent_intensity = 6.0;
  double offspring_mean = 8.0;
  double cluster_spread = 14.0;
  double radius_top = 1.5;
  double radius_bottom = 4.0;
  double amplitude_top = 0.35;
  double amplitude_bottom = 0.7;
  double background_base = 0.15;
  double background_gradient = 0.25;
  double noise_std = 0.03;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct Scene {
  Image image;
  PointSet points;
};

Scene generate_scene(const SceneConfig& config);

enum class RasterMode { kAdditive, kClamped };

/// Dot map on the stride grid, shape (1, 1, h/stride, w/stride). Each point
/// adds 1 to cell (floor(y/stride), floor(x/stride)); kClamped caps cells at 1.
/// Out-of-bounds points raise std::out_of_range naming the point index.
Tensor rasterize(const PointSet& points, int width, int height, int stride = 8,
                 RasterMode mode = RasterMode::kAdditive);

/// Crop window [x0, x0 + crop) x [y0, y0 + crop), then an optional mirror.
/// Kept points are translated; a mirrored point maps x -> crop - x so it stays
/// on the mirrored pixel content (pixel col covers [col, col + 1)).
Scene crop_and_flip(const Image& image, const PointSet& points, int x0, int y0, int crop,
                    bool flip);

/// Uniform crop window and a flip with probability flip_prob. The crop must
/// be a multiple of 32 and fit in the image.
Scene augment(const Image& image, const PointSet& points, int crop, double flip_prob,
              std::mt19937_64& rng);

/// Images scaled to [0, 1], stacked into (n, channels, h, w).
Tensor images_to_tensor(const std::vector<const Image*>& images);

// PGM (P5) for one channel, PPM (P6) for three; maxval 255.
void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);
/// Parses an in-memory PGM/PPM; `name` labels error messages.
Image parse_image(const std::string& bytes, const std::string& name);

// CSV with header `x,y`, six decimals per value.
void write_points(const std::filesystem::path& path, const PointSet& points);
PointSet read_points(const std::filesystem::path& path);

struct DatasetEntry {
  std::string image_file;
  std::string annotation_file;
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  SceneConfig config;
  std::vector<DatasetEntry> entries;
  std::vector<Scene> scenes;
};

/// Scenes with seeds base_seed, base_seed + 1, ...
Dataset generate_dataset(const SceneConfig& config, std::size_t count,
                         std::uint64_t base_seed);

/// Writes images/, annotations/ and manifest.json under `dir`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Reads and cross-checks a dataset written by write_dataset.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace fflab
