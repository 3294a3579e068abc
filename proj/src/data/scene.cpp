#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fflab/data.hpp"
#include "fflab/model.hpp"

namespace fflab {

using nlohmann::json;

namespace {

// Blobs are rendered out to this many radii; beyond it exp(-d^2/2r^2) < 4e-4.
constexpr double kBlobReach = 4.0;

double wrap(double v, double extent) {
  double r = std::fmod(v, extent);
  if (r < 0) r += extent;
  // fmod of a tiny negative can round up to extent itself.
  return r >= extent ? 0.0 : r;
}

double lerp(double a, double b, double t) { return a + (b - a) * t; }

}  // namespace

void SceneConfig::validate() const {
  if (width < 1 || height < 1) throw ConfigError("scene: image size must be positive");
  if (channels != 1 && channels != 3) throw ConfigError("scene: channels must be 1 or 3");
  const double values[] = {parent_intensity, offspring_mean,      cluster_spread,
                           radius_top,       radius_bottom,       amplitude_top,
                           amplitude_bottom, background_base,     background_gradient,
                           noise_std};
  for (double v : values)
    if (!std::isfinite(v) || v < 0)
      throw ConfigError("scene: parameters must be finite and non-negative");
  if (radius_top <= 0 || radius_bottom <= 0)
    throw ConfigError("scene: blob radii must be positive");
}

void to_json(json& j, const SceneConfig& c) {
  j = json{{"width", c.width},
           {"height", c.height},
           {"channels", c.channels},
           {"parent_intensity", c.parent_intensity},
           {"offspring_mean", c.offspring_mean},
           {"cluster_spread", c.cluster_spread},
           {"radius_top", c.radius_top},
           {"radius_bottom", c.radius_bottom},
           {"amplitude_top", c.amplitude_top},
           {"amplitude_bottom", c.amplitude_bottom},
           {"background_base", c.background_base},
           {"background_gradient", c.background_gradient},
           {"noise_std", c.noise_std},
           {"seed", c.seed}};
}

void from_json(const json& j, SceneConfig& c) {
  if (!j.is_object()) throw ConfigError("scene: config must be a JSON object");
  SceneConfig d;
  json ref;
  to_json(ref, d);
  for (const auto& [key, _] : j.items())
    if (!ref.contains(key)) throw ConfigError("scene: unknown key '" + key + "'");
  try {
    c.width = j.value("width", d.width);
    c.height = j.value("height", d.height);
    c.channels = j.value("channels", d.channels);
    c.parent_intensity = j.value("parent_intensity", d.parent_intensity);
    c.offspring_mean = j.value("offspring_mean", d.offspring_mean);
    c.cluster_spread = j.value("cluster_spread", d.cluster_spread);
    c.radius_top = j.value("radius_top", d.radius_top);
    c.radius_bottom = j.value("radius_bottom", d.radius_bottom);
    c.amplitude_top = j.value("amplitude_top", d.amplitude_top);
    c.amplitude_bottom = j.value("amplitude_bottom", d.amplitude_bottom);
    c.background_base = j.value("background_base", d.background_base);
    c.background_gradient = j.value("background_gradient", d.background_gradient);
    c.noise_std = j.value("noise_std", d.noise_std);
    c.seed = j.value("seed", d.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  c.validate();
}

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  const int w = config.width, h = config.height;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> ux(0.0, w), uy(0.0, h);
  std::normal_distribution<double> spread(0.0, 1.0);

  Scene scene;
  const int parents = config.parent_intensity > 0
                          ? std::poisson_distribution<int>(config.parent_intensity)(rng)
                          : 0;
  for (int p = 0; p < parents; ++p) {
    const double px = ux(rng), py = uy(rng);
    const int kids = config.offspring_mean > 0
                         ? std::poisson_distribution<int>(config.offspring_mean)(rng)
                         : 0;
    for (int o = 0; o < kids; ++o) {
      const double dx = spread(rng) * config.cluster_spread;
      const double dy = spread(rng) * config.cluster_spread;
      scene.points.push_back({wrap(px + dx, w), wrap(py + dy, h)});
    }
  }

  std::vector<double> canvas(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    const double v = config.background_base + config.background_gradient * (y + 0.5) / h;
    std::fill_n(canvas.begin() + static_cast<std::size_t>(y) * w, w, v);
  }
  for (const Point& pt : scene.points) {
    const double t = pt.y / h;
    const double r = lerp(config.radius_top, config.radius_bottom, t);
    const double amp = lerp(config.amplitude_top, config.amplitude_bottom, t);
    const double reach = kBlobReach * r, inv = 1.0 / (2 * r * r);
    const int x0 = std::max(0, static_cast<int>(std::floor(pt.x - reach)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(pt.x + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(pt.y - reach)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(pt.y + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - pt.x, dy = y + 0.5 - pt.y;
        canvas[static_cast<std::size_t>(y) * w + x] += amp * std::exp(-(dx * dx + dy * dy) * inv);
      }
  }

  Image& img = scene.image;
  img.width = w;
  img.height = h;
  img.channels = config.channels;
  img.pixels.resize(canvas.size() * config.channels);
  // Three-channel scenes tint the same luminance; noise is drawn per channel.
  static constexpr double kTint[3] = {1.0, 0.92, 0.84};
  for (std::size_t i = 0; i < canvas.size(); ++i)
    for (int c = 0; c < config.channels; ++c) {
      const double gain = config.channels == 1 ? 1.0 : kTint[c];
      double v = canvas[i] * gain;
      if (config.noise_std > 0) v += spread(rng) * config.noise_std;
      v = std::clamp(v, 0.0, 1.0);
      img.pixels[i * config.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return scene;
}

Tensor rasterize(const PointSet& points, int width, int height, int stride, RasterMode mode) {
  if (stride < 1) throw std::invalid_argument("rasterize: stride must be positive");
  if (width < 1 || height < 1 || width % stride || height % stride)
    throw std::invalid_argument("rasterize: image dims " + std::to_string(width) + "x" +
                                std::to_string(height) + " not divisible by stride " +
                                std::to_string(stride));
  const int gw = width / stride, gh = height / stride;
  Tensor z = Tensor::zeros({1, 1, gh, gw});
  auto cells = z.data();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point& p = points[i];
    if (!(p.x >= 0 && p.x < width && p.y >= 0 && p.y < height))
      throw std::out_of_range("rasterize: point " + std::to_string(i) + " (" +
                              std::to_string(p.x) + ", " + std::to_string(p.y) +
                              ") outside " + std::to_string(width) + "x" +
                              std::to_string(height));
    const int c = std::min(gw - 1, static_cast<int>(p.x / stride));
    const int r = std::min(gh - 1, static_cast<int>(p.y / stride));
    double& cell = cells[static_cast<std::size_t>(r) * gw + c];
    cell = mode == RasterMode::kClamped ? 1.0 : cell + 1.0;
  }
  return z;
}

Scene crop_and_flip(const Image& image, const PointSet& points, int x0, int y0, int crop,
                    bool flip) {
  if (crop < 1 || x0 < 0 || y0 < 0 || x0 + crop > image.width || y0 + crop > image.height)
    throw std::invalid_argument("crop: window (" + std::to_string(x0) + ", " +
                                std::to_string(y0) + ") size " + std::to_string(crop) +
                                " does not fit " + std::to_string(image.width) + "x" +
                                std::to_string(image.height));
  Scene out;
  Image& img = out.image;
  img.width = img.height = crop;
  img.channels = image.channels;
  img.pixels.resize(static_cast<std::size_t>(crop) * crop * image.channels);
  const int ch = image.channels;
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) {
      const int sx = x0 + (flip ? crop - 1 - x : x);
      for (int c = 0; c < ch; ++c)
        img.pixels[(static_cast<std::size_t>(y) * crop + x) * ch + c] = image.at(sx, y0 + y, c);
    }
  const double cx0 = x0, cy0 = y0, cx1 = x0 + crop, cy1 = y0 + crop;
  for (const Point& p : points) {
    if (!(p.x >= cx0 && p.x < cx1 && p.y >= cy0 && p.y < cy1)) continue;
    Point q{p.x - cx0, p.y - cy0};
    if (flip) {
      q.x = crop - q.x;
      // x = 0 exactly would land on the open right edge.
      if (q.x >= crop) q.x = std::nextafter(static_cast<double>(crop), 0.0);
    }
    out.points.push_back(q);
  }
  return out;
}

Scene augment(const Image& image, const PointSet& points, int crop, double flip_prob,
              std::mt19937_64& rng) {
  if (crop < 32 || crop % 32)
    throw std::invalid_argument("augment: crop " + std::to_string(crop) +
                                " must be a positive multiple of 32");
  if (crop > image.width || crop > image.height)
    throw std::invalid_argument("augment: crop " + std::to_string(crop) + " exceeds image " +
                                std::to_string(image.width) + "x" +
                                std::to_string(image.height));
  if (!(flip_prob >= 0 && flip_prob <= 1))
    throw std::invalid_argument("augment: flip_prob must lie in [0, 1]");
  const int x0 = std::uniform_int_distribution<int>(0, image.width - crop)(rng);
  const int y0 = std::uniform_int_distribution<int>(0, image.height - crop)(rng);
  const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < flip_prob;
  return crop_and_flip(image, points, x0, y0, crop, flip);
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const Image& first = *images.front();
  const int n = static_cast<int>(images.size()), c = first.channels;
  const int h = first.height, w = first.width;
  Tensor t = Tensor::zeros({n, c, h, w});
  auto out = t.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    const Image& img = *images[b];
    if (img.width != w || img.height != h || img.channels != c)
      throw std::invalid_argument("images_to_tensor: image " + std::to_string(b) +
                                  " has a different shape");
    for (std::size_t px = 0; px < plane; ++px)
      for (int k = 0; k < c; ++k)
        out[(static_cast<std::size_t>(b) * c + k) * plane + px] =
            img.pixels[px * c + k] / 255.0;
  }
  return t;
}

}  // namespace fflab
