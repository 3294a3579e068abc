#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <thread>

#include "fflab/ops.hpp"
#include "fflab/trainer.hpp"

namespace fflab {

using nlohmann::json;

namespace {

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

// Values of every parameter and buffer, for rolling back a failed step.
struct Snapshot {
  std::vector<std::vector<double>> values;

  static Snapshot take(const std::vector<Tensor>& state) {
    Snapshot s;
    for (const Tensor& t : state) s.values.emplace_back(t.values());
    return s;
  }
  void restore(std::vector<Tensor>& state) const {
    for (std::size_t i = 0; i < state.size(); ++i)
      std::copy(values[i].begin(), values[i].end(), state[i].data().begin());
  }
};

// Endless stream of scene indices, reshuffled after each pass.
class IndexStream {
 public:
  IndexStream(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = n;
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_;
};

void clip_gradients(const std::vector<ParamRef>& params, double cap) {
  double sq = 0;
  for (const ParamRef& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= cap) return;
  const double f = cap / norm;
  for (const ParamRef& p : params) {
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g *= f;
  }
}

}  // namespace

MetricsReport metrics_from_table(std::vector<ImageMetric> table) {
  if (table.empty()) throw std::invalid_argument("metrics: empty dataset");
  MetricsReport r;
  r.n = table.size();
  double abs_sum = 0, sq_sum = 0;
  for (const ImageMetric& m : table) {
    const double e = m.truth - m.predicted;
    abs_sum += std::fabs(e);
    sq_sum += e * e;
  }
  r.mae = abs_sum / static_cast<double>(r.n);
  r.mse = std::sqrt(sq_sum / static_cast<double>(r.n));
  r.images = std::move(table);
  return r;
}

int thread_budget() {
  const char* env = std::getenv("FFLAB_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 256));
}

Tensor reflect_pad_to_multiple(const Tensor& images, int multiple) {
  const Shape s = images.shape();
  const int h = (s.h + multiple - 1) / multiple * multiple;
  const int w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return images.clone();
  if (h - s.h >= s.h || w - s.w >= s.w)
    throw ShapeError("reflect pad: image " + s.str() + " too small to pad to a multiple of " +
                     std::to_string(multiple));
  // Mirror without repeating the edge: index h_in + k maps to h_in - 2 - k.
  auto mirror = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
  Tensor out = Tensor::zeros({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out.at(n, c, y, x) = images.at(n, c, mirror(y, s.h), mirror(x, s.w));
  return out;
}

Tensor predict_density(FFNet& model, const Image& image) {
  NoGradGuard guard;
  const Tensor d = model.forward(reflect_pad_to_multiple(images_to_tensor({&image}), 32));
  const int rows = (image.height + 7) / 8, cols = (image.width + 7) / 8;
  Tensor out = Tensor::zeros({1, 1, rows, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(0, 0, r, c) = d.at(0, 0, r, c);
  return out;
}

MetricsReport evaluate(FFNet& model, const Dataset& data, int threads) {
  if (data.scenes.empty()) throw std::invalid_argument("evaluate: empty dataset");
  model.set_training(false);
  std::vector<ImageMetric> table(data.scenes.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(table.size())));

  auto run = [&](int worker) {
    NoGradGuard guard;  // grad mode is per thread
    for (std::size_t i = worker; i < table.size(); i += workers) {
      const Scene& s = data.scenes[i];
      const Tensor d = predict_density(model, s.image);
      double count = 0;
      for (double v : d.data()) count += v;
      table[i] = {i, static_cast<double>(s.points.size()), count};
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (std::thread& t : pool) t.join();
  }
  return metrics_from_table(std::move(table));
}

TrainResult train(FFNet& model, const Dataset& data, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (data.scenes.empty()) throw std::invalid_argument("train: empty dataset");
  for (const Scene& s : data.scenes)
    if (s.image.width < config.crop || s.image.height < config.crop)
      throw ConfigError("train: crop " + std::to_string(config.crop) + " exceeds a " +
                        std::to_string(s.image.width) + "x" + std::to_string(s.image.height) +
                        " scene");

  const std::vector<ParamRef> params = model.parameters();
  std::vector<Tensor> state;
  for (const ParamRef& p : params) state.push_back(p.tensor);
  for (const BufferRef& b : model.buffers()) state.push_back(b.tensor);

  AdamW opt(params, config.optimizer);
  opt.zero_grad();
  std::mt19937_64 rng(config.seed);
  IndexStream indices(data.scenes.size(), rng);
  TrainResult result;

  for (int step = 0; step < config.steps; ++step) {
    const Snapshot good = Snapshot::take(state);
    opt.set_lr(scheduled_lr(config.lr_schedule, config.optimizer.lr, step, config.steps));
    std::vector<Scene> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      const Scene& s = data.scenes[indices.next()];
      batch.push_back(augment(s.image, s.points, config.crop, config.flip_prob, rng));
    }
    std::vector<const Image*> images;
    std::vector<Tensor> maps;
    std::vector<PointSet> points;
    for (const Scene& s : batch) {
      images.push_back(&s.image);
      maps.push_back(rasterize(s.points, s.image.width, s.image.height, config.loss.stride,
                               config.raster));
      points.push_back(s.points);
    }
    const Tensor x = images_to_tensor(images);
    const Tensor z = ops::concat_batch(maps);

    model.set_training(true);
    const Tensor zhat = model.forward(x);
    auto fail = [&](const char* what) {
      Graph::current().clear();
      opt.zero_grad();
      good.restore(state);
      throw NumericError(std::string("train: non-finite ") + what + " at step " +
                             std::to_string(step),
                         step);
    };
    // Sinkhorn rejects non-finite weights, so the prediction is checked first.
    if (!all_finite(zhat.data())) fail("prediction");
    const LossOutput loss = total_loss(zhat, z, points, config.loss);
    const LossReport& r = loss.report;
    bool finite = std::isfinite(loss.total.item());
    if (finite) {
      backward(loss.total);
      for (const ParamRef& p : params)
        if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) finite = false;
    }
    if (!finite) fail("loss or gradient");
    if (config.grad_clip > 0) clip_gradients(params, config.grad_clip);
    opt.step();
    opt.zero_grad();

    const StepLog row{step, r.count, config.loss.weights.ot * r.ot,
                      config.loss.weights.variation * r.variation, r.total};
    result.curve.push_back(row);
    if (hooks.on_log && config.log_every > 0 &&
        (step % config.log_every == 0 || step + 1 == config.steps))
      hooks.on_log(row);
    if (config.eval_every > 0 && (step + 1) % config.eval_every == 0)
      result.evals.push_back({step + 1, evaluate(model, data, 1)});
  }
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLog>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << "step,count,ot,variation,total\n";
  char line[256];
  for (const StepLog& s : curve) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", s.step, s.count, s.ot,
                  s.variation, s.total);
    out << line;
  }
  if (!out) throw std::ios_base::failure("short write to " + path.string());
}

json metrics_to_json(const MetricsReport& report) {
  json images = json::array();
  for (const ImageMetric& m : report.images)
    images.push_back({{"index", m.index}, {"truth", m.truth}, {"predicted", m.predicted}});
  return json{{"mae", report.mae}, {"mse", report.mse}, {"n", report.n}, {"images", images}};
}

}  // namespace fflab
