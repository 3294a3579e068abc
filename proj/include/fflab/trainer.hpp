#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fflab/data.hpp"
#include "fflab/layers.hpp"
#include "fflab/loss.hpp"
#include "fflab/model.hpp"

namespace fflab {

/// A non-finite loss or gradient stopped training. The model holds the
/// parameters from before the failing step.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, int step) : std::runtime_error(what), step(step) {}
  int step;
};

struct AdamWOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.005;
};

/// Adam with decoupled weight decay. Each step first scales every decayed
/// parameter by (1 - lr * wd), then applies the bias-corrected Adam update.
/// Parameters without a gradient are treated as having a zero gradient.
class AdamW {
 public:
  AdamW(std::vector<ParamRef> params, AdamWOptions options);

  void step();
  void zero_grad();

  int steps_taken() const { return t_; }
  const AdamWOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  std::vector<ParamRef> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

enum class LrSchedule { kConstant, kCosine };

/// Learning rate at `step` of `steps`. Cosine decays from `base` towards 0,
/// reaching base/2 halfway.
double scheduled_lr(LrSchedule schedule, double base, int step, int steps);

struct TrainConfig {
  AdamWOptions optimizer;
  LrSchedule lr_schedule = LrSchedule::kConstant;
  int batch_size = 8;
  int steps = 1000;
  std::uint64_t seed = 0;
  int crop = 256;
  double flip_prob = 0.5;
  LossConfig loss;
  RasterMode raster = RasterMode::kAdditive;
  double grad_clip = 0.0;  // global L2 norm cap, 0 disables
  int eval_every = 0;      // 0 disables periodic evaluation
  int log_every = 0;       // progress callback cadence, 0 disables

  void validate() const;
  /// lr 1e-3 with cosine decay over 2000 steps, the small-scale overfit setting.
  static TrainConfig overfit_preset();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Strict: unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One row of the loss curve; ot and variation are already weighted.
struct StepLog {
  int step = 0;
  double count = 0.0;
  double ot = 0.0;
  double variation = 0.0;
  double total = 0.0;
};

struct ImageMetric {
  std::size_t index = 0;
  double truth = 0.0;
  double predicted = 0.0;
};

struct MetricsReport {
  double mae = 0.0;
  double mse = 0.0;  // root of the mean squared error
  std::size_t n = 0;
  std::vector<ImageMetric> images;
};

/// MAE and root-mean-square error from a per-image table.
MetricsReport metrics_from_table(std::vector<ImageMetric> table);

struct EvalPoint {
  int step = 0;
  MetricsReport metrics;
};

struct TrainResult {
  std::vector<StepLog> curve;
  std::vector<EvalPoint> evals;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_log;  // every log_every steps
};

/// Trains in place. Deterministic for a given seed. On a non-finite loss
/// the model is rolled back to the last good state and NumericError is thrown.
TrainResult train(FFNet& model, const Dataset& data, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Reflection-pads (n, c, h, w) on the bottom and right up to multiples of `multiple`.
Tensor reflect_pad_to_multiple(const Tensor& images, int multiple);

/// Density over the cells of an uncropped image: the image is padded by
/// reflection to a multiple of 32 and cells starting in the padding are
/// dropped, giving (1, 1, ceil(h/8), ceil(w/8)). Uses the model's current
/// training flag.
Tensor predict_density(FFNet& model, const Image& image);

/// Counts every full image, padded by reflection to a multiple of 32. Cells
/// that start in the padding are excluded from the predicted count. Images
/// are sharded over `threads` workers and merged by index.
MetricsReport evaluate(FFNet& model, const Dataset& data, int threads = 1);

/// FFLAB_THREADS when set to a positive integer, otherwise 1.
int thread_budget();

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLog>& curve);

nlohmann::json metrics_to_json(const MetricsReport& report);

/// Checkpoint layout, little-endian: "FFCK", u32 version, u32 entry count,
/// then per entry u16 name length, name, u8 dtype tag, u8 ndim, u32 dims,
/// raw values. Tag 0 holds float64 values. Tag 1 holds the model config
/// as UTF-8 JSON bytes under the name kConfigEntry.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigEntry = "__model_config__";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const FFNet& model, const std::filesystem::path& path);
/// The model config stored in a checkpoint.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);
/// Reads the stored config, builds the model and loads every tensor.
std::unique_ptr<FFNet> load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model; names and shapes must match exactly.
void load_checkpoint_into(FFNet& model, const std::filesystem::path& path);

}  // namespace fflab
