#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fflab/trainer.hpp"

namespace fflab {

using nlohmann::json;

AdamW::AdamW(std::vector<ParamRef> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const ParamRef& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const AdamWOptions& o = options_;
  const double bc1 = 1.0 - std::pow(o.beta1, t_);
  const double bc2 = 1.0 - std::pow(o.beta2, t_);
  const double shrink = 1.0 - o.lr * o.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].tensor;
    auto w = p.data();
    const bool has = p.has_grad();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool decay = params_[k].decay && o.weight_decay != 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      if (decay) w[i] *= shrink;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      w[i] -= o.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + o.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (ParamRef& p : params_) p.tensor.zero_grad();
}

double scheduled_lr(LrSchedule schedule, double base, int step, int steps) {
  if (schedule == LrSchedule::kConstant || steps <= 0) return base;
  const double t = static_cast<double>(std::clamp(step, 0, steps)) / steps;
  return 0.5 * base * (1 + std::cos(std::numbers::pi * t));
}

void TrainConfig::validate() const {
  const AdamWOptions& o = optimizer;
  if (!(o.lr >= 0) || !std::isfinite(o.lr)) throw ConfigError("train: lr must be finite and >= 0");
  if (!(o.beta1 >= 0 && o.beta1 < 1) || !(o.beta2 >= 0 && o.beta2 < 1))
    throw ConfigError("train: betas must lie in [0, 1)");
  if (!(o.eps > 0)) throw ConfigError("train: adam eps must be > 0");
  if (!(o.weight_decay >= 0) || !std::isfinite(o.weight_decay))
    throw ConfigError("train: weight_decay must be finite and >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (crop < 32 || crop % 32) throw ConfigError("train: crop must be a positive multiple of 32");
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("train: flip_prob must lie in [0, 1]");
  if (!(grad_clip >= 0)) throw ConfigError("train: grad_clip must be >= 0");
  if (eval_every < 0 || log_every < 0) throw ConfigError("train: cadences must be >= 0");
  if (loss.stride != 8) throw ConfigError("train: loss stride must match the density grid (8)");
  if (!(loss.sinkhorn.epsilon > 0)) throw ConfigError("train: sinkhorn epsilon must be > 0");
  if (loss.sinkhorn.max_iters < 1) throw ConfigError("train: sinkhorn max_iters must be >= 1");
  if (!(loss.weights.ot >= 0) || !(loss.weights.variation >= 0))
    throw ConfigError("train: loss weights must be >= 0");
}

TrainConfig TrainConfig::overfit_preset() {
  TrainConfig c;
  c.optimizer.lr = 1e-3;
  c.lr_schedule = LrSchedule::kCosine;
  c.steps = 2000;
  return c;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.optimizer.lr},
           {"lr_schedule", c.lr_schedule == LrSchedule::kCosine ? "cosine" : "constant"},
           {"beta1", c.optimizer.beta1},
           {"beta2", c.optimizer.beta2},
           {"adam_eps", c.optimizer.eps},
           {"weight_decay", c.optimizer.weight_decay},
           {"batch_size", c.batch_size},
           {"steps", c.steps},
           {"seed", c.seed},
           {"crop", c.crop},
           {"flip_prob", c.flip_prob},
           {"raster", c.raster == RasterMode::kAdditive ? "additive" : "clamped"},
           {"grad_clip", c.grad_clip},
           {"eval_every", c.eval_every},
           {"log_every", c.log_every},
           {"loss",
            {{"ot_weight", c.loss.weights.ot},
             {"variation_weight", c.loss.weights.variation},
             {"variation", c.loss.variation == VariationMode::kWeighted ? "weighted" : "normalized"},
             {"stride", c.loss.stride},
             {"sinkhorn",
              {{"epsilon", c.loss.sinkhorn.epsilon},
               {"max_iters", c.loss.sinkhorn.max_iters},
               {"tolerance", c.loss.sinkhorn.tolerance}}}}}};
}

namespace {

void reject_unknown(const json& j, const json& reference, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items())
    if (!reference.contains(item.key()))
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for " + where + "." + key);
  }
}

std::string read_choice(const json& j, const char* key, const std::string& fallback,
                        std::initializer_list<const char*> allowed, const std::string& where) {
  std::string v = fallback;
  read(j, key, v, where);
  for (const char* a : allowed)
    if (v == a) return v;
  throw ConfigError("bad value '" + v + "' for " + where + "." + key);
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  json ref;
  to_json(ref, c);
  reject_unknown(j, ref, "train");
  read(j, "lr", c.optimizer.lr, "train");
  c.lr_schedule = read_choice(j, "lr_schedule", "constant", {"constant", "cosine"}, "train") ==
                          "cosine"
                      ? LrSchedule::kCosine
                      : LrSchedule::kConstant;
  read(j, "beta1", c.optimizer.beta1, "train");
  read(j, "beta2", c.optimizer.beta2, "train");
  read(j, "adam_eps", c.optimizer.eps, "train");
  read(j, "weight_decay", c.optimizer.weight_decay, "train");
  read(j, "batch_size", c.batch_size, "train");
  read(j, "steps", c.steps, "train");
  read(j, "seed", c.seed, "train");
  read(j, "crop", c.crop, "train");
  read(j, "flip_prob", c.flip_prob, "train");
  read(j, "grad_clip", c.grad_clip, "train");
  read(j, "eval_every", c.eval_every, "train");
  read(j, "log_every", c.log_every, "train");
  c.raster = read_choice(j, "raster", "additive", {"additive", "clamped"}, "train") == "additive"
                 ? RasterMode::kAdditive
                 : RasterMode::kClamped;
  if (j.contains("loss")) {
    const json& l = j["loss"];
    reject_unknown(l, ref["loss"], "train.loss");
    read(l, "ot_weight", c.loss.weights.ot, "train.loss");
    read(l, "variation_weight", c.loss.weights.variation, "train.loss");
    read(l, "stride", c.loss.stride, "train.loss");
    c.loss.variation =
        read_choice(l, "variation", "weighted", {"weighted", "normalized"}, "train.loss") == "weighted"
            ? VariationMode::kWeighted
            : VariationMode::kNormalized;
    if (l.contains("sinkhorn")) {
      const json& s = l["sinkhorn"];
      reject_unknown(s, ref["loss"]["sinkhorn"], "train.loss.sinkhorn");
      read(s, "epsilon", c.loss.sinkhorn.epsilon, "train.loss.sinkhorn");
      read(s, "max_iters", c.loss.sinkhorn.max_iters, "train.loss.sinkhorn");
      read(s, "tolerance", c.loss.sinkhorn.tolerance, "train.loss.sinkhorn");
    }
  }
  c.validate();
  return c;
}

}  // namespace fflab
