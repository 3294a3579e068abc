#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fflab/ops.hpp"
#include "fflab/trainer.hpp"
#include "support/model_fixtures.hpp"

using namespace fflab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fflab_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dataset small_dataset(int n, int w, int h, std::uint64_t seed) {
  SceneConfig c;
  c.width = w;
  c.height = h;
  c.parent_intensity = 2;
  return generate_dataset(c, n, seed);
}

TrainConfig quick_config(int steps) {
  TrainConfig c;
  c.optimizer.lr = 1e-3;
  c.steps = steps;
  c.batch_size = 2;
  c.crop = 64;
  return c;
}

std::vector<std::vector<double>> values_of(const FFNet& net) {
  std::vector<std::vector<double>> out;
  for (const ParamRef& p : net.parameters()) out.push_back(p.tensor.values());
  for (const BufferRef& b : net.buffers()) out.push_back(b.tensor.values());
  return out;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("adamw single and second step match the closed form") {
  const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor w = Tensor::from({1, 1, 1, 3}, {0.5, -1.5, 2.0}, true);
  Tensor bias = Tensor::from({1, 1, 1, 1}, {0.25}, true);
  AdamW opt({{"w", w, true}, {"b", bias, false}}, {lr, b1, b2, eps, wd});
  // Quadratic surrogate 0.5 * a * (p - c)^2 with gradient a * (p - c).
  const double a = 3.0, c = 0.2;
  auto set_grads = [&] {
    for (Tensor* t : {&w, &bias}) {
      auto g = t->mutable_grad();
      const auto v = t->data();
      for (std::size_t i = 0; i < v.size(); ++i) g[i] = a * (v[i] - c);
    }
  };
  const std::vector<double> w0(w.values()), b0(bias.values());
  set_grads();
  std::vector<double> g1w(w.grad().begin(), w.grad().end());
  const double g1b = bias.grad()[0];
  opt.step();
  // First step: mhat = g, vhat = g^2.
  for (std::size_t i = 0; i < 3; ++i) {
    const double want = w0[i] * (1 - lr * wd) - lr * g1w[i] / (std::fabs(g1w[i]) + eps);
    CHECK(w.data()[i] == doctest::Approx(want).epsilon(1e-14));
  }
  CHECK(bias.data()[0] == doctest::Approx(b0[0] - lr * g1b / (std::fabs(g1b) + eps)).epsilon(1e-14));

  const std::vector<double> w1(w.values());
  opt.zero_grad();
  set_grads();
  std::vector<double> g2w(w.grad().begin(), w.grad().end());
  opt.step();
  for (std::size_t i = 0; i < 3; ++i) {
    const double m = b1 * (1 - b1) * g1w[i] + (1 - b1) * g2w[i];
    const double v = b2 * (1 - b2) * g1w[i] * g1w[i] + (1 - b2) * g2w[i] * g2w[i];
    const double mhat = m / (1 - b1 * b1), vhat = v / (1 - b2 * b2);
    const double want = w1[i] * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(w.data()[i] == doctest::Approx(want).epsilon(1e-13));
  }
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("decoupled decay scales decayed parameters exactly when gradients vanish") {
  const double lr = 0.03, wd = 0.005;
  Tensor w = Tensor::from({1, 1, 2, 2}, {1.0, -2.0, 3.5, 1e-3}, true);
  Tensor norm = Tensor::from({1, 1, 1, 2}, {0.7, -0.2}, true);
  AdamW opt({{"w", w, true}, {"norm", norm, false}}, {lr, 0.9, 0.999, 1e-8, wd});
  const std::vector<double> w0(w.values()), n0(norm.values());
  w.zero_grad();
  norm.zero_grad();
  opt.step();
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w.data()[i] == w0[i] * (1 - lr * wd));
  for (std::size_t i = 0; i < n0.size(); ++i) CHECK(norm.data()[i] == n0[i]);
}

TEST_CASE("model excludes biases and normalization parameters from decay") {
  FFNet net(testing::tiny_model_config());
  int decayed = 0, exempt = 0;
  for (const ParamRef& p : net.parameters()) {
    const bool bias_or_norm =
        p.name.ends_with("bias") || p.name.ends_with("gamma") || p.name.ends_with("beta");
    CHECK_MESSAGE(p.decay == !bias_or_norm, p.name);
    (p.decay ? decayed : exempt) += 1;
  }
  CHECK(decayed > 0);
  CHECK(exempt > 0);
}

TEST_CASE("lr zero leaves parameters bit-identical") {
  FFNet net(testing::tiny_model_config());
  const Dataset ds = small_dataset(3, 64, 64, 4);
  TrainConfig cfg = quick_config(3);
  cfg.optimizer.lr = 0.0;
  std::vector<std::vector<double>> before;
  for (const ParamRef& p : net.parameters()) before.push_back(p.tensor.values());
  const TrainResult r = train(net, ds, cfg);
  CHECK(r.curve.size() == 3);
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i].tensor.values() == before[i]);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const Dataset ds = small_dataset(4, 64, 64, 9);
  TrainConfig cfg = quick_config(30);
  cfg.optimizer.lr = 3e-3;
  FFNet a(testing::tiny_model_config()), b(testing::tiny_model_config());
  const TrainResult ra = train(a, ds, cfg);
  const TrainResult rb = train(b, ds, cfg);
  CHECK(values_of(a) == values_of(b));
  REQUIRE(ra.curve.size() == rb.curve.size());
  for (std::size_t i = 0; i < ra.curve.size(); ++i) CHECK(ra.curve[i].total == rb.curve[i].total);
  CHECK(ra.curve.back().total < ra.curve.front().total);

  cfg.seed = 1;
  FFNet c(testing::tiny_model_config());
  train(c, ds, cfg);
  CHECK(values_of(c) != values_of(a));
}

TEST_CASE("loss curve rows recompose the weighted total") {
  const Dataset ds = small_dataset(2, 64, 64, 2);
  FFNet net(testing::tiny_model_config());
  const TrainConfig cfg = quick_config(2);
  const TrainResult r = train(net, ds, cfg);
  for (const StepLog& s : r.curve) {
    CHECK(s.total == doctest::Approx(s.count + s.ot + s.variation).epsilon(1e-12));
    CHECK(s.count >= 0);
    CHECK(s.variation >= 0);
  }
  const fs::path dir = scratch("csv");
  write_loss_csv(dir / "loss.csv", r.curve);
  std::ifstream in(dir / "loss.csv");
  std::string header, row;
  std::getline(in, header);
  CHECK(header == "step,count,ot,variation,total");
  int rows = 0;
  while (std::getline(in, row)) ++rows;
  CHECK(rows == 2);
  fs::remove_all(dir);
}

TEST_CASE("non-finite prediction aborts and restores the last good state") {
  const Dataset ds = small_dataset(2, 64, 64, 6);
  FFNet net(testing::tiny_model_config());
  Tensor head_bias = net.density_head.bias;
  head_bias.data()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto before = values_of(net);
  try {
    train(net, ds, quick_config(5));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.step == 0);
  }
  const auto after = values_of(net);
  REQUIRE(after.size() == before.size());
  // NaN != NaN, so compare bit patterns.
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t k = 0; k < after[i].size(); ++k)
      CHECK(std::memcmp(&after[i][k], &before[i][k], sizeof(double)) == 0);
  for (const ParamRef& p : net.parameters())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("train config validation and json") {
  TrainConfig c = TrainConfig::overfit_preset();
  CHECK(c.optimizer.lr == 1e-3);
  CHECK(c.steps == 2000);
  CHECK(TrainConfig{}.optimizer.lr == 1e-5);
  CHECK(TrainConfig{}.optimizer.weight_decay == 0.005);
  CHECK(TrainConfig{}.batch_size == 8);
  nlohmann::json j = c;
  const TrainConfig back = train_config_from_json(j);
  CHECK(back.optimizer.lr == c.optimizer.lr);
  CHECK(back.loss.weights.ot == 0.1);
  CHECK(back.loss.weights.variation == 0.01);
  j["loss"]["sinkhorn"]["epsilon"] = 2.5;
  j["raster"] = "clamped";
  const TrainConfig edited = train_config_from_json(j);
  CHECK(edited.loss.sinkhorn.epsilon == 2.5);
  CHECK(edited.raster == RasterMode::kClamped);
  j["bogus"] = true;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.crop = 100;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("learning rate schedules") {
  CHECK(scheduled_lr(LrSchedule::kConstant, 0.01, 700, 1000) == 0.01);
  CHECK(scheduled_lr(LrSchedule::kCosine, 0.01, 0, 1000) == 0.01);
  CHECK(scheduled_lr(LrSchedule::kCosine, 0.01, 500, 1000) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(scheduled_lr(LrSchedule::kCosine, 0.01, 250, 1000) ==
        doctest::Approx(0.005 * (1 + std::sqrt(0.5))).epsilon(1e-12));
  CHECK(std::fabs(scheduled_lr(LrSchedule::kCosine, 0.01, 1000, 1000)) < 1e-18);
  double previous = 1;
  for (int t = 0; t < 100; ++t) {
    const double lr = scheduled_lr(LrSchedule::kCosine, 1.0, t, 100);
    CHECK(lr < previous + 1e-15);
    CHECK(lr > 0);
    previous = lr;
  }
  const TrainConfig overfit = TrainConfig::overfit_preset();
  CHECK(overfit.optimizer.lr == 1e-3);
  CHECK(overfit.lr_schedule == LrSchedule::kCosine);
  CHECK(overfit.steps == 2000);
  CHECK(overfit.batch_size == 8);
  nlohmann::json j;
  to_json(j, overfit);
  CHECK(j["lr_schedule"] == "cosine");
  CHECK(train_config_from_json(j).lr_schedule == LrSchedule::kCosine);
  j["lr_schedule"] = "step";
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("metrics arithmetic") {
  MetricsReport one = metrics_from_table({{0, 100, 90}});
  CHECK(one.mae == 10);
  CHECK(one.mse == 10);
  MetricsReport two = metrics_from_table({{0, 10, 7}, {1, 20, 24}});
  CHECK(two.mae == 3.5);
  CHECK(two.mse == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  MetricsReport perfect = metrics_from_table({{0, 5, 5}, {1, 0, 0}});
  CHECK(perfect.mae == 0);
  CHECK(perfect.mse == 0);
  CHECK_THROWS(metrics_from_table({}));
}

TEST_CASE("reflection padding mirrors without repeating the edge") {
  Tensor x = Tensor::zeros({1, 1, 3, 30});
  for (int y = 0; y < 3; ++y)
    for (int c = 0; c < 30; ++c) x.at(0, 0, y, c) = 100 * y + c;
  CHECK_THROWS_AS(reflect_pad_to_multiple(x, 32), ShapeError);  // 3 rows cannot mirror 29
  Tensor tall = Tensor::zeros({1, 1, 30, 30});
  for (int y = 0; y < 30; ++y)
    for (int c = 0; c < 30; ++c) tall.at(0, 0, y, c) = 100 * y + c;
  const Tensor p = reflect_pad_to_multiple(tall, 32);
  CHECK(p.shape().h == 32);
  CHECK(p.shape().w == 32);
  CHECK(p.at(0, 0, 30, 5) == 100 * 28 + 5);
  CHECK(p.at(0, 0, 31, 5) == 100 * 27 + 5);
  CHECK(p.at(0, 0, 31, 31) == 100 * 27 + 27);
  CHECK(p.at(0, 0, 29, 29) == 100 * 29 + 29);
}

TEST_CASE("evaluate matches a direct recomputation on unpadded cells") {
  FFNet net(testing::tiny_model_config());
  const Dataset ds = small_dataset(3, 80, 72, 13);
  const MetricsReport r = evaluate(net, ds);
  REQUIRE(r.n == 3);
  NoGradGuard guard;
  std::vector<ImageMetric> table;
  for (std::size_t i = 0; i < 3; ++i) {
    const Scene& s = ds.scenes[i];
    const Tensor x = reflect_pad_to_multiple(images_to_tensor({&s.image}), 32);
    CHECK(x.shape().h == 96);
    const Tensor d = net.forward(x);
    double count = 0;
    for (int row = 0; row < 9; ++row)
      for (int col = 0; col < 10; ++col) count += d.at(0, 0, row, col);
    CHECK(r.images[i].predicted == count);
    CHECK(r.images[i].truth == static_cast<double>(s.points.size()));
    table.push_back({i, r.images[i].truth, count});
  }
  const MetricsReport direct = metrics_from_table(table);
  CHECK(r.mae == direct.mae);
  CHECK(r.mse == direct.mse);

  const MetricsReport threaded = evaluate(net, ds, 2);
  for (std::size_t i = 0; i < 3; ++i) CHECK(threaded.images[i].predicted == r.images[i].predicted);
  CHECK_THROWS(evaluate(net, Dataset{}));
}

TEST_CASE("checkpoint round trip is bitwise and cross-run evaluation agrees") {
  const fs::path dir = scratch("ckpt");
  const Dataset ds = small_dataset(2, 64, 64, 17);
  FFNet net(testing::tiny_model_config());
  train(net, ds, quick_config(3));
  save_checkpoint(net, dir / "m.ffck");
  const auto loaded = load_checkpoint(dir / "m.ffck");
  CHECK(values_of(*loaded) == values_of(net));
  save_checkpoint(*loaded, dir / "again.ffck");
  CHECK(file_bytes(dir / "again.ffck") == file_bytes(dir / "m.ffck"));
  CHECK(file_bytes(dir / "m.ffck").substr(0, 4) == "FFCK");

  const MetricsReport a = evaluate(net, ds);
  const MetricsReport b = evaluate(*loaded, ds);
  CHECK(a.mae == b.mae);
  CHECK(a.mse == b.mse);
  CHECK(read_checkpoint_config(dir / "m.ffck").init_seed == net.config().init_seed);
  fs::remove_all(dir);
}

TEST_CASE("tampered or truncated checkpoints are rejected") {
  const fs::path dir = scratch("tamper");
  FFNet net(testing::tiny_model_config());
  save_checkpoint(net, dir / "m.ffck");
  const std::string good = file_bytes(dir / "m.ffck");
  auto write_variant = [&](const std::string& bytes) {
    std::ofstream out(dir / "bad.ffck", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  auto rejects = [&](const std::string& bytes) {
    write_variant(bytes);
    bool threw = false;
    try {
      load_checkpoint(dir / "bad.ffck");
    } catch (const CheckpointError&) {
      threw = true;
    }
    return threw;
  };
  std::string s = good;
  s[0] = 'X';
  CHECK(rejects(s));
  s = good;
  s[4] = 2;  // version
  CHECK(rejects(s));
  s = good;
  s[12] = static_cast<char>(s[12] + 1);  // first name length
  CHECK(rejects(s));
  // Length of the first float tensor's leading dim: after the config entry.
  const std::size_t cfg_len = static_cast<unsigned char>(good[12]) |
                              (static_cast<unsigned char>(good[13]) << 8);
  const std::size_t json_len_at = 12 + 2 + cfg_len + 2;
  std::uint32_t json_len;
  std::memcpy(&json_len, good.data() + json_len_at, 4);
  const std::size_t first_dim_at = json_len_at + 4 + json_len;
  std::uint16_t name_len;
  std::memcpy(&name_len, good.data() + first_dim_at, 2);
  const std::size_t dim0_at = first_dim_at + 2 + name_len + 2;
  s = good;
  s[dim0_at] = static_cast<char>(s[dim0_at] + 1);
  CHECK(rejects(s));
  CHECK(rejects(good.substr(0, good.size() - 3)));
  CHECK(rejects(good + "x"));
  CHECK_FALSE(rejects(good));

  FFNet other(testing::tiny_model_config());
  ModelConfig wider = testing::tiny_model_config();
  wider.backbone.stage_channels[0] += 1;
  FFNet mismatched(wider);
  CHECK_THROWS_AS(load_checkpoint_into(mismatched, dir / "m.ffck"), CheckpointError);
  CHECK_NOTHROW(load_checkpoint_into(other, dir / "m.ffck"));
  fs::remove_all(dir);
}

TEST_CASE("thread budget reads the environment") {
  ::setenv("FFLAB_THREADS", "3", 1);
  CHECK(thread_budget() == 3);
  ::setenv("FFLAB_THREADS", "zero", 1);
  CHECK(thread_budget() == 1);
  ::unsetenv("FFLAB_THREADS");
  CHECK(thread_budget() == 1);
}
