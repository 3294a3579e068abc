#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fflab/analysis.hpp"

namespace fflab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const char* kExitTable =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage error (unknown flag, missing or conflicting arguments)\n"
    "  3  missing or unwritable file\n"
    "  4  malformed data (image, annotation CSV, dataset manifest)\n"
    "  5  unreadable or mismatched checkpoint\n"
    "  6  invalid configuration\n"
    "  7  non-finite loss or gradient during training\n"
    "\n"
    "Environment: FFLAB_THREADS caps evaluation worker threads (default 1).";

std::string format(const char* fmt, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, a);
  return buf;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw MissingFile(what + " not found: " + p.string());
}

json read_json_file(const fs::path& p) {
  require_file(p, "config file");
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + p.string());
  out << text;
  if (!out) throw std::ios_base::failure("short write to " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return out;
}

void echo(const fs::path& dir, const RunConfig& rc) {
  write_json(dir / kRunConfigFile, run_config_to_json(rc));
}

// Section-only files ({"model": ..., "train": ...}) and bare model or scene
// objects are accepted as well as full echoes.
RunConfig load_config(const std::string& path, const std::string& command) {
  const json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
  if (j.contains("format")) return run_config_from_json(j);
  RunConfig rc;
  rc.command = command;
  const bool sectioned =
      j.contains("model") || j.contains("train") || j.contains("scene") || j.contains("count");
  if (sectioned) {
    json full = j;
    full["format"] = kRunFormat;
    full["version"] = 1;
    full["command"] = command;
    return run_config_from_json(full);
  }
  if (command == "gen-data") {
    SceneConfig sc;
    from_json(j, sc);
    rc.scene = sc;
  } else {
    rc.model = model_config_from_json(j);
  }
  return rc;
}

template <class T>
T option_or(const RunConfig& rc, const char* key, T fallback) {
  if (!rc.options.contains(key)) return fallback;
  try {
    return rc.options.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for options.") + key);
  }
}

std::string path_or(const RunConfig& rc, const char* key, const std::string& flag) {
  if (!flag.empty()) return flag;
  const auto it = rc.paths.find(key);
  return it == rc.paths.end() ? std::string() : it->second;
}

bool given(const CLI::Option* o) { return o->count() > 0; }

// Model flags shared by train and analyze.
struct ModelFlags {
  std::string preset;
  std::string fusion;
  bool no_ftm = false;
  std::uint64_t init_seed = 0;
  CLI::Option* preset_opt = nullptr;
  CLI::Option* fusion_opt = nullptr;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    preset_opt = app->add_option("--preset", preset, "Model preset")
                     ->check(CLI::IsMember({"toy", "convnext_tiny_structural"}));
    fusion_opt = app->add_option("--fusion", fusion, "Multi-scale fusion strategy")
                     ->check(CLI::IsMember({"concat", "add", "stepwise"}));
    app->add_flag("--no-ftm", no_ftm, "Feed backbone features straight to the fusion");
    seed_opt = app->add_option("--init-seed", init_seed, "Weight initialization seed");
  }

  ModelConfig apply(std::optional<ModelConfig> base) const {
    ModelConfig m = base.value_or(ModelConfig::preset("toy"));
    if (given(preset_opt)) m = ModelConfig::preset(preset);
    if (given(fusion_opt)) m.fusion.strategy = parse_fusion(fusion);
    if (no_ftm) m.ftm.enabled = false;
    if (given(seed_opt)) m.init_seed = init_seed;
    m.validate();
    return m;
  }
};

std::string model_label(const ModelConfig& m) {
  return to_string(m.fusion.strategy) + (m.ftm.enabled ? "" : ", no FTM");
}

// ---------------------------------------------------------------- gen-data

struct GenData {
  std::string out, config;
  std::size_t count = 8;
  int size = 0, width = 0, height = 0, channels = 1;
  std::uint64_t seed = 0;
  double parent_intensity = 0, offspring_mean = 0, cluster_spread = 0, noise_std = 0;
  double radius_top = 0, radius_bottom = 0, amplitude_top = 0, amplitude_bottom = 0;
  double background_base = 0, background_gradient = 0;
  std::map<std::string, CLI::Option*> o;

  void add(CLI::App* app) {
    app->add_option("--out", out, "Dataset directory to create")->required();
    app->add_option("--config", config, "Run config or scene config JSON");
    o["count"] = app->add_option("--count", count, "Number of scenes")->check(CLI::PositiveNumber);
    o["size"] = app->add_option("--size", size, "Square scene side in pixels")
                    ->check(CLI::PositiveNumber);
    o["width"] = app->add_option("--width", width, "Scene width")->check(CLI::PositiveNumber);
    o["height"] = app->add_option("--height", height, "Scene height")->check(CLI::PositiveNumber);
    o["channels"] = app->add_option("--channels", channels, "1 (PGM) or 3 (PPM)")
                        ->check(CLI::IsMember({1, 3}));
    o["seed"] = app->add_option("--seed", seed, "Seed of the first scene; scene i uses seed + i");
    o["parent"] = app->add_option("--parent-intensity", parent_intensity, "Mean cluster count");
    o["offspring"] = app->add_option("--offspring-mean", offspring_mean, "Mean heads per cluster");
    o["spread"] = app->add_option("--cluster-spread", cluster_spread, "Cluster sigma in pixels");
    o["noise"] = app->add_option("--noise-std", noise_std, "Pixel noise sigma");
    o["rtop"] = app->add_option("--radius-top", radius_top, "Blob radius at the top row");
    o["rbot"] = app->add_option("--radius-bottom", radius_bottom, "Blob radius at the bottom row");
    o["atop"] = app->add_option("--amplitude-top", amplitude_top, "Blob amplitude at the top row");
    o["abot"] = app->add_option("--amplitude-bottom", amplitude_bottom,
                                "Blob amplitude at the bottom row");
    o["bbase"] = app->add_option("--background-base", background_base, "Background at the top");
    o["bgrad"] = app->add_option("--background-gradient", background_gradient,
                                 "Background increase to the bottom");
    app->get_option("--size")->excludes(o["width"])->excludes(o["height"]);
  }

  int run(std::ostream& out_stream) const {
    RunConfig rc = config.empty() ? RunConfig{} : load_config(config, "gen-data");
    rc.command = "gen-data";
    SceneConfig sc = rc.scene.value_or(SceneConfig{});
    std::size_t n = rc.count.value_or(8);
    auto set = [&](const char* key, auto& field, auto value) {
      if (given(o.at(key))) field = value;
    };
    set("count", n, count);
    set("size", sc.width, size);
    set("size", sc.height, size);
    set("width", sc.width, width);
    set("height", sc.height, height);
    set("channels", sc.channels, channels);
    set("seed", sc.seed, seed);
    set("parent", sc.parent_intensity, parent_intensity);
    set("offspring", sc.offspring_mean, offspring_mean);
    set("spread", sc.cluster_spread, cluster_spread);
    set("noise", sc.noise_std, noise_std);
    set("rtop", sc.radius_top, radius_top);
    set("rbot", sc.radius_bottom, radius_bottom);
    set("atop", sc.amplitude_top, amplitude_top);
    set("abot", sc.amplitude_bottom, amplitude_bottom);
    set("bbase", sc.background_base, background_base);
    set("bgrad", sc.background_gradient, background_gradient);
    sc.validate();
    if (n < 1) throw ConfigError("gen-data: count must be >= 1");
    rc.scene = sc;
    rc.count = n;

    const fs::path dir = prepare_out(out);
    echo(dir, rc);
    const Dataset ds = generate_dataset(sc, n, sc.seed);
    write_dataset(dir, ds);
    std::size_t heads = 0;
    for (const DatasetEntry& e : ds.entries) heads += e.count;
    out_stream << "wrote " << n << " scenes (" << heads << " heads) to " << dir.string() << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- train

Dataset load_dataset(const std::string& dir) {
  if (dir.empty()) throw UsageError("--data is required");
  require_file(fs::path(dir) / "manifest.json", "dataset manifest");
  return read_dataset(dir);
}

json metrics_text_rows(const MetricsReport& m, std::ostream& out) {
  out << " index      truth  predicted    abs err\n";
  for (const ImageMetric& r : m.images) {
    char line[96];
    std::snprintf(line, sizeof line, "%6zu %10.4f %10.4f %10.4f\n", r.index, r.truth, r.predicted,
                  std::fabs(r.predicted - r.truth));
    out << line;
  }
  out << "MAE " << format("%.6f", m.mae) << "  MSE (root mean squared) " << format("%.6f", m.mse)
      << "  images " << m.n << "\n";
  return metrics_to_json(m);
}

struct Train {
  std::string data, config, out, schedule;
  int steps = 0, batch_size = 0, crop = 0, eval_every = 0, log_every = 0;
  int export_densities = 8;
  double lr = 0, flip_prob = 0, grad_clip = 0, ot_weight = 0, variation_weight = 0;
  std::uint64_t seed = 0;
  bool overfit = false;
  ModelFlags model;
  std::map<std::string, CLI::Option*> o;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory written by gen-data");
    app->add_option("--config", config, "Run config, or {\"model\": ..., \"train\": ...} JSON");
    app->add_option("--out", out, "Run directory")->required();
    app->add_flag("--overfit", overfit, "Start from the overfit preset (lr 1e-3, cosine, 2000 steps)");
    o["steps"] = app->add_option("--steps", steps, "Optimizer steps")->check(CLI::NonNegativeNumber);
    o["lr"] = app->add_option("--lr", lr, "Peak learning rate")->check(CLI::NonNegativeNumber);
    o["schedule"] = app->add_option("--schedule", schedule, "Learning rate schedule")
                        ->check(CLI::IsMember({"constant", "cosine"}));
    o["batch"] = app->add_option("--batch-size", batch_size, "Scenes per step")
                     ->check(CLI::PositiveNumber);
    o["seed"] = app->add_option("--seed", seed, "Sampling and augmentation seed");
    o["crop"] = app->add_option("--crop", crop, "Square crop side, a multiple of 32");
    o["flip"] = app->add_option("--flip-prob", flip_prob, "Horizontal flip probability");
    o["clip"] = app->add_option("--grad-clip", grad_clip, "Global gradient norm cap, 0 disables");
    o["ot"] = app->add_option("--ot-weight", ot_weight, "Weight of the transport term");
    o["var"] = app->add_option("--variation-weight", variation_weight,
                               "Weight of the total variation term");
    o["eval"] = app->add_option("--eval-every", eval_every, "Evaluate on the training set every N steps");
    o["log"] = app->add_option("--log-every", log_every, "Progress line every N steps");
    app->add_option("--export-densities", export_densities,
                    "Density maps written for the first N scenes")
        ->check(CLI::NonNegativeNumber);
    model.add(app);
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    RunConfig rc = config.empty() ? RunConfig{} : load_config(config, "train");
    rc.command = "train";
    const ModelConfig mc = model.apply(rc.model);
    TrainConfig tc = overfit ? TrainConfig::overfit_preset() : rc.train.value_or(TrainConfig{});
    auto set = [&](const char* key, auto& field, auto value) {
      if (given(o.at(key))) field = value;
    };
    set("steps", tc.steps, steps);
    set("lr", tc.optimizer.lr, lr);
    if (given(o.at("schedule")))
      tc.lr_schedule = schedule == "cosine" ? LrSchedule::kCosine : LrSchedule::kConstant;
    set("batch", tc.batch_size, batch_size);
    set("seed", tc.seed, seed);
    set("crop", tc.crop, crop);
    set("flip", tc.flip_prob, flip_prob);
    set("clip", tc.grad_clip, grad_clip);
    set("ot", tc.loss.weights.ot, ot_weight);
    set("var", tc.loss.weights.variation, variation_weight);
    set("eval", tc.eval_every, eval_every);
    set("log", tc.log_every, log_every);
    tc.validate();
    rc.model = mc;
    rc.train = tc;
    rc.options["export_densities"] = option_or(rc, "export_densities", export_densities);
    const std::string data_dir = path_or(rc, "data", data);
    rc.paths["data"] = data_dir;
    if (data_dir.empty()) throw UsageError("--data is required");
    require_file(fs::path(data_dir) / "manifest.json", "dataset manifest");

    const fs::path dir = prepare_out(out);
    echo(dir, rc);
    const Dataset ds = read_dataset(data_dir);
    for (const Scene& s : ds.scenes) {
      if (s.image.channels != mc.backbone.input_channels)
        throw ConfigError("dataset images have " + std::to_string(s.image.channels) +
                          " channels, model expects " +
                          std::to_string(mc.backbone.input_channels));
      if (s.image.width < tc.crop || s.image.height < tc.crop)
        throw ConfigError("crop " + std::to_string(tc.crop) + " exceeds a " +
                          std::to_string(s.image.width) + "x" + std::to_string(s.image.height) +
                          " scene");
    }

    FFNet net(mc);
    err << "training " << model_label(mc) << " (" << net.parameter_count() << " params) for "
        << tc.steps << " steps on " << ds.scenes.size() << " scenes\n";
    TrainHooks hooks;
    hooks.on_log = [&](const StepLog& r) {
      char line[160];
      std::snprintf(line, sizeof line, "step %d total %.6g count %.6g ot %.3g variation %.6g\n",
                    r.step, r.total, r.count, r.ot, r.variation);
      err << line << std::flush;
    };
    const TrainResult result = train(net, ds, tc, hooks);

    save_checkpoint(net, dir / "model.ffck");
    write_loss_csv(dir / "loss.csv", result.curve);
    if (!result.evals.empty()) {
      std::string text = "step,mae,mse\n";
      for (const EvalPoint& e : result.evals) {
        char line[96];
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g\n", e.step, e.metrics.mae, e.metrics.mse);
        text += line;
      }
      write_text(dir / "evals.csv", text);
    }
    const MetricsReport final_metrics = evaluate(net, ds, thread_budget());
    write_json(dir / "metrics.json", metrics_to_json(final_metrics));

    const int exports = rc.options["export_densities"].get<int>();
    json grids = json::array();
    if (exports > 0) fs::create_directories(dir / "densities");
    for (std::size_t i = 0; i < ds.scenes.size() && static_cast<int>(i) < exports; ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "scene_%05zu", i);
      const Image& img = ds.scenes[i].image;
      export_density(net, img, dir / "densities" / (std::string(stem) + ".pgm"),
                     dir / "densities" / (std::string(stem) + ".csv"));
      grids.push_back({{"image", {img.height, img.width}},
                       {"density", {(img.height + 7) / 8, (img.width + 7) / 8}}});
    }

    json summary{{"fusion", to_string(mc.fusion.strategy)},
                 {"ftm", mc.ftm.enabled},
                 {"params", net.parameter_count()},
                 {"steps", tc.steps},
                 {"scenes", ds.scenes.size()},
                 {"final_metrics", {{"mae", final_metrics.mae}, {"mse", final_metrics.mse}}},
                 {"density_grids", grids}};
    if (!result.curve.empty()) {
      const std::size_t tail = std::min<std::size_t>(50, result.curve.size());
      double tail_total = 0, tail_count = 0;
      for (std::size_t i = result.curve.size() - tail; i < result.curve.size(); ++i) {
        tail_total += result.curve[i].total;
        tail_count += result.curve[i].count;
      }
      summary["loss_first"] = result.curve.front().total;
      summary["loss_tail_mean"] = tail_total / tail;
      summary["count_loss_tail_mean"] = tail_count / tail;
    }
    write_json(dir / "summary.json", summary);

    out_stream << "checkpoint " << (dir / "model.ffck").string() << "\n";
    metrics_text_rows(final_metrics, out_stream);
    return kOk;
  }
};

// ---------------------------------------------------------------- eval

std::unique_ptr<FFNet> open_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  require_file(path, "checkpoint");
  return load_checkpoint(path);
}

struct Eval {
  std::string data, checkpoint, out, config;
  int threads = 0;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory");
    app->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
    app->add_option("--out", out, "Directory for metrics.json and metrics.txt");
    app->add_option("--config", config, "Run config echoed by an earlier eval");
    app->add_option("--threads", threads, "Worker threads, default FFLAB_THREADS or 1")
        ->check(CLI::PositiveNumber);
  }

  int run(std::ostream& out_stream) const {
    RunConfig rc = config.empty() ? RunConfig{} : load_config(config, "eval");
    rc.command = "eval";
    rc.paths["data"] = path_or(rc, "data", data);
    rc.paths["checkpoint"] = path_or(rc, "checkpoint", checkpoint);
    if (rc.paths["data"].empty()) throw UsageError("--data is required");
    if (rc.paths["checkpoint"].empty()) throw UsageError("--checkpoint is required");
    require_file(fs::path(rc.paths["data"]) / "manifest.json", "dataset manifest");
    require_file(rc.paths["checkpoint"], "checkpoint");
    fs::path dir;
    if (!out.empty()) {
      dir = prepare_out(out);
      echo(dir, rc);
    }
    auto net = open_checkpoint(rc.paths["checkpoint"]);
    const Dataset ds = read_dataset(rc.paths["data"]);
    const MetricsReport m = evaluate(*net, ds, threads > 0 ? threads : thread_budget());
    std::ostringstream text;
    const json j = metrics_text_rows(m, text);
    out_stream << text.str();
    if (!dir.empty()) {
      write_json(dir / "metrics.json", j);
      write_text(dir / "metrics.txt", text.str());
    }
    return kOk;
  }
};

// ---------------------------------------------------------------- analyze

Shape parse_shape(const std::string& text) {
  std::vector<int> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--input-shape expects n,c,h,w with positive integers, got '" + text + "'");
    }
  }
  if (dims.size() != 4)
    throw UsageError("--input-shape expects n,c,h,w with positive integers, got '" + text + "'");
  return {dims[0], dims[1], dims[2], dims[3]};
}

struct Analyze {
  std::string config, input_shape, out;
  bool as_json = false;
  ModelFlags model;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Model config, {\"model\": ...} or a run config JSON");
    app->add_option("--input-shape", input_shape, "n,c,h,w (default 1,c,256,256)");
    app->add_option("--out", out, "Directory for report.txt and report.json");
    app->add_flag("--json", as_json, "Print JSON instead of the text table");
    model.add(app);
  }

  int run(std::ostream& out_stream) const {
    RunConfig rc = config.empty() ? RunConfig{} : load_config(config, "analyze");
    rc.command = "analyze";
    const ModelConfig mc = model.apply(rc.model);
    rc.model = mc;
    rc.train.reset();
    rc.scene.reset();
    const std::string shape_text = input_shape.empty()
                                       ? option_or<std::string>(rc, "input_shape", "")
                                       : input_shape;
    const Shape shape = shape_text.empty()
                            ? Shape{1, mc.backbone.input_channels, 256, 256}
                            : parse_shape(shape_text);
    rc.options = {{"input_shape", std::to_string(shape.n) + "," + std::to_string(shape.c) + "," +
                                      std::to_string(shape.h) + "," + std::to_string(shape.w)}};
    const AnalysisReport report = count_params_flops(mc, shape);
    const json j = report_to_json(report);
    const std::string text = format_report(report);
    if (!out.empty()) {
      const fs::path dir = prepare_out(out);
      echo(dir, rc);
      write_text(dir / "report.txt", text);
      write_json(dir / "report.json", j);
    }
    out_stream << (as_json ? j.dump(2) + "\n" : text);
    return kOk;
  }
};

// ---------------------------------------------------- erf / heatmap / export

std::vector<int> branches_of(int branch) {
  if (branch == 0) return {1, 2, 3};
  return {branch};
}

Image open_image(const std::string& path, const FFNet& net) {
  if (path.empty()) throw UsageError("--image is required");
  require_file(path, "image");
  Image img = read_image(path);
  if (img.channels != net.config().backbone.input_channels)
    throw ConfigError("image has " + std::to_string(img.channels) + " channels, model expects " +
                      std::to_string(net.config().backbone.input_channels));
  return img;
}

struct MapFlags {
  std::string checkpoint, image, out, config;
  int branch = 0;
  CLI::Option* branch_opt = nullptr;

  void add(CLI::App* app, bool with_branch) {
    app->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
    app->add_option("--image", image, "PGM/PPM image");
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--config", config, "Run config echoed by an earlier call");
    if (with_branch)
      branch_opt = app->add_option("--branch", branch, "Branch 1, 2 or 3; 0 writes all three")
          ->check(CLI::Range(0, 3));
  }

  RunConfig resolve(const std::string& command) const {
    RunConfig rc = config.empty() ? RunConfig{} : load_config(config, command);
    rc.command = command;
    rc.model.reset();
    rc.train.reset();
    rc.scene.reset();
    rc.paths["checkpoint"] = path_or(rc, "checkpoint", checkpoint);
    const std::string img = path_or(rc, "image", image);
    if (!img.empty()) rc.paths["image"] = img;
    if (rc.paths["checkpoint"].empty()) throw UsageError("--checkpoint is required");
    require_file(rc.paths["checkpoint"], "checkpoint");
    if (!img.empty()) require_file(img, "image");
    return rc;
  }
};

struct Erf {
  MapFlags f;
  int size = 128, probes = 16;
  std::uint64_t seed = 0;
  double threshold = 0.05;
  std::map<std::string, CLI::Option*> o;

  void add(CLI::App* app) {
    f.add(app, true);
    o["size"] = app->add_option("--size", size, "Square probe side, a multiple of 32")
                    ->check(CLI::PositiveNumber);
    o["probes"] = app->add_option("--probes", probes, "Random probe images averaged")
                      ->check(CLI::PositiveNumber);
    o["seed"] = app->add_option("--seed", seed, "Probe seed");
    o["threshold"] = app->add_option("--threshold", threshold, "Area threshold on the normalized map");
    o["branch"] = f.branch_opt;
  }

  int run(std::ostream& out_stream) const {
    RunConfig rc = f.resolve("erf");
    auto pick = [&](const char* key, auto flag) {
      using T = decltype(flag);
      return given(o.at(key)) ? flag : option_or<T>(rc, key, flag);
    };
    const int branch = pick("branch", f.branch);
    int side = pick("size", size);
    const int n_probes = pick("probes", probes);
    const std::uint64_t probe_seed = pick("seed", seed);
    const double thr = pick("threshold", threshold);
    if (branch < 0 || branch > 3) throw ConfigError("erf: branch must be 0..3");
    auto net = open_checkpoint(rc.paths["checkpoint"]);
    if (rc.paths.count("image")) {
      // The probe takes the image's shorter side, rounded down to a multiple of 32.
      const Image img = open_image(rc.paths["image"], *net);
      side = std::min(img.width, img.height) / 32 * 32;
      if (side < 32) throw ConfigError("erf: image is smaller than 32 pixels");
    }
    if (side % 32) throw ConfigError("erf: --size must be a multiple of 32");
    rc.options = {{"branch", branch}, {"size", side}, {"probes", n_probes},
                  {"seed", probe_seed}, {"threshold", thr}};
    const fs::path dir = prepare_out(f.out);
    echo(dir, rc);
    json areas = json::array();
    for (int b : branches_of(branch)) {
      const ERFMap m = branch_erf(*net, b, side, n_probes, probe_seed);
      write_image(dir / ("erf_branch" + std::to_string(b) + ".pgm"),
                  grid_to_image(m.height, m.width, m.values));
      areas.push_back({{"branch", b}, {"area", m.area(thr)}, {"pixels", m.values.size()}});
      out_stream << "branch " << b << " ERF area " << m.area(thr) << " px above " << thr << "\n";
    }
    write_json(dir / "erf.json", {{"threshold", thr}, {"size", side}, {"branches", areas}});
    return kOk;
  }
};

struct HeatmapCmd {
  MapFlags f;

  void add(CLI::App* app) { f.add(app, true); }

  int run(std::ostream& out_stream) const {
    RunConfig rc = f.resolve("heatmap");
    const int branch = given(f.branch_opt) ? f.branch : option_or(rc, "branch", f.branch);
    if (branch < 0 || branch > 3) throw ConfigError("heatmap: branch must be 0..3");
    rc.options = {{"branch", branch}};
    auto net = open_checkpoint(rc.paths["checkpoint"]);
    if (!rc.paths.count("image")) throw UsageError("--image is required");
    const Image img = open_image(rc.paths["image"], *net);
    const fs::path dir = prepare_out(f.out);
    echo(dir, rc);
    const Tensor padded = reflect_pad_to_multiple(images_to_tensor({&img}), 32);
    const int pw = padded.shape().w;
    for (int b : branches_of(branch)) {
      const Heatmap h = branch_heatmap(*net, padded, b);
      // Drop the reflected margin.
      std::vector<double> crop;
      crop.reserve(static_cast<std::size_t>(img.width) * img.height);
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) crop.push_back(h.values[static_cast<std::size_t>(y) * pw + x]);
      const fs::path file = dir / ("heatmap_branch" + std::to_string(b) + ".pgm");
      write_image(file, grid_to_image(img.height, img.width, crop));
      out_stream << "wrote " << file.string() << "\n";
    }
    return kOk;
  }
};

struct ExportDensity {
  MapFlags f;

  void add(CLI::App* app) { f.add(app, false); }

  int run(std::ostream& out_stream) const {
    RunConfig rc = f.resolve("export-density");
    auto net = open_checkpoint(rc.paths["checkpoint"]);
    if (!rc.paths.count("image")) throw UsageError("--image is required");
    const Image img = open_image(rc.paths["image"], *net);
    const fs::path dir = prepare_out(f.out);
    echo(dir, rc);
    const double count = export_density(*net, img, dir / "density.pgm", dir / "density.csv");
    out_stream << "predicted count " << format("%.6f", count) << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- report

std::vector<StepLog> read_loss_csv(const fs::path& p) {
  require_file(p, "loss curve");
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  if (line != "step,count,ot,variation,total")
    throw DataFormatError(p.string() + ": unexpected header '" + line + "'");
  std::vector<StepLog> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    StepLog r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &r.step, &r.count, &r.ot, &r.variation,
                    &r.total) != 5)
      throw DataFormatError(p.string() + ": bad row at line " + std::to_string(n));
    rows.push_back(r);
  }
  return rows;
}

struct Report {
  std::vector<std::string> runs;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--runs", runs, "Run directories written by train")->required();
    app->add_option("--out", out, "Directory for report.txt, report.json and curves.csv")
        ->required();
  }

  int run(std::ostream& out_stream) const {
    RunConfig rc;
    rc.command = "report";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      rc.paths["run" + std::to_string(i)] = runs[i];
      require_file(fs::path(runs[i]) / "summary.json", "run summary");
      require_file(fs::path(runs[i]) / "loss.csv", "loss curve");
    }
    const fs::path dir = prepare_out(out);
    echo(dir, rc);

    json table = json::array();
    std::vector<std::vector<StepLog>> curves;
    char line[256];
    std::string text;
    std::snprintf(line, sizeof line, "%-22s %-9s %-4s %9s %6s %12s %12s %10s %10s %s\n", "run",
                  "fusion", "ftm", "params", "steps", "loss first", "loss tail", "MAE", "MSE",
                  "density grid");
    text += line;
    for (const std::string& run : runs) {
      fs::path p(run);
      const std::string label =
          (p.filename().empty() ? p.parent_path().filename() : p.filename()).string();
      json s;
      try {
        s = read_json_file(p / "summary.json");
        curves.push_back(read_loss_csv(p / "loss.csv"));
        const auto& grid = s.at("density_grids");
        const std::string grid_text =
            grid.empty() ? "-"
                         : std::to_string(grid[0]["density"][0].get<int>()) + "x" +
                               std::to_string(grid[0]["density"][1].get<int>());
        std::snprintf(line, sizeof line, "%-22s %-9s %-4s %9llu %6d %12.6g %12.6g %10.4f %10.4f %s\n",
                      label.c_str(), s.at("fusion").get<std::string>().c_str(),
                      s.at("ftm").get<bool>() ? "on" : "off",
                      static_cast<unsigned long long>(s.at("params").get<std::uint64_t>()),
                      s.at("steps").get<int>(), s.value("loss_first", 0.0),
                      s.value("loss_tail_mean", 0.0),
                      s.at("final_metrics").at("mae").get<double>(),
                      s.at("final_metrics").at("mse").get<double>(), grid_text.c_str());
      } catch (const json::exception& e) {
        throw DataFormatError((p / "summary.json").string() + ": " + e.what());
      }
      text += line;
      s["run"] = label;
      table.push_back(s);
    }

    std::set<int> steps;
    for (const auto& c : curves)
      for (const StepLog& r : c) steps.insert(r.step);
    std::string csv = "step";
    for (const json& s : table) csv += "," + s["run"].get<std::string>();
    csv += "\n";
    for (int step : steps) {
      csv += std::to_string(step);
      for (const auto& c : curves) {
        const auto it = std::lower_bound(c.begin(), c.end(), step,
                                         [](const StepLog& r, int s) { return r.step < s; });
        csv += ",";
        if (it != c.end() && it->step == step) {
          std::snprintf(line, sizeof line, "%.17g", it->total);
          csv += line;
        }
      }
      csv += "\n";
    }

    write_text(dir / "report.txt", text);
    write_json(dir / "report.json", {{"runs", table}});
    write_text(dir / "curves.csv", csv);
    out_stream << text;
    return kOk;
  }
};

}  // namespace

// ---------------------------------------------------------------- RunConfig

json run_config_to_json(const RunConfig& c) {
  json j{{"format", kRunFormat}, {"version", 1}, {"command", c.command}};
  if (c.scene) j["scene"] = *c.scene;
  if (c.count) j["count"] = *c.count;
  if (c.model) j["model"] = *c.model;
  if (c.train) j["train"] = *c.train;
  j["paths"] = c.paths;
  j["options"] = c.options;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  static const std::set<std::string> keys{"format", "version", "command", "scene", "count",
                                          "model",  "train",   "paths",   "options"};
  for (const auto& item : j.items())
    if (!keys.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in run config");
  if (j.value("format", "") != kRunFormat)
    throw ConfigError(std::string("run config format must be '") + kRunFormat + "'");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported run config version");
  RunConfig c;
  try {
    c.command = j.value("command", "");
    if (j.contains("scene")) {
      SceneConfig sc;
      from_json(j["scene"], sc);
      c.scene = sc;
    }
    if (j.contains("count")) c.count = j["count"].get<std::size_t>();
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("paths")) c.paths = j["paths"].get<std::map<std::string, std::string>>();
    if (j.contains("options")) {
      if (!j["options"].is_object()) throw ConfigError("run config options must be an object");
      c.options = j["options"];
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"fflab: synthetic crowd counting laboratory", "fflab"};
  app.footer(kExitTable);
  app.require_subcommand(1);

  GenData gen;
  Train tr;
  Eval ev;
  Analyze an;
  Erf erf;
  HeatmapCmd hm;
  ExportDensity ex;
  Report rep;
  CLI::App* c_gen = app.add_subcommand("gen-data", "Write a synthetic scene dataset");
  CLI::App* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  CLI::App* c_eval = app.add_subcommand("eval", "Count MAE and MSE of a checkpoint on a dataset");
  CLI::App* c_an = app.add_subcommand("analyze", "Per-layer parameter and MAC accounting");
  CLI::App* c_erf = app.add_subcommand("erf", "Effective receptive field maps per branch");
  CLI::App* c_hm = app.add_subcommand("heatmap", "Branch activation heatmaps for one image");
  CLI::App* c_ex = app.add_subcommand("export-density", "Density map of one image as PGM and CSV");
  CLI::App* c_rep = app.add_subcommand("report", "Compare training runs side by side");
  gen.add(c_gen);
  tr.add(c_train);
  ev.add(c_eval);
  an.add(c_an);
  erf.add(c_erf);
  hm.add(c_hm);
  ex.add(c_ex);
  rep.add(c_rep);
  for (CLI::App* sub : app.get_subcommands({})) sub->footer(kExitTable);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* where = &app;
    for (CLI::App* sub : app.get_subcommands()) where = sub;
    err << where->help();
    return kUsage;
  }

  try {
    if (c_gen->parsed()) return gen.run(out);
    if (c_train->parsed()) return tr.run(out, err);
    if (c_eval->parsed()) return ev.run(out);
    if (c_an->parsed()) return an.run(out);
    if (c_erf->parsed()) return erf.run(out);
    if (c_hm->parsed()) return hm.run(out);
    if (c_ex->parsed()) return ex.run(out);
    if (c_rep->parsed()) return rep.run(out);
    err << app.help();
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const MissingFile& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const DataFormatError& e) {
    err << "error: " << e.what() << "\n";
    return kDataFormat;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace fflab::cli
