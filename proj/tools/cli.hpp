#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fflab/data.hpp"
#include "fflab/model.hpp"
#include "fflab/trainer.hpp"

namespace fflab::cli {

/// Process exit codes. The table is part of the documented interface.
enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,          // missing or unwritable file
  kDataFormat = 4,  // malformed image, annotation or manifest
  kCheckpoint = 5,  // unreadable or mismatched checkpoint
  kConfig = 6,      // invalid configuration value or file
  kNumeric = 7,     // training hit a non-finite loss or gradient
};

/// Everything needed to rerun a subcommand. Written to run_config.json in
/// the output directory before any compute, and accepted back via --config.
struct RunConfig {
  std::string command;
  std::optional<SceneConfig> scene;
  std::optional<std::size_t> count;
  std::optional<ModelConfig> model;
  std::optional<TrainConfig> train;
  std::map<std::string, std::string> paths;  // inputs only, never --out
  nlohmann::json options = nlohmann::json::object();
};

inline constexpr const char* kRunFormat = "fflab-run";
inline constexpr const char* kRunConfigFile = "run_config.json";

nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Runs one invocation; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fflab::cli
