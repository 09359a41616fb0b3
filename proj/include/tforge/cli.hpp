#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tforge/llm_gateway.hpp"
#include "tforge/synthesis.hpp"
#include "tforge/trainer.hpp"

namespace tforge::cli {

enum class TransportKind { http, mock };

// Settings shared by every subcommand. Sources, lowest to highest priority:
// built-in defaults, the --config JSON file, command-line flags. Secrets are
// read from the environment only.
struct RunConfig {
  std::filesystem::path pools;
  std::optional<std::string> base_url;
  std::optional<std::string> model;  // applied to every stage
  synth::StageConfigs generation;
  llm::PriceTable prices;
  std::uint64_t seed = 0;
  std::size_t max_in_flight = 4;
  double rate = 0.0;
  synth::Mode mode = synth::Mode::pooled;
  llm::BackendMode backend = llm::BackendMode::live;
  TransportKind transport = TransportKind::http;
  std::filesystem::path fixtures;
  std::filesystem::path out;
  std::size_t few_shot_k = synth::kFewShot;
  train::TrainConfig train;
  train::FeaturizerConfig features;

  // Overlays the keys of a config document; unknown keys and bad values
  // raise ConfigError naming the field path.
  // Relative paths resolve against `base`.
  void apply_json(const nlohmann::json& doc, const std::string& origin = "config",
                  const std::filesystem::path& base = {});
  // Field checks plus those that need the filesystem.
  void validate() const;
  nlohmann::json to_json() const;
};

RunConfig default_run_config();

// Runs one command line (without the program name). Returns 0 on success,
// 1 on usage or configuration errors and 2 on runtime failures. `cancel`
// is polled by long-running stages.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             const std::atomic<bool>* cancel = nullptr);

}  // namespace tforge::cli
