#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "zhmf/corpus.hpp"
#include "zhmf/llm.hpp"
#include "zhmf/pipeline.hpp"

namespace zhmf {

struct DataConfig {
  std::filesystem::path checkins;
  CheckinSchema schema;
  int min_count = 10;
  double gap_hours = 24.0;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  double zero_shot_fraction = 0.3;
  std::uint64_t seed = 7;
};

struct BackendConfig {
  std::string kind = "scripted";  // scripted | http
  std::filesystem::path script;   // scripted only
  std::string endpoint;           // http only
  std::string model;
  std::string auth_env = "ZHMF_API_KEY";
  RetryPolicy retry;
  int timeout_ms = 60000;
  int max_in_flight = 4;
};

struct EmbeddingConfig {
  std::string kind = "hash";  // hash | http
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  std::string endpoint;  // http only
  std::string model;
  std::string auth_env = "ZHMF_API_KEY";
};

struct AppConfig {
  DataConfig data;
  RunConfig run;
  BackendConfig backend;
  EmbeddingConfig embedding;
  bool capture_prompts = false;
  std::size_t max_steps = 0;   // 0 = no cap
  std::string scope = "all";   // all | exclude_zero_shot | zero_shot_only
  std::filesystem::path output_dir;
};

inline constexpr std::string_view kConfigSchema = "zhmf-config/1";

// Strict: unknown keys anywhere are a ConfigError naming the offending key;
// so are out-of-range values. `origin` labels error messages (a file name).
AppConfig parse_config(const std::string& text, const std::string& origin);
AppConfig load_config(const std::filesystem::path& path);

// Canonical JSON rendering with every default made explicit; parsing it
// back yields an identical config.
std::string render_config(const AppConfig& config);

// Content hash of the canonical rendering with output_dir cleared, so moving
// a run directory never invalidates its artifacts.
std::string config_digest(const AppConfig& config);

void write_resolved_config(const std::filesystem::path& path,
                           const AppConfig& config);

UserScope scope_from_string(const std::string& name);

}  // namespace zhmf
