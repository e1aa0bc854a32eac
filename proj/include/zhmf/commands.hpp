#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "zhmf/config.hpp"

namespace zhmf {

// Fixed layout of a run directory. Every command works inside
// config.output_dir and communicates through these files.
struct RunPaths {
  explicit RunPaths(std::filesystem::path root_dir);

  std::filesystem::path root;
  std::filesystem::path corpus;            // canonical check-in archive
  std::filesystem::path splits;
  std::filesystem::path cohorts;
  std::filesystem::path rejects;
  std::filesystem::path preprocess_report;
  std::filesystem::path preprocess_config;

  std::filesystem::path memory;            // persisted lesson store + pool
  std::filesystem::path memory_report;
  std::filesystem::path build_config;
  std::filesystem::path experience_outcomes;
  std::filesystem::path experience_prompts;
  std::filesystem::path build_llm_stats;   // wall-clock numbers; not compared

  std::filesystem::path outcomes;
  std::filesystem::path prompts;
  std::filesystem::path checkpoint;
  std::filesystem::path run_report;
  std::filesystem::path run_config;
  std::filesystem::path run_llm_stats;

  std::filesystem::path reports_dir;
  std::filesystem::path report_table;
  std::filesystem::path report_jsonl;
  std::filesystem::path lock;
};

inline constexpr std::string_view kCheckpointSchema = "zhmf-checkpoint/1";
inline constexpr std::string_view kPromptsSchema = "zhmf-prompts/1";

// Each command returns its report as a JSON string (the same content it
// writes into the run directory) and throws the error taxonomy on failure.

// Raw check-ins -> canonical archive, splits, cohorts, rejects, report.
std::string cmd_preprocess(const AppConfig& config);

// Builds the trajectory pool, runs the learning pass over the validation
// split, and persists the resulting store.
std::string cmd_build_memory(const AppConfig& config);

// Prediction pass over the test split with checkpointed auto-resume.
std::string cmd_run(const AppConfig& config);

// Aggregates an outcomes file into reports/report.txt and report.jsonl;
// returns the rendering selected by `format` ("table" or "jsonl").
std::string cmd_eval(const AppConfig& config,
                     const std::optional<std::filesystem::path>& outcomes_path,
                     const std::string& format = "table");

}  // namespace zhmf
