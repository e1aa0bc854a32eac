#include "zhmf/commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/eval.hpp"
#include "zhmf/util.hpp"

namespace zhmf {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Guards a run directory against concurrent commands. O_EXCL creation makes
// acquisition atomic; the file is removed on scope exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& lock_path) : path_(lock_path) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw StateError("run directory is locked by another command (remove " +
                       path_.string() + " if that command is gone)");
    }
    std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  json parsed = json::parse(read_file(path), nullptr, false);
  if (parsed.is_discarded()) {
    throw StateError("corrupt JSON file: " + path.string());
  }
  return parsed;
}

std::unique_ptr<ChatBackend> make_backend(const BackendConfig& config) {
  if (config.kind == "scripted") {
    if (config.script.empty()) {
      throw ConfigError("backend.script is required for the scripted backend");
    }
    return std::make_unique<ScriptedBackend>(ScriptedBackend::from_file(config.script));
  }
  if (config.endpoint.empty() || config.model.empty()) {
    throw ConfigError("backend.endpoint and backend.model are required for http");
  }
  return std::make_unique<HttpChatBackend>(config.endpoint, config.model,
                                           config.auth_env, config.timeout_ms);
}

std::unique_ptr<EmbeddingProvider> make_embedder(const EmbeddingConfig& config) {
  if (config.kind == "hash") {
    return std::make_unique<HashEmbeddingProvider>(config.dim, config.seed);
  }
  if (config.endpoint.empty() || config.model.empty()) {
    throw ConfigError(
        "embedding.endpoint and embedding.model are required for http");
  }
  return std::make_unique<HttpEmbeddingProvider>(config.endpoint, config.model,
                                                 config.auth_env, config.dim);
}

std::size_t embedding_dim(EmbeddingProvider& embedder) {
  if (embedder.dim() != 0) return embedder.dim();
  embedder.embed("dimension probe");  // remote providers learn it lazily
  if (embedder.dim() == 0) {
    throw BackendError("embedding provider reported dimension 0");
  }
  return embedder.dim();
}

json counters_json(const RunCounters& c) {
  return json{{"steps", c.steps},
              {"failed_steps", c.failed_steps},
              {"activity_calls", c.activity_calls},
              {"activity_reasks", c.activity_reasks},
              {"activity_fallbacks", c.activity_fallbacks},
              {"location_calls", c.location_calls},
              {"location_reasks", c.location_reasks},
              {"location_fallbacks", c.location_fallbacks},
              {"activity_triggers", c.activity_triggers},
              {"location_triggers", c.location_triggers},
              {"reflections_stored", c.reflections_stored},
              {"reflection_failures", c.reflection_failures}};
}

void write_llm_stats(const fs::path& path, const LlmStats& stats) {
  write_text(path, json{{"calls", stats.calls},
                        {"retries", stats.retries},
                        {"failures", stats.failures},
                        {"prompt_tokens", stats.prompt_tokens},
                        {"completion_tokens", stats.completion_tokens},
                        {"total_latency_ms", stats.total_latency_ms}}
                       .dump(2) +
                       "\n");
}

// Prompt/response capture as JSONL behind a schema header.
class PromptLog {
 public:
  PromptLog(const fs::path& path, bool fresh) {
    if (fresh) {
      std::ofstream header(path, std::ios::binary);
      if (!header) throw IoError("cannot write " + path.string());
      header << json{{"schema", kPromptsSchema}}.dump() << '\n';
    }
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot append to " + path.string());
  }

  void operator()(const CapturedExchange& exchange) {
    out_ << json{{"tag", exchange.prompt.tag},
                 {"level", exchange.prompt.level},
                 {"system", exchange.prompt.system_text},
                 {"user", exchange.prompt.rendered()},
                 {"response", exchange.response}}
                .dump()
         << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace

RunPaths::RunPaths(fs::path root_dir) : root(std::move(root_dir)) {
  if (root.empty()) throw ConfigError("output_dir is required");
  corpus = root / "corpus.jsonl";
  splits = root / "splits.jsonl";
  cohorts = root / "cohorts.jsonl";
  rejects = root / "rejects.jsonl";
  preprocess_report = root / "preprocess_report.json";
  preprocess_config = root / "preprocess_config.json";
  memory = root / "memory.jsonl";
  memory_report = root / "memory_report.json";
  build_config = root / "build_memory_config.json";
  experience_outcomes = root / "experience_outcomes.jsonl";
  experience_prompts = root / "experience_prompts.jsonl";
  build_llm_stats = root / "build_memory_llm_stats.json";
  outcomes = root / "outcomes.jsonl";
  prompts = root / "prompts.jsonl";
  checkpoint = root / "checkpoint.json";
  run_report = root / "run_report.json";
  run_config = root / "run_config.json";
  run_llm_stats = root / "run_llm_stats.json";
  reports_dir = root / "reports";
  report_table = reports_dir / "report.txt";
  report_jsonl = reports_dir / "report.jsonl";
  lock = root / ".lock";
}

std::string cmd_preprocess(const AppConfig& config) {
  if (config.data.checkins.empty()) {
    throw ConfigError("data.checkins is required");
  }
  RunPaths paths(config.output_dir);
  fs::create_directories(paths.root);
  DirLock lock(paths.lock);
  write_resolved_config(paths.preprocess_config, config);

  ParseResult parsed = parse_checkins(config.data.checkins, config.data.schema);
  write_rejects(paths.rejects, parsed.rejects);

  std::vector<CheckIn> filtered =
      filter_sparse(parsed.checkins, config.data.min_count);
  PoiIndex used_pois;
  for (const CheckIn& c : filtered) {
    auto it = parsed.pois.find(c.poi);
    if (it != parsed.pois.end()) used_pois.insert(*it);
  }
  std::vector<Trajectory> trajectories =
      segment_trajectories(filtered, config.data.gap_hours);
  CorpusSplits splits =
      chronological_split(trajectories, used_pois, config.data.ratios);

  UserCohorts cohorts;
  const bool stratified = splits.user_index.size() >= 4;
  if (stratified) cohorts = stratify_users(splits);
  if (config.data.zero_shot_fraction > 0.0) {
    cohorts = zero_shot_holdout(splits, config.data.zero_shot_fraction,
                                config.data.seed, cohorts);
  }

  write_corpus_archive(paths.corpus, splits.poi_index, filtered,
                       config.data.checkins.filename().string());
  write_splits(paths.splits, splits);
  write_cohorts(paths.cohorts, cohorts);

  json report = {
      {"accepted_rows", parsed.checkins.size()},
      {"rejected_rows", parsed.rejects.size()},
      {"after_sparse_filter", filtered.size()},
      {"users", splits.user_index.size()},
      {"pois", splits.poi_index.size()},
      {"categories", splits.category_set.size()},
      {"trajectories", trajectories.size()},
      {"train", splits.train.size()},
      {"valid", splits.valid.size()},
      {"test", splits.test.size()},
      {"dropped_valid", splits.dropped_valid},
      {"dropped_test", splits.dropped_test},
      {"stratified", stratified},
      {"inactive_users", cohorts.inactive.size()},
      {"normal_users", cohorts.normal.size()},
      {"active_users", cohorts.active.size()},
      {"zero_shot_users", cohorts.zero_shot.size()},
      {"config_digest", config_digest(config)},
  };
  std::string text = report.dump(2) + "\n";
  write_text(paths.preprocess_report, text);
  return text;
}

std::string cmd_build_memory(const AppConfig& config) {
  RunPaths paths(config.output_dir);
  fs::create_directories(paths.root);
  DirLock lock(paths.lock);
  write_resolved_config(paths.build_config, config);

  CorpusSplits splits = load_splits(paths.splits, paths.corpus);
  UserCohorts cohorts = load_cohorts(paths.cohorts);

  std::unique_ptr<ChatBackend> backend = make_backend(config.backend);
  LlmClient client(*backend, config.backend.retry, config.backend.max_in_flight);
  std::unique_ptr<EmbeddingProvider> embedder = make_embedder(config.embedding);
  MemoryStore store(embedding_dim(*embedder));

  Runner runner(splits, cohorts, config.run, client, *embedder, &store);
  std::optional<PromptLog> log;
  if (config.capture_prompts) {
    log.emplace(paths.experience_prompts, /*fresh=*/true);
    runner.set_prompt_sink(std::ref(*log));
  }

  runner.build_trajectory_pool();
  std::vector<PredictionOutcome> outcomes =
      runner.run_split("valid", Phase::experience, UserScope::exclude_zero_shot,
                       0, config.max_steps);
  write_outcomes(paths.experience_outcomes, "valid", outcomes);
  store.persist(paths.memory);
  write_llm_stats(paths.build_llm_stats, client.stats());

  json report = {
      {"trajectory_pool", store.trajectory_pool().size()},
      {"activity_lessons", store.count(kActivityLevel)},
      {"location_lessons", store.count(kLocationLevel)},
      {"experience_steps", outcomes.size()},
      {"counters", counters_json(runner.counters())},
      {"config_digest", config_digest(config)},
  };
  std::string text = report.dump(2) + "\n";
  write_text(paths.memory_report, text);
  return text;
}

std::string cmd_run(const AppConfig& config) {
  RunPaths paths(config.output_dir);
  fs::create_directories(paths.root);
  DirLock lock(paths.lock);
  write_resolved_config(paths.run_config, config);

  CorpusSplits splits = load_splits(paths.splits, paths.corpus);
  UserCohorts cohorts = load_cohorts(paths.cohorts);

  std::unique_ptr<ChatBackend> backend = make_backend(config.backend);
  LlmClient client(*backend, config.backend.retry, config.backend.max_in_flight);
  std::unique_ptr<EmbeddingProvider> embedder = make_embedder(config.embedding);

  std::optional<MemoryStore> store;
  bool loaded_store = false;
  if (fs::exists(paths.memory)) {
    store.emplace(MemoryStore::load(paths.memory));
    loaded_store = true;
    const std::size_t dim = embedding_dim(*embedder);
    if (store->dim() != dim) {
      throw ConfigError("memory store dimension " + std::to_string(store->dim()) +
                        " does not match embedding dimension " +
                        std::to_string(dim));
    }
  } else if (config.run.variant == Variant::full) {
    throw StateError("no memory store in " + paths.root.string() +
                     "; run build-memory first or pick another variant");
  } else {
    store.emplace(embedding_dim(*embedder));
  }

  Runner runner(splits, cohorts, config.run, client, *embedder, &*store);
  if (!loaded_store) runner.build_trajectory_pool();

  const UserScope scope = scope_from_string(config.scope);
  const std::string digest = config_digest(config);
  const std::string splits_digest =
      fnv1a64_hex(read_file(paths.splits) + read_file(paths.cohorts));

  const std::size_t available = runner.enumerate_steps("test", scope).size();
  const std::size_t total = config.max_steps == 0
                                ? available
                                : std::min(available, config.max_steps);

  std::size_t completed = 0;
  if (fs::exists(paths.checkpoint)) {
    json cp = read_json(paths.checkpoint);
    if (cp.value("schema", "") != kCheckpointSchema) {
      throw StateError("unrecognized checkpoint: " + paths.checkpoint.string());
    }
    if (cp.value("config_digest", "") != digest ||
        cp.value("splits_digest", "") != splits_digest ||
        cp.value("scope", "") != config.scope) {
      throw StateError(
          "existing artifacts in " + paths.root.string() +
          " came from a different configuration; remove checkpoint.json and "
          "outcomes.jsonl or use a fresh output_dir");
    }
    completed = cp.value("completed", std::size_t{0});
    if (completed > 0 && !fs::exists(paths.outcomes)) {
      throw StateError("checkpoint refers to missing outcomes file: " +
                       paths.outcomes.string());
    }
    if (completed > total) {
      throw StateError("checkpoint is ahead of the configured step count");
    }
  }

  std::optional<PromptLog> log;
  if (config.capture_prompts) {
    log.emplace(paths.prompts, /*fresh=*/completed == 0);
    runner.set_prompt_sink(std::ref(*log));
  }
  if (completed == 0) {
    write_outcomes(paths.outcomes, "test", {});
  }

  auto write_checkpoint = [&](std::size_t done_steps) {
    write_text(paths.checkpoint, json{{"schema", kCheckpointSchema},
                                      {"config_digest", digest},
                                      {"splits_digest", splits_digest},
                                      {"split", "test"},
                                      {"scope", config.scope},
                                      {"completed", done_steps},
                                      {"total", total},
                                      {"done", done_steps >= total}}
                                     .dump(2) +
                                     "\n");
  };

  constexpr std::size_t kChunk = 256;
  while (completed < total) {
    const std::size_t want = std::min(kChunk, total - completed);
    std::vector<PredictionOutcome> chunk =
        runner.run_split("test", Phase::evaluation, scope, completed, want);
    if (chunk.empty()) break;
    append_outcomes(paths.outcomes, chunk);
    completed += chunk.size();
    write_checkpoint(completed);
  }
  write_checkpoint(completed);
  write_llm_stats(paths.run_llm_stats, client.stats());

  json report = {
      {"completed", completed},
      {"total", total},
      {"scope", config.scope},
      {"variant", to_string(config.run.variant)},
      {"counters", counters_json(runner.counters())},
      {"config_digest", digest},
  };
  std::string text = report.dump(2) + "\n";
  write_text(paths.run_report, text);
  return text;
}

std::string cmd_eval(const AppConfig& config,
                     const std::optional<fs::path>& outcomes_path,
                     const std::string& format) {
  RunPaths paths(config.output_dir);
  const fs::path source = outcomes_path.value_or(paths.outcomes);
  std::vector<PredictionOutcome> outcomes = load_outcomes(source);
  std::map<std::string, MetricReport> reports =
      aggregate_cohorts(outcomes, kDefaultKs, config.run.macro_over_users);

  fs::create_directories(paths.reports_dir);
  write_text(paths.report_table, render_report(reports, "table"));
  write_text(paths.report_jsonl, render_report(reports, "jsonl"));
  return render_report(reports, format);
}

}  // namespace zhmf
