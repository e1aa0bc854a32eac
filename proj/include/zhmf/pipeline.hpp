#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "zhmf/features.hpp"
#include "zhmf/memory.hpp"
#include "zhmf/types.hpp"

namespace zhmf {

// Which parts of the two-stage pipeline are active. one_stage skips the
// category stage and ranks over every known place in a single call;
// no_reflection keeps the hierarchy but never retrieves or writes lessons.
enum class Variant { full, no_reflection, one_stage };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant variant);

struct RunConfig {
  Variant variant = Variant::full;
  std::size_t k = 20;                   // categories requested per step
  std::size_t reflection_n = 2;         // lessons retrieved per prompt
  std::size_t similar_n = 2;            // similar trajectories per prompt
  std::size_t recent_k = 10;            // recent-category window
  std::size_t movement_window = 5;      // hops in the movement section
  std::size_t profile_lines = 10;       // rendered lines per preference section
  std::size_t candidate_cap = 0;        // 0 = present every matching place
  std::size_t rank_limit = 20;          // ids requested from the ranking stage
  std::size_t location_trigger_topk = 10;  // miss depth that triggers a lesson
  double cell_size_deg = 0.01;
  bool online_reflection = false;  // keep learning during evaluation
  bool macro_over_users = false;   // reserved for the report stage
  int concurrency = 1;
};

// Throws ConfigError when a knob is out of range.
void validate(const RunConfig& config);

// --- Prompt assembly ---------------------------------------------------------

struct PromptSection {
  std::string name;
  std::string body;
};

struct PromptBundle {
  std::string level;  // kActivityLevel or kLocationLevel
  std::string tag;
  std::string system_text;
  std::vector<PromptSection> sections;

  // Section bodies joined by blank lines; this is the user message.
  std::string rendered() const;
  bool has_section(std::string_view name) const;
};

struct ActivityPromptInputs {
  std::string tag;
  std::string current_time;  // "Tue 2012-04-03 18:00"
  std::string person;        // "u42 (activity level: normal)"
  std::vector<std::string> long_term_lines;
  std::vector<std::string> recent_lines;  // oldest first
  std::vector<std::string> transition_lines;
  std::vector<std::string> similar_digests;
  std::vector<std::string> lessons;
  std::vector<std::string> allowed_categories;  // sorted unique names
  std::size_t k = 20;
};

struct LocationPromptInputs {
  std::string tag;
  std::string current_time;
  std::string person;
  std::vector<std::string> predicted_categories;  // empty in one-stage mode
  std::vector<std::string> recent_visit_lines;    // oldest first
  std::string time_pref_label;  // "afternoon, weekday"
  std::vector<std::string> time_pref_lines;
  std::vector<std::string> area_pref_lines;
  std::vector<std::string> movement_lines;
  std::vector<std::string> candidate_lines;  // nearest first
  std::vector<std::string> lessons;
  std::size_t limit = 20;
};

// Deterministic renderings; empty sections are omitted rather than rendered
// blank. Every prompt opens with its request-id header line.
PromptBundle assemble_activity_prompt(const ActivityPromptInputs& in);
PromptBundle assemble_location_prompt(const LocationPromptInputs& in);

// --- Step plumbing -----------------------------------------------------------

// Frequency order of the user's long-term profile, padded with the remaining
// known categories alphabetically, truncated to k. The deterministic stand-in
// when the category stage yields nothing usable.
std::vector<std::string> fallback_categories(const CategoryProfile& long_term,
                                             const std::set<std::string>& category_set,
                                             std::size_t k);

// "categories: Tue 08 Coffee Shop; Tue 09 Office" over the last <= 12 visits.
std::string trajectory_digest(const Trajectory& traj, const PoiIndex& pois);

// One-line summary of the prediction context; embedded for lesson retrieval
// and stored with each lesson.
std::string context_digest(const std::string& user, const std::string& stratum,
                           const std::vector<CheckIn>& prefix, const PoiIndex& pois);

struct PredictionOutcome {
  std::string user;
  std::string stratum;
  std::size_t traj_index = 0;  // position within the split
  std::size_t step_index = 0;  // position of the target inside the trajectory
  std::int64_t timestamp = 0;  // of the target check-in
  std::string target_poi;
  std::string target_category;
  std::vector<std::string> predicted_categories;
  bool category_hit = false;
  std::vector<std::string> ranked_pois;
  std::size_t rank = 0;  // 1-based position of the target; 0 = missed
  bool fallback_activity = false;
  bool fallback_location = false;
  int reask_count = 0;
  bool failed = false;  // the step aborted and scored as a miss
  std::string failure_reason;
};

inline constexpr std::string_view kOutcomesSchema = "zhmf-outcomes/1";

void write_outcomes(const std::filesystem::path& path, const std::string& split,
                    const std::vector<PredictionOutcome>& outcomes);
void append_outcomes(const std::filesystem::path& path,
                     const std::vector<PredictionOutcome>& outcomes);
std::vector<PredictionOutcome> load_outcomes(const std::filesystem::path& path);

struct RunCounters {
  std::uint64_t steps = 0;
  std::uint64_t failed_steps = 0;
  std::uint64_t activity_calls = 0;
  std::uint64_t activity_reasks = 0;
  std::uint64_t activity_fallbacks = 0;
  std::uint64_t location_calls = 0;
  std::uint64_t location_reasks = 0;
  std::uint64_t location_fallbacks = 0;
  std::uint64_t activity_triggers = 0;  // lesson conditions observed
  std::uint64_t location_triggers = 0;
  std::uint64_t reflections_stored = 0;
  std::uint64_t reflection_failures = 0;
};

// experience phases write lessons into the store; evaluation phases leave it
// frozen unless online_reflection is set.
enum class Phase { experience, evaluation };

enum class UserScope { all, exclude_zero_shot, zero_shot_only };

struct CapturedExchange {
  PromptBundle prompt;
  std::string response;
};

// Drives prediction steps over a split: per-user preference features are
// precomputed from the training history (zero-shot users deliberately get
// blank personal features), per-step context comes from the trajectory
// prefix, and the two model stages run with re-ask plus deterministic
// fallback so a step always yields a ranking.
class Runner {
 public:
  using PromptSink = std::function<void(const CapturedExchange&)>;

  // store may be null; lesson and similar-trajectory sections then stay
  // empty. client handles retries and concurrency limits.
  Runner(const CorpusSplits& splits, const UserCohorts& cohorts,
         const RunConfig& config, LlmClient& client, EmbeddingProvider& embedder,
         MemoryStore* store);

  void set_prompt_sink(PromptSink sink) { sink_ = std::move(sink); }

  // Summarises every training trajectory of non-holdout users into the
  // store's retrieval pool. Requires a store.
  void build_trajectory_pool();

  // Deterministic (trajectory, target) enumeration for a split under a
  // scope filter; trajectory indices refer to the unfiltered split.
  std::vector<std::pair<std::size_t, std::size_t>> enumerate_steps(
      std::string_view split, UserScope scope) const;

  PredictionOutcome run_step(std::string_view split, std::size_t traj_index,
                             std::size_t step_index, Phase phase,
                             std::vector<CapturedExchange>* capture = nullptr);

  // Runs enumerate_steps(split, scope)[skip : skip + max_steps] in order
  // (max_steps 0 = the rest). Steps run in parallel only when the store is
  // frozen; outcomes and captured prompts always emit in enumeration order.
  std::vector<PredictionOutcome> run_split(std::string_view split, Phase phase,
                                           UserScope scope, std::size_t skip = 0,
                                           std::size_t max_steps = 0);

  const RunCounters& counters() const { return counters_; }
  MemoryStore* store() { return store_; }

 private:
  struct UserFeatures {
    CategoryProfile long_term;
    TransitionStats trans;
    SpatialPreference spatial;
    TemporalPreference temporal;
  };

  const std::vector<Trajectory>& split_ref(std::string_view split) const;
  const UserFeatures& features_of(const std::string& user) const;
  std::string person_line(const std::string& user) const;
  bool reflections_active(Phase phase) const;

  const CorpusSplits& splits_;
  const UserCohorts& cohorts_;
  RunConfig config_;
  LlmClient& client_;
  EmbeddingProvider& embedder_;
  MemoryStore* store_;
  PromptSink sink_;
  std::vector<TimeBucket> buckets_;
  std::map<std::string, UserFeatures> features_;
  RunCounters counters_;
};

}  // namespace zhmf
