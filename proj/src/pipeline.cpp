#include "zhmf/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {
namespace {

using nlohmann::json;

// Shared across both Runner stages; a mutable member would force run_step to
// be non-const in the parallel path.
std::mutex g_counter_mutex;

std::vector<std::string> bullets(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const std::string& item : items) out.push_back("- " + item);
  return out;
}

std::vector<std::string> numbered(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.push_back(std::to_string(i + 1) + ". " + items[i]);
  }
  return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i != 0) out += sep;
    out += items[i];
  }
  return out;
}

void add_titled(PromptBundle& bundle, std::string name, std::string title,
                const std::vector<std::string>& lines) {
  if (lines.empty()) return;
  std::string body = std::move(title);
  for (const std::string& line : lines) {
    body += '\n';
    body += line;
  }
  bundle.sections.push_back({std::move(name), std::move(body)});
}

const Poi& poi_of(const PoiIndex& pois, const std::string& id) {
  auto it = pois.find(id);
  if (it == pois.end()) {
    throw StateError("check-in references unknown place: " + id);
  }
  return it->second;
}

constexpr std::size_t kDigestRecent = 5;
constexpr std::size_t kDigestVisits = 12;

}  // namespace

Variant variant_from_string(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no_reflection") return Variant::no_reflection;
  if (name == "one_stage") return Variant::one_stage;
  throw ConfigError("unknown variant: " + name +
                    " (expected full, no_reflection, or one_stage)");
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::full:
      return "full";
    case Variant::no_reflection:
      return "no_reflection";
    case Variant::one_stage:
      return "one_stage";
  }
  throw ConfigError("unknown variant value");
}

void validate(const RunConfig& config) {
  if (config.k == 0) throw ConfigError("k must be >= 1");
  if (config.rank_limit == 0) throw ConfigError("rank_limit must be >= 1");
  if (config.recent_k == 0) throw ConfigError("recent_k must be >= 1");
  if (config.profile_lines == 0) throw ConfigError("profile_lines must be >= 1");
  if (config.location_trigger_topk == 0) {
    throw ConfigError("location_trigger_topk must be >= 1");
  }
  if (config.cell_size_deg <= 0.0) throw ConfigError("cell_size_deg must be > 0");
  if (config.concurrency < 1) throw ConfigError("concurrency must be >= 1");
}

std::string PromptBundle::rendered() const {
  std::string out;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    if (i != 0) out += "\n\n";
    out += sections[i].body;
  }
  return out;
}

bool PromptBundle::has_section(std::string_view name) const {
  return std::any_of(sections.begin(), sections.end(),
                     [&](const PromptSection& s) { return s.name == name; });
}

PromptBundle assemble_activity_prompt(const ActivityPromptInputs& in) {
  PromptBundle bundle;
  bundle.level = std::string(kActivityLevel);
  bundle.tag = in.tag;
  bundle.system_text =
      "You predict a person's next check-in from their visit history. Reply "
      "exactly in the requested format.";
  bundle.sections.push_back({"header", std::string(kRequestIdPrefix) + in.tag});
  bundle.sections.push_back(
      {"task", "Task: predict the category of this person's next check-in."});
  bundle.sections.push_back(
      {"context",
       "Current time: " + in.current_time + "\nPerson: " + in.person});
  add_titled(bundle, "long_term_categories", "Long-term category preferences:",
             in.long_term_lines);
  add_titled(bundle, "recent_categories", "Recent categories, oldest first:",
             in.recent_lines);
  add_titled(bundle, "category_transitions", "Frequent category transitions:",
             in.transition_lines);
  add_titled(bundle, "similar_trajectories", "Similar past trajectories:",
             bullets(in.similar_digests));
  add_titled(bundle, "reflections", "Lessons from past category predictions:",
             bullets(in.lessons));
  add_titled(bundle, "allowed_categories", "Allowed categories:",
             numbered(in.allowed_categories));
  const std::size_t k = std::min(in.k, in.allowed_categories.size());
  std::string instruction =
      k == 1 ? "Reply with a fenced json array containing the single most "
               "likely next category. Use only names from the allowed list."
             : "Reply with a fenced json array of the " + std::to_string(k) +
                   " most likely next categories, most likely first. Use only "
                   "names from the allowed list.";
  bundle.sections.push_back({"instruction", std::move(instruction)});
  return bundle;
}

PromptBundle assemble_location_prompt(const LocationPromptInputs& in) {
  PromptBundle bundle;
  bundle.level = std::string(kLocationLevel);
  bundle.tag = in.tag;
  bundle.system_text =
      "You predict a person's next check-in from their visit history. Reply "
      "exactly in the requested format.";
  bundle.sections.push_back({"header", std::string(kRequestIdPrefix) + in.tag});
  bundle.sections.push_back(
      {"task", "Task: pick the exact place this person will visit next."});
  std::string context =
      "Current time: " + in.current_time + "\nPerson: " + in.person;
  if (!in.predicted_categories.empty()) {
    context += "\nPredicted next categories: " + join(in.predicted_categories, ", ");
  }
  bundle.sections.push_back({"context", std::move(context)});
  add_titled(bundle, "recent_visits", "Recent visits, oldest first:",
             in.recent_visit_lines);
  add_titled(bundle, "time_preferences",
             "Usual places at this time (" + in.time_pref_label + "):",
             in.time_pref_lines);
  add_titled(bundle, "area_preferences", "Frequently visited areas:",
             in.area_pref_lines);
  add_titled(bundle, "movement_history", "Movement within this trip:",
             in.movement_lines);
  add_titled(bundle, "reflections", "Lessons from past place predictions:",
             bullets(in.lessons));
  add_titled(bundle, "candidates", "Candidate places, nearest first:",
             in.candidate_lines);
  const std::size_t limit = std::min(in.limit, in.candidate_lines.size());
  bundle.sections.push_back(
      {"instruction",
       "Reply with a fenced json array of candidate ids ranked from most to "
       "least likely. Use only ids shown above. List at most " +
           std::to_string(limit) + " ids."});
  return bundle;
}

std::vector<std::string> fallback_categories(const CategoryProfile& long_term,
                                             const std::set<std::string>& category_set,
                                             std::size_t k) {
  std::vector<std::string> out;
  std::set<std::string> used;
  for (const auto& entry : long_term.entries) {
    if (out.size() >= k) break;
    if (category_set.count(entry.category) && used.insert(entry.category).second) {
      out.push_back(entry.category);
    }
  }
  for (const std::string& name : category_set) {
    if (out.size() >= k) break;
    if (used.insert(name).second) out.push_back(name);
  }
  return out;
}

std::string trajectory_digest(const Trajectory& traj, const PoiIndex& pois) {
  std::string out = "categories: ";
  const std::size_t n = traj.checkins.size();
  const std::size_t start = n > kDigestVisits ? n - kDigestVisits : 0;
  for (std::size_t i = start; i < n; ++i) {
    if (i != start) out += "; ";
    const CheckIn& c = traj.checkins[i];
    out += format_utc_short(c.timestamp) + " " + poi_of(pois, c.poi).category;
  }
  return out;
}

std::string context_digest(const std::string& user, const std::string& stratum,
                           const std::vector<CheckIn>& prefix,
                           const PoiIndex& pois) {
  if (prefix.empty()) throw DataError("context requires a non-empty prefix");
  const CheckIn& last = prefix.back();
  const Poi& here = poi_of(pois, last.poi);
  std::vector<std::string> recent;
  const std::size_t start =
      prefix.size() > kDigestRecent ? prefix.size() - kDigestRecent : 0;
  for (std::size_t i = start; i < prefix.size(); ++i) {
    recent.push_back(poi_of(pois, prefix[i].poi).category);
  }
  return "user=" + user + " stratum=" + stratum +
         " time=" + format_utc(last.timestamp) +
         " last_category=" + here.category + " recent=[" + join(recent, ", ") +
         "] area=(" + fmt_fixed(here.lat, 2) + ", " + fmt_fixed(here.lon, 2) + ")";
}

// --- Outcome persistence -------------------------------------------------------

namespace {

json outcome_to_json(const PredictionOutcome& o) {
  return json{{"user", o.user},
              {"stratum", o.stratum},
              {"traj", o.traj_index},
              {"step", o.step_index},
              {"ts", o.timestamp},
              {"target_poi", o.target_poi},
              {"target_category", o.target_category},
              {"predicted_categories", o.predicted_categories},
              {"category_hit", o.category_hit},
              {"ranked_pois", o.ranked_pois},
              {"rank", o.rank},
              {"fallback_activity", o.fallback_activity},
              {"fallback_location", o.fallback_location},
              {"reask_count", o.reask_count},
              {"failed", o.failed},
              {"failure_reason", o.failure_reason}};
}

PredictionOutcome outcome_from_json(const json& row) {
  PredictionOutcome o;
  o.user = row.at("user").get<std::string>();
  o.stratum = row.at("stratum").get<std::string>();
  o.traj_index = row.at("traj").get<std::size_t>();
  o.step_index = row.at("step").get<std::size_t>();
  o.timestamp = row.at("ts").get<std::int64_t>();
  o.target_poi = row.at("target_poi").get<std::string>();
  o.target_category = row.at("target_category").get<std::string>();
  o.predicted_categories =
      row.at("predicted_categories").get<std::vector<std::string>>();
  o.category_hit = row.at("category_hit").get<bool>();
  o.ranked_pois = row.at("ranked_pois").get<std::vector<std::string>>();
  o.rank = row.at("rank").get<std::size_t>();
  o.fallback_activity = row.at("fallback_activity").get<bool>();
  o.fallback_location = row.at("fallback_location").get<bool>();
  o.reask_count = row.at("reask_count").get<int>();
  o.failed = row.at("failed").get<bool>();
  o.failure_reason = row.at("failure_reason").get<std::string>();
  return o;
}

}  // namespace

void write_outcomes(const std::filesystem::path& path, const std::string& split,
                    const std::vector<PredictionOutcome>& outcomes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write outcomes file: " + path.string());
  out << json{{"schema", kOutcomesSchema}, {"split", split}}.dump() << '\n';
  for (const PredictionOutcome& o : outcomes) {
    out << outcome_to_json(o).dump() << '\n';
  }
  if (!out) throw IoError("failed writing outcomes file: " + path.string());
}

void append_outcomes(const std::filesystem::path& path,
                     const std::vector<PredictionOutcome>& outcomes) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to outcomes file: " + path.string());
  for (const PredictionOutcome& o : outcomes) {
    out << outcome_to_json(o).dump() << '\n';
  }
  if (!out) throw IoError("failed writing outcomes file: " + path.string());
}

std::vector<PredictionOutcome> load_outcomes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open outcomes file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw StateError("outcomes file is empty: " + path.string());
  }
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema", "") != kOutcomesSchema) {
    throw StateError("outcomes file missing schema header: " + path.string());
  }
  std::vector<PredictionOutcome> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded()) {
      throw StateError("corrupt outcome at " + path.string() + ":" +
                       std::to_string(line_no));
    }
    try {
      out.push_back(outcome_from_json(row));
    } catch (const json::exception&) {
      throw StateError("corrupt outcome at " + path.string() + ":" +
                       std::to_string(line_no));
    }
  }
  return out;
}

// --- Runner --------------------------------------------------------------------

Runner::Runner(const CorpusSplits& splits, const UserCohorts& cohorts,
               const RunConfig& config, LlmClient& client,
               EmbeddingProvider& embedder, MemoryStore* store)
    : splits_(splits),
      cohorts_(cohorts),
      config_(config),
      client_(client),
      embedder_(embedder),
      store_(store),
      buckets_(default_time_buckets()) {
  validate(config_);
  for (const auto& [user, indices] : splits_.user_index) {
    UserFeatures& f = features_[user];
    if (cohorts_.zero_shot.count(user)) continue;  // stays blank by design
    std::vector<CheckIn> history;
    std::vector<Trajectory> trajs;
    for (std::size_t i : indices) {
      const Trajectory& t = splits_.train[i];
      history.insert(history.end(), t.checkins.begin(), t.checkins.end());
      trajs.push_back(t);
    }
    f.long_term = long_term_profile(history, splits_.poi_index);
    f.trans = transitions(trajs, splits_.poi_index);
    f.spatial = spatial_preference(history, splits_.poi_index, config_.cell_size_deg);
    f.temporal = temporal_preference(history, splits_.poi_index, buckets_);
  }
}

void Runner::build_trajectory_pool() {
  if (store_ == nullptr) {
    throw StateError("trajectory pool requires a memory store");
  }
  for (std::size_t i = 0; i < splits_.train.size(); ++i) {
    const Trajectory& t = splits_.train[i];
    if (cohorts_.zero_shot.count(t.user)) continue;
    std::string digest = trajectory_digest(t, splits_.poi_index);
    store_->add_trajectory({t.user, i, digest, embedder_.embed(digest)});
  }
}

const std::vector<Trajectory>& Runner::split_ref(std::string_view split) const {
  if (split == "train") return splits_.train;
  if (split == "valid") return splits_.valid;
  if (split == "test") return splits_.test;
  throw ConfigError("unknown split: " + std::string(split));
}

const Runner::UserFeatures& Runner::features_of(const std::string& user) const {
  static const UserFeatures kEmpty;
  auto it = features_.find(user);
  return it == features_.end() ? kEmpty : it->second;
}

std::string Runner::person_line(const std::string& user) const {
  std::string stratum = cohorts_.stratum_of(user);
  if (stratum == "unseen") return user + " (new user)";
  if (stratum == "unknown") return user;
  return user + " (activity level: " + stratum + ")";
}

bool Runner::reflections_active(Phase phase) const {
  return phase == Phase::experience ||
         (phase == Phase::evaluation && config_.online_reflection);
}

std::vector<std::pair<std::size_t, std::size_t>> Runner::enumerate_steps(
    std::string_view split, UserScope scope) const {
  const std::vector<Trajectory>& trajs = split_ref(split);
  std::vector<std::pair<std::size_t, std::size_t>> steps;
  for (std::size_t ti = 0; ti < trajs.size(); ++ti) {
    const bool holdout = cohorts_.zero_shot.count(trajs[ti].user) != 0;
    if (scope == UserScope::exclude_zero_shot && holdout) continue;
    if (scope == UserScope::zero_shot_only && !holdout) continue;
    for (std::size_t si = 1; si < trajs[ti].checkins.size(); ++si) {
      steps.emplace_back(ti, si);
    }
  }
  return steps;
}

PredictionOutcome Runner::run_step(std::string_view split, std::size_t traj_index,
                                   std::size_t step_index, Phase phase,
                                   std::vector<CapturedExchange>* capture) {
  const std::vector<Trajectory>& trajs = split_ref(split);
  if (traj_index >= trajs.size() || step_index == 0 ||
      step_index >= trajs[traj_index].checkins.size()) {
    throw ConfigError("prediction step out of range");
  }
  const Trajectory& traj = trajs[traj_index];
  const std::vector<CheckIn> prefix(traj.checkins.begin(),
                                    traj.checkins.begin() +
                                        static_cast<std::ptrdiff_t>(step_index));
  const CheckIn& target = traj.checkins[step_index];
  const PoiIndex& pois = splits_.poi_index;

  PredictionOutcome outcome;
  outcome.user = traj.user;
  outcome.stratum = cohorts_.stratum_of(traj.user);
  outcome.traj_index = traj_index;
  outcome.step_index = step_index;
  outcome.timestamp = target.timestamp;
  outcome.target_poi = target.poi;
  outcome.target_category = poi_of(pois, target.poi).category;

  const UserFeatures& f = features_of(traj.user);
  const CheckIn& last = prefix.back();
  const Poi& here = poi_of(pois, last.poi);
  const GeoPoint anchor{here.lat, here.lon};
  const std::string tag_base = std::string(split) + ":t" +
                               std::to_string(traj_index) + ":s" +
                               std::to_string(step_index);
  const std::string now_text = format_utc(last.timestamp);
  const std::string person = person_line(traj.user);
  const std::string digest =
      context_digest(traj.user, outcome.stratum, prefix, pois);

  // Lazily computed; both stages and the lesson writer share it.
  std::optional<EmbeddingVector> ctx_embedding;
  auto context_embedding = [&]() -> const EmbeddingVector& {
    if (!ctx_embedding) ctx_embedding = embedder_.embed(digest);
    return *ctx_embedding;
  };
  const bool lessons_on = store_ != nullptr && config_.variant != Variant::no_reflection &&
                          config_.reflection_n > 0;

  auto call_stage = [&](const PromptBundle& bundle) {
    CompletionRequest request;
    request.system_text = bundle.system_text;
    request.user_text = bundle.rendered();
    std::string text = client_.complete(request).text;
    if (capture != nullptr) capture->push_back({bundle, text});
    return text;
  };
  auto count = [&](auto member) {
    std::lock_guard lock(g_counter_mutex);
    ++(counters_.*member);
  };
  count(&RunCounters::steps);

  try {
    // Stage one: which kind of place comes next.
    std::vector<std::string> predicted;
    if (config_.variant != Variant::one_stage) {
      ActivityPromptInputs ain;
      ain.tag = tag_base + ":activity";
      ain.current_time = now_text;
      ain.person = person;
      ain.long_term_lines = f.long_term.lines(config_.profile_lines);
      const std::size_t rstart =
          prefix.size() > config_.recent_k ? prefix.size() - config_.recent_k : 0;
      std::vector<std::string> recent;
      for (std::size_t i = rstart; i < prefix.size(); ++i) {
        recent.push_back(format_utc_short(prefix[i].timestamp) + " " +
                         poi_of(pois, prefix[i].poi).category);
      }
      ain.recent_lines = numbered(recent);
      ain.transition_lines = f.trans.top_lines(config_.profile_lines);
      if (store_ != nullptr && config_.similar_n > 0 &&
          !store_->trajectory_pool().empty()) {
        Trajectory prefix_traj{traj.user, prefix, false};
        const std::string prefix_digest = trajectory_digest(prefix_traj, pois);
        for (const TrajectoryEntry& entry : retrieve_similar_trajectories(
                 *store_, embedder_.embed(prefix_digest), config_.similar_n)) {
          ain.similar_digests.push_back(entry.digest);
        }
      }
      if (lessons_on && store_->count(kActivityLevel) > 0) {
        for (const ReflectionRecord& r :
             retrieve_top_n(*store_, context_embedding(), kActivityLevel,
                            config_.reflection_n)) {
          ain.lessons.push_back(r.lesson);
        }
      }
      ain.allowed_categories.assign(splits_.category_set.begin(),
                                    splits_.category_set.end());
      ain.k = config_.k;
      const std::size_t k_eff = std::min(config_.k, ain.allowed_categories.size());

      count(&RunCounters::activity_calls);
      ParsedCategoryResponse parsed =
          parse_categories(call_stage(assemble_activity_prompt(ain)),
                           splits_.category_set, k_eff);
      if (!parsed.ok()) {
        ain.tag += ":retry";
        count(&RunCounters::activity_reasks);
        ++outcome.reask_count;
        parsed = parse_categories(call_stage(assemble_activity_prompt(ain)),
                                  splits_.category_set, k_eff);
      }
      if (parsed.ok()) {
        predicted = parsed.ranked;
      } else {
        predicted = fallback_categories(f.long_term, splits_.category_set, k_eff);
        outcome.fallback_activity = true;
        count(&RunCounters::activity_fallbacks);
      }
      outcome.predicted_categories = predicted;
      outcome.category_hit =
          std::find(predicted.begin(), predicted.end(), outcome.target_category) !=
          predicted.end();
    }

    // Stage two: which exact place, restricted to the predicted kinds.
    const std::size_t cap =
        config_.candidate_cap == 0 ? pois.size() : config_.candidate_cap;
    const CandidateSet candidates = build_candidates(anchor, predicted, pois, cap);
    const std::vector<std::string> candidate_ids = candidates.ids();

    LocationPromptInputs lin;
    lin.tag = tag_base + ":location";
    lin.current_time = now_text;
    lin.person = person;
    lin.predicted_categories = predicted;
    const std::size_t vstart =
        prefix.size() > config_.recent_k ? prefix.size() - config_.recent_k : 0;
    std::vector<std::string> visits;
    for (std::size_t i = vstart; i < prefix.size(); ++i) {
      const Poi& p = poi_of(pois, prefix[i].poi);
      visits.push_back(format_utc(prefix[i].timestamp) + " " + p.id + " (" +
                       p.category + ")");
    }
    lin.recent_visit_lines = numbered(visits);
    const int bucket = bucket_of(last.timestamp, buckets_);
    const bool weekend = is_weekend(last.timestamp);
    lin.time_pref_label =
        buckets_[static_cast<std::size_t>(bucket)].name +
        (weekend ? std::string(", weekend") : std::string(", weekday"));
    lin.time_pref_lines =
        f.temporal.lines_for(bucket, weekend, pois, config_.profile_lines);
    lin.area_pref_lines = f.spatial.top_lines(config_.profile_lines);
    lin.movement_lines =
        movement_summary(prefix, pois, config_.movement_window).lines(pois);
    lin.candidate_lines = candidates.lines();
    if (lessons_on && store_->count(kLocationLevel) > 0) {
      for (const ReflectionRecord& r : retrieve_top_n(
               *store_, context_embedding(), kLocationLevel, config_.reflection_n)) {
        lin.lessons.push_back(r.lesson);
      }
    }
    lin.limit = config_.rank_limit;

    count(&RunCounters::location_calls);
    ParsedPoiResponse ranked = parse_pois(call_stage(assemble_location_prompt(lin)),
                                          candidate_ids, config_.rank_limit);
    if (!ranked.ok()) {
      lin.tag += ":retry";
      count(&RunCounters::location_reasks);
      ++outcome.reask_count;
      ranked = parse_pois(call_stage(assemble_location_prompt(lin)), candidate_ids,
                          config_.rank_limit);
    }
    if (ranked.ok()) {
      outcome.ranked_pois = ranked.ranked;
    } else {
      const std::size_t limit = std::min(config_.rank_limit, candidate_ids.size());
      outcome.ranked_pois.assign(candidate_ids.begin(),
                                 candidate_ids.begin() +
                                     static_cast<std::ptrdiff_t>(limit));
      outcome.fallback_location = true;
      count(&RunCounters::location_fallbacks);
    }
    auto hit = std::find(outcome.ranked_pois.begin(), outcome.ranked_pois.end(),
                         outcome.target_poi);
    outcome.rank = hit == outcome.ranked_pois.end()
                       ? 0
                       : static_cast<std::size_t>(hit - outcome.ranked_pois.begin()) + 1;

    // Lessons are written only while the store is learning, and only about
    // genuine misses.
    if (reflections_active(phase) && store_ != nullptr &&
        config_.variant != Variant::no_reflection) {
      if (config_.variant != Variant::one_stage && !outcome.category_hit) {
        count(&RunCounters::activity_triggers);
        ReflectionInput input{traj.user, tag_base + ":reflect_a", digest,
                              join(predicted, ", "), outcome.target_category};
        if (reflect_activity(*store_, client_, embedder_, input)) {
          count(&RunCounters::reflections_stored);
        } else {
          count(&RunCounters::reflection_failures);
        }
      }
      const std::size_t depth =
          std::min(config_.location_trigger_topk, outcome.ranked_pois.size());
      if (outcome.rank == 0 || outcome.rank > depth) {
        count(&RunCounters::location_triggers);
        std::vector<std::string> top(outcome.ranked_pois.begin(),
                                     outcome.ranked_pois.begin() +
                                         static_cast<std::ptrdiff_t>(depth));
        ReflectionInput input{traj.user, tag_base + ":reflect_l", digest,
                              join(top, ", "), outcome.target_poi};
        if (reflect_location(*store_, client_, embedder_, input)) {
          count(&RunCounters::reflections_stored);
        } else {
          count(&RunCounters::reflection_failures);
        }
      }
    }
  } catch (const BackendError& e) {
    outcome.failed = true;
    outcome.failure_reason = e.what();
    outcome.ranked_pois.clear();
    outcome.rank = 0;
    count(&RunCounters::failed_steps);
  } catch (const DataError& e) {
    outcome.failed = true;
    outcome.failure_reason = e.what();
    outcome.ranked_pois.clear();
    outcome.rank = 0;
    count(&RunCounters::failed_steps);
  }
  return outcome;
}

std::vector<PredictionOutcome> Runner::run_split(std::string_view split, Phase phase,
                                                 UserScope scope, std::size_t skip,
                                                 std::size_t max_steps) {
  std::vector<std::pair<std::size_t, std::size_t>> steps =
      enumerate_steps(split, scope);
  if (skip >= steps.size()) return {};
  steps.erase(steps.begin(), steps.begin() + static_cast<std::ptrdiff_t>(skip));
  if (max_steps != 0 && steps.size() > max_steps) steps.resize(max_steps);

  std::vector<PredictionOutcome> outcomes(steps.size());
  std::vector<std::vector<CapturedExchange>> captured(steps.size());

  const bool parallel = config_.concurrency > 1 && !reflections_active(phase);
  if (parallel) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= steps.size()) return;
        try {
          outcomes[i] = run_step(split, steps[i].first, steps[i].second, phase,
                                 sink_ ? &captured[i] : nullptr);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> threads;
    const std::size_t nthreads = std::min<std::size_t>(
        static_cast<std::size_t>(config_.concurrency), steps.size());
    threads.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
  } else {
    for (std::size_t i = 0; i < steps.size(); ++i) {
      outcomes[i] = run_step(split, steps[i].first, steps[i].second, phase,
                             sink_ ? &captured[i] : nullptr);
    }
  }
  if (sink_) {
    for (const auto& exchanges : captured) {
      for (const CapturedExchange& exchange : exchanges) sink_(exchange);
    }
  }
  return outcomes;
}

}  // namespace zhmf
