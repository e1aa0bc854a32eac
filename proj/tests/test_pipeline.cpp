#include "zhmf/pipeline.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "test_helpers.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/llm.hpp"
#include "zhmf/memory.hpp"
#include "zhmf/util.hpp"

using namespace zhmf;

namespace {

// Tue 2012-04-03 18:00:00 UTC.
constexpr std::int64_t kTue = 1333476000;

PoiIndex fixture_pois() {
  PoiIndex pois;
  pois["c1"] = {"c1", "Coffee Shop", 40.000, -74.000};
  pois["c2"] = {"c2", "Coffee Shop", 40.010, -74.010};
  pois["o1"] = {"o1", "Office", 40.001, -74.000};
  pois["g1"] = {"g1", "Gym", 40.002, -74.000};
  pois["b1"] = {"b1", "Bar", 40.003, -74.000};
  return pois;
}

Trajectory traj_of(const std::string& user,
                   std::vector<std::pair<std::string, std::int64_t>> visits) {
  Trajectory t;
  t.user = user;
  for (const auto& [poi, ts] : visits) t.checkins.push_back({user, poi, ts});
  return t;
}

// Two regular users plus one zero-shot holdout user whose training data is
// present but must be ignored by personal features and the trajectory pool.
CorpusSplits fixture_splits() {
  CorpusSplits s;
  s.poi_index = fixture_pois();
  s.category_set = {"Bar", "Coffee Shop", "Gym", "Office"};
  s.train.push_back(traj_of("alice", {{"c1", kTue - 9 * 3600},
                                      {"o1", kTue - 8 * 3600},
                                      {"g1", kTue - 7 * 3600}}));
  s.train.push_back(traj_of("alice", {{"c1", kTue - 30 * 3600},
                                      {"o1", kTue - 29 * 3600}}));
  s.train.push_back(traj_of("bob", {{"b1", kTue - 10 * 3600},
                                    {"c2", kTue - 9 * 3600}}));
  s.train.push_back(traj_of("zoe", {{"c2", kTue - 50 * 3600},
                                    {"c1", kTue - 49 * 3600}}));
  s.user_index = {{"alice", {0, 1}}, {"bob", {2}}, {"zoe", {3}}};
  s.valid.push_back(traj_of("alice", {{"c1", kTue - 3600},
                                      {"o1", kTue},
                                      {"g1", kTue + 3600}}));
  s.test.push_back(traj_of("alice", {{"c1", kTue},
                                     {"o1", kTue + 3600},
                                     {"b1", kTue + 7200}}));
  s.test.push_back(traj_of("zoe", {{"c2", kTue + 3600}, {"c1", kTue + 7200}}));
  return s;
}

UserCohorts fixture_cohorts() {
  UserCohorts c;
  c.active = {"alice"};
  c.normal = {"bob"};
  c.zero_shot = {"zoe"};
  return c;
}

struct TagParts {
  std::string split;
  std::size_t traj = 0;
  std::size_t step = 0;
  std::string stage;
};

TagParts parse_tag(const std::string& tag) {
  const auto parts = split(tag, ':');
  REQUIRE(parts.size() >= 4);
  TagParts p;
  p.split = parts[0];
  p.traj = std::stoul(parts[1].substr(1));
  p.step = std::stoul(parts[2].substr(1));
  p.stage = parts[3];
  return p;
}

// Answers every stage with exactly the right category / place for the step
// named in the request tag.
class PerfectOracle {
 public:
  explicit PerfectOracle(const CorpusSplits& splits) : splits_(&splits) {}

  std::string operator()(const CompletionRequest& req) const {
    const TagParts tag = parse_tag(extract_request_tag(req.user_text));
    const std::vector<Trajectory>* trajs = nullptr;
    if (tag.split == "train") trajs = &splits_->train;
    if (tag.split == "valid") trajs = &splits_->valid;
    if (tag.split == "test") trajs = &splits_->test;
    REQUIRE(trajs != nullptr);
    const CheckIn& target = (*trajs)[tag.traj].checkins[tag.step];
    if (tag.stage == "activity") {
      return render_ranked_list({splits_->poi_index.at(target.poi).category});
    }
    if (tag.stage == "location") {
      return render_ranked_list({target.poi});
    }
    return "Lesson: should not be asked";
  }

 private:
  const CorpusSplits* splits_;
};

std::filesystem::path goldens_dir() {
  return std::filesystem::path(ZHMF_TEST_DIR) / "goldens";
}

void check_golden(const std::string& name, const std::string& content) {
  const auto path = goldens_dir() / name;
  if (std::getenv("ZHMF_REGEN_GOLDENS") != nullptr) {
    std::filesystem::create_directories(goldens_dir());
    zhmf_test::write_file(path, content);
  }
  REQUIRE_MESSAGE(std::filesystem::exists(path),
                  "missing golden file " << path.string()
                                         << " (set ZHMF_REGEN_GOLDENS=1)");
  CHECK(content == zhmf_test::read_file(path));
}

}  // namespace

TEST_CASE("variant names round trip") {
  CHECK(variant_from_string("full") == Variant::full);
  CHECK(variant_from_string("no_reflection") == Variant::no_reflection);
  CHECK(variant_from_string("one_stage") == Variant::one_stage);
  CHECK(to_string(Variant::full) == "full");
  CHECK(to_string(Variant::no_reflection) == "no_reflection");
  CHECK(to_string(Variant::one_stage) == "one_stage");
  CHECK_THROWS_AS(variant_from_string("ensemble"), ConfigError);
}

TEST_CASE("run config defaults are valid and knobs are range checked") {
  RunConfig config;
  CHECK(config.k == 20);
  CHECK(config.reflection_n == 2);
  CHECK(config.rank_limit == 20);
  CHECK(config.location_trigger_topk == 10);
  CHECK_NOTHROW(validate(config));

  auto broken = [](auto mutate) {
    RunConfig c;
    mutate(c);
    CHECK_THROWS_AS(validate(c), ConfigError);
  };
  broken([](RunConfig& c) { c.k = 0; });
  broken([](RunConfig& c) { c.rank_limit = 0; });
  broken([](RunConfig& c) { c.recent_k = 0; });
  broken([](RunConfig& c) { c.profile_lines = 0; });
  broken([](RunConfig& c) { c.location_trigger_topk = 0; });
  broken([](RunConfig& c) { c.cell_size_deg = 0.0; });
  broken([](RunConfig& c) { c.concurrency = 0; });
}

TEST_CASE("fallback categories follow profile order then alphabetical pad") {
  CategoryProfile profile;
  profile.entries = {{"Office", 5, 0.5}, {"Gym", 3, 0.3}, {"Retired", 2, 0.2}};
  const std::set<std::string> cats = {"Bar", "Coffee Shop", "Gym", "Office"};

  // "Retired" is no longer a known category and must be skipped.
  CHECK(fallback_categories(profile, cats, 10) ==
        std::vector<std::string>{"Office", "Gym", "Bar", "Coffee Shop"});
  CHECK(fallback_categories(profile, cats, 3) ==
        std::vector<std::string>{"Office", "Gym", "Bar"});
  CHECK(fallback_categories(profile, cats, 1) ==
        std::vector<std::string>{"Office"});
  // Blank profile (a zero-shot user) degrades to the alphabetical list.
  CHECK(fallback_categories(CategoryProfile{}, cats, 2) ==
        std::vector<std::string>{"Bar", "Coffee Shop"});
}

TEST_CASE("trajectory digests cover the last twelve visits") {
  const PoiIndex pois = fixture_pois();
  const Trajectory short_traj =
      traj_of("alice", {{"c1", kTue}, {"o1", kTue + 3600}});
  CHECK(trajectory_digest(short_traj, pois) ==
        "categories: Tue 18 Coffee Shop; Tue 19 Office");

  std::vector<std::pair<std::string, std::int64_t>> visits;
  for (int i = 0; i < 14; ++i) visits.push_back({"c1", kTue + i * 60});
  const Trajectory long_traj = traj_of("alice", visits);
  const std::string digest = trajectory_digest(long_traj, pois);
  std::size_t separators = 0;
  for (std::size_t at = digest.find(';'); at != std::string::npos;
       at = digest.find(';', at + 1)) {
    ++separators;
  }
  CHECK(separators == 11);  // twelve visits
}

TEST_CASE("context digests summarise the prediction moment") {
  const PoiIndex pois = fixture_pois();
  std::vector<CheckIn> prefix = {{"alice", "c1", kTue}};
  CHECK(context_digest("alice", "active", prefix, pois) ==
        "user=alice stratum=active time=Tue 2012-04-03 18:00 "
        "last_category=Coffee Shop recent=[Coffee Shop] area=(40.00, -74.00)");

  // Only the last five categories enter the digest.
  std::vector<CheckIn> longer;
  for (int i = 0; i < 6; ++i) longer.push_back({"alice", "o1", kTue + i * 60});
  longer.push_back({"alice", "g1", kTue + 600});
  const std::string digest = context_digest("alice", "active", longer, pois);
  CHECK(digest.find("recent=[Office, Office, Office, Office, Gym]") !=
        std::string::npos);

  CHECK_THROWS_AS(context_digest("alice", "active", {}, pois), DataError);
}

TEST_CASE("activity prompts render present sections only") {
  ActivityPromptInputs in;
  in.tag = "test:t0:s1:activity";
  in.current_time = "Tue 2012-04-03 18:00";
  in.person = "alice (activity level: active)";
  in.allowed_categories = {"Bar", "Coffee Shop", "Gym"};
  in.k = 20;

  const PromptBundle sparse = assemble_activity_prompt(in);
  CHECK(sparse.level == "activity");
  CHECK(sparse.tag == in.tag);
  const std::string text = sparse.rendered();
  CHECK(text.rfind("request-id: test:t0:s1:activity", 0) == 0);
  CHECK(text.find("Task: predict the category") != std::string::npos);
  CHECK(text.find("Current time: Tue 2012-04-03 18:00") != std::string::npos);
  CHECK_FALSE(sparse.has_section("long_term_categories"));
  CHECK_FALSE(sparse.has_section("reflections"));
  CHECK(text.find("Lessons from past") == std::string::npos);
  // k is clamped to the number of allowed categories.
  CHECK(text.find("fenced json array of the 3 most likely") != std::string::npos);

  in.k = 1;
  const PromptBundle single = assemble_activity_prompt(in);
  CHECK(single.rendered().find("the single most likely next category") !=
        std::string::npos);

  in.lessons = {"watch the clock"};
  in.k = 2;
  const PromptBundle with_lessons = assemble_activity_prompt(in);
  CHECK(with_lessons.has_section("reflections"));
  CHECK(with_lessons.rendered().find(
            "Lessons from past category predictions:\n- watch the clock") !=
        std::string::npos);
}

TEST_CASE("location prompts mention predicted categories only when present") {
  LocationPromptInputs in;
  in.tag = "test:t0:s1:location";
  in.current_time = "Tue 2012-04-03 18:00";
  in.person = "zoe (new user)";
  in.time_pref_label = "evening, weekday";
  in.candidate_lines = {"1. id=c1 category=Coffee Shop distance_km=0.000",
                        "2. id=o1 category=Office distance_km=0.111"};
  in.limit = 20;

  const PromptBundle open = assemble_location_prompt(in);
  CHECK(open.level == "location");
  const std::string text = open.rendered();
  CHECK(text.rfind("request-id: test:t0:s1:location", 0) == 0);
  CHECK(text.find("Predicted next categories") == std::string::npos);
  CHECK_FALSE(open.has_section("time_preferences"));
  // The id budget is clamped to what is actually on offer.
  CHECK(text.find("List at most 2 ids.") != std::string::npos);

  in.predicted_categories = {"Coffee Shop", "Office"};
  in.time_pref_lines = {"1. c1 (Coffee Shop): 3 visits"};
  const PromptBundle guided = assemble_location_prompt(in);
  const std::string guided_text = guided.rendered();
  CHECK(guided_text.find("Predicted next categories: Coffee Shop, Office") !=
        std::string::npos);
  CHECK(guided_text.find("Usual places at this time (evening, weekday):") !=
        std::string::npos);
}

TEST_CASE("fully populated prompts match their golden renderings") {
  ActivityPromptInputs ain;
  ain.tag = "test:t0:s1:activity";
  ain.current_time = "Tue 2012-04-03 18:00";
  ain.person = "alice (activity level: active)";
  ain.long_term_lines = {"1. Coffee Shop: 2 visits (50.0%)",
                         "2. Office: 2 visits (50.0%)"};
  ain.recent_lines = {"1. Tue 17 Coffee Shop", "2. Tue 18 Office"};
  ain.transition_lines = {"1. Coffee Shop -> Office: 2"};
  ain.similar_digests = {"categories: Tue 08 Coffee Shop; Tue 09 Office"};
  ain.lessons = {"weekday evenings end at the gym"};
  ain.allowed_categories = {"Bar", "Coffee Shop", "Gym", "Office"};
  ain.k = 3;
  check_golden("activity_prompt.txt", assemble_activity_prompt(ain).rendered());

  LocationPromptInputs lin;
  lin.tag = "test:t0:s1:location";
  lin.current_time = "Tue 2012-04-03 18:00";
  lin.person = "alice (activity level: active)";
  lin.predicted_categories = {"Office", "Gym"};
  lin.recent_visit_lines = {"1. Tue 2012-04-03 17:00 c1 (Coffee Shop)"};
  lin.time_pref_label = "evening, weekday";
  lin.time_pref_lines = {"1. o1 (Office): 2 visits"};
  lin.area_pref_lines = {"1. area around (40.005, -74.005): 4 visits"};
  lin.movement_lines = {"1. c1 (Coffee Shop) -> o1 (Office): 0.111 km, 60 min"};
  lin.candidate_lines = {"1. id=o1 category=Office distance_km=0.111",
                         "2. id=g1 category=Gym distance_km=0.222"};
  lin.lessons = {"stay within walking distance"};
  lin.limit = 5;
  check_golden("location_prompt.txt", assemble_location_prompt(lin).rendered());
}

TEST_CASE("outcome files round trip through write, append, and load") {
  zhmf_test::TempDir dir;
  const auto path = dir.path() / "outcomes.jsonl";

  PredictionOutcome first;
  first.user = "alice";
  first.stratum = "active";
  first.traj_index = 0;
  first.step_index = 1;
  first.timestamp = kTue;
  first.target_poi = "o1";
  first.target_category = "Office";
  first.predicted_categories = {"Office", "Gym"};
  first.category_hit = true;
  first.ranked_pois = {"o1", "g1"};
  first.rank = 1;

  PredictionOutcome second = first;
  second.step_index = 2;
  second.rank = 0;
  second.failed = true;
  second.failure_reason = "backend down";
  second.ranked_pois.clear();

  write_outcomes(path, "test", {first});
  append_outcomes(path, {second});

  const auto loaded = load_outcomes(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].user == "alice");
  CHECK(loaded[0].predicted_categories ==
        std::vector<std::string>{"Office", "Gym"});
  CHECK(loaded[0].rank == 1);
  CHECK(loaded[0].category_hit);
  CHECK(loaded[1].failed);
  CHECK(loaded[1].failure_reason == "backend down");

  zhmf_test::write_file(path, "{\"schema\":\"wrong/9\"}\n");
  CHECK_THROWS_AS(load_outcomes(path), StateError);
  zhmf_test::write_file(path, "");
  CHECK_THROWS_AS(load_outcomes(path), StateError);
  CHECK_THROWS_AS(load_outcomes(dir.path() / "absent.jsonl"), IoError);
}

TEST_CASE("step enumeration respects user scopes") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend([](const CompletionRequest&) { return ""; });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  using Steps = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(runner.enumerate_steps("test", UserScope::all) ==
        Steps{{0, 1}, {0, 2}, {1, 1}});
  CHECK(runner.enumerate_steps("test", UserScope::exclude_zero_shot) ==
        Steps{{0, 1}, {0, 2}});
  CHECK(runner.enumerate_steps("test", UserScope::zero_shot_only) ==
        Steps{{1, 1}});
  CHECK(runner.enumerate_steps("valid", UserScope::all) == Steps{{0, 1}, {0, 2}});
  CHECK_THROWS_AS(runner.enumerate_steps("nope", UserScope::all), ConfigError);
}

TEST_CASE("a perfect oracle yields rank one with no fallbacks") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  const auto outcomes =
      runner.run_split("test", Phase::evaluation, UserScope::all);
  REQUIRE(outcomes.size() == 3);
  for (const auto& o : outcomes) {
    CAPTURE(o.user);
    CHECK(o.rank == 1);
    CHECK(o.category_hit);
    CHECK(o.ranked_pois.front() == o.target_poi);
    CHECK_FALSE(o.fallback_activity);
    CHECK_FALSE(o.fallback_location);
    CHECK(o.reask_count == 0);
    CHECK_FALSE(o.failed);
  }
  CHECK(outcomes[0].user == "alice");
  CHECK(outcomes[0].stratum == "active");
  CHECK(outcomes[2].user == "zoe");
  CHECK(outcomes[2].stratum == "unseen");

  const RunCounters& counters = runner.counters();
  CHECK(counters.steps == 3);
  CHECK(counters.activity_calls == 3);
  CHECK(counters.location_calls == 3);
  CHECK(counters.activity_fallbacks == 0);
  CHECK(counters.location_fallbacks == 0);
  CHECK(counters.failed_steps == 0);
}

TEST_CASE("unusable replies trigger one re-ask then deterministic fallback") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  std::vector<std::string> tags;
  CallbackBackend backend([&](const CompletionRequest& req) {
    tags.push_back(extract_request_tag(req.user_text));
    return "no usable answer";
  });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  const PredictionOutcome o =
      runner.run_step("test", 0, 1, Phase::evaluation);
  CHECK(tags == std::vector<std::string>{"test:t0:s1:activity",
                                         "test:t0:s1:activity:retry",
                                         "test:t0:s1:location",
                                         "test:t0:s1:location:retry"});
  // Alice's profile: Coffee Shop and Office tie at 2 visits, Gym has 1; Bar
  // arrives from the alphabetical pad.
  CHECK(o.predicted_categories ==
        std::vector<std::string>{"Coffee Shop", "Office", "Gym", "Bar"});
  CHECK(o.fallback_activity);
  CHECK(o.fallback_location);
  CHECK(o.reask_count == 2);
  // Every known place qualifies, so the fallback ranking is distance order
  // from c1.
  CHECK(o.ranked_pois == std::vector<std::string>{"c1", "o1", "g1", "b1", "c2"});
  CHECK(o.category_hit);  // Office is in the fallback list
  CHECK(o.rank == 2);
  CHECK_FALSE(o.failed);

  const RunCounters& counters = runner.counters();
  CHECK(counters.activity_reasks == 1);
  CHECK(counters.location_reasks == 1);
  CHECK(counters.activity_fallbacks == 1);
  CHECK(counters.location_fallbacks == 1);
}

TEST_CASE("backend failures are contained as failed outcomes") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  ScriptedBackend backend({}, "error");
  LlmClient client(backend, RetryPolicy{1, 0});
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  const PredictionOutcome o = runner.run_step("test", 0, 1, Phase::evaluation);
  CHECK(o.failed);
  CHECK_FALSE(o.failure_reason.empty());
  CHECK(o.rank == 0);
  CHECK(o.ranked_pois.empty());
  CHECK(runner.counters().failed_steps == 1);

  CHECK_THROWS_AS(runner.run_step("test", 9, 1, Phase::evaluation), ConfigError);
  CHECK_THROWS_AS(runner.run_step("test", 0, 0, Phase::evaluation), ConfigError);
  CHECK_THROWS_AS(runner.run_step("test", 0, 3, Phase::evaluation), ConfigError);
}

TEST_CASE("experience misses write lessons; frozen evaluation does not") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend([](const CompletionRequest& req) -> std::string {
    const TagParts tag = parse_tag(extract_request_tag(req.user_text));
    if (tag.stage == "activity") return render_ranked_list({"Bar"});
    if (tag.stage == "location") return render_ranked_list({"b1"});
    return "Lesson: trust the morning commute.";
  });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  RunConfig config;
  Runner runner(splits, cohorts, config, client, embedder, &store);

  // valid t0 s1 targets o1/Office; predicting Bar misses the category and the
  // candidate list (only b1) cannot contain the target.
  const PredictionOutcome o = runner.run_step("valid", 0, 1, Phase::experience);
  CHECK_FALSE(o.category_hit);
  CHECK(o.rank == 0);
  CHECK(store.count(kActivityLevel) == 1);
  CHECK(store.count(kLocationLevel) == 1);
  CHECK(store.reflections()[0].lesson == "trust the morning commute.");
  CHECK(store.reflections()[0].user == "alice");
  CHECK(store.reflections()[0].context_digest ==
        context_digest("alice", "active",
                       {splits.valid[0].checkins.begin(),
                        splits.valid[0].checkins.begin() + 1},
                       splits.poi_index));

  const RunCounters& counters = runner.counters();
  CHECK(counters.activity_triggers == 1);
  CHECK(counters.location_triggers == 1);
  CHECK(counters.reflections_stored == 2);
  CHECK(counters.reflection_failures == 0);

  // The frozen evaluation phase observes the same misses without writing.
  runner.run_step("test", 0, 1, Phase::evaluation);
  CHECK(store.count(kActivityLevel) == 1);
  CHECK(store.count(kLocationLevel) == 1);
  CHECK(runner.counters().activity_triggers == 1);
}

TEST_CASE("online reflection keeps writing during evaluation") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend([](const CompletionRequest& req) -> std::string {
    const TagParts tag = parse_tag(extract_request_tag(req.user_text));
    if (tag.stage == "activity") return render_ranked_list({"Bar"});
    if (tag.stage == "location") return render_ranked_list({"b1"});
    return "Lesson: online update.";
  });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  RunConfig config;
  config.online_reflection = true;
  Runner runner(splits, cohorts, config, client, embedder, &store);
  runner.run_step("test", 0, 1, Phase::evaluation);
  CHECK(store.count(kActivityLevel) == 1);
  CHECK(store.count(kLocationLevel) == 1);
}

TEST_CASE("stored lessons surface in later prompts") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  ReflectionRecord lesson;
  lesson.level = "activity";
  lesson.user = "alice";
  lesson.context_digest = "ctx";
  lesson.prediction = "Bar";
  lesson.actual = "Office";
  lesson.lesson = "after coffee comes the office";
  lesson.embedding = embedder.embed("ctx");
  store.append_reflection(lesson);
  ReflectionRecord place_lesson = lesson;
  place_lesson.level = "location";
  place_lesson.lesson = "o1 beats g1 on weekdays";
  store.append_reflection(place_lesson);

  Runner runner(splits, cohorts, RunConfig{}, client, embedder, &store);
  std::vector<CapturedExchange> capture;
  runner.run_step("test", 0, 1, Phase::evaluation, &capture);

  REQUIRE(capture.size() == 2);
  CHECK(capture[0].prompt.level == "activity");
  CHECK(capture[0].prompt.has_section("reflections"));
  CHECK(capture[0].prompt.rendered().find("after coffee comes the office") !=
        std::string::npos);
  CHECK(capture[1].prompt.level == "location");
  CHECK(capture[1].prompt.rendered().find("o1 beats g1 on weekdays") !=
        std::string::npos);
}

TEST_CASE("no_reflection never writes or shows lessons") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend([](const CompletionRequest& req) -> std::string {
    const TagParts tag = parse_tag(extract_request_tag(req.user_text));
    if (tag.stage == "activity") return render_ranked_list({"Bar"});
    return render_ranked_list({"b1"});
  });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  ReflectionRecord planted;
  planted.level = "activity";
  planted.user = "alice";
  planted.context_digest = "ctx";
  planted.prediction = "x";
  planted.actual = "y";
  planted.lesson = "should never be shown";
  planted.embedding = embedder.embed("ctx");
  store.append_reflection(planted);

  RunConfig config;
  config.variant = Variant::no_reflection;
  Runner runner(splits, cohorts, config, client, embedder, &store);

  std::vector<CapturedExchange> capture;
  runner.run_step("valid", 0, 1, Phase::experience, &capture);
  CHECK(store.count(kActivityLevel) == 1);  // unchanged
  CHECK(store.count(kLocationLevel) == 0);
  CHECK(runner.counters().activity_triggers == 0);
  CHECK(runner.counters().location_triggers == 0);
  for (const auto& exchange : capture) {
    CHECK(exchange.prompt.rendered().find("Lessons from past") ==
          std::string::npos);
  }
}

TEST_CASE("one_stage skips the category stage but keeps place lessons") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend([](const CompletionRequest& req) -> std::string {
    const TagParts tag = parse_tag(extract_request_tag(req.user_text));
    if (tag.stage == "location") return render_ranked_list({"b1"});
    return "Lesson: one stage lesson.";
  });
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  RunConfig config;
  config.variant = Variant::one_stage;
  Runner runner(splits, cohorts, config, client, embedder, &store);

  std::vector<CapturedExchange> capture;
  const PredictionOutcome o =
      runner.run_step("valid", 0, 1, Phase::experience, &capture);
  CHECK(o.predicted_categories.empty());
  CHECK_FALSE(o.category_hit);
  REQUIRE(capture.size() == 1);
  CHECK(capture[0].prompt.level == "location");
  // Unrestricted candidates: the prompt offers every known place.
  CHECK(capture[0].prompt.rendered().find("id=c2") != std::string::npos);

  CHECK(runner.counters().activity_calls == 0);
  CHECK(runner.counters().activity_triggers == 0);
  CHECK(runner.counters().location_triggers == 1);
  CHECK(store.count(kActivityLevel) == 0);
  CHECK(store.count(kLocationLevel) == 1);
}

TEST_CASE("trajectory pool skips zero-shot users and feeds similarity") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  MemoryStore store(8);

  Runner runner(splits, cohorts, RunConfig{}, client, embedder, &store);
  runner.build_trajectory_pool();
  CHECK(store.trajectory_pool().size() == 3);  // zoe's trajectory excluded
  for (const auto& entry : store.trajectory_pool()) {
    CHECK(entry.user != "zoe");
  }

  std::vector<CapturedExchange> capture;
  runner.run_step("test", 0, 1, Phase::evaluation, &capture);
  REQUIRE(!capture.empty());
  CHECK(capture[0].prompt.has_section("similar_trajectories"));
  CHECK(capture[0].prompt.rendered().find("Similar past trajectories:") !=
        std::string::npos);

  Runner bare(splits, cohorts, RunConfig{}, client, embedder, nullptr);
  CHECK_THROWS_AS(bare.build_trajectory_pool(), StateError);
}

TEST_CASE("zero-shot prompts carry no personal history") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  std::vector<CapturedExchange> capture;
  // zoe has training data in the fixture, but as a holdout user her personal
  // features must stay blank.
  runner.run_step("test", 1, 1, Phase::evaluation, &capture);
  REQUIRE(capture.size() == 2);
  const std::string activity_text = capture[0].prompt.rendered();
  CHECK(activity_text.find("Person: zoe (new user)") != std::string::npos);
  CHECK_FALSE(capture[0].prompt.has_section("long_term_categories"));
  CHECK_FALSE(capture[0].prompt.has_section("category_transitions"));
  const std::string location_text = capture[1].prompt.rendered();
  CHECK_FALSE(capture[1].prompt.has_section("time_preferences"));
  CHECK_FALSE(capture[1].prompt.has_section("area_preferences"));
  // Current-trip context is still available.
  CHECK(capture[0].prompt.has_section("recent_categories"));
}

TEST_CASE("run_split slices, skips, and preserves enumeration order") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);
  Runner runner(splits, cohorts, RunConfig{}, client, embedder, nullptr);

  const auto middle =
      runner.run_split("test", Phase::evaluation, UserScope::all, 1, 1);
  REQUIRE(middle.size() == 1);
  CHECK(middle[0].traj_index == 0);
  CHECK(middle[0].step_index == 2);

  CHECK(runner.run_split("test", Phase::evaluation, UserScope::all, 99).empty());
  const auto rest =
      runner.run_split("test", Phase::evaluation, UserScope::all, 2, 0);
  REQUIRE(rest.size() == 1);
  CHECK(rest[0].user == "zoe");
}

TEST_CASE("parallel evaluation matches sequential output and ordering") {
  const CorpusSplits splits = fixture_splits();
  const UserCohorts cohorts = fixture_cohorts();
  CallbackBackend backend{PerfectOracle{splits}};
  LlmClient client(backend);
  HashEmbeddingProvider embedder(8, 0);

  Runner sequential(splits, cohorts, RunConfig{}, client, embedder, nullptr);
  const auto base = sequential.run_split("test", Phase::evaluation, UserScope::all);

  RunConfig parallel_config;
  parallel_config.concurrency = 4;
  Runner parallel(splits, cohorts, parallel_config, client, embedder, nullptr);
  std::vector<std::string> seen_tags;
  parallel.set_prompt_sink([&](const CapturedExchange& exchange) {
    seen_tags.push_back(exchange.prompt.tag);
  });
  const auto fast = parallel.run_split("test", Phase::evaluation, UserScope::all);

  REQUIRE(fast.size() == base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(fast[i].user == base[i].user);
    CHECK(fast[i].traj_index == base[i].traj_index);
    CHECK(fast[i].step_index == base[i].step_index);
    CHECK(fast[i].rank == base[i].rank);
    CHECK(fast[i].ranked_pois == base[i].ranked_pois);
  }
  CHECK(seen_tags ==
        std::vector<std::string>{"test:t0:s1:activity", "test:t0:s1:location",
                                 "test:t0:s2:activity", "test:t0:s2:location",
                                 "test:t1:s1:activity", "test:t1:s1:location"});
}
