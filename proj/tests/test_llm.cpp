#include "zhmf/llm.hpp"

#include <doctest.h>

#include <atomic>
#include <thread>

#include "test_helpers.hpp"
#include "zhmf/errors.hpp"

using namespace zhmf;

namespace {

CompletionRequest request_with_tag(const std::string& tag,
                                   const std::string& rest = "") {
  CompletionRequest req;
  req.user_text = std::string(kRequestIdPrefix) + tag + "\n" + rest;
  return req;
}

}  // namespace

TEST_CASE("request tags come from the request-id header line") {
  CHECK(extract_request_tag("request-id: test:t3:s1:activity\nbody") ==
        "test:t3:s1:activity");
  CHECK(extract_request_tag("   request-id:   valid:t0:s1:location  \n") ==
        "valid:t0:s1:location");
  // Only the first token after the prefix counts.
  CHECK(extract_request_tag("request-id: abc def\n") == "abc");
  // Header may appear after other lines.
  CHECK(extract_request_tag("hello\nrequest-id: x\n") == "x");
  CHECK(extract_request_tag("no header here") == "");
  CHECK(extract_request_tag("") == "");
}

TEST_CASE("scripted backend answers by tag and rejects unknown tags") {
  ScriptedBackend backend(
      std::map<std::string, std::string>{{"test:t0:s1:activity", "canned"}});
  CHECK(backend.complete_once(request_with_tag("test:t0:s1:activity")).text ==
        "canned");
  CHECK_THROWS_AS(backend.complete_once(request_with_tag("test:t9:s9:activity")),
                  BackendError);
  CHECK_THROWS_AS(ScriptedBackend({}, "bogus"), ConfigError);
}

TEST_CASE("scripted backend text policy returns a fixed body") {
  ScriptedBackend backend({}, "text:always this");
  CHECK(backend.complete_once(request_with_tag("anything")).text == "always this");
}

TEST_CASE("scripted presented_order echoes the candidate list") {
  ScriptedBackend backend({}, "presented_order");
  const std::string body =
      "Candidate places, nearest first:\n"
      "1. id=p7 category=Coffee Shop distance_km=0.111\n"
      "2. id=p2 category=Office distance_km=0.222\n"
      "\nPick one.";
  const auto response = backend.complete_once(request_with_tag("t", body));
  CHECK(response.text == render_ranked_list({"p7", "p2"}));
}

TEST_CASE("scripted presented_order falls back to the allowed categories") {
  ScriptedBackend backend({}, "presented_order");
  const std::string body =
      "Allowed categories:\n"
      "1. Bar\n"
      "2. Coffee Shop\n"
      "\nReply with one.";
  const auto response = backend.complete_once(request_with_tag("t", body));
  CHECK(response.text == render_ranked_list({"Bar", "Coffee Shop"}));

  CHECK_THROWS_AS(backend.complete_once(request_with_tag("t", "no lists here")),
                  BackendError);
}

TEST_CASE("script files round trip and validate their header") {
  zhmf_test::TempDir dir;
  const auto path = dir.path() / "script.jsonl";

  std::map<std::string, std::string> responses = {
      {"test:t0:s1:activity", "reply \"quoted\"\nsecond line"},
      {"test:t0:s1:location", "other"},
  };
  ScriptedBackend::write_file(path, responses, "text:fallback");

  ScriptedBackend loaded = ScriptedBackend::from_file(path);
  CHECK(loaded.complete_once(request_with_tag("test:t0:s1:activity")).text ==
        responses["test:t0:s1:activity"]);
  CHECK(loaded.complete_once(request_with_tag("unknown")).text == "fallback");

  CHECK_THROWS_AS(ScriptedBackend::from_file(dir.path() / "absent.jsonl"), IoError);

  zhmf_test::write_file(path, "{\"not\": \"a header\"}\n");
  CHECK_THROWS_AS(ScriptedBackend::from_file(path), ConfigError);

  zhmf_test::write_file(path,
                        "{\"schema\":\"zhmf-script/1\",\"default_policy\":\"error\"}\n"
                        "{\"tag\":\"x\"}\n");
  CHECK_THROWS_AS(ScriptedBackend::from_file(path), ConfigError);

  zhmf_test::write_file(path, "");
  CHECK_THROWS_AS(ScriptedBackend::from_file(path), ConfigError);
}

TEST_CASE("client retries transport errors with attempt accounting") {
  std::atomic<int> attempts{0};
  CallbackBackend flaky([&](const CompletionRequest&) -> std::string {
    if (++attempts < 3) throw TransportError("flaky");
    return "ok";
  });
  LlmClient client(flaky, RetryPolicy{3, 0});

  const auto response = client.complete(request_with_tag("t"));
  CHECK(response.text == "ok");
  CHECK(response.retries == 2);
  CHECK(attempts == 3);

  const LlmStats stats = client.stats();
  CHECK(stats.calls == 1);
  CHECK(stats.retries == 2);
  CHECK(stats.failures == 0);
}

TEST_CASE("client gives up after max_attempts and counts the failure") {
  std::atomic<int> attempts{0};
  CallbackBackend dead([&](const CompletionRequest&) -> std::string {
    ++attempts;
    throw TransportError("down");
  });
  LlmClient client(dead, RetryPolicy{2, 0});

  CHECK_THROWS_AS(client.complete(request_with_tag("t")), TransportError);
  CHECK(attempts == 2);
  const LlmStats stats = client.stats();
  CHECK(stats.calls == 1);
  CHECK(stats.retries == 1);
  CHECK(stats.failures == 1);
}

TEST_CASE("client does not retry non-transport backend errors") {
  std::atomic<int> attempts{0};
  CallbackBackend broken([&](const CompletionRequest&) -> std::string {
    ++attempts;
    throw BackendError("bad request");
  });
  LlmClient client(broken, RetryPolicy{5, 0});

  CHECK_THROWS_AS(client.complete(request_with_tag("t")), BackendError);
  CHECK(attempts == 1);
  CHECK(client.stats().failures == 1);

  CHECK_THROWS_AS(LlmClient(broken, RetryPolicy{0, 0}), ConfigError);
  CHECK_THROWS_AS(LlmClient(broken, RetryPolicy{1, 0}, 0), ConfigError);
}

TEST_CASE("client bounds concurrent in-flight requests") {
  std::atomic<int> current{0};
  std::atomic<int> peak{0};
  CallbackBackend slow([&](const CompletionRequest&) -> std::string {
    const int now = ++current;
    int prev = peak.load();
    while (prev < now && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --current;
    return "ok";
  });
  LlmClient client(slow, RetryPolicy{1, 0}, 2);

  std::vector<std::thread> workers;
  for (int i = 0; i < 8; ++i) {
    workers.emplace_back([&] { client.complete(request_with_tag("t")); });
  }
  for (auto& t : workers) t.join();

  CHECK(peak.load() <= 2);
  CHECK(client.stats().calls == 8);
}

TEST_CASE("category parsing prefers a fenced JSON array") {
  const std::set<std::string> cats = {"Coffee Shop", "Gym", "Office"};
  const auto parsed = parse_categories(
      "Here you go:\n```json\n[\"coffee  SHOP\", \"Moon Base\", \"Gym\"]\n```",
      cats, 20);
  CHECK(parsed.ranked == std::vector<std::string>{"Coffee Shop", "Gym"});
  CHECK(parsed.unmatched == std::vector<std::string>{"Moon Base"});
  CHECK(parsed.ok());
}

TEST_CASE("category parsing falls through fenced lines and numbered lists") {
  const std::set<std::string> cats = {"Coffee Shop", "Gym", "Office"};

  const auto fenced_lines =
      parse_categories("```\nGym\nOffice\n```", cats, 20);
  CHECK(fenced_lines.ranked == std::vector<std::string>{"Gym", "Office"});

  const auto numbered = parse_categories(
      "My guesses:\n1. **Office**\n2) 'Gym'\n- Coffee Shop\n", cats, 20);
  CHECK(numbered.ranked ==
        std::vector<std::string>{"Office", "Gym", "Coffee Shop"});

  const auto comma = parse_categories("Office, Gym, Starship", cats, 20);
  CHECK(comma.ranked == std::vector<std::string>{"Office", "Gym"});
  CHECK(comma.unmatched == std::vector<std::string>{"Starship"});
}

TEST_CASE("category parsing dedupes, truncates, and can fail") {
  const std::set<std::string> cats = {"Coffee Shop", "Gym", "Office"};

  const auto deduped =
      parse_categories("1. Gym\n2. Gym\n3. Office\n4. Coffee Shop", cats, 20);
  CHECK(deduped.ranked ==
        std::vector<std::string>{"Gym", "Office", "Coffee Shop"});

  const auto truncated =
      parse_categories("1. Gym\n2. Office\n3. Coffee Shop", cats, 2);
  CHECK(truncated.ranked == std::vector<std::string>{"Gym", "Office"});

  const auto nothing = parse_categories("I cannot help with that.", cats, 20);
  CHECK_FALSE(nothing.ok());
  CHECK(nothing.raw == "I cannot help with that.");
}

TEST_CASE("poi parsing matches fenced JSON ids and records hallucinations") {
  const std::vector<std::string> ids = {"p1", "p2", "p3"};
  const auto parsed =
      parse_pois("```json\n[\"p2\", \"p9\", \"p1\", \"p2\"]\n```", ids, 20);
  CHECK(parsed.ranked == std::vector<std::string>{"p2", "p1"});
  CHECK(parsed.rejected == std::vector<std::string>{"p9"});
}

TEST_CASE("poi parsing scans tokens when no JSON array matches") {
  const std::vector<std::string> ids = {"p1", "p2", "cafe_9-b"};

  const auto in_fence = parse_pois("```\np2 first, then p1.\n```", ids, 20);
  CHECK(in_fence.ranked == std::vector<std::string>{"p2", "p1"});

  const auto in_text =
      parse_pois("I would pick cafe_9-b and maybe p1 later. p1 again.", ids, 20);
  CHECK(in_text.ranked == std::vector<std::string>{"cafe_9-b", "p1"});

  // A fenced block whose ids are all invalid falls back to the whole text.
  const auto fallback = parse_pois("p2 looks right\n```\n[\"p9\"]\n```", ids, 20);
  CHECK(fallback.ranked == std::vector<std::string>{"p2"});

  const auto limited = parse_pois("p1 p2 cafe_9-b", ids, 2);
  CHECK(limited.ranked == std::vector<std::string>{"p1", "p2"});

  CHECK_FALSE(parse_pois("none of those", ids, 20).ok());
}

TEST_CASE("rendered ranked lists parse back to themselves") {
  const std::vector<std::string> entries = {"p2", "p1", "p3"};
  const std::string rendered = render_ranked_list(entries);
  CHECK(rendered == "```json\n[\"p2\",\"p1\",\"p3\"]\n```");
  CHECK(parse_pois(rendered, {"p1", "p2", "p3", "p4"}, 20).ranked == entries);

  const std::set<std::string> cats = {"Coffee Shop", "Gym"};
  const std::string cat_list = render_ranked_list({"Gym", "Coffee Shop"});
  CHECK(parse_categories(cat_list, cats, 20).ranked ==
        std::vector<std::string>{"Gym", "Coffee Shop"});
}
