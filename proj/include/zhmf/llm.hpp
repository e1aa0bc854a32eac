#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace zhmf {

// The first line of every rendered prompt carries "request-id: <tag>"; the
// scripted backend keys its canned responses on that tag so template wording
// can change without invalidating fixtures.
inline constexpr std::string_view kRequestIdPrefix = "request-id: ";

struct CompletionRequest {
  std::string system_text;
  std::string user_text;
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<std::uint64_t> seed;
};

struct CompletionResponse {
  std::string text;
  int prompt_tokens = 0;
  int completion_tokens = 0;
  double latency_ms = 0.0;
  int retries = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  // One attempt; throws TransportError for retryable failures, BackendError
  // otherwise.
  virtual CompletionResponse complete_once(const CompletionRequest& request) = 0;
  virtual std::string name() const = 0;
};

// Extracts the scenario tag from a prompt's request-id header line; empty
// string when absent.
std::string extract_request_tag(const std::string& user_text);

// Deterministic mock keyed by scenario tag. Missing tags fall through to
// default_policy:
//   "error"           -> BackendError (the strict default)
//   "presented_order" -> echoes the prompt's own numbered option list
//   "text:<body>"     -> fixed response body
class ScriptedBackend : public ChatBackend {
 public:
  explicit ScriptedBackend(std::map<std::string, std::string> responses,
                           std::string default_policy = "error");
  static ScriptedBackend from_file(const std::filesystem::path& path);
  static void write_file(const std::filesystem::path& path,
                         const std::map<std::string, std::string>& responses,
                         const std::string& default_policy = "error");

  CompletionResponse complete_once(const CompletionRequest& request) override;
  std::string name() const override { return "scripted"; }

 private:
  std::map<std::string, std::string> responses_;
  std::string default_policy_;
};

inline constexpr std::string_view kScriptSchema = "zhmf-script/1";

// Test seam: delegates to an arbitrary function.
class CallbackBackend : public ChatBackend {
 public:
  explicit CallbackBackend(std::function<std::string(const CompletionRequest&)> fn)
      : fn_(std::move(fn)) {}
  CompletionResponse complete_once(const CompletionRequest& request) override {
    return {fn_(request)};
  }
  std::string name() const override { return "callback"; }

 private:
  std::function<std::string(const CompletionRequest&)> fn_;
};

// Chat-completion wire client: POST {model, messages, temperature,
// max_tokens[, seed]} to endpoint_url, reads choices[0].message.content.
// The bearer token is read from the environment variable named by auth_env
// (empty disables the header).
class HttpChatBackend : public ChatBackend {
 public:
  HttpChatBackend(std::string endpoint_url, std::string model,
                  std::string auth_env, int timeout_ms = 60000);
  CompletionResponse complete_once(const CompletionRequest& request) override;
  std::string name() const override { return "live:" + model_; }

 private:
  std::string endpoint_url_;
  std::string model_;
  std::string auth_env_;
  int timeout_ms_;
};

struct RetryPolicy {
  int max_attempts = 3;
  int base_backoff_ms = 200;
};

struct LlmStats {
  std::uint64_t calls = 0;
  std::uint64_t retries = 0;
  std::uint64_t failures = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  double total_latency_ms = 0.0;
};

// Retry/backoff wrapper around a backend with a bound on concurrent
// in-flight requests. Thread safe.
class LlmClient {
 public:
  explicit LlmClient(ChatBackend& backend, RetryPolicy retry = {},
                     int max_in_flight = 4);

  CompletionResponse complete(const CompletionRequest& request);
  LlmStats stats() const;

 private:
  ChatBackend& backend_;
  RetryPolicy retry_;
  int max_in_flight_;
  int in_flight_ = 0;
  mutable std::mutex mutex_;
  std::condition_variable slot_free_;
  LlmStats stats_;
};

// --- Output parsing ----------------------------------------------------------

struct ParsedCategoryResponse {
  std::vector<std::string> ranked;     // canonical names from category_set
  std::vector<std::string> unmatched;  // entries dropped by validation
  std::string raw;

  bool ok() const { return !ranked.empty(); }
};

// Strategy ladder: fenced block, then numbered/bulleted lines, then comma
// list. Entries are case/whitespace-normalized against category_set;
// unmatched entries are dropped and reported. Result truncated to K.
ParsedCategoryResponse parse_categories(const std::string& text,
                                        const std::set<std::string>& category_set,
                                        std::size_t k);

struct ParsedPoiResponse {
  std::vector<std::string> ranked;     // ids from the presented candidate set
  std::vector<std::string> rejected;   // hallucinated ids / unparseable entries
  std::string raw;

  bool ok() const { return !ranked.empty(); }
};

// Scans for candidate ids (first occurrence wins), preferring the fenced
// block when one contains any valid id. Result truncated to limit.
ParsedPoiResponse parse_pois(const std::string& text,
                             const std::vector<std::string>& candidate_ids,
                             std::size_t limit = 20);

// Canonical re-rendering of a parsed list (fenced JSON array); parsing it
// again yields the same list.
std::string render_ranked_list(const std::vector<std::string>& entries);

}  // namespace zhmf
