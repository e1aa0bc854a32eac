#include "zhmf/llm.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>
#include <unordered_set>

#include "httplib.h"
#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {
namespace {

using nlohmann::json;

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// "3. Coffee Shop" -> "Coffee Shop"; nullopt when the line is not numbered or
// bulleted.
std::optional<std::string> strip_list_marker(const std::string& line) {
  std::string s = trim(line);
  if (s.empty()) return std::nullopt;
  std::size_t i = 0;
  if (std::isdigit(static_cast<unsigned char>(s[i]))) {
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i < s.size() && (s[i] == '.' || s[i] == ')')) {
      return trim(s.substr(i + 1));
    }
    return std::nullopt;
  }
  if (s[i] == '-' || s[i] == '*') {
    return trim(s.substr(i + 1));
  }
  return std::nullopt;
}

// Removes markdown emphasis and wrapping quotes that models habitually add
// around list entries.
std::string strip_decoration(const std::string& entry) {
  std::string s = trim(entry);
  auto is_lead = [](char c) {
    return c == '*' || c == '_' || c == '`' || c == '"' || c == '\'';
  };
  auto is_trail = [&](char c) {
    return is_lead(c) || c == '.' || c == ',' || c == ';' || c == ':';
  };
  std::size_t b = 0, e = s.size();
  while (b < e && is_lead(s[b])) ++b;
  while (e > b && is_trail(s[e - 1])) --e;
  return trim(s.substr(b, e - b));
}

// Content of the first ``` ... ``` block, with any language word on the
// opening fence discarded.
std::optional<std::string> fenced_block(const std::string& text) {
  std::size_t open = text.find("```");
  if (open == std::string::npos) return std::nullopt;
  std::size_t body = text.find('\n', open);
  if (body == std::string::npos) return std::nullopt;
  ++body;
  std::size_t close = text.find("```", body);
  if (close == std::string::npos) return std::nullopt;
  return text.substr(body, close - body);
}

std::optional<std::vector<std::string>> json_string_array(const std::string& text) {
  json parsed = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (!parsed.is_array()) return std::nullopt;
  std::vector<std::string> out;
  for (const auto& item : parsed) {
    if (!item.is_string()) return std::nullopt;
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::vector<std::string> id_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') {
      cur += c;
    } else {
      flush();
    }
  }
  flush();
  return out;
}

}  // namespace

std::string extract_request_tag(const std::string& user_text) {
  for (const std::string& line : lines_of(user_text)) {
    std::string s = trim(line);
    if (s.rfind(kRequestIdPrefix, 0) == 0) {
      std::string rest = trim(s.substr(kRequestIdPrefix.size()));
      std::size_t end = rest.find_first_of(" \t");
      return end == std::string::npos ? rest : rest.substr(0, end);
    }
  }
  return "";
}

ScriptedBackend::ScriptedBackend(std::map<std::string, std::string> responses,
                                 std::string default_policy)
    : responses_(std::move(responses)), default_policy_(std::move(default_policy)) {
  if (default_policy_ != "error" && default_policy_ != "presented_order" &&
      default_policy_.rfind("text:", 0) != 0) {
    throw ConfigError("unknown script default policy: " + default_policy_);
  }
}

ScriptedBackend ScriptedBackend::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open script file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw ConfigError("script file is empty: " + path.string());
  }
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema", "") != kScriptSchema) {
    throw ConfigError("script file missing schema header: " + path.string());
  }
  std::string policy = header.value("default_policy", "error");
  std::map<std::string, std::string> responses;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("tag") || !row.contains("text")) {
      throw ConfigError("malformed script entry at " + path.string() + ":" +
                        std::to_string(line_no));
    }
    responses[row["tag"].get<std::string>()] = row["text"].get<std::string>();
  }
  return ScriptedBackend(std::move(responses), std::move(policy));
}

void ScriptedBackend::write_file(const std::filesystem::path& path,
                                 const std::map<std::string, std::string>& responses,
                                 const std::string& default_policy) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write script file: " + path.string());
  out << json{{"schema", kScriptSchema}, {"default_policy", default_policy}}.dump()
      << '\n';
  for (const auto& [tag, text] : responses) {
    out << json{{"tag", tag}, {"text", text}}.dump() << '\n';
  }
  if (!out) throw IoError("failed writing script file: " + path.string());
}

CompletionResponse ScriptedBackend::complete_once(const CompletionRequest& request) {
  std::string tag = extract_request_tag(request.user_text);
  auto it = responses_.find(tag);
  if (it != responses_.end()) return {it->second};
  if (default_policy_.rfind("text:", 0) == 0) {
    return {default_policy_.substr(5)};
  }
  if (default_policy_ == "presented_order") {
    // Echo the prompt's own option list: the numbered candidate entries when
    // present, otherwise the numbered lines under "Allowed categories:".
    std::vector<std::string> entries;
    std::vector<std::string> all_lines = lines_of(request.user_text);
    for (const std::string& line : all_lines) {
      if (auto body = strip_list_marker(line); body && body->rfind("id=", 0) == 0) {
        std::string id = body->substr(3);
        std::size_t end = id.find_first_of(" \t");
        entries.push_back(end == std::string::npos ? id : id.substr(0, end));
      }
    }
    if (entries.empty()) {
      bool in_options = false;
      for (const std::string& line : all_lines) {
        if (trim(line) == "Allowed categories:") {
          in_options = true;
          continue;
        }
        if (!in_options) continue;
        auto body = strip_list_marker(line);
        if (!body) break;
        entries.push_back(*body);
      }
    }
    if (entries.empty()) {
      throw BackendError("scripted backend: no option list in prompt for tag '" +
                         tag + "'");
    }
    return {render_ranked_list(entries)};
  }
  throw BackendError("scripted backend: no response for tag '" + tag + "'");
}

HttpChatBackend::HttpChatBackend(std::string endpoint_url, std::string model,
                                 std::string auth_env, int timeout_ms)
    : endpoint_url_(std::move(endpoint_url)),
      model_(std::move(model)),
      auth_env_(std::move(auth_env)),
      timeout_ms_(timeout_ms) {
  if (endpoint_url_.find("://") == std::string::npos) {
    throw ConfigError("endpoint URL must include a scheme: " + endpoint_url_);
  }
}

CompletionResponse HttpChatBackend::complete_once(const CompletionRequest& request) {
  auto [base, path] = split_url(endpoint_url_);

  json body = {
      {"model", model_},
      {"messages",
       json::array({json{{"role", "system"}, {"content", request.system_text}},
                    json{{"role", "user"}, {"content", request.user_text}}})},
      {"temperature", request.temperature},
      {"max_tokens", request.max_tokens},
  };
  if (request.seed) body["seed"] = *request.seed;

  httplib::Client client(base);
  client.set_connection_timeout(0, timeout_ms_ * 1000LL);
  client.set_read_timeout(timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000);
  httplib::Headers headers;
  if (!auth_env_.empty()) {
    const char* token = std::getenv(auth_env_.c_str());
    if (token != nullptr && *token != '\0') {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
  }

  auto start = std::chrono::steady_clock::now();
  httplib::Result result = client.Post(path, headers, body.dump(), "application/json");
  auto elapsed = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - start)
                     .count();

  if (!result) {
    throw TransportError("request to " + base + " failed: " +
                         httplib::to_string(result.error()));
  }
  if (result->status == 429 || result->status >= 500) {
    throw TransportError("endpoint returned status " +
                         std::to_string(result->status));
  }
  if (result->status < 200 || result->status >= 300) {
    throw BackendError("endpoint returned status " + std::to_string(result->status) +
                       ": " + result->body.substr(0, 200));
  }
  json parsed = json::parse(result->body, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("choices") ||
      parsed["choices"].empty() || !parsed["choices"][0].contains("message")) {
    throw BackendError("endpoint returned unparseable completion body");
  }
  CompletionResponse response;
  response.text = parsed["choices"][0]["message"].value("content", "");
  if (parsed.contains("usage")) {
    response.prompt_tokens = parsed["usage"].value("prompt_tokens", 0);
    response.completion_tokens = parsed["usage"].value("completion_tokens", 0);
  }
  response.latency_ms = elapsed;
  return response;
}

LlmClient::LlmClient(ChatBackend& backend, RetryPolicy retry, int max_in_flight)
    : backend_(backend), retry_(retry), max_in_flight_(max_in_flight) {
  if (retry_.max_attempts < 1) throw ConfigError("retry max_attempts must be >= 1");
  if (max_in_flight_ < 1) throw ConfigError("max_in_flight must be >= 1");
}

CompletionResponse LlmClient::complete(const CompletionRequest& request) {
  {
    std::unique_lock lock(mutex_);
    slot_free_.wait(lock, [&] { return in_flight_ < max_in_flight_; });
    ++in_flight_;
  }
  struct SlotGuard {
    LlmClient& client;
    ~SlotGuard() {
      {
        std::lock_guard lock(client.mutex_);
        --client.in_flight_;
      }
      client.slot_free_.notify_one();
    }
  } guard{*this};

  int attempt = 0;
  for (;;) {
    ++attempt;
    try {
      CompletionResponse response = backend_.complete_once(request);
      response.retries = attempt - 1;
      std::lock_guard lock(mutex_);
      ++stats_.calls;
      stats_.retries += static_cast<std::uint64_t>(attempt - 1);
      stats_.prompt_tokens += static_cast<std::uint64_t>(response.prompt_tokens);
      stats_.completion_tokens +=
          static_cast<std::uint64_t>(response.completion_tokens);
      stats_.total_latency_ms += response.latency_ms;
      return response;
    } catch (const TransportError&) {
      if (attempt >= retry_.max_attempts) {
        std::lock_guard lock(mutex_);
        ++stats_.calls;
        stats_.retries += static_cast<std::uint64_t>(attempt - 1);
        ++stats_.failures;
        throw;
      }
      std::this_thread::sleep_for(
          std::chrono::milliseconds(retry_.base_backoff_ms * (1 << (attempt - 1))));
    } catch (const BackendError&) {
      std::lock_guard lock(mutex_);
      ++stats_.calls;
      stats_.retries += static_cast<std::uint64_t>(attempt - 1);
      ++stats_.failures;
      throw;
    }
  }
}

LlmStats LlmClient::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

ParsedCategoryResponse parse_categories(const std::string& text,
                                        const std::set<std::string>& category_set,
                                        std::size_t k) {
  std::map<std::string, std::string> canonical;
  for (const std::string& name : category_set) {
    canonical[normalize_label(name)] = name;
  }

  ParsedCategoryResponse result;
  result.raw = text;

  auto match_entries = [&](const std::vector<std::string>& entries,
                           ParsedCategoryResponse& out) {
    std::unordered_set<std::string> seen;
    for (const std::string& raw_entry : entries) {
      std::string entry = strip_decoration(raw_entry);
      if (entry.empty()) continue;
      auto it = canonical.find(normalize_label(entry));
      if (it == canonical.end()) {
        out.unmatched.push_back(entry);
      } else if (seen.insert(it->second).second) {
        out.ranked.push_back(it->second);
      }
    }
  };

  auto try_rung = [&](const std::vector<std::string>& entries) {
    ParsedCategoryResponse attempt;
    match_entries(entries, attempt);
    if (!attempt.ranked.empty()) {
      result.ranked = std::move(attempt.ranked);
      result.unmatched = std::move(attempt.unmatched);
      return true;
    }
    return false;
  };

  bool done = false;
  if (auto block = fenced_block(text)) {
    if (auto array = json_string_array(trim(*block))) {
      done = try_rung(*array);
    }
    if (!done) {
      std::vector<std::string> entries;
      for (const std::string& line : lines_of(*block)) {
        if (auto body = strip_list_marker(line)) {
          entries.push_back(*body);
        } else if (!trim(line).empty()) {
          entries.push_back(trim(line));
        }
      }
      done = try_rung(entries);
    }
  }
  if (!done) {
    std::vector<std::string> entries;
    for (const std::string& line : lines_of(text)) {
      if (auto body = strip_list_marker(line)) entries.push_back(*body);
    }
    done = try_rung(entries);
  }
  if (!done && text.find(',') != std::string::npos) {
    done = try_rung(split(text, ','));
  }
  if (result.ranked.size() > k) result.ranked.resize(k);
  return result;
}

ParsedPoiResponse parse_pois(const std::string& text,
                             const std::vector<std::string>& candidate_ids,
                             std::size_t limit) {
  std::unordered_set<std::string> valid(candidate_ids.begin(), candidate_ids.end());
  ParsedPoiResponse result;
  result.raw = text;

  auto scan = [&](const std::string& body) {
    std::vector<std::string> found;
    std::unordered_set<std::string> seen;
    for (const std::string& token : id_tokens(body)) {
      if (valid.count(token) != 0 && seen.insert(token).second) {
        found.push_back(token);
      }
    }
    return found;
  };

  if (auto block = fenced_block(text)) {
    if (auto array = json_string_array(trim(*block))) {
      std::unordered_set<std::string> seen;
      for (const std::string& raw_entry : *array) {
        std::string entry = strip_decoration(raw_entry);
        if (valid.count(entry) != 0) {
          if (seen.insert(entry).second) result.ranked.push_back(entry);
        } else {
          result.rejected.push_back(entry);
        }
      }
    }
    if (result.ranked.empty()) {
      result.ranked = scan(*block);
    }
  }
  if (result.ranked.empty()) {
    result.ranked = scan(text);
  }
  if (result.ranked.size() > limit) result.ranked.resize(limit);
  return result;
}

std::string render_ranked_list(const std::vector<std::string>& entries) {
  return "```json\n" + json(entries).dump() + "\n```";
}

}  // namespace zhmf
