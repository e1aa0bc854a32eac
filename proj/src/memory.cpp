#include "zhmf/memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "httplib.h"
#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {
namespace {

using nlohmann::json;

std::string collapse_whitespace(const std::string& text) {
  std::string out;
  bool pending = false;
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      if (!out.empty()) pending = true;
      continue;
    }
    if (pending) {
      out += ' ';
      pending = false;
    }
    out += raw;
  }
  return out;
}

}  // namespace

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.size() != b.size()) {
    throw DataError("cosine: dimension mismatch (" + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()) + ")");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw DataError("cosine: zero-norm vector");
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

HashEmbeddingProvider::HashEmbeddingProvider(std::size_t dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
  if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
}

EmbeddingVector HashEmbeddingProvider::embed(const std::string& text) {
  EmbeddingVector v(dim_, 0.0);
  std::string lowered = to_lower(text);
  std::size_t i = 0;
  while (i < lowered.size()) {
    while (i < lowered.size() &&
           !std::isalnum(static_cast<unsigned char>(lowered[i]))) {
      ++i;
    }
    std::size_t start = i;
    while (i < lowered.size() &&
           std::isalnum(static_cast<unsigned char>(lowered[i]))) {
      ++i;
    }
    if (i == start) continue;
    std::uint64_t state =
        fnv1a64(std::string_view(lowered).substr(start, i - start)) ^ seed_;
    for (std::size_t d = 0; d < dim_; ++d) {
      v[d] += unit_interval(splitmix64(state)) * 2.0 - 1.0;
    }
  }
  return v;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(std::string endpoint_url,
                                             std::string model,
                                             std::string auth_env,
                                             std::size_t dim, int timeout_ms)
    : endpoint_url_(std::move(endpoint_url)),
      model_(std::move(model)),
      auth_env_(std::move(auth_env)),
      dim_(dim),
      timeout_ms_(timeout_ms) {
  split_url(endpoint_url_);  // validate eagerly
}

EmbeddingVector HttpEmbeddingProvider::embed(const std::string& text) {
  auto [base, path] = split_url(endpoint_url_);
  json body = {{"model", model_}, {"input", json::array({text})}};

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

  httplib::Result result = client.Post(path, headers, body.dump(), "application/json");
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
  if (parsed.is_discarded() || !parsed.contains("data") || parsed["data"].empty() ||
      !parsed["data"][0].contains("embedding")) {
    throw BackendError("endpoint returned unparseable embedding body");
  }
  EmbeddingVector v = parsed["data"][0]["embedding"].get<EmbeddingVector>();
  if (dim_ == 0) dim_ = v.size();
  if (v.size() != dim_) {
    throw BackendError("embedding dimension " + std::to_string(v.size()) +
                       " does not match expected " + std::to_string(dim_));
  }
  return v;
}

MemoryStore::MemoryStore(std::size_t dim) : dim_(dim) {
  if (dim_ == 0) throw ConfigError("memory store dimension must be positive");
}

std::uint64_t MemoryStore::append_reflection(ReflectionRecord record) {
  if (record.embedding.size() != dim_) {
    throw DataError("reflection embedding dimension " +
                    std::to_string(record.embedding.size()) +
                    " does not match store dimension " + std::to_string(dim_));
  }
  if (record.level != kActivityLevel && record.level != kLocationLevel) {
    throw DataError("unknown reflection level: " + record.level);
  }
  record.created_at = next_created_at_++;
  reflections_.push_back(std::move(record));
  return reflections_.back().created_at;
}

void MemoryStore::add_trajectory(TrajectoryEntry entry) {
  if (entry.embedding.size() != dim_) {
    throw DataError("trajectory embedding dimension " +
                    std::to_string(entry.embedding.size()) +
                    " does not match store dimension " + std::to_string(dim_));
  }
  pool_.push_back(std::move(entry));
}

std::size_t MemoryStore::count(std::string_view level) const {
  return static_cast<std::size_t>(
      std::count_if(reflections_.begin(), reflections_.end(),
                    [&](const ReflectionRecord& r) { return r.level == level; }));
}

void MemoryStore::persist(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write memory file: " + path.string());
  out << json{{"schema", kMemorySchema},
              {"dim", dim_},
              {"reflections", reflections_.size()},
              {"trajectories", pool_.size()}}
             .dump()
      << '\n';
  for (const ReflectionRecord& r : reflections_) {
    out << json{{"kind", "reflection"},
                {"level", r.level},
                {"user", r.user},
                {"context", r.context_digest},
                {"prediction", r.prediction},
                {"actual", r.actual},
                {"lesson", r.lesson},
                {"embedding", r.embedding},
                {"created_at", r.created_at}}
               .dump()
        << '\n';
  }
  for (const TrajectoryEntry& t : pool_) {
    out << json{{"kind", "trajectory"},
                {"user", t.user},
                {"traj_index", t.traj_index},
                {"digest", t.digest},
                {"embedding", t.embedding}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("failed writing memory file: " + path.string());
}

MemoryStore MemoryStore::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open memory file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw StateError("memory file is empty: " + path.string());
  }
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema", "") != kMemorySchema) {
    throw StateError("memory file missing schema header: " + path.string());
  }
  MemoryStore store(header.value("dim", std::size_t{0}));
  std::uint64_t max_created = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("kind")) {
      throw StateError("corrupt memory entry at " + path.string() + ":" +
                       std::to_string(line_no));
    }
    std::string kind = row["kind"].get<std::string>();
    try {
      if (kind == "reflection") {
        ReflectionRecord r;
        r.level = row.at("level").get<std::string>();
        r.user = row.at("user").get<std::string>();
        r.context_digest = row.at("context").get<std::string>();
        r.prediction = row.at("prediction").get<std::string>();
        r.actual = row.at("actual").get<std::string>();
        r.lesson = row.at("lesson").get<std::string>();
        r.embedding = row.at("embedding").get<EmbeddingVector>();
        std::uint64_t created = row.at("created_at").get<std::uint64_t>();
        if (r.embedding.size() != store.dim_) {
          throw StateError("embedding dimension mismatch");
        }
        r.created_at = created;
        max_created = std::max(max_created, created + 1);
        store.reflections_.push_back(std::move(r));
      } else if (kind == "trajectory") {
        TrajectoryEntry t;
        t.user = row.at("user").get<std::string>();
        t.traj_index = row.at("traj_index").get<std::size_t>();
        t.digest = row.at("digest").get<std::string>();
        t.embedding = row.at("embedding").get<EmbeddingVector>();
        if (t.embedding.size() != store.dim_) {
          throw StateError("embedding dimension mismatch");
        }
        store.pool_.push_back(std::move(t));
      } else {
        throw StateError("unknown entry kind: " + kind);
      }
    } catch (const json::exception&) {
      throw StateError("corrupt memory entry at " + path.string() + ":" +
                       std::to_string(line_no));
    }
  }
  if (store.reflections_.size() != header.value("reflections", std::size_t{0}) ||
      store.pool_.size() != header.value("trajectories", std::size_t{0})) {
    throw StateError("memory file truncated: " + path.string());
  }
  store.next_created_at_ = max_created;
  return store;
}

namespace {

bool has_norm(const EmbeddingVector& v) {
  for (double x : v) {
    if (x != 0.0) return true;
  }
  return false;
}

}  // namespace

std::vector<ReflectionRecord> retrieve_top_n(const MemoryStore& store,
                                             const EmbeddingVector& query,
                                             std::string_view level,
                                             std::size_t n) {
  struct Scored {
    double sim;
    std::size_t idx;
  };
  std::vector<Scored> scored;
  const auto& records = store.reflections();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].level != level) continue;
    // A record embedded from token-free text has zero norm; it can never
    // rank, so it is skipped rather than poisoning the whole query.
    if (!has_norm(records[i].embedding)) continue;
    scored.push_back({cosine(query, records[i].embedding), i});
  }
  std::sort(scored.begin(), scored.end(), [&](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return records[a.idx].created_at < records[b.idx].created_at;
  });
  if (scored.size() > n) scored.resize(n);
  std::vector<ReflectionRecord> out;
  out.reserve(scored.size());
  for (const Scored& s : scored) out.push_back(records[s.idx]);
  return out;
}

std::vector<TrajectoryEntry> retrieve_similar_trajectories(
    const MemoryStore& store, const EmbeddingVector& query, std::size_t n) {
  struct Scored {
    double sim;
    std::size_t idx;
  };
  std::vector<Scored> scored;
  const auto& pool = store.trajectory_pool();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!has_norm(pool[i].embedding)) continue;
    scored.push_back({cosine(query, pool[i].embedding), i});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.sim > b.sim; });
  if (scored.size() > n) scored.resize(n);
  std::vector<TrajectoryEntry> out;
  out.reserve(scored.size());
  for (const Scored& s : scored) out.push_back(pool[s.idx]);
  return out;
}

namespace {

bool reflect_impl(MemoryStore& store, LlmClient& client,
                  EmbeddingProvider& embedder, const ReflectionInput& input,
                  std::string_view level, std::string_view what) {
  CompletionRequest request;
  request.system_text =
      "You write short, transferable lessons from prediction mistakes.";
  std::string prompt;
  prompt += std::string(kRequestIdPrefix) + input.request_tag + "\n\n";
  prompt += "The following " + std::string(what) + " missed the true answer.\n\n";
  prompt += "Context:\n" + input.context_digest + "\n\n";
  prompt += "Predicted: " + input.prediction + "\n";
  prompt += "Actual: " + input.actual + "\n\n";
  prompt +=
      "Write one lesson of at most two sentences that would help rank the "
      "actual answer higher in similar contexts. Reply with the lesson text "
      "only.";
  request.user_text = std::move(prompt);

  std::string text;
  try {
    text = client.complete(request).text;
  } catch (const BackendError&) {
    return false;
  }
  std::size_t fence = text.find("```");
  if (fence != std::string::npos) {
    std::size_t body = text.find('\n', fence);
    std::size_t close = body == std::string::npos
                            ? std::string::npos
                            : text.find("```", body + 1);
    if (body != std::string::npos && close != std::string::npos) {
      text = text.substr(body + 1, close - body - 1);
    }
  }
  std::string lesson = collapse_whitespace(text);
  if (lesson.rfind("Lesson:", 0) == 0) {
    lesson = trim(lesson.substr(7));
  }
  if (lesson.empty()) return false;

  ReflectionRecord record;
  record.level = std::string(level);
  record.user = input.user;
  record.context_digest = input.context_digest;
  record.prediction = input.prediction;
  record.actual = input.actual;
  record.lesson = std::move(lesson);
  record.embedding = embedder.embed(input.context_digest);
  store.append_reflection(std::move(record));
  return true;
}

}  // namespace

bool reflect_activity(MemoryStore& store, LlmClient& client,
                      EmbeddingProvider& embedder, const ReflectionInput& input) {
  return reflect_impl(store, client, embedder, input, kActivityLevel,
                      "activity category prediction");
}

bool reflect_location(MemoryStore& store, LlmClient& client,
                      EmbeddingProvider& embedder, const ReflectionInput& input) {
  return reflect_impl(store, client, embedder, input, kLocationLevel,
                      "location ranking");
}

}  // namespace zhmf
