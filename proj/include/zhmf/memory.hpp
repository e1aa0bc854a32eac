#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zhmf/llm.hpp"

namespace zhmf {

using EmbeddingVector = std::vector<double>;

// Throws DataError on dimension mismatch or when either vector has zero norm.
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual EmbeddingVector embed(const std::string& text) = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string name() const = 0;
};

// Deterministic stand-in for a sentence-embedding model. Texts sharing more
// tokens land closer in cosine space, which is all retrieval needs.
//
// Construction, exactly:
//   tokens   = maximal alphanumeric runs of lowercase(text)
//   per token: state = fnv1a64(token) XOR seed, then dim draws from
//              splitmix64(state), each mapped to [-1, 1)
//   vector   = component-wise sum over tokens (zero vector when no tokens)
class HashEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit HashEmbeddingProvider(std::size_t dim = 64, std::uint64_t seed = 0);
  EmbeddingVector embed(const std::string& text) override;
  std::size_t dim() const override { return dim_; }
  std::string name() const override { return "hash"; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

// Embeddings wire client: POST {model, input: [text]} to endpoint_url, reads
// data[0].embedding. Bearer token comes from the environment variable named
// by auth_env. dim = 0 adopts the dimension of the first response.
class HttpEmbeddingProvider : public EmbeddingProvider {
 public:
  HttpEmbeddingProvider(std::string endpoint_url, std::string model,
                        std::string auth_env, std::size_t dim = 0,
                        int timeout_ms = 60000);
  EmbeddingVector embed(const std::string& text) override;
  std::size_t dim() const override { return dim_; }
  std::string name() const override { return "http:" + model_; }

 private:
  std::string endpoint_url_;
  std::string model_;
  std::string auth_env_;
  std::size_t dim_;
  int timeout_ms_;
};

inline constexpr std::string_view kActivityLevel = "activity";
inline constexpr std::string_view kLocationLevel = "location";

// One stored lesson. created_at is an append counter, not wall time, so
// persisted stores replay identically.
struct ReflectionRecord {
  std::string level;  // kActivityLevel or kLocationLevel
  std::string user;
  std::string context_digest;
  std::string prediction;
  std::string actual;
  std::string lesson;
  EmbeddingVector embedding;  // of context_digest
  std::uint64_t created_at = 0;
};

// One training trajectory, summarised for similarity retrieval.
struct TrajectoryEntry {
  std::string user;
  std::size_t traj_index = 0;  // position in the training split
  std::string digest;
  EmbeddingVector embedding;
};

// Append-only bank of reflections plus the trajectory pool. All embeddings
// must match the store dimension.
class MemoryStore {
 public:
  explicit MemoryStore(std::size_t dim);

  std::size_t dim() const { return dim_; }
  std::uint64_t append_reflection(ReflectionRecord record);
  void add_trajectory(TrajectoryEntry entry);

  const std::vector<ReflectionRecord>& reflections() const { return reflections_; }
  const std::vector<TrajectoryEntry>& trajectory_pool() const { return pool_; }
  std::size_t count(std::string_view level) const;

  void persist(const std::filesystem::path& path) const;
  static MemoryStore load(const std::filesystem::path& path);

 private:
  std::size_t dim_;
  std::uint64_t next_created_at_ = 0;
  std::vector<ReflectionRecord> reflections_;
  std::vector<TrajectoryEntry> pool_;
};

inline constexpr std::string_view kMemorySchema = "zhmf-memory/1";

// Top n records of the given level by cosine similarity to the query,
// most similar first; ties prefer the older record.
std::vector<ReflectionRecord> retrieve_top_n(const MemoryStore& store,
                                             const EmbeddingVector& query,
                                             std::string_view level,
                                             std::size_t n);

// Top n pool entries by cosine similarity; ties prefer the earlier entry.
std::vector<TrajectoryEntry> retrieve_similar_trajectories(
    const MemoryStore& store, const EmbeddingVector& query, std::size_t n);

struct ReflectionInput {
  std::string user;
  std::string request_tag;  // becomes the request-id header of the prompt
  std::string context_digest;
  std::string prediction;  // rendering of what was predicted
  std::string actual;
};

// Ask the model for a short corrective lesson about a missed prediction and
// append it to the store. Returns false, storing nothing, when the call
// fails or produces an empty lesson.
bool reflect_activity(MemoryStore& store, LlmClient& client,
                      EmbeddingProvider& embedder, const ReflectionInput& input);
bool reflect_location(MemoryStore& store, LlmClient& client,
                      EmbeddingProvider& embedder, const ReflectionInput& input);

}  // namespace zhmf
