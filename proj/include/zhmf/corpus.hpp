#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "zhmf/types.hpp"

namespace zhmf {

// A column is addressed by header name (requires has_header) or 0-based index.
struct ColumnRef {
  std::string name;  // empty when addressed by index
  int index = -1;

  bool by_name() const { return !name.empty(); }
};

// Column mapping for delimiter-separated check-in files. Timestamps are
// either integer epoch seconds or "YYYY-MM-DD HH:MM:SS" (a 'T' separator is
// accepted), read as UTC. When tz_offset_min is mapped, the timestamp column
// is interpreted as local time and the offset (minutes east of UTC) is
// subtracted to normalize.
struct CheckinSchema {
  char delimiter = ',';
  bool has_header = true;
  ColumnRef user;
  ColumnRef poi;
  ColumnRef category;
  ColumnRef lat;
  ColumnRef lon;
  ColumnRef timestamp;
  std::optional<ColumnRef> tz_offset_min;
};

// Reads raw rows in file order. Malformed rows land in the rejects report
// with a reason; they are never silently dropped. POI attributes are fixed
// by the first row mentioning the id.
ParseResult parse_checkins(const std::filesystem::path& path,
                           const CheckinSchema& schema);

// Alternates user- and POI-count filtering until a fixpoint: every retained
// user and every retained POI has at least min_count check-ins. Input order
// is preserved. Throws DataError when nothing survives.
std::vector<CheckIn> filter_sparse(std::vector<CheckIn> checkins,
                                   int min_count = 10);

// Per user, sorts by timestamp (stable) and opens a new trajectory whenever
// the gap between consecutive check-ins exceeds gap_hours.
std::vector<Trajectory> segment_trajectories(const std::vector<CheckIn>& checkins,
                                             double gap_hours = 24.0);

// Global chronological cut by trajectory end-time. Valid/test trajectories
// with users or POIs unseen in train are dropped and counted.
CorpusSplits chronological_split(std::vector<Trajectory> trajectories,
                                 const PoiIndex& pois,
                                 const std::array<double, 3>& ratios = {0.8, 0.1,
                                                                        0.1});

// Ranks training users by trajectory count (ties by user id) and cuts
// 30/40/30. Fewer than 4 users is an error.
UserCohorts stratify_users(const CorpusSplits& splits);

// Deterministically samples `fraction` of the training users as zero-shot
// holdouts; their records must be kept out of every memory/retrieval pool.
// `base` carries pre-computed strata through unchanged.
UserCohorts zero_shot_holdout(const CorpusSplits& splits, double fraction,
                              std::uint64_t seed, UserCohorts base = {});

// --- Canonical archive -----------------------------------------------------
// One record per line with a self-describing schema-version header, so
// downstream stages never reparse raw files.

inline constexpr std::string_view kCorpusSchema = "zhmf-corpus/1";
inline constexpr std::string_view kSplitsSchema = "zhmf-splits/1";
inline constexpr std::string_view kCohortsSchema = "zhmf-cohorts/1";
inline constexpr std::string_view kRejectsSchema = "zhmf-rejects/1";

void write_corpus_archive(const std::filesystem::path& path, const PoiIndex& pois,
                          const std::vector<CheckIn>& checkins,
                          const std::string& source_name);
void write_splits(const std::filesystem::path& path, const CorpusSplits& splits);
void write_cohorts(const std::filesystem::path& path, const UserCohorts& cohorts);
void write_rejects(const std::filesystem::path& path,
                   const std::vector<RejectedRow>& rejects);

PoiIndex load_corpus_pois(const std::filesystem::path& path);
CorpusSplits load_splits(const std::filesystem::path& splits_path,
                         const std::filesystem::path& corpus_path);
UserCohorts load_cohorts(const std::filesystem::path& path);

}  // namespace zhmf
