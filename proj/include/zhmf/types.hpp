#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace zhmf {

// A place users check into: unique id, category label, WGS84 coordinates.
struct Poi {
  std::string id;
  std::string category;
  double lat = 0.0;
  double lon = 0.0;
};

// One visit record. `poi` is an id resolving into the corpus PoiIndex.
struct CheckIn {
  std::string user;
  std::string poi;
  std::int64_t timestamp = 0;  // UTC seconds since epoch
};

// A user's chronologically ordered visit session. Timestamps are
// nondecreasing; equal neighbours keep input order and set tie_flagged.
struct Trajectory {
  std::string user;
  std::vector<CheckIn> checkins;
  bool tie_flagged = false;

  std::int64_t end_time() const { return checkins.back().timestamp; }
  std::int64_t start_time() const { return checkins.front().timestamp; }
};

using PoiIndex = std::map<std::string, Poi>;

struct RejectedRow {
  std::size_t line_no = 0;  // 1-based, counting the header if present
  std::string reason;
  std::string raw;
};

struct ParseResult {
  std::vector<CheckIn> checkins;
  PoiIndex pois;
  std::vector<RejectedRow> rejects;
};

// Chronological train/valid/test partition. poi_index and category_set
// cover the training universe only; valid/test trajectories whose user or
// any POI falls outside it are dropped at split time and counted here.
struct CorpusSplits {
  std::vector<Trajectory> train;
  std::vector<Trajectory> valid;
  std::vector<Trajectory> test;
  std::map<std::string, std::vector<std::size_t>> user_index;  // user -> train indices
  PoiIndex poi_index;
  std::set<std::string> category_set;
  std::size_t dropped_valid = 0;
  std::size_t dropped_test = 0;
};

// Activity strata over training users, plus the optional zero-shot holdout.
struct UserCohorts {
  std::set<std::string> inactive;
  std::set<std::string> normal;
  std::set<std::string> active;
  std::set<std::string> zero_shot;

  bool has_strata() const {
    return !(inactive.empty() && normal.empty() && active.empty());
  }
  // "inactive" | "normal" | "active" | "unseen" | "unknown"
  std::string stratum_of(const std::string& user) const;
};

}  // namespace zhmf
