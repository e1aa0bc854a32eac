#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "zhmf/types.hpp"

namespace zhmf {

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
};

// Great-circle distance, Earth radius 6371.0 km.
double haversine_km(GeoPoint a, GeoPoint b);

// Category visit counts with normalized frequencies, sorted by count
// descending (ties by category name).
struct CategoryProfile {
  struct Entry {
    std::string category;
    std::size_t count = 0;
    double freq = 0.0;
  };
  std::vector<Entry> entries;
  std::string window;  // "long-term" | "recent-k"

  bool empty() const { return entries.empty(); }
  std::vector<std::string> top_categories(std::size_t limit) const;
  std::vector<std::string> lines(std::size_t limit) const;
};

CategoryProfile long_term_profile(const std::vector<CheckIn>& history,
                                  const PoiIndex& pois);
CategoryProfile recent_profile(const std::vector<CheckIn>& prefix,
                               const PoiIndex& pois, std::size_t k = 10);

// Consecutive category pairs within trajectories; never across boundaries.
struct TransitionStats {
  std::map<std::pair<std::string, std::string>, std::size_t> counts;
  std::map<std::string, std::size_t> row_totals;

  std::vector<std::string> top_lines(std::size_t limit) const;
};

TransitionStats transitions(const std::vector<Trajectory>& history,
                            const PoiIndex& pois);

// Visit counts per half-open grid cell (floor(lat/cell), floor(lon/cell)).
struct SpatialPreference {
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> cells;
  double cell_size_deg = 0.01;

  std::vector<std::string> top_lines(std::size_t limit) const;
};

SpatialPreference spatial_preference(const std::vector<CheckIn>& history,
                                     const PoiIndex& pois,
                                     double cell_size_deg = 0.01);

// Half-open time-of-day buckets covering [0, 24) without overlap.
struct TimeBucket {
  std::string name;
  int start_hour = 0;
  int end_hour = 0;
};

std::vector<TimeBucket> default_time_buckets();
// Throws ConfigError unless the scheme covers [0, 24) exactly, no overlap.
void validate_buckets(const std::vector<TimeBucket>& scheme);
int bucket_of(std::int64_t ts, const std::vector<TimeBucket>& scheme);

// Per (bucket, weekday/weekend) POI visit counts, each list sorted by count
// descending then poi id.
struct TemporalPreference {
  std::vector<TimeBucket> scheme;
  std::map<std::pair<int, bool>, std::vector<std::pair<std::string, std::size_t>>>
      buckets;  // (bucket index, is_weekend) -> [(poi, count)]

  std::vector<std::string> lines_for(int bucket, bool weekend,
                                     const PoiIndex& pois,
                                     std::size_t limit) const;
};

TemporalPreference temporal_preference(const std::vector<CheckIn>& history,
                                       const PoiIndex& pois,
                                       const std::vector<TimeBucket>& scheme);

// The last <= window hops of the active trajectory, most recent last.
struct MovementSummary {
  struct Hop {
    std::string from;
    std::string to;
    double distance_km = 0.0;
    double elapsed_min = 0.0;
  };
  std::vector<Hop> hops;

  std::vector<std::string> lines(const PoiIndex& pois) const;
};

MovementSummary movement_summary(const std::vector<CheckIn>& prefix,
                                 const PoiIndex& pois, std::size_t window = 5);

// Candidate POIs sorted ascending by distance from the anchor (ties by poi
// id), truncated to cap.
struct CandidateSet {
  struct Item {
    Poi poi;
    double distance_km = 0.0;
  };
  std::vector<Item> items;
  GeoPoint anchor;

  bool contains(const std::string& poi_id) const;
  std::vector<std::string> ids() const;
  std::vector<std::string> lines() const;
};

// predicted_categories empty means unrestricted (the one-stage variant).
// Throws DataError when a non-empty category filter matches no POI.
CandidateSet build_candidates(GeoPoint anchor,
                              const std::vector<std::string>& predicted_categories,
                              const PoiIndex& pois, std::size_t cap = 100);

}  // namespace zhmf
