#include "zhmf/features.hpp"

#include <algorithm>
#include <cmath>

#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {

namespace {

constexpr double kEarthRadiusKm = 6371.0;

double radians(double deg) { return deg * M_PI / 180.0; }

const Poi& poi_at(const PoiIndex& pois, const std::string& id) {
  auto it = pois.find(id);
  if (it == pois.end()) throw DataError("unknown POI id: " + id);
  return it->second;
}

CategoryProfile count_categories(const std::vector<CheckIn>& records,
                                 const PoiIndex& pois, std::string window) {
  std::map<std::string, std::size_t> counts;
  for (const auto& c : records) ++counts[poi_at(pois, c.poi).category];

  CategoryProfile profile;
  profile.window = std::move(window);
  std::size_t total = 0;
  for (const auto& [cat, count] : counts) total += count;
  for (const auto& [cat, count] : counts) {
    profile.entries.push_back(
        {cat, count, static_cast<double>(count) / static_cast<double>(total)});
  }
  std::sort(profile.entries.begin(), profile.entries.end(),
            [](const CategoryProfile::Entry& a, const CategoryProfile::Entry& b) {
              if (a.count != b.count) return a.count > b.count;
              return a.category < b.category;
            });
  return profile;
}

}  // namespace

double haversine_km(GeoPoint a, GeoPoint b) {
  const double phi1 = radians(a.lat);
  const double phi2 = radians(b.lat);
  const double dphi = radians(b.lat - a.lat);
  const double dlambda = radians(b.lon - a.lon);
  const double s = std::sin(dphi / 2.0) * std::sin(dphi / 2.0) +
                   std::cos(phi1) * std::cos(phi2) * std::sin(dlambda / 2.0) *
                       std::sin(dlambda / 2.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(s)));
}

std::vector<std::string> CategoryProfile::top_categories(std::size_t limit) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (out.size() >= limit) break;
    out.push_back(e.category);
  }
  return out;
}

std::vector<std::string> CategoryProfile::lines(std::size_t limit) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (out.size() >= limit) break;
    out.push_back(std::to_string(out.size() + 1) + ". " + e.category + ": " +
                  std::to_string(e.count) + " visits (" +
                  fmt_fixed(e.freq * 100.0, 1) + "%)");
  }
  return out;
}

CategoryProfile long_term_profile(const std::vector<CheckIn>& history,
                                  const PoiIndex& pois) {
  return count_categories(history, pois, "long-term");
}

CategoryProfile recent_profile(const std::vector<CheckIn>& prefix,
                               const PoiIndex& pois, std::size_t k) {
  if (k < 1) throw ConfigError("recent_profile: k must be >= 1");
  const std::size_t take = std::min(k, prefix.size());
  std::vector<CheckIn> window(prefix.end() - static_cast<std::ptrdiff_t>(take),
                              prefix.end());
  return count_categories(window, pois, "recent-" + std::to_string(k));
}

TransitionStats transitions(const std::vector<Trajectory>& history,
                            const PoiIndex& pois) {
  TransitionStats stats;
  for (const auto& traj : history) {
    for (std::size_t i = 1; i < traj.checkins.size(); ++i) {
      const std::string& from = poi_at(pois, traj.checkins[i - 1].poi).category;
      const std::string& to = poi_at(pois, traj.checkins[i].poi).category;
      ++stats.counts[{from, to}];
      ++stats.row_totals[from];
    }
  }
  return stats;
}

std::vector<std::string> TransitionStats::top_lines(std::size_t limit) const {
  std::vector<std::pair<std::pair<std::string, std::string>, std::size_t>> items(
      counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (const auto& [pair, count] : items) {
    if (out.size() >= limit) break;
    out.push_back(std::to_string(out.size() + 1) + ". " + pair.first + " -> " +
                  pair.second + ": " + std::to_string(count));
  }
  return out;
}

SpatialPreference spatial_preference(const std::vector<CheckIn>& history,
                                     const PoiIndex& pois, double cell_size_deg) {
  if (cell_size_deg <= 0.0) {
    throw ConfigError("spatial_preference: cell size must be positive");
  }
  SpatialPreference pref;
  pref.cell_size_deg = cell_size_deg;
  for (const auto& c : history) {
    const Poi& p = poi_at(pois, c.poi);
    const auto ci = static_cast<std::int64_t>(std::floor(p.lat / cell_size_deg));
    const auto cj = static_cast<std::int64_t>(std::floor(p.lon / cell_size_deg));
    ++pref.cells[{ci, cj}];
  }
  return pref;
}

std::vector<std::string> SpatialPreference::top_lines(std::size_t limit) const {
  std::vector<std::pair<std::pair<std::int64_t, std::int64_t>, std::size_t>> items(
      cells.begin(), cells.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (const auto& [cell, count] : items) {
    if (out.size() >= limit) break;
    const double lat = (static_cast<double>(cell.first) + 0.5) * cell_size_deg;
    const double lon = (static_cast<double>(cell.second) + 0.5) * cell_size_deg;
    out.push_back(std::to_string(out.size() + 1) + ". area around (" +
                  fmt_fixed(lat, 3) + ", " + fmt_fixed(lon, 3) + "): " +
                  std::to_string(count) + " visits");
  }
  return out;
}

std::vector<TimeBucket> default_time_buckets() {
  return {{"night", 0, 6}, {"morning", 6, 12}, {"afternoon", 12, 18},
          {"evening", 18, 24}};
}

void validate_buckets(const std::vector<TimeBucket>& scheme) {
  if (scheme.empty()) throw ConfigError("time buckets: empty scheme");
  std::vector<TimeBucket> sorted = scheme;
  std::sort(sorted.begin(), sorted.end(),
            [](const TimeBucket& a, const TimeBucket& b) {
              return a.start_hour < b.start_hour;
            });
  int cursor = 0;
  for (const auto& b : sorted) {
    if (b.start_hour != cursor || b.end_hour <= b.start_hour) {
      throw ConfigError("time buckets: scheme must cover [0,24) exactly; bucket '" +
                        b.name + "' breaks coverage at hour " +
                        std::to_string(cursor));
    }
    cursor = b.end_hour;
  }
  if (cursor != 24) {
    throw ConfigError("time buckets: scheme ends at hour " + std::to_string(cursor) +
                      ", expected 24");
  }
}

int bucket_of(std::int64_t ts, const std::vector<TimeBucket>& scheme) {
  const int hour = hour_of_day(ts);
  for (std::size_t i = 0; i < scheme.size(); ++i) {
    if (hour >= scheme[i].start_hour && hour < scheme[i].end_hour) {
      return static_cast<int>(i);
    }
  }
  throw ConfigError("time buckets: hour " + std::to_string(hour) +
                    " not covered by scheme");
}

TemporalPreference temporal_preference(const std::vector<CheckIn>& history,
                                       const PoiIndex& pois,
                                       const std::vector<TimeBucket>& scheme) {
  validate_buckets(scheme);
  TemporalPreference pref;
  pref.scheme = scheme;
  std::map<std::pair<int, bool>, std::map<std::string, std::size_t>> counts;
  for (const auto& c : history) {
    poi_at(pois, c.poi);  // enforce known POI
    const int bucket = bucket_of(c.timestamp, scheme);
    ++counts[{bucket, is_weekend(c.timestamp)}][c.poi];
  }
  for (const auto& [key, poi_counts] : counts) {
    std::vector<std::pair<std::string, std::size_t>> items(poi_counts.begin(),
                                                           poi_counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    pref.buckets[key] = std::move(items);
  }
  return pref;
}

std::vector<std::string> TemporalPreference::lines_for(int bucket, bool weekend,
                                                       const PoiIndex& pois,
                                                       std::size_t limit) const {
  std::vector<std::string> out;
  auto it = buckets.find({bucket, weekend});
  if (it == buckets.end()) return out;
  for (const auto& [poi_id, count] : it->second) {
    if (out.size() >= limit) break;
    auto pit = pois.find(poi_id);
    const std::string category = pit == pois.end() ? "?" : pit->second.category;
    out.push_back(std::to_string(out.size() + 1) + ". " + poi_id + " (" + category +
                  "): " + std::to_string(count) + " visits");
  }
  return out;
}

MovementSummary movement_summary(const std::vector<CheckIn>& prefix,
                                 const PoiIndex& pois, std::size_t window) {
  if (window < 1) throw ConfigError("movement_summary: window must be >= 1");
  MovementSummary summary;
  if (prefix.size() < 2) return summary;
  const std::size_t first_hop =
      prefix.size() - 1 > window ? prefix.size() - 1 - window : 0;
  for (std::size_t i = first_hop; i + 1 < prefix.size(); ++i) {
    const Poi& from = poi_at(pois, prefix[i].poi);
    const Poi& to = poi_at(pois, prefix[i + 1].poi);
    const double dist = haversine_km({from.lat, from.lon}, {to.lat, to.lon});
    const double minutes =
        static_cast<double>(prefix[i + 1].timestamp - prefix[i].timestamp) / 60.0;
    summary.hops.push_back({from.id, to.id, dist, minutes});
  }
  return summary;
}

std::vector<std::string> MovementSummary::lines(const PoiIndex& pois) const {
  std::vector<std::string> out;
  for (const auto& h : hops) {
    auto cat = [&](const std::string& id) {
      auto it = pois.find(id);
      return it == pois.end() ? std::string("?") : it->second.category;
    };
    out.push_back(std::to_string(out.size() + 1) + ". " + h.from + " (" +
                  cat(h.from) + ") -> " + h.to + " (" + cat(h.to) + "): " +
                  fmt_fixed(h.distance_km, 3) + " km, " +
                  std::to_string(static_cast<long long>(std::llround(h.elapsed_min))) +
                  " min");
  }
  return out;
}

bool CandidateSet::contains(const std::string& poi_id) const {
  return std::any_of(items.begin(), items.end(),
                     [&](const Item& it) { return it.poi.id == poi_id; });
}

std::vector<std::string> CandidateSet::ids() const {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.poi.id);
  return out;
}

std::vector<std::string> CandidateSet::lines() const {
  std::vector<std::string> out;
  for (const auto& it : items) {
    out.push_back(std::to_string(out.size() + 1) + ". id=" + it.poi.id +
                  " category=" + it.poi.category +
                  " distance_km=" + fmt_fixed(it.distance_km, 3));
  }
  return out;
}

CandidateSet build_candidates(GeoPoint anchor,
                              const std::vector<std::string>& predicted_categories,
                              const PoiIndex& pois, std::size_t cap) {
  const std::set<std::string> allowed(predicted_categories.begin(),
                                      predicted_categories.end());
  CandidateSet set;
  set.anchor = anchor;
  for (const auto& [id, poi] : pois) {
    if (!allowed.empty() && !allowed.count(poi.category)) continue;
    set.items.push_back({poi, haversine_km(anchor, {poi.lat, poi.lon})});
  }
  if (set.items.empty() && !allowed.empty()) {
    throw DataError("build_candidates: no POI matches any predicted category");
  }
  std::sort(set.items.begin(), set.items.end(),
            [](const CandidateSet::Item& a, const CandidateSet::Item& b) {
              if (a.distance_km != b.distance_km) {
                return a.distance_km < b.distance_km;
              }
              return a.poi.id < b.poi.id;
            });
  if (set.items.size() > cap) set.items.resize(cap);
  return set;
}

}  // namespace zhmf
