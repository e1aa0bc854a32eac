#include "zhmf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {

using nlohmann::json;

std::string UserCohorts::stratum_of(const std::string& user) const {
  if (zero_shot.count(user)) return "unseen";
  if (inactive.count(user)) return "inactive";
  if (normal.count(user)) return "normal";
  if (active.count(user)) return "active";
  return "unknown";
}

namespace {

int resolve_column(const ColumnRef& ref, const std::vector<std::string>& header,
                   bool has_header, const std::string& field) {
  if (ref.by_name()) {
    if (!has_header) {
      throw ConfigError("schema column '" + field + "' is addressed by name ('" +
                        ref.name + "') but the file has no header");
    }
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == ref.name) return static_cast<int>(i);
    }
    throw ConfigError("schema column missing: '" + ref.name + "' (field " +
                      field + ") not found in header");
  }
  if (ref.index < 0) {
    throw ConfigError("schema column missing: field '" + field +
                      "' has neither name nor index");
  }
  return ref.index;
}

bool parse_long(const std::string& s, std::int64_t& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(t, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == t.size();
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stod(t, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == t.size() && std::isfinite(out);
}

bool parse_timestamp(const std::string& raw, std::int64_t& out) {
  if (parse_long(raw, out)) return true;
  const std::string t = trim(raw);
  int y, mo, d, h, mi, s;
  if (std::sscanf(t.c_str(), "%d-%d-%d%*1[ T]%d:%d:%d", &y, &mo, &d, &h, &mi,
                  &s) == 6) {
    std::tm tm{};
    tm.tm_year = y - 1900;
    tm.tm_mon = mo - 1;
    tm.tm_mday = d;
    tm.tm_hour = h;
    tm.tm_min = mi;
    tm.tm_sec = s;
    std::time_t v = timegm(&tm);
    if (v == static_cast<std::time_t>(-1)) return false;
    out = static_cast<std::int64_t>(v);
    return true;
  }
  return false;
}

}  // namespace

ParseResult parse_checkins(const std::filesystem::path& path,
                           const CheckinSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read check-in file: " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  if (schema.has_header) {
    if (!std::getline(in, line)) throw DataError("check-in file is empty: " + path.string());
    ++line_no;
    header = split(line, schema.delimiter);
  }

  const int c_user = resolve_column(schema.user, header, schema.has_header, "user");
  const int c_poi = resolve_column(schema.poi, header, schema.has_header, "poi");
  const int c_cat = resolve_column(schema.category, header, schema.has_header, "category");
  const int c_lat = resolve_column(schema.lat, header, schema.has_header, "lat");
  const int c_lon = resolve_column(schema.lon, header, schema.has_header, "lon");
  const int c_ts = resolve_column(schema.timestamp, header, schema.has_header, "timestamp");
  int c_tz = -1;
  if (schema.tz_offset_min) {
    c_tz = resolve_column(*schema.tz_offset_min, header, schema.has_header, "tz_offset_min");
  }
  const int max_col = std::max({c_user, c_poi, c_cat, c_lat, c_lon, c_ts, c_tz});

  ParseResult result;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::vector<std::string> cols = split(line, schema.delimiter);

    auto reject = [&](const std::string& reason) {
      result.rejects.push_back({line_no, reason, line});
    };

    if (static_cast<int>(cols.size()) <= max_col) {
      reject("too few columns");
      continue;
    }
    const std::string user = trim(cols[c_user]);
    const std::string poi_id = trim(cols[c_poi]);
    const std::string category = trim(cols[c_cat]);
    if (user.empty()) { reject("empty user"); continue; }
    if (poi_id.empty()) { reject("empty poi"); continue; }
    if (category.empty()) { reject("empty category"); continue; }

    double lat = 0.0, lon = 0.0;
    if (!parse_double(cols[c_lat], lat)) { reject("bad lat"); continue; }
    if (!parse_double(cols[c_lon], lon)) { reject("bad lon"); continue; }
    if (lat < -90.0 || lat > 90.0) { reject("lat out of range"); continue; }
    if (lon < -180.0 || lon > 180.0) { reject("lon out of range"); continue; }

    std::int64_t ts = 0;
    if (!parse_timestamp(cols[c_ts], ts)) { reject("bad timestamp"); continue; }
    if (c_tz >= 0) {
      std::int64_t offset_min = 0;
      if (!parse_long(cols[c_tz], offset_min)) { reject("bad tz offset"); continue; }
      ts -= offset_min * 60;
    }

    // First row mentioning a POI id fixes its attributes.
    result.pois.emplace(poi_id, Poi{poi_id, category, lat, lon});
    result.checkins.push_back({user, poi_id, ts});
  }

  if (result.checkins.empty()) {
    throw DataError("no valid check-in rows in " + path.string() + " (" +
                    std::to_string(result.rejects.size()) + " rejected)");
  }
  return result;
}

std::vector<CheckIn> filter_sparse(std::vector<CheckIn> checkins, int min_count) {
  if (min_count < 1) throw ConfigError("filter_sparse: min_count must be >= 1");
  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::string, int> user_counts;
    for (const auto& c : checkins) ++user_counts[c.user];
    std::vector<CheckIn> kept;
    kept.reserve(checkins.size());
    for (auto& c : checkins) {
      if (user_counts[c.user] >= min_count) kept.push_back(std::move(c));
    }
    if (kept.size() != checkins.size()) changed = true;
    checkins = std::move(kept);

    std::map<std::string, int> poi_counts;
    for (const auto& c : checkins) ++poi_counts[c.poi];
    kept.clear();
    kept.reserve(checkins.size());
    for (auto& c : checkins) {
      if (poi_counts[c.poi] >= min_count) kept.push_back(std::move(c));
    }
    if (kept.size() != checkins.size()) changed = true;
    checkins = std::move(kept);
  }
  if (checkins.empty()) {
    throw DataError("filter_sparse: corpus too sparse for min_count=" +
                    std::to_string(min_count));
  }
  return checkins;
}

std::vector<Trajectory> segment_trajectories(const std::vector<CheckIn>& checkins,
                                             double gap_hours) {
  const double gap_seconds = gap_hours * 3600.0;
  std::map<std::string, std::vector<CheckIn>> by_user;
  for (const auto& c : checkins) by_user[c.user].push_back(c);

  std::vector<Trajectory> out;
  for (auto& [user, records] : by_user) {
    std::stable_sort(records.begin(), records.end(),
                     [](const CheckIn& a, const CheckIn& b) {
                       return a.timestamp < b.timestamp;
                     });
    Trajectory current{user, {}, false};
    for (const auto& rec : records) {
      if (!current.checkins.empty()) {
        const double gap =
            static_cast<double>(rec.timestamp - current.checkins.back().timestamp);
        if (gap > gap_seconds) {
          out.push_back(std::move(current));
          current = Trajectory{user, {}, false};
        } else if (rec.timestamp == current.checkins.back().timestamp) {
          current.tie_flagged = true;
        }
      }
      current.checkins.push_back(rec);
    }
    if (!current.checkins.empty()) out.push_back(std::move(current));
  }
  return out;
}

CorpusSplits chronological_split(std::vector<Trajectory> trajectories,
                                 const PoiIndex& pois,
                                 const std::array<double, 3>& ratios) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("chronological_split: negative ratio");
    sum += r;
  }
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw ConfigError("chronological_split: ratios must sum to 1");
  }

  std::stable_sort(trajectories.begin(), trajectories.end(),
                   [](const Trajectory& a, const Trajectory& b) {
                     return a.end_time() < b.end_time();
                   });
  const std::size_t n = trajectories.size();
  const std::size_t cut1 =
      static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[0]));
  const std::size_t cut2 = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * (ratios[0] + ratios[1])));

  CorpusSplits splits;
  std::set<std::string> train_users;
  std::set<std::string> train_pois;
  for (std::size_t i = 0; i < cut1 && i < n; ++i) {
    Trajectory& t = trajectories[i];
    train_users.insert(t.user);
    for (const auto& c : t.checkins) train_pois.insert(c.poi);
    splits.user_index[t.user].push_back(splits.train.size());
    splits.train.push_back(std::move(t));
  }
  for (const std::string& id : train_pois) {
    auto it = pois.find(id);
    if (it == pois.end()) {
      throw DataError("chronological_split: POI '" + id + "' missing from index");
    }
    splits.poi_index.insert(*it);
    splits.category_set.insert(it->second.category);
  }

  auto admit = [&](Trajectory& t, std::vector<Trajectory>& dest,
                   std::size_t& drop_count) {
    if (!train_users.count(t.user)) {
      ++drop_count;
      return;
    }
    for (const auto& c : t.checkins) {
      if (!train_pois.count(c.poi)) {
        ++drop_count;
        return;
      }
    }
    dest.push_back(std::move(t));
  };
  for (std::size_t i = cut1; i < cut2 && i < n; ++i) {
    admit(trajectories[i], splits.valid, splits.dropped_valid);
  }
  for (std::size_t i = cut2; i < n; ++i) {
    admit(trajectories[i], splits.test, splits.dropped_test);
  }
  return splits;
}

UserCohorts stratify_users(const CorpusSplits& splits) {
  if (splits.train.empty()) throw DataError("stratify_users: empty train split");
  std::vector<std::pair<std::size_t, std::string>> ranked;  // (count, user)
  ranked.reserve(splits.user_index.size());
  for (const auto& [user, idxs] : splits.user_index) {
    ranked.emplace_back(idxs.size(), user);
  }
  const std::size_t n = ranked.size();
  if (n < 4) {
    throw DataError("stratify_users: need at least 4 training users, have " +
                    std::to_string(n));
  }
  std::sort(ranked.begin(), ranked.end());  // count asc, then user id asc
  const std::size_t b1 =
      static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.3));
  const std::size_t b2 =
      static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.7));

  UserCohorts cohorts;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < b1) {
      cohorts.inactive.insert(ranked[i].second);
    } else if (i < b2) {
      cohorts.normal.insert(ranked[i].second);
    } else {
      cohorts.active.insert(ranked[i].second);
    }
  }
  return cohorts;
}

UserCohorts zero_shot_holdout(const CorpusSplits& splits, double fraction,
                              std::uint64_t seed, UserCohorts base) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw ConfigError("zero_shot_holdout: fraction must be in (0, 1)");
  }
  std::vector<std::string> users;
  users.reserve(splits.user_index.size());
  for (const auto& [user, _] : splits.user_index) users.push_back(user);

  // Fisher-Yates over splitmix64; std::shuffle is not portable across
  // standard libraries.
  std::uint64_t state = seed;
  for (std::size_t i = users.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(splitmix64(state) % i);
    std::swap(users[i - 1], users[j]);
  }
  const std::size_t k = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(users.size())));

  base.zero_shot.clear();
  for (std::size_t i = 0; i < k && i < users.size(); ++i) {
    base.zero_shot.insert(users[i]);
  }
  bool any_eval = false;
  for (const auto& t : splits.test) {
    if (base.zero_shot.count(t.user)) {
      any_eval = true;
      break;
    }
  }
  if (!any_eval) {
    throw DataError(
        "zero_shot_holdout: holdout leaves no test trajectories to evaluate");
  }
  return base;
}

// --- Canonical archive -------------------------------------------------------

namespace {

json header_line(std::string_view schema) {
  return json{{"schema", std::string(schema)}};
}

void require_schema(const json& header, std::string_view expected,
                    const std::filesystem::path& path) {
  if (!header.is_object() || !header.contains("schema") ||
      header["schema"] != std::string(expected)) {
    throw StateError("unexpected schema in " + path.string() + " (want " +
                     std::string(expected) + ")");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return in;
}

json parse_line(const std::string& line, const std::filesystem::path& path,
                std::size_t line_no) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded()) {
    throw StateError("corrupt record at " + path.string() + ":" +
                     std::to_string(line_no));
  }
  return j;
}

json trajectory_to_json(const Trajectory& t, const char* split) {
  json checkins = json::array();
  for (const auto& c : t.checkins) {
    checkins.push_back(json{{"poi", c.poi}, {"t", c.timestamp}});
  }
  json j{{"user", t.user}, {"checkins", std::move(checkins)}};
  if (split) j["split"] = split;
  if (t.tie_flagged) j["tie_flagged"] = true;
  return j;
}

Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  t.user = j.at("user").get<std::string>();
  t.tie_flagged = j.value("tie_flagged", false);
  for (const auto& c : j.at("checkins")) {
    t.checkins.push_back(
        {t.user, c.at("poi").get<std::string>(), c.at("t").get<std::int64_t>()});
  }
  if (t.checkins.empty()) throw StateError("empty trajectory record");
  return t;
}

}  // namespace

void write_corpus_archive(const std::filesystem::path& path, const PoiIndex& pois,
                          const std::vector<CheckIn>& checkins,
                          const std::string& source_name) {
  auto out = open_out(path);
  json header = header_line(kCorpusSchema);
  header["source"] = source_name;
  header["pois"] = pois.size();
  header["checkins"] = checkins.size();
  out << header.dump() << '\n';
  for (const auto& [id, poi] : pois) {
    out << json{{"type", "poi"},
                {"id", poi.id},
                {"category", poi.category},
                {"lat", poi.lat},
                {"lon", poi.lon}}
               .dump()
        << '\n';
  }
  for (const auto& c : checkins) {
    out << json{{"type", "checkin"}, {"user", c.user}, {"poi", c.poi}, {"t", c.timestamp}}
               .dump()
        << '\n';
  }
}

PoiIndex load_corpus_pois(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  std::size_t line_no = 0;
  PoiIndex pois;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    json j = parse_line(line, path, line_no);
    if (!saw_header) {
      require_schema(j, kCorpusSchema, path);
      saw_header = true;
      continue;
    }
    if (j.at("type") == "poi") {
      Poi p{j.at("id").get<std::string>(), j.at("category").get<std::string>(),
            j.at("lat").get<double>(), j.at("lon").get<double>()};
      pois.emplace(p.id, std::move(p));
    }
  }
  if (!saw_header) throw StateError("empty corpus archive: " + path.string());
  return pois;
}

void write_splits(const std::filesystem::path& path, const CorpusSplits& splits) {
  auto out = open_out(path);
  json header = header_line(kSplitsSchema);
  header["train"] = splits.train.size();
  header["valid"] = splits.valid.size();
  header["test"] = splits.test.size();
  header["dropped_valid"] = splits.dropped_valid;
  header["dropped_test"] = splits.dropped_test;
  out << header.dump() << '\n';
  for (const auto& t : splits.train) out << trajectory_to_json(t, "train").dump() << '\n';
  for (const auto& t : splits.valid) out << trajectory_to_json(t, "valid").dump() << '\n';
  for (const auto& t : splits.test) out << trajectory_to_json(t, "test").dump() << '\n';
}

CorpusSplits load_splits(const std::filesystem::path& splits_path,
                         const std::filesystem::path& corpus_path) {
  const PoiIndex all_pois = load_corpus_pois(corpus_path);

  auto in = open_in(splits_path);
  std::string line;
  std::size_t line_no = 0;
  CorpusSplits splits;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    json j = parse_line(line, splits_path, line_no);
    if (!saw_header) {
      require_schema(j, kSplitsSchema, splits_path);
      splits.dropped_valid = j.value("dropped_valid", 0u);
      splits.dropped_test = j.value("dropped_test", 0u);
      saw_header = true;
      continue;
    }
    Trajectory t = trajectory_from_json(j);
    const std::string split = j.at("split").get<std::string>();
    if (split == "train") {
      splits.user_index[t.user].push_back(splits.train.size());
      splits.train.push_back(std::move(t));
    } else if (split == "valid") {
      splits.valid.push_back(std::move(t));
    } else if (split == "test") {
      splits.test.push_back(std::move(t));
    } else {
      throw StateError("unknown split tag '" + split + "' in " +
                       splits_path.string());
    }
  }
  if (!saw_header) throw StateError("empty splits file: " + splits_path.string());

  for (const auto& t : splits.train) {
    for (const auto& c : t.checkins) {
      auto it = all_pois.find(c.poi);
      if (it == all_pois.end()) {
        throw StateError("splits reference POI '" + c.poi +
                         "' absent from corpus archive");
      }
      splits.poi_index.insert(*it);
      splits.category_set.insert(it->second.category);
    }
  }
  return splits;
}

void write_cohorts(const std::filesystem::path& path, const UserCohorts& cohorts) {
  auto out = open_out(path);
  json j = header_line(kCohortsSchema);
  j["inactive"] = cohorts.inactive;
  j["normal"] = cohorts.normal;
  j["active"] = cohorts.active;
  j["zero_shot"] = cohorts.zero_shot;
  out << j.dump(2) << '\n';
}

void write_rejects(const std::filesystem::path& path,
                   const std::vector<RejectedRow>& rejects) {
  auto out = open_out(path);
  out << header_line(kRejectsSchema).dump() << '\n';
  for (const RejectedRow& row : rejects) {
    out << json{{"line", row.line_no}, {"reason", row.reason}, {"raw", row.raw}}
               .dump()
        << '\n';
  }
}

UserCohorts load_cohorts(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  json j = json::parse(buf.str(), nullptr, false);
  if (j.is_discarded()) throw StateError("corrupt cohorts file: " + path.string());
  require_schema(j, kCohortsSchema, path);
  UserCohorts cohorts;
  cohorts.inactive = j.value("inactive", std::set<std::string>{});
  cohorts.normal = j.value("normal", std::set<std::string>{});
  cohorts.active = j.value("active", std::set<std::string>{});
  cohorts.zero_shot = j.value("zero_shot", std::set<std::string>{});
  return cohorts;
}

}  // namespace zhmf
