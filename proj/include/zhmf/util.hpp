#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace zhmf {

// FNV-1a, used for content digests written into run artifacts. Stable across
// platforms, unlike std::hash.
std::uint64_t fnv1a64(std::string_view data);
std::string fnv1a64_hex(std::string_view data);

// splitmix64 step; the deterministic RNG used wherever reproducibility
// across standard libraries matters (holdout sampling, hash embeddings).
std::uint64_t splitmix64(std::uint64_t& state);

// Maps a 64-bit word to [0, 1).
double unit_interval(std::uint64_t word);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char delim);

// Collapses runs of whitespace to single spaces and lowercases; the
// normalization applied before matching model output against known names.
std::string normalize_label(std::string_view s);

// UTC civil-time helpers. Timestamps are seconds since epoch.
int hour_of_day(std::int64_t ts);
int minute_of_hour(std::int64_t ts);
// 0 = Sunday ... 6 = Saturday.
int day_of_week(std::int64_t ts);
bool is_weekend(std::int64_t ts);
// "Tue 2012-04-03 18:00"
std::string format_utc(std::int64_t ts);
// "Tue 18" (weekday + hour), the compact form used in trajectory digests.
std::string format_utc_short(std::int64_t ts);

// snprintf-backed fixed-decimal formatting; keeps rendered numbers stable.
std::string fmt_fixed(double value, int decimals);

// "https://host:8080/v1/x" -> {"https://host:8080", "/v1/x"}. The path part
// defaults to "/". Throws ConfigError when the scheme is missing.
std::pair<std::string, std::string> split_url(const std::string& url);

}  // namespace zhmf
