#include "zhmf/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {
namespace {

using nlohmann::json;

// Wraps one JSON object level: typed reads that record which keys were
// consumed, so done() can reject everything unexpected by name.
class StrictObject {
 public:
  StrictObject(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) {
      throw ConfigError(path_ + " must be a JSON object");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!obj_.contains(key)) return fallback;
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value for " + at(key));
    }
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    return get<std::string>(key, fallback);
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  void done() const {
    for (const auto& [key, _] : obj_.items()) {
      if (seen_.count(key) == 0) {
        throw ConfigError("unknown key: " + at(key));
      }
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

ColumnRef column_from(const json& value, const std::string& where) {
  ColumnRef ref;
  if (value.is_string()) {
    ref.name = value.get<std::string>();
    if (ref.name.empty()) throw ConfigError(where + " must not be empty");
  } else if (value.is_number_integer()) {
    ref.index = value.get<int>();
    if (ref.index < 0) throw ConfigError(where + " index must be >= 0");
  } else {
    throw ConfigError(where + " must be a column name or 0-based index");
  }
  return ref;
}

json column_to(const ColumnRef& ref) {
  if (ref.by_name()) return ref.name;
  return ref.index;
}

DataConfig parse_data(const json& node, const std::string& path) {
  StrictObject o(node, path);
  DataConfig data;
  data.checkins = o.get_string("checkins", "");

  std::string delim = o.get_string("delimiter", ",");
  if (delim.size() != 1) {
    throw ConfigError(o.at("delimiter") + " must be a single character");
  }
  data.schema.delimiter = delim[0];
  data.schema.has_header = o.get<bool>("has_header", true);

  if (const json* cols = o.raw("columns")) {
    StrictObject c(*cols, path + ".columns");
    auto read = [&](const char* key, ColumnRef fallback) {
      if (const json* v = c.raw(key)) return column_from(*v, c.at(key));
      return fallback;
    };
    data.schema.user = read("user", ColumnRef{"user", -1});
    data.schema.poi = read("poi", ColumnRef{"poi", -1});
    data.schema.category = read("category", ColumnRef{"category", -1});
    data.schema.lat = read("lat", ColumnRef{"lat", -1});
    data.schema.lon = read("lon", ColumnRef{"lon", -1});
    data.schema.timestamp = read("timestamp", ColumnRef{"timestamp", -1});
    if (const json* v = c.raw("tz_offset_min")) {
      data.schema.tz_offset_min = column_from(*v, c.at("tz_offset_min"));
    }
    c.done();
  } else {
    data.schema.user = {"user", -1};
    data.schema.poi = {"poi", -1};
    data.schema.category = {"category", -1};
    data.schema.lat = {"lat", -1};
    data.schema.lon = {"lon", -1};
    data.schema.timestamp = {"timestamp", -1};
  }

  data.min_count = o.get<int>("min_count", 10);
  if (data.min_count < 0) throw ConfigError(o.at("min_count") + " must be >= 0");
  data.gap_hours = o.get<double>("gap_hours", 24.0);
  if (data.gap_hours <= 0.0) throw ConfigError(o.at("gap_hours") + " must be > 0");

  if (const json* r = o.raw("ratios")) {
    if (!r->is_array() || r->size() != 3) {
      throw ConfigError(o.at("ratios") + " must be an array of three numbers");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (!(*r)[i].is_number()) {
        throw ConfigError(o.at("ratios") + " must be an array of three numbers");
      }
      data.ratios[i] = (*r)[i].get<double>();
      if (data.ratios[i] <= 0.0) {
        throw ConfigError(o.at("ratios") + " entries must be > 0");
      }
    }
    if (std::abs(data.ratios[0] + data.ratios[1] + data.ratios[2] - 1.0) > 1e-9) {
      throw ConfigError(o.at("ratios") + " must sum to 1");
    }
  }
  data.zero_shot_fraction = o.get<double>("zero_shot_fraction", 0.3);
  if (data.zero_shot_fraction < 0.0 || data.zero_shot_fraction >= 1.0) {
    throw ConfigError(o.at("zero_shot_fraction") + " must be in [0, 1)");
  }
  data.seed = o.get<std::uint64_t>("seed", 7);
  o.done();
  return data;
}

RunConfig parse_run(const json& node, const std::string& path) {
  StrictObject o(node, path);
  RunConfig run;
  run.variant = variant_from_string(o.get_string("variant", "full"));
  run.k = o.get<std::size_t>("k", 20);
  run.reflection_n = o.get<std::size_t>("reflection_n", 2);
  run.similar_n = o.get<std::size_t>("similar_n", 2);
  run.recent_k = o.get<std::size_t>("recent_k", 10);
  run.movement_window = o.get<std::size_t>("movement_window", 5);
  run.profile_lines = o.get<std::size_t>("profile_lines", 10);
  run.candidate_cap = o.get<std::size_t>("candidate_cap", 0);
  run.rank_limit = o.get<std::size_t>("rank_limit", 20);
  run.location_trigger_topk = o.get<std::size_t>("location_trigger_topk", 10);
  run.cell_size_deg = o.get<double>("cell_size_deg", 0.01);
  run.online_reflection = o.get<bool>("online_reflection", false);
  run.macro_over_users = o.get<bool>("macro_over_users", false);
  run.concurrency = o.get<int>("concurrency", 1);
  o.done();
  validate(run);
  return run;
}

BackendConfig parse_backend(const json& node, const std::string& path) {
  StrictObject o(node, path);
  BackendConfig backend;
  backend.kind = o.get_string("kind", "scripted");
  if (backend.kind != "scripted" && backend.kind != "http") {
    throw ConfigError(o.at("kind") + " must be scripted or http");
  }
  backend.script = o.get_string("script", "");
  backend.endpoint = o.get_string("endpoint", "");
  backend.model = o.get_string("model", "");
  backend.auth_env = o.get_string("auth_env", "ZHMF_API_KEY");
  backend.retry.max_attempts = o.get<int>("max_attempts", 3);
  if (backend.retry.max_attempts < 1) {
    throw ConfigError(o.at("max_attempts") + " must be >= 1");
  }
  backend.retry.base_backoff_ms = o.get<int>("base_backoff_ms", 200);
  if (backend.retry.base_backoff_ms < 0) {
    throw ConfigError(o.at("base_backoff_ms") + " must be >= 0");
  }
  backend.timeout_ms = o.get<int>("timeout_ms", 60000);
  if (backend.timeout_ms <= 0) throw ConfigError(o.at("timeout_ms") + " must be > 0");
  backend.max_in_flight = o.get<int>("max_in_flight", 4);
  if (backend.max_in_flight < 1) {
    throw ConfigError(o.at("max_in_flight") + " must be >= 1");
  }
  o.done();
  return backend;
}

EmbeddingConfig parse_embedding(const json& node, const std::string& path) {
  StrictObject o(node, path);
  EmbeddingConfig embedding;
  embedding.kind = o.get_string("kind", "hash");
  if (embedding.kind != "hash" && embedding.kind != "http") {
    throw ConfigError(o.at("kind") + " must be hash or http");
  }
  embedding.dim = o.get<std::size_t>("dim", 64);
  if (embedding.kind == "hash" && embedding.dim == 0) {
    throw ConfigError(o.at("dim") + " must be >= 1 for hash embeddings");
  }
  embedding.seed = o.get<std::uint64_t>("seed", 0);
  embedding.endpoint = o.get_string("endpoint", "");
  embedding.model = o.get_string("model", "");
  embedding.auth_env = o.get_string("auth_env", "ZHMF_API_KEY");
  o.done();
  return embedding;
}

}  // namespace

UserScope scope_from_string(const std::string& name) {
  if (name == "all") return UserScope::all;
  if (name == "exclude_zero_shot") return UserScope::exclude_zero_shot;
  if (name == "zero_shot_only") return UserScope::zero_shot_only;
  throw ConfigError("unknown scope: " + name +
                    " (expected all, exclude_zero_shot, or zero_shot_only)");
}

AppConfig parse_config(const std::string& text, const std::string& origin) {
  json root = json::parse(text, nullptr, false);
  if (root.is_discarded()) {
    throw ConfigError("config is not valid JSON: " + origin);
  }
  StrictObject o(root, origin);
  AppConfig config;
  const json empty = json::object();
  auto section = [&](const char* key) -> const json& {
    const json* node = o.raw(key);
    return node == nullptr ? empty : *node;
  };
  config.data = parse_data(section("data"), origin + ".data");
  config.run = parse_run(section("run"), origin + ".run");
  config.backend = parse_backend(section("backend"), origin + ".backend");
  config.embedding = parse_embedding(section("embedding"), origin + ".embedding");
  config.capture_prompts = o.get<bool>("capture_prompts", false);
  config.max_steps = o.get<std::size_t>("max_steps", 0);
  config.scope = o.get_string("scope", "all");
  scope_from_string(config.scope);  // validates
  config.output_dir = o.get_string("output_dir", "");
  o.done();
  return config;
}

AppConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.string());
}

std::string render_config(const AppConfig& config) {
  json columns = {{"user", column_to(config.data.schema.user)},
                  {"poi", column_to(config.data.schema.poi)},
                  {"category", column_to(config.data.schema.category)},
                  {"lat", column_to(config.data.schema.lat)},
                  {"lon", column_to(config.data.schema.lon)},
                  {"timestamp", column_to(config.data.schema.timestamp)}};
  if (config.data.schema.tz_offset_min) {
    columns["tz_offset_min"] = column_to(*config.data.schema.tz_offset_min);
  }
  json root = {
      {"data",
       {{"checkins", config.data.checkins.string()},
        {"delimiter", std::string(1, config.data.schema.delimiter)},
        {"has_header", config.data.schema.has_header},
        {"columns", columns},
        {"min_count", config.data.min_count},
        {"gap_hours", config.data.gap_hours},
        {"ratios", config.data.ratios},
        {"zero_shot_fraction", config.data.zero_shot_fraction},
        {"seed", config.data.seed}}},
      {"run",
       {{"variant", to_string(config.run.variant)},
        {"k", config.run.k},
        {"reflection_n", config.run.reflection_n},
        {"similar_n", config.run.similar_n},
        {"recent_k", config.run.recent_k},
        {"movement_window", config.run.movement_window},
        {"profile_lines", config.run.profile_lines},
        {"candidate_cap", config.run.candidate_cap},
        {"rank_limit", config.run.rank_limit},
        {"location_trigger_topk", config.run.location_trigger_topk},
        {"cell_size_deg", config.run.cell_size_deg},
        {"online_reflection", config.run.online_reflection},
        {"macro_over_users", config.run.macro_over_users},
        {"concurrency", config.run.concurrency}}},
      {"backend",
       {{"kind", config.backend.kind},
        {"script", config.backend.script.string()},
        {"endpoint", config.backend.endpoint},
        {"model", config.backend.model},
        {"auth_env", config.backend.auth_env},
        {"max_attempts", config.backend.retry.max_attempts},
        {"base_backoff_ms", config.backend.retry.base_backoff_ms},
        {"timeout_ms", config.backend.timeout_ms},
        {"max_in_flight", config.backend.max_in_flight}}},
      {"embedding",
       {{"kind", config.embedding.kind},
        {"dim", config.embedding.dim},
        {"seed", config.embedding.seed},
        {"endpoint", config.embedding.endpoint},
        {"model", config.embedding.model},
        {"auth_env", config.embedding.auth_env}}},
      {"capture_prompts", config.capture_prompts},
      {"max_steps", config.max_steps},
      {"scope", config.scope},
      {"output_dir", config.output_dir.string()},
  };
  return root.dump(2) + "\n";
}

std::string config_digest(const AppConfig& config) {
  AppConfig anchored = config;
  anchored.output_dir.clear();
  return fnv1a64_hex(render_config(anchored));
}

void write_resolved_config(const std::filesystem::path& path,
                           const AppConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write resolved config: " + path.string());
  out << render_config(config);
  if (!out) throw IoError("failed writing resolved config: " + path.string());
}

}  // namespace zhmf
