#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <set>

#include "zhmf/commands.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/eval.hpp"
#include "zhmf/features.hpp"
#include "zhmf/memory.hpp"

namespace py = pybind11;

namespace {

std::vector<zhmf::PredictionOutcome> ranks_to_outcomes(
    const std::vector<std::size_t>& ranks) {
  std::vector<zhmf::PredictionOutcome> outcomes(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) outcomes[i].rank = ranks[i];
  return outcomes;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "native core of the next check-in prediction pipeline";
  m.attr("__version__") = "0.1.0";

  py::register_exception<zhmf::ConfigError>(m, "ConfigError");
  py::register_exception<zhmf::IoError>(m, "IoError");
  py::register_exception<zhmf::DataError>(m, "DataError");
  py::register_exception<zhmf::BackendError>(m, "BackendError");
  py::register_exception<zhmf::StateError>(m, "StateError");

  m.def(
      "haversine_km",
      [](double lat1, double lon1, double lat2, double lon2) {
        return zhmf::haversine_km({lat1, lon1}, {lat2, lon2});
      },
      py::arg("lat1"), py::arg("lon1"), py::arg("lat2"), py::arg("lon2"),
      "Great-circle distance in km (Earth radius 6371.0).");

  m.def("cosine", &zhmf::cosine, py::arg("a"), py::arg("b"),
        "Cosine similarity; raises on zero vectors or mismatched sizes.");

  m.def(
      "hash_embed",
      [](const std::string& text, std::size_t dim, std::uint64_t seed) {
        return zhmf::HashEmbeddingProvider(dim, seed).embed(text);
      },
      py::arg("text"), py::arg("dim") = 64, py::arg("seed") = 0,
      "Deterministic token-hash embedding.");

  m.def("reciprocal_rank", &zhmf::reciprocal_rank, py::arg("rank"),
        "1/rank, or 0 for rank 0 (a miss).");
  m.def(
      "acc_at_k",
      [](const std::vector<std::size_t>& ranks, std::size_t k) {
        return zhmf::acc_at_k(ranks_to_outcomes(ranks), k);
      },
      py::arg("ranks"), py::arg("k"),
      "Fraction of 1-based ranks that are non-zero and <= k.");
  m.def(
      "mean_reciprocal_rank",
      [](const std::vector<std::size_t>& ranks) {
        return zhmf::mean_reciprocal_rank(ranks_to_outcomes(ranks));
      },
      py::arg("ranks"));

  m.def(
      "parse_categories",
      [](const std::string& text, const std::vector<std::string>& categories,
         std::size_t k) {
        std::set<std::string> names(categories.begin(), categories.end());
        zhmf::ParsedCategoryResponse parsed =
            zhmf::parse_categories(text, names, k);
        return py::make_tuple(parsed.ranked, parsed.unmatched);
      },
      py::arg("text"), py::arg("categories"), py::arg("k"),
      "Parse a model reply into (ranked, unmatched) category lists.");

  m.def(
      "parse_pois",
      [](const std::string& text, const std::vector<std::string>& candidate_ids,
         std::size_t limit) {
        zhmf::ParsedPoiResponse parsed =
            zhmf::parse_pois(text, candidate_ids, limit);
        return py::make_tuple(parsed.ranked, parsed.rejected);
      },
      py::arg("text"), py::arg("candidate_ids"), py::arg("limit") = 20,
      "Parse a model reply into (ranked, rejected) candidate ids.");

  // Command drivers. Each takes the config as JSON text, works inside
  // config.output_dir, and returns its report as a JSON (or table) string.
  m.def(
      "preprocess",
      [](const std::string& config_json) {
        return zhmf::cmd_preprocess(zhmf::parse_config(config_json, "<config>"));
      },
      py::arg("config_json"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "build_memory",
      [](const std::string& config_json) {
        return zhmf::cmd_build_memory(
            zhmf::parse_config(config_json, "<config>"));
      },
      py::arg("config_json"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "run",
      [](const std::string& config_json) {
        return zhmf::cmd_run(zhmf::parse_config(config_json, "<config>"));
      },
      py::arg("config_json"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "evaluate",
      [](const std::string& config_json, const std::string& outcomes,
         const std::string& format) {
        std::optional<std::filesystem::path> path;
        if (!outcomes.empty()) path = outcomes;
        return zhmf::cmd_eval(zhmf::parse_config(config_json, "<config>"), path,
                              format);
      },
      py::arg("config_json"), py::arg("outcomes") = "",
      py::arg("format") = "table", py::call_guard<py::gil_scoped_release>());
}
