#include "zhmf/eval.hpp"

#include <doctest.h>

#include <algorithm>

#include "zhmf/errors.hpp"

using namespace zhmf;

namespace {

PredictionOutcome outcome(const std::string& user, const std::string& stratum,
                          std::size_t rank) {
  PredictionOutcome o;
  o.user = user;
  o.stratum = stratum;
  o.rank = rank;
  return o;
}

}  // namespace

TEST_CASE("reciprocal rank treats rank zero as a miss") {
  CHECK(reciprocal_rank(0) == 0.0);
  CHECK(reciprocal_rank(1) == 1.0);
  CHECK(reciprocal_rank(2) == 0.5);
  CHECK(reciprocal_rank(4) == 0.25);
}

TEST_CASE("acc and mrr over a known rank distribution") {
  // Ranks 1, 3, and a miss: Acc@1 = 1/3, Acc@5 = 2/3, MRR = (1 + 1/3)/3.
  std::vector<PredictionOutcome> outcomes = {
      outcome("a", "normal", 1), outcome("a", "normal", 3),
      outcome("b", "normal", 0)};
  CHECK(acc_at_k(outcomes, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(acc_at_k(outcomes, 2) == doctest::Approx(1.0 / 3.0));
  CHECK(acc_at_k(outcomes, 3) == doctest::Approx(2.0 / 3.0));
  CHECK(acc_at_k(outcomes, 5) == doctest::Approx(2.0 / 3.0));
  CHECK(mean_reciprocal_rank(outcomes) == doctest::Approx(4.0 / 9.0));

  CHECK_THROWS_AS(acc_at_k({}, 1), DataError);
  CHECK_THROWS_AS(mean_reciprocal_rank({}), DataError);
  CHECK_THROWS_AS(aggregate({}), DataError);
}

TEST_CASE("micro aggregation counts steps, users, and rates") {
  std::vector<PredictionOutcome> outcomes = {
      outcome("a", "normal", 1), outcome("a", "normal", 6),
      outcome("b", "active", 0), outcome("b", "active", 2)};
  outcomes[0].category_hit = true;
  outcomes[1].fallback_activity = true;
  outcomes[2].failed = true;
  outcomes[3].fallback_location = true;

  const MetricReport r = aggregate(outcomes);
  CHECK(r.steps == 4);
  CHECK(r.users == 2);
  CHECK(r.acc.at(1) == doctest::Approx(0.25));
  CHECK(r.acc.at(5) == doctest::Approx(0.5));
  CHECK(r.acc.at(10) == doctest::Approx(0.75));
  CHECK(r.acc.at(20) == doctest::Approx(0.75));
  CHECK(r.mrr == doctest::Approx((1.0 + 1.0 / 6.0 + 0.0 + 0.5) / 4.0));
  CHECK(r.category_acc == doctest::Approx(0.25));
  CHECK(r.fallback_activity_rate == doctest::Approx(0.25));
  CHECK(r.fallback_location_rate == doctest::Approx(0.25));
  CHECK(r.failure_rate == doctest::Approx(0.25));
}

TEST_CASE("macro aggregation weighs users equally") {
  // User a: three hits at rank 1. User b: one miss.
  std::vector<PredictionOutcome> outcomes = {
      outcome("a", "normal", 1), outcome("a", "normal", 1),
      outcome("a", "normal", 1), outcome("b", "normal", 0)};

  const MetricReport micro = aggregate(outcomes, {1}, false);
  CHECK(micro.acc.at(1) == doctest::Approx(0.75));
  CHECK(micro.mrr == doctest::Approx(0.75));

  const MetricReport macro = aggregate(outcomes, {1}, true);
  CHECK(macro.acc.at(1) == doctest::Approx(0.5));
  CHECK(macro.mrr == doctest::Approx(0.5));
  CHECK(macro.steps == 4);
  CHECK(macro.users == 2);
}

TEST_CASE("cohort aggregation splits by stratum and adds a seen rollup") {
  std::vector<PredictionOutcome> outcomes = {
      outcome("a", "active", 1), outcome("b", "normal", 2),
      outcome("c", "unseen", 0), outcome("d", "inactive", 1)};

  const auto reports = aggregate_cohorts(outcomes, {1});
  REQUIRE(reports.count("overall") == 1);
  REQUIRE(reports.count("active") == 1);
  REQUIRE(reports.count("normal") == 1);
  REQUIRE(reports.count("inactive") == 1);
  REQUIRE(reports.count("unseen") == 1);
  REQUIRE(reports.count("seen") == 1);
  CHECK(reports.size() == 6);

  CHECK(reports.at("overall").steps == 4);
  CHECK(reports.at("seen").steps == 3);
  CHECK(reports.at("seen").acc.at(1) == doctest::Approx(2.0 / 3.0));
  CHECK(reports.at("unseen").steps == 1);
  CHECK(reports.at("unseen").acc.at(1) == doctest::Approx(0.0));
  CHECK(reports.at("active").acc.at(1) == doctest::Approx(1.0));
}

TEST_CASE("cohort aggregation omits the seen rollup without a holdout") {
  std::vector<PredictionOutcome> outcomes = {outcome("a", "active", 1),
                                             outcome("b", "normal", 2)};
  const auto reports = aggregate_cohorts(outcomes, {1});
  CHECK(reports.count("seen") == 0);
  CHECK(reports.count("unseen") == 0);
  CHECK(reports.size() == 3);  // overall, active, normal
}

TEST_CASE("table report aligns columns and jsonl is machine readable") {
  std::vector<PredictionOutcome> outcomes = {outcome("a", "normal", 1),
                                             outcome("b", "normal", 0)};
  const auto reports = aggregate_cohorts(outcomes, {1, 5});

  const std::string table = render_report(reports, "table");
  CHECK(table.find("scope") == 0);
  CHECK(table.find("acc@1") != std::string::npos);
  CHECK(table.find("acc@5") != std::string::npos);
  CHECK(table.find("mrr") != std::string::npos);
  CHECK(table.find("overall") != std::string::npos);
  CHECK(table.find("0.5000") != std::string::npos);
  // One header plus one row per scope, each newline-terminated.
  const auto lines = std::count(table.begin(), table.end(), '\n');
  CHECK(static_cast<std::size_t>(lines) == reports.size() + 1);

  const std::string jsonl = render_report(reports, "jsonl");
  CHECK(jsonl.find("\"scope\":\"overall\"") != std::string::npos);
  CHECK(jsonl.find("\"acc\":{\"1\":0.5,\"5\":0.5}") != std::string::npos);
  CHECK(static_cast<std::size_t>(std::count(jsonl.begin(), jsonl.end(), '\n')) ==
        reports.size());

  CHECK_THROWS_AS(render_report(reports, "csv"), ConfigError);
}
