#include "zhmf/eval.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"
#include "zhmf/errors.hpp"
#include "zhmf/util.hpp"

namespace zhmf {

using nlohmann::json;

double reciprocal_rank(std::size_t rank) {
  return rank == 0 ? 0.0 : 1.0 / static_cast<double>(rank);
}

double acc_at_k(const std::vector<PredictionOutcome>& outcomes, std::size_t k) {
  if (outcomes.empty()) throw DataError("acc_at_k over an empty outcome list");
  std::size_t hits = 0;
  for (const PredictionOutcome& o : outcomes) {
    if (o.rank != 0 && o.rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

double mean_reciprocal_rank(const std::vector<PredictionOutcome>& outcomes) {
  if (outcomes.empty()) {
    throw DataError("mean_reciprocal_rank over an empty outcome list");
  }
  double total = 0.0;
  for (const PredictionOutcome& o : outcomes) total += reciprocal_rank(o.rank);
  return total / static_cast<double>(outcomes.size());
}

namespace {

MetricReport aggregate_micro(const std::vector<PredictionOutcome>& outcomes,
                             const std::vector<std::size_t>& ks) {
  MetricReport report;
  report.steps = outcomes.size();
  std::set<std::string> users;
  std::size_t category_hits = 0, fb_act = 0, fb_loc = 0, failed = 0;
  for (const PredictionOutcome& o : outcomes) {
    users.insert(o.user);
    if (o.category_hit) ++category_hits;
    if (o.fallback_activity) ++fb_act;
    if (o.fallback_location) ++fb_loc;
    if (o.failed) ++failed;
  }
  report.users = users.size();
  for (std::size_t k : ks) report.acc[k] = acc_at_k(outcomes, k);
  report.mrr = mean_reciprocal_rank(outcomes);
  const double n = static_cast<double>(outcomes.size());
  report.category_acc = static_cast<double>(category_hits) / n;
  report.fallback_activity_rate = static_cast<double>(fb_act) / n;
  report.fallback_location_rate = static_cast<double>(fb_loc) / n;
  report.failure_rate = static_cast<double>(failed) / n;
  return report;
}

}  // namespace

MetricReport aggregate(const std::vector<PredictionOutcome>& outcomes,
                       const std::vector<std::size_t>& ks,
                       bool macro_over_users) {
  if (outcomes.empty()) throw DataError("aggregate over an empty outcome list");
  if (!macro_over_users) return aggregate_micro(outcomes, ks);

  std::map<std::string, std::vector<PredictionOutcome>> by_user;
  for (const PredictionOutcome& o : outcomes) by_user[o.user].push_back(o);

  MetricReport report;
  report.steps = outcomes.size();
  report.users = by_user.size();
  const double u = static_cast<double>(by_user.size());
  for (std::size_t k : ks) report.acc[k] = 0.0;
  for (const auto& [user, group] : by_user) {
    MetricReport part = aggregate_micro(group, ks);
    for (std::size_t k : ks) report.acc[k] += part.acc[k] / u;
    report.mrr += part.mrr / u;
    report.category_acc += part.category_acc / u;
    report.fallback_activity_rate += part.fallback_activity_rate / u;
    report.fallback_location_rate += part.fallback_location_rate / u;
    report.failure_rate += part.failure_rate / u;
  }
  return report;
}

std::map<std::string, MetricReport> aggregate_cohorts(
    const std::vector<PredictionOutcome>& outcomes,
    const std::vector<std::size_t>& ks, bool macro_over_users) {
  std::map<std::string, MetricReport> reports;
  reports["overall"] = aggregate(outcomes, ks, macro_over_users);

  std::map<std::string, std::vector<PredictionOutcome>> by_stratum;
  std::vector<PredictionOutcome> seen;
  for (const PredictionOutcome& o : outcomes) {
    by_stratum[o.stratum].push_back(o);
    if (o.stratum != "unseen") seen.push_back(o);
  }
  for (const auto& [stratum, group] : by_stratum) {
    reports[stratum] = aggregate(group, ks, macro_over_users);
  }
  if (by_stratum.count("unseen") != 0 && !seen.empty()) {
    reports["seen"] = aggregate(seen, ks, macro_over_users);
  }
  return reports;
}

std::string render_report(const std::map<std::string, MetricReport>& reports,
                          const std::string& format) {
  if (format == "jsonl") {
    std::string out;
    for (const auto& [scope, r] : reports) {
      json acc = json::object();
      for (const auto& [k, v] : r.acc) acc[std::to_string(k)] = v;
      out += json{{"scope", scope},
                  {"steps", r.steps},
                  {"users", r.users},
                  {"acc", acc},
                  {"mrr", r.mrr},
                  {"category_acc", r.category_acc},
                  {"fallback_activity_rate", r.fallback_activity_rate},
                  {"fallback_location_rate", r.fallback_location_rate},
                  {"failure_rate", r.failure_rate}}
                 .dump();
      out += '\n';
    }
    return out;
  }
  if (format != "table") {
    throw ConfigError("unknown report format: " + format +
                      " (expected table or jsonl)");
  }

  std::vector<std::string> headers = {"scope", "steps", "users"};
  if (!reports.empty()) {
    for (const auto& [k, _] : reports.begin()->second.acc) {
      headers.push_back("acc@" + std::to_string(k));
    }
  }
  headers.insert(headers.end(),
                 {"mrr", "cat_acc", "fb_act", "fb_loc", "fail"});

  std::vector<std::vector<std::string>> rows;
  for (const auto& [scope, r] : reports) {
    std::vector<std::string> row = {scope, std::to_string(r.steps),
                                    std::to_string(r.users)};
    for (const auto& [_, v] : r.acc) row.push_back(fmt_fixed(v, 4));
    row.push_back(fmt_fixed(r.mrr, 4));
    row.push_back(fmt_fixed(r.category_acc, 4));
    row.push_back(fmt_fixed(r.fallback_activity_rate, 4));
    row.push_back(fmt_fixed(r.fallback_location_rate, 4));
    row.push_back(fmt_fixed(r.failure_rate, 4));
    rows.push_back(std::move(row));
  }

  std::vector<std::size_t> widths(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    widths[c] = headers[c].size();
    for (const auto& row : rows) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c != 0) out << "  ";
      // left-align the scope column, right-align numbers
      if (c == 0) {
        out << row[c] << std::string(widths[c] - row[c].size(), ' ');
      } else {
        out << std::string(widths[c] - row[c].size(), ' ') << row[c];
      }
    }
    out << '\n';
  };
  emit(headers);
  for (const auto& row : rows) emit(row);
  return out.str();
}

}  // namespace zhmf
