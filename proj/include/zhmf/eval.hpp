#pragma once

#include <map>
#include <string>
#include <vector>

#include "zhmf/pipeline.hpp"
#include "zhmf/types.hpp"

namespace zhmf {

// 1/rank, or 0 when the target was not ranked (rank 0).
double reciprocal_rank(std::size_t rank);

// Fraction of outcomes whose target landed within the top k.
double acc_at_k(const std::vector<PredictionOutcome>& outcomes, std::size_t k);

double mean_reciprocal_rank(const std::vector<PredictionOutcome>& outcomes);

struct MetricReport {
  std::size_t steps = 0;
  std::size_t users = 0;
  std::map<std::size_t, double> acc;  // k -> Acc@k
  double mrr = 0.0;
  double category_acc = 0.0;  // stage-one hit rate; 0 for the one-stage variant
  double fallback_activity_rate = 0.0;
  double fallback_location_rate = 0.0;
  double failure_rate = 0.0;
};

inline const std::vector<std::size_t> kDefaultKs = {1, 5, 10, 20};

// Micro average over steps; per-user macro average when macro_over_users is
// set (every user weighs the same regardless of step count). Throws
// DataError on an empty outcome list.
MetricReport aggregate(const std::vector<PredictionOutcome>& outcomes,
                       const std::vector<std::size_t>& ks = kDefaultKs,
                       bool macro_over_users = false);

// "overall", one entry per populated stratum ("inactive", "normal",
// "active", "unseen"), and "seen" (everything but the holdout users) when
// both sides are populated. Empty groups are omitted.
std::map<std::string, MetricReport> aggregate_cohorts(
    const std::vector<PredictionOutcome>& outcomes,
    const std::vector<std::size_t>& ks = kDefaultKs,
    bool macro_over_users = false);

// "table" renders an aligned text table; "jsonl" renders one scope per line.
// Any other format is a ConfigError.
std::string render_report(const std::map<std::string, MetricReport>& reports,
                          const std::string& format);

}  // namespace zhmf
