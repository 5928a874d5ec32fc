#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "deepctr/json_util.hpp"

namespace deepctr {

inline constexpr double kProbClamp = 1e-15;

/// Mean negative Bernoulli log-likelihood; predictions clamped to
/// [1e-15, 1 - 1e-15].
double eval_logloss(std::span<const double> probs, std::span<const double> labels);

/// Rank-based AUC: P(score_pos > score_neg) + 0.5 P(tie). O(N log N).
double eval_auc(std::span<const double> scores, std::span<const double> labels);

/// ((auc - 0.5) / (baseline - 0.5) - 1) * 100
double relative_auc(double auc_method, double auc_baseline);
/// (ll / baseline - 1) * 100; negative is an improvement.
double relative_logloss(double ll_method, double ll_baseline);

struct EvalReport {
  double logloss = 0.0;
  double auc = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  std::optional<double> relative_auc_pct;
  std::optional<double> relative_logloss_pct;
};

EvalReport evaluate(std::span<const double> probs, std::span<const double> labels,
                    const EvalReport* baseline = nullptr);
void attach_baseline(EvalReport& r, const EvalReport& baseline);

void to_json(json& j, const EvalReport& r);
EvalReport eval_report_from_json(const json& j);

}  // namespace deepctr
