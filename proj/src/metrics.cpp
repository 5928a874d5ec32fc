#include "deepctr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepctr {

namespace {

void check_inputs(std::span<const double> a, std::span<const double> labels, const char* who) {
  if (a.empty()) throw std::invalid_argument(std::string(who) + ": empty input");
  if (a.size() != labels.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(a.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw std::invalid_argument(std::string(who) + ": labels must be 0 or 1");
}

}  // namespace

double eval_logloss(std::span<const double> probs, std::span<const double> labels) {
  check_inputs(probs, labels, "eval_logloss");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!std::isfinite(probs[i])) throw std::invalid_argument("eval_logloss: non-finite prediction");
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    s += labels[i] == 1.0 ? std::log(p) : std::log1p(-p);
  }
  return -s / static_cast<double>(probs.size());
}

double eval_auc(std::span<const double> scores, std::span<const double> labels) {
  check_inputs(scores, labels, "eval_auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // sum of (1-based, tie-averaged) ranks of the positives
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1.0) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("eval_auc: AUC undefined with a single class");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double relative_auc(double auc_method, double auc_baseline) {
  if (!(auc_baseline > 0.5)) throw std::invalid_argument("relative_auc: baseline AUC must exceed 0.5");
  return ((auc_method - 0.5) / (auc_baseline - 0.5) - 1.0) * 100.0;
}

double relative_logloss(double ll_method, double ll_baseline) {
  if (!(ll_baseline > 0.0)) throw std::invalid_argument("relative_logloss: baseline logloss must be positive");
  return (ll_method / ll_baseline - 1.0) * 100.0;
}

void attach_baseline(EvalReport& r, const EvalReport& baseline) {
  r.relative_auc_pct = relative_auc(r.auc, baseline.auc);
  r.relative_logloss_pct = relative_logloss(r.logloss, baseline.logloss);
}

EvalReport evaluate(std::span<const double> probs, std::span<const double> labels, const EvalReport* baseline) {
  EvalReport r;
  r.logloss = eval_logloss(probs, labels);
  r.auc = eval_auc(probs, labels);
  for (double y : labels) (y == 1.0 ? r.n_pos : r.n_neg)++;
  if (baseline) attach_baseline(r, *baseline);
  return r;
}

void to_json(json& j, const EvalReport& r) {
  j = json{{"logloss", r.logloss}, {"auc", r.auc}, {"n_pos", r.n_pos}, {"n_neg", r.n_neg}};
  if (r.relative_auc_pct) j["relative_auc_pct"] = *r.relative_auc_pct;
  if (r.relative_logloss_pct) j["relative_logloss_pct"] = *r.relative_logloss_pct;
}

EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  StrictReader rd(j, "eval report");
  rd.get("logloss", r.logloss).get("auc", r.auc).get("n_pos", r.n_pos).get("n_neg", r.n_neg);
  if (rd.has("relative_auc_pct")) r.relative_auc_pct = rd.at("relative_auc_pct").get<double>();
  if (rd.has("relative_logloss_pct")) r.relative_logloss_pct = rd.at("relative_logloss_pct").get<double>();
  rd.finish();
  return r;
}

}  // namespace deepctr
