#include "zachvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>

#include "zachvit/errors.hpp"

namespace zachvit {

std::size_t PredictionSet::predicted(std::size_t i) const {
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c)
    if (score(i, c) > score(i, best)) best = c;
  return best;
}

void PredictionSet::validate() const {
  if (labels.empty()) throw UsageError("prediction set is empty");
  if (classes == 0 || scores.size() != labels.size() * classes)
    throw UsageError("prediction scores do not form an n x classes matrix");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw UsageError("label " + std::to_string(labels[i]) + " out of range");
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += score(i, c);
    if (std::abs(s - 1.0) > 1e-9) throw UsageError("score row " + std::to_string(i) + " does not sum to 1");
  }
}

double macro_f1(const PredictionSet& pred) {
  pred.validate();
  const std::size_t k = pred.classes;
  std::vector<std::size_t> confusion(k * k, 0);  // [true][predicted]
  for (std::size_t i = 0; i < pred.size(); ++i) ++confusion[pred.labels[i] * k + pred.predicted(i)];
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = confusion[c * k + c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += confusion[o * k + c];
      fn += confusion[c * k + o];
    }
    const std::size_t denom = 2 * tp + fp + fn;
    total += denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
  }
  return total / static_cast<double>(k);
}

double accuracy(const PredictionSet& pred) {
  pred.validate();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred.predicted(i) == pred.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {
void require_binary(const PredictionSet& pred, const char* what) {
  if (pred.classes != 2 || pred.task != TaskKind::Binary)
    throw UsageError(std::string(what) + " is defined for binary tasks only");
}
}  // namespace

double roc_auc(const PredictionSet& pred) {
  pred.validate();
  require_binary(pred, "roc_auc");
  const std::size_t n = pred.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred.score(a, 1) < pred.score(b, 1); });
  std::size_t positives = 0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pred.score(order[j + 1], 1) == pred.score(order[i], 1)) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 2);  // average of ranks i+1 .. j+1
    for (std::size_t t = i; t <= j; ++t)
      if (pred.labels[order[t]] == 1) {
        rank_sum += mid;
        ++positives;
      }
    i = j + 1;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0)
    throw UndefinedMetricError("roc_auc needs both classes present, got " + std::to_string(positives) +
                               " positives and " + std::to_string(negatives) + " negatives");
  const double u = rank_sum - 0.5 * static_cast<double>(positives) * static_cast<double>(positives + 1);
  return u / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double threshold_accuracy(const PredictionSet& pred, double tau) {
  pred.validate();
  require_binary(pred, "threshold_accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += (pred.score(i, 1) >= tau ? 1u : 0u) == pred.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Score tables and rank statistics

std::size_t ScoreTable::model_index(const std::string& name) const {
  auto it = std::find(models.begin(), models.end(), name);
  if (it == models.end()) throw UsageError("model '" + name + "' is not in the score table");
  return static_cast<std::size_t>(it - models.begin());
}

std::size_t ScoreTable::dataset_index(const std::string& name) const {
  auto it = std::find(datasets.begin(), datasets.end(), name);
  if (it == datasets.end()) throw UsageError("dataset '" + name + "' is not in the score table");
  return static_cast<std::size_t>(it - datasets.begin());
}

double ScoreTable::at(const std::string& model, const std::string& dataset) const {
  const double v = scores.at(model_index(model)).at(dataset_index(dataset));
  if (std::isnan(v)) throw UsageError("score for " + model + "/" + dataset + " is missing");
  return v;
}

std::vector<std::string> ScoreTable::missing_cells() const {
  std::vector<std::string> out;
  for (std::size_t m = 0; m < models.size(); ++m)
    for (std::size_t d = 0; d < datasets.size(); ++d)
      if (m >= scores.size() || d >= scores[m].size() || std::isnan(scores[m][d]))
        out.push_back(models[m] + "/" + datasets[d]);
  return out;
}

void ScoreTable::validate() const {
  if (models.empty() || datasets.empty()) throw ValidationError("score table has no models or no datasets");
  if (scores.size() != models.size()) throw ValidationError("score table row count differs from model count");
  auto missing = missing_cells();
  if (!missing.empty()) {
    std::string msg = "score table is missing " + std::to_string(missing.size()) + " cell(s):";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }
}

double regime_advantage(const ScoreTable& table, const std::string& subject, std::span<const std::string> baselines,
                        const std::string& dataset) {
  if (baselines.empty()) throw UsageError("regime_advantage needs at least one baseline");
  double sum = 0.0;
  for (const auto& b : baselines) sum += table.at(b, dataset);
  return table.at(subject, dataset) - sum / static_cast<double>(baselines.size());
}

Ranking rank_models(const ScoreTable& table) {
  table.validate();
  const std::size_t k = table.models.size(), n = table.datasets.size();
  Ranking r;
  r.ranks.assign(k, std::vector<double>(n, 0.0));
  r.mean_ranks.assign(k, 0.0);
  std::vector<std::size_t> order(k);
  for (std::size_t d = 0; d < n; ++d) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return table.scores[a][d] > table.scores[b][d]; });
    for (std::size_t i = 0; i < k;) {
      std::size_t j = i;
      while (j + 1 < k && table.scores[order[j + 1]][d] == table.scores[order[i]][d]) ++j;
      const double mid = 0.5 * static_cast<double>(i + j + 2);
      for (std::size_t t = i; t <= j; ++t) r.ranks[order[t]][d] = mid;
      i = j + 1;
    }
  }
  for (std::size_t m = 0; m < k; ++m) {
    double s = 0.0;
    for (double v : r.ranks[m]) s += v;
    r.mean_ranks[m] = s / static_cast<double>(n);
  }
  return r;
}

FriedmanResult friedman_test(const std::vector<std::vector<double>>& ranks) {
  const std::size_t k = ranks.size();
  if (k < 3) throw UsageError("friedman_test needs at least 3 models, got " + std::to_string(k));
  const std::size_t n = ranks.front().size();
  if (n < 2) throw UsageError("friedman_test needs at least 2 datasets, got " + std::to_string(n));
  double sum_sq = 0.0;
  for (const auto& row : ranks) {
    if (row.size() != n) throw UsageError("friedman_test: ragged rank matrix");
    double s = 0.0;
    for (double v : row) s += v;
    const double mean = s / static_cast<double>(n);
    sum_sq += mean * mean;
  }
  const double kd = static_cast<double>(k), nd = static_cast<double>(n);
  FriedmanResult res;
  res.df = k - 1;
  res.statistic = (12.0 * nd / (kd * (kd + 1.0))) * (sum_sq - kd * (kd + 1.0) * (kd + 1.0) / 4.0);
  // Rounding can leave a tiny negative value for fully tied tables.
  if (res.statistic < 0.0 && res.statistic > -1e-9) res.statistic = 0.0;
  res.p_value = boost::math::gamma_q(0.5 * static_cast<double>(res.df), 0.5 * res.statistic);
  return res;
}

namespace {
// Critical values q_alpha = studentized range quantile (infinite df) / sqrt(2).
// k = 2..10 are the published values from Demsar (2006, JMLR 7, Table 5);
// k = 11..20 extend the same construction (studentized range with
// df = infinity, evaluated numerically and rounded to three decimals).
constexpr double kQ05[] = {1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219,
                           3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544};
constexpr double kQ10[] = {1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978,
                           3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319};
}  // namespace

double nemenyi_q(std::size_t k, double alpha) {
  if (k < 2 || k > 20) throw UsageError("nemenyi: k = " + std::to_string(k) + " is outside the tabulated 2..20");
  if (alpha == 0.05) return kQ05[k - 2];
  if (alpha == 0.10) return kQ10[k - 2];
  throw UsageError("nemenyi: alpha must be 0.05 or 0.10");
}

double nemenyi_cd(std::size_t k, std::size_t n, double alpha) {
  if (n == 0) throw UsageError("nemenyi: N must be positive");
  const double kd = static_cast<double>(k);
  return nemenyi_q(k, alpha) * std::sqrt(kd * (kd + 1.0) / (6.0 * static_cast<double>(n)));
}

std::vector<std::vector<std::size_t>> cd_grouping(std::span<const double> mean_ranks, double cd) {
  const std::size_t k = mean_ranks.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean_ranks[a] < mean_ranks[b]; });
  std::vector<std::vector<std::size_t>> groups;
  std::size_t prev_end = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k && mean_ranks[order[j + 1]] - mean_ranks[order[i]] <= cd) ++j;
    // A run ending where the previous one ended is contained in it.
    if (i > 0 && j + 1 <= prev_end) continue;
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(j + 1));
    prev_end = j + 1;
  }
  return groups;
}

}  // namespace zachvit
