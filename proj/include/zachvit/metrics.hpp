#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "zachvit/dataset.hpp"

namespace zachvit {

/// Post-softmax class probabilities for n samples, row-major [n x classes].
struct PredictionSet {
  std::vector<double> scores;
  std::size_t classes = 0;
  std::vector<std::size_t> labels;
  TaskKind task = TaskKind::Multiclass;

  std::size_t size() const noexcept { return labels.size(); }
  double score(std::size_t i, std::size_t c) const { return scores[i * classes + c]; }
  /// Argmax of row i, ties resolved to the lowest class index.
  std::size_t predicted(std::size_t i) const;
  /// Throws UsageError on an empty set, ragged scores, bad labels, or rows
  /// not summing to 1 within 1e-9.
  void validate() const;
};

/// Unweighted mean of per-class F1 over all `classes` columns. A class with
/// no true and no predicted instances contributes 0.
double macro_f1(const PredictionSet& pred);
double accuracy(const PredictionSet& pred);
/// Mann-Whitney AUC for class 1 vs class 0; tied scores count one half.
/// Throws UndefinedMetricError unless both classes are present.
double roc_auc(const PredictionSet& pred);
/// Accuracy of the rule "predict class 1 iff score_1 >= tau" (binary only).
double threshold_accuracy(const PredictionSet& pred, double tau = 0.5);

/// Models x datasets matrix of primary scores, higher is better. Missing
/// cells are stored as NaN and rejected by validate().
struct ScoreTable {
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::vector<std::vector<double>> scores;  // [model][dataset]
  std::vector<std::string> metrics;         // one per dataset, may be empty

  std::size_t model_index(const std::string& name) const;
  std::size_t dataset_index(const std::string& name) const;
  double at(const std::string& model, const std::string& dataset) const;
  /// Human-readable "model/dataset" names of every missing cell.
  std::vector<std::string> missing_cells() const;
  void validate() const;
};

/// score(subject, dataset) - mean over baselines of score(b, dataset).
double regime_advantage(const ScoreTable& table, const std::string& subject,
                        std::span<const std::string> baselines, const std::string& dataset);

struct Ranking {
  std::vector<std::vector<double>> ranks;  // [model][dataset], 1 = best, ties averaged
  std::vector<double> mean_ranks;
};
Ranking rank_models(const ScoreTable& table);

struct FriedmanResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t df = 0;
};
/// Chi-square form of the Friedman test on a [k models][N datasets] rank
/// matrix. Requires k >= 3 and N >= 2.
FriedmanResult friedman_test(const std::vector<std::vector<double>>& ranks);

/// Two-tailed Nemenyi constant q_alpha(k) for k = 2..20, alpha in {0.05, 0.10}.
double nemenyi_q(std::size_t k, double alpha);
/// q_alpha(k) * sqrt(k (k + 1) / (6 N)).
double nemenyi_cd(std::size_t k, std::size_t n, double alpha = 0.05);

/// Maximal runs of models (indices, sorted by mean rank) whose rank spread is
/// at most `cd`.
std::vector<std::vector<std::size_t>> cd_grouping(std::span<const double> mean_ranks, double cd);

}  // namespace zachvit
