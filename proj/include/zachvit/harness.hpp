#pragma once

// Experiment plumbing shared by the CLI: run files, plans, sweeps, summaries
// and rank reports.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "zachvit/metrics.hpp"
#include "zachvit/model.hpp"
#include "zachvit/train.hpp"

namespace zachvit::harness {

inline constexpr int kSchemaVersion = 1;

/// 16 hex digits of FNV-1a 64 over the compact canonical config JSON.
std::string config_id(const ModelConfig& config);

nlohmann::json protocol_to_json(const TrainProtocol& p);
/// Missing fields keep their defaults; unknown fields are rejected.
TrainProtocol protocol_from_json(const nlohmann::json& j, TrainProtocol base = {});

nlohmann::json run_to_json(const RunRecord& record);
RunRecord run_from_json(const nlohmann::json& j);

std::string run_file_name(const std::string& config_id, const std::string& dataset, std::uint64_t seed);
std::filesystem::path write_run(const std::filesystem::path& out_dir, const RunRecord& record);
RunRecord read_run(const std::filesystem::path& path);

/// Default output directory: $ZAVIT_OUT, else ./zachvit-out.
std::filesystem::path default_out_dir();

struct DatasetRef {
  std::string id;
  std::filesystem::path train;
  std::filesystem::path test;
};

/// Resolves the test split for a training container: `<x>_train.zvds` pairs
/// with `<x>_test.zvds`, anything else `<stem>.zvds` with `<stem>_test.zvds`.
/// The id is the stem without a trailing `_train`.
DatasetRef dataset_ref(const std::filesystem::path& train, const std::optional<std::filesystem::path>& test = {});

struct PlanConfig {
  std::string label;
  ModelConfig config;
  /// Take channels and num_classes from each dataset at run time.
  bool fit_dataset = false;
};

struct ExperimentPlan {
  std::vector<DatasetRef> datasets;
  std::vector<PlanConfig> configs;
  std::vector<std::uint64_t> seeds{kProtocolSeeds.begin(), kProtocolSeeds.end()};
  TrainProtocol protocol;
  std::filesystem::path out_dir;
  std::size_t workers = 1;

  /// Throws ValidationError on an empty list or a missing dataset file.
  void validate() const;
};

/// Built-in variant lists: "hparam", "component",
/// "pooling". Configs have fit_dataset set.
std::vector<PlanConfig> builtin_grid(const std::string& name);
std::vector<std::string> builtin_grid_names();

/// Plan document: {"schema_version": 1, "grid": name | "configs": [{"label",
/// "config"}], "datasets": [path | {"train", "test"?}], "seeds"?, "protocol"?,
/// "workers"?, "out"?}. Relative paths resolve against `base_dir`.
ExperimentPlan plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentPlan load_plan(const std::filesystem::path& path);

struct Cell {
  std::size_t config_index = 0;
  std::size_t dataset_index = 0;
  std::uint64_t seed = 0;
};
/// configs x datasets x seeds, in that nesting order.
std::vector<Cell> expand_cells(const ExperimentPlan& plan);

/// Config adapted to a dataset's channels and class count when requested.
ModelConfig cell_config(const PlanConfig& pc, const DatasetSplit& train);

struct SummaryRow {
  std::string config_id;
  std::string dataset;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n_seeds = 0;
};

/// Groups by (config_id, dataset) in sorted order; per group emits the test
/// primary metric, test accuracy and generalization gap.
std::vector<SummaryRow> summarize(const std::vector<RunRecord>& runs);
std::string summary_csv(const std::vector<SummaryRow>& rows);

struct SweepResult {
  std::vector<RunRecord> runs;  // successful cells, sorted by cell key
  std::vector<std::string> failures;
  std::vector<SummaryRow> summary;
  std::filesystem::path summary_path;
};

/// Runs every cell on a pool of `plan.workers` threads (each cell serial),
/// writes run files, summary.csv and configs.json under plan.out_dir.
SweepResult run_sweep(const ExperimentPlan& plan, bool quiet = false);

/// Score table CSV: header `model,<dataset>...`, one row per model; an empty
/// cell is missing. An optional row whose first cell is `metric` names the
/// metric of each dataset column.
ScoreTable parse_score_csv(const std::string& text);
ScoreTable load_score_csv(const std::filesystem::path& path);

struct RankReport {
  Ranking ranking;
  std::optional<FriedmanResult> friedman;
  double alpha = 0.05;
  double cd = 0.0;
  std::vector<std::vector<std::size_t>> groups;
  /// Per dataset: subject score minus the baselines' mean.
  std::map<std::string, double> advantage;
};

/// Validates completeness (ValidationError listing missing cells) first.
RankReport rank_report(const ScoreTable& table, double alpha, const std::string& subject = {},
                       const std::vector<std::string>& baselines = {});
nlohmann::json rank_report_json(const ScoreTable& table, const RankReport& report, const std::string& subject);
/// Columns kind,label,x_start,x_end: one `model` row per model at its mean
/// rank, one `group` row per clique, one `cd` row.
std::string rank_plot_csv(const ScoreTable& table, const RankReport& report);

}  // namespace zachvit::harness
