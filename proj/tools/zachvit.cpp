// zachvit: experiment CLI (train, sweep, rank, selftest).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "zachvit/dataset.hpp"
#include "zachvit/errors.hpp"
#include "zachvit/harness.hpp"
#include "zachvit/model_io.hpp"
#include "zachvit/selftest.hpp"
#include "zachvit/train.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace zachvit;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct ProtocolFlags {
  std::optional<std::size_t> shots, batch, epochs;
  std::optional<double> lr;

  void add(CLI::App* app) {
    app->add_option("--shots", shots, "Training samples per class (default 50)");
    app->add_option("--batch", batch, "Batch size (default 16)");
    app->add_option("--lr", lr, "Adam learning rate (default 1e-4)");
    app->add_option("--epochs", epochs, "Training epochs (default 23)");
  }
  TrainProtocol apply(TrainProtocol p) const {
    if (shots) p.shots = *shots;
    if (batch) p.batch_size = *batch;
    if (lr) p.learning_rate = *lr;
    if (epochs) p.epochs = *epochs;
    return p;
  }
};

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw ValidationError(std::string(what) + " not found: " + path.string());
}

void set_threads(std::optional<int> threads) {
#if defined(_OPENMP)
  if (threads && *threads > 0) omp_set_num_threads(*threads);
#else
  (void)threads;
#endif
}

struct TrainArgs {
  std::string dataset, test, config, out, save_params;
  std::uint64_t seed = 3;
  std::optional<int> threads;
  ProtocolFlags protocol;
};

int cmd_train(const TrainArgs& a) {
  set_threads(a.threads);
  const auto ref = harness::dataset_ref(a.dataset, a.test.empty() ? std::nullopt : std::optional<fs::path>(a.test));
  require_file(ref.train, "dataset file");
  require_file(ref.test, "test split");
  const DatasetSplit train = load_container(ref.train);
  const DatasetSplit test = load_container(ref.test);

  ModelConfig config;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    config = load_config(a.config);
  } else {
    config.channels = train.channels;
    config.num_classes = train.class_count;
  }
  TrainProtocol protocol = a.protocol.apply({});
  protocol.seed = a.seed;
  RunOptions options;
  options.dataset_id = ref.id;
  ModelParams trained;
  if (!a.save_params.empty()) options.trained = &trained;

  const RunRecord rec = run_protocol(train, test, config, protocol, options);
  const fs::path out = a.out.empty() ? harness::default_out_dir() : fs::path(a.out);
  const fs::path path = harness::write_run(out, rec);
  if (!a.save_params.empty()) save_params(a.save_params, trained);
  std::printf("wrote %s\n", path.string().c_str());
  std::printf("config %s  params %zu  seed %llu  %.2fs\n", harness::config_id(config).c_str(), rec.param_count,
              static_cast<unsigned long long>(rec.seed), rec.wall_seconds);
  std::printf("train %s %.4f  test %s %.4f  test accuracy %.4f  gap %.4f\n", rec.train.primary_name.c_str(),
              rec.train.primary, rec.test.primary_name.c_str(), rec.test.primary, rec.test.accuracy,
              generalization_gap(rec));
  return kOk;
}

struct SweepArgs {
  std::string plan, grid, out;
  std::vector<std::string> datasets;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> workers;
  bool quiet = false;
  ProtocolFlags protocol;
};

int cmd_sweep(const SweepArgs& a) {
  harness::ExperimentPlan plan;
  if (!a.plan.empty()) {
    if (!a.grid.empty()) throw ValidationError("give either a plan file or --grid, not both");
    plan = harness::load_plan(a.plan);
  } else {
    if (a.grid.empty()) throw ValidationError("sweep needs a plan file or --grid");
    plan.configs = harness::builtin_grid(a.grid);
    plan.out_dir = harness::default_out_dir();
  }
  for (const auto& d : a.datasets) plan.datasets.push_back(harness::dataset_ref(d));
  if (!a.seeds.empty()) plan.seeds = a.seeds;
  if (a.workers) plan.workers = *a.workers;
  if (!a.out.empty()) plan.out_dir = a.out;
  plan.protocol = a.protocol.apply(plan.protocol);
  plan.validate();

  const auto result = harness::run_sweep(plan, a.quiet);
  std::printf("%zu/%zu cells succeeded; summary: %s\n", result.runs.size(),
              result.runs.size() + result.failures.size(), result.summary_path.string().c_str());
  if (!result.failures.empty()) {
    for (const auto& f : result.failures) std::fprintf(stderr, "failed: %s\n", f.c_str());
    return kFailure;
  }
  return kOk;
}

struct RankArgs {
  std::string scores, out, subject;
  std::vector<std::string> baselines;
  double alpha = 0.05;
};

int cmd_rank(const RankArgs& a) {
  require_file(a.scores, "score table");
  const ScoreTable table = harness::load_score_csv(a.scores);
  const auto report = harness::rank_report(table, a.alpha, a.subject, a.baselines);
  const auto j = harness::rank_report_json(table, report, a.subject);
  const fs::path out = a.out.empty() ? harness::default_out_dir() : fs::path(a.out);
  fs::create_directories(out);
  std::ofstream(out / "rank_report.json") << j.dump(2) << '\n';
  std::ofstream(out / "rank_plot.csv") << harness::rank_plot_csv(table, report);
  std::cout << j.dump(2) << '\n';
  return kOk;
}

int cmd_selftest(bool corrupt, const std::string& file) {
  selftest::Options opt;
  opt.corrupt_softmax = corrupt;
  if (!file.empty()) {
    require_file(file, "container file");
    opt.file = file;
  }
  const auto results = selftest::run(opt);
  std::cout << selftest::format_report(results);
  for (const auto& r : results)
    if (!r.passed) return kFailure;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact permutation-invariant vision transformer: training, sweeps, ranking and self-tests"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run the few-shot protocol for one (config, dataset, seed)");
  train->add_option("--dataset", ta.dataset, "Training split (.zvds); the test split is <name>_test.zvds")->required();
  train->add_option("--test", ta.test, "Explicit test split (.zvds)");
  train->add_option("--config", ta.config, "Model config JSON (default: baseline fitted to the dataset)");
  train->add_option("--seed", ta.seed, "Run seed (default 3)");
  train->add_option("--out", ta.out, "Output directory (default $ZAVIT_OUT or ./zachvit-out)");
  train->add_option("--save-params", ta.save_params, "Also write the trained parameters to this file");
  train->add_option("--threads", ta.threads, "OpenMP threads for this run");
  ta.protocol.add(train);

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Run a plan or built-in grid over datasets and seeds");
  sweep->add_option("plan", sa.plan, "Plan JSON file");
  sweep->add_option("--grid", sa.grid, "Built-in grid: hparam, component, pooling");
  sweep->add_option("--dataset", sa.datasets, "Training split (.zvds); repeatable, appended to the plan");
  sweep->add_option("--seeds", sa.seeds, "Seed list (default 3 5 7 11 13)")->delimiter(',');
  sweep->add_option("--workers", sa.workers, "Concurrent cells (default 1)");
  sweep->add_option("--out", sa.out, "Output directory (default $ZAVIT_OUT or ./zachvit-out)");
  sweep->add_flag("--quiet", sa.quiet, "Do not log per-cell progress");
  sa.protocol.add(sweep);

  RankArgs ra;
  auto* rank = app.add_subcommand("rank", "Mean ranks, Friedman test and Nemenyi CD for a score table");
  rank->add_option("scores", ra.scores, "Score table CSV (model,<datasets...>)")->required();
  rank->add_option("--alpha", ra.alpha, "Significance level: 0.05 or 0.10");
  rank->add_option("--subject", ra.subject, "Model for the per-dataset advantage report");
  rank->add_option("--baselines", ra.baselines, "Baselines for the advantage (default: all others)")->delimiter(',');
  rank->add_option("--out", ra.out, "Output directory (default $ZAVIT_OUT or ./zachvit-out)");

  bool corrupt = false;
  std::string file;
  auto* self = app.add_subcommand("selftest", "Run the invariant suites and print a pass/fail matrix");
  self->add_flag("--corrupt-softmax", corrupt, "Break softmax backward to confirm the gradient checks catch it");
  self->add_option("--file", file, "Also validate this .zvds container");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*sweep) return cmd_sweep(sa);
    if (*rank) return cmd_rank(ra);
    if (*self) return cmd_selftest(corrupt, file);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {  // ConfigError, DimensionError
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const SamplingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
