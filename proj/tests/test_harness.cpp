#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "oracles.hpp"
#include "zachvit/errors.hpp"
#include "zachvit/harness.hpp"
#include "zachvit/model_io.hpp"

using namespace zachvit;
namespace fs = std::filesystem;
namespace h = zachvit::harness;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("zachvit_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Writes <dir>/<stem>.zvds and <dir>/<stem>_test.zvds.
fs::path write_dataset(const fs::path& dir, const std::string& stem, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.class_count = 2;
  spec.n_per_class = 6;
  spec.size = 8;
  spec.seed = seed;
  save_container(dir / (stem + ".zvds"), make_synthetic(spec));
  spec.seed = seed + 100;
  save_container(dir / (stem + "_test.zvds"), make_synthetic(spec));
  return dir / (stem + ".zvds");
}

h::ExperimentPlan tiny_plan(const fs::path& dir) {
  h::ExperimentPlan plan;
  plan.datasets.push_back(h::dataset_ref(write_dataset(dir, "toy", 1)));
  h::PlanConfig pc;
  pc.label = "toy";
  pc.config = oracle::toy_config({8, 4});
  pc.config.channels = 3;  // replaced by fit_dataset
  pc.fit_dataset = true;
  plan.configs.push_back(pc);
  plan.protocol.shots = 4;
  plan.protocol.epochs = 2;
  plan.protocol.batch_size = 3;
  plan.out_dir = dir / "out";
  return plan;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ConfigId, StableAndContentAddressed) {
  const ModelConfig a = oracle::toy_config();
  ModelConfig b = a;
  EXPECT_EQ(h::config_id(a), h::config_id(b));
  EXPECT_EQ(h::config_id(a).size(), 16u);
  b.heads = 4;
  EXPECT_NE(h::config_id(a), h::config_id(b));
}

TEST(RunJson, RoundTripPreservesEveryField) {
  RunRecord r;
  r.config = oracle::toy_config();
  r.dataset_id = "toy";
  r.seed = 7;
  r.protocol.epochs = 4;
  r.epoch_losses = {0.7, 0.1 + 0.2};
  r.train.accuracy = 0.9;
  r.train.roc_auc = 1.0 / 3.0;
  r.train.threshold_accuracy = 0.5;
  r.train.primary = 1.0 / 3.0;
  r.train.primary_name = "roc_auc";
  r.test.macro_f1 = 0.125;
  r.test.primary_name = "macro_f1";
  r.param_count = 634;
  r.wall_seconds = 1.5;
  const nlohmann::json j = h::run_to_json(r);
  EXPECT_EQ(j.at("schema_version"), h::kSchemaVersion);
  EXPECT_TRUE(j.at("test").at("roc_auc").is_null());
  const RunRecord back = h::run_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.protocol, r.protocol);
  EXPECT_EQ(back.epoch_losses, r.epoch_losses);
  EXPECT_EQ(back.train.roc_auc, r.train.roc_auc);
  EXPECT_FALSE(back.test.roc_auc.has_value());
  EXPECT_EQ(back.param_count, 634u);
  auto bad = j;
  bad["schema_version"] = 99;
  EXPECT_THROW(h::run_from_json(bad), ValidationError);
}

TEST(DatasetRef, TestSplitNaming) {
  auto r = h::dataset_ref("/d/blood.zvds");
  EXPECT_EQ(r.id, "blood");
  EXPECT_EQ(r.test, fs::path("/d/blood_test.zvds"));
  r = h::dataset_ref("/d/blood_train.zvds");
  EXPECT_EQ(r.id, "blood");
  EXPECT_EQ(r.test, fs::path("/d/blood_test.zvds"));
  r = h::dataset_ref("/d/a.zvds", fs::path("/e/b.zvds"));
  EXPECT_EQ(r.test, fs::path("/e/b.zvds"));
}

TEST(Grids, HyperparameterTableRows) {
  const auto g = h::builtin_grid("hparam");
  ASSERT_EQ(g.size(), 12u);
  EXPECT_EQ(g.front().label, "Baseline");
  EXPECT_EQ(g.back().label, "Wider TU + H=4");
  std::map<std::string, ModelConfig> by;
  for (const auto& pc : g) by[pc.label] = pc.config;
  EXPECT_EQ(by["PS=8"].patch_size, 8u);
  EXPECT_EQ(by["H=4"].heads, 4u);
  EXPECT_EQ(by["PS=32 + H=4"].patch_size, 32u);
  for (const auto& pc : g) {
    EXPECT_TRUE(pc.fit_dataset);
    EXPECT_NO_THROW(pc.config.validate()) << pc.label;
  }
}

TEST(Grids, ComponentAndPoolingVariants) {
  const auto c = h::builtin_grid("component");
  ASSERT_EQ(c.size(), 5u);
  std::map<std::string, ModelConfig> by;
  for (const auto& pc : c) by[pc.label] = pc.config;
  EXPECT_TRUE(by.at("+ Positional").use_positional);
  EXPECT_FALSE(by.at("- Adaptive Residuals").use_adaptive_residual);
  EXPECT_TRUE(by.at("Random Shuffle").shuffle_patches);
  EXPECT_EQ(by.at("[CLS] token").pooling, Pooling::Cls);
  const auto p = h::builtin_grid("pooling");
  ASSERT_EQ(p.size(), 4u);
  EXPECT_THROW(h::builtin_grid("table9"), ValidationError);
}

TEST(Grids, ComponentGridOverThreeDatasetsIs75Cells) {
  h::ExperimentPlan plan;
  plan.configs = h::builtin_grid("component");
  plan.datasets = {h::dataset_ref("a.zvds"), h::dataset_ref("b.zvds"), h::dataset_ref("c.zvds")};
  const auto cells = h::expand_cells(plan);
  EXPECT_EQ(cells.size(), 75u);
  EXPECT_EQ(cells[1].seed, 5u);
  EXPECT_EQ(cells[5].dataset_index, 1u);
  EXPECT_EQ(cells[15].config_index, 1u);
}

TEST(Plan, ParsesDocumentAndResolvesPaths) {
  const fs::path dir = scratch_dir("plan");
  write_dataset(dir, "toy", 1);
  const nlohmann::json j = {{"schema_version", 1},
                            {"grid", "pooling"},
                            {"datasets", {"toy.zvds", {{"train", "toy.zvds"}, {"test", "toy_test.zvds"}, {"id", "again"}}}},
                            {"seeds", {3, 5}},
                            {"protocol", {{"epochs", 1}}},
                            {"workers", 2}};
  const auto plan = h::plan_from_json(j, dir);
  EXPECT_EQ(plan.configs.size(), 4u);
  ASSERT_EQ(plan.datasets.size(), 2u);
  EXPECT_EQ(plan.datasets[0].train, dir / "toy.zvds");
  EXPECT_EQ(plan.datasets[1].id, "again");
  EXPECT_EQ(plan.seeds, (std::vector<std::uint64_t>{3, 5}));
  EXPECT_EQ(plan.protocol.epochs, 1u);
  EXPECT_EQ(plan.workers, 2u);
  EXPECT_NO_THROW(plan.validate());
}

TEST(Plan, RejectsMalformedDocuments) {
  const fs::path dir = scratch_dir("plan_bad");
  EXPECT_THROW(h::plan_from_json({{"datasets", {"x.zvds"}}}, dir), ValidationError);
  EXPECT_THROW(h::plan_from_json({{"grid", "pooling"}, {"datasets", {"x.zvds"}}, {"colour", 1}}, dir),
               ValidationError);
  EXPECT_THROW(h::plan_from_json({{"grid", "pooling"}, {"datasets", {"x.zvds"}}, {"protocol", {{"lr2", 1}}}}, dir),
               ValidationError);
  const auto plan = h::plan_from_json({{"grid", "pooling"}, {"datasets", {"missing.zvds"}}}, dir);
  try {
    plan.validate();
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.zvds"), std::string::npos);
  }
  h::ExperimentPlan empty_seeds = plan;
  empty_seeds.seeds.clear();
  EXPECT_THROW(empty_seeds.validate(), ValidationError);
}

TEST(Sweep, OneConfigOneDatasetFiveSeeds) {
  const fs::path dir = scratch_dir("sweep");
  const auto plan = tiny_plan(dir);
  const auto result = h::run_sweep(plan, true);
  EXPECT_TRUE(result.failures.empty());
  ASSERT_EQ(result.runs.size(), 5u);
  std::size_t run_files = 0;
  for (const auto& e : fs::directory_iterator(plan.out_dir))
    if (e.path().filename().string().starts_with("run_")) ++run_files;
  EXPECT_EQ(run_files, 5u);
  // One row per reported metric for the single (config, dataset) group.
  ASSERT_EQ(result.summary.size(), 3u);
  EXPECT_EQ(result.summary[0].metric, "test_roc_auc");
  EXPECT_EQ(result.summary[1].metric, "test_accuracy");
  EXPECT_EQ(result.summary[2].metric, "generalization_gap");
  for (const auto& row : result.summary) EXPECT_EQ(row.n_seeds, 5u);
  EXPECT_TRUE(fs::exists(plan.out_dir / "configs.json"));
  const std::string csv = slurp(result.summary_path);
  EXPECT_TRUE(csv.starts_with("# std is the population"));
  EXPECT_NE(csv.find("config_id,dataset,metric,mean,std,n_seeds\n"), std::string::npos);
}

TEST(Sweep, SummaryIsRecomputableFromRunFiles) {
  const fs::path dir = scratch_dir("recompute");
  const auto plan = tiny_plan(dir);
  const auto result = h::run_sweep(plan, true);
  std::vector<double> primary;
  for (const auto& e : fs::directory_iterator(plan.out_dir))
    if (e.path().extension() == ".json" && e.path().filename().string().starts_with("run_"))
      primary.push_back(h::read_run(e.path()).test.primary);
  ASSERT_EQ(primary.size(), 5u);
  double mean = 0.0;
  for (double v : primary) mean += v / 5.0;
  double var = 0.0;
  for (double v : primary) var += (v - mean) * (v - mean) / 5.0;
  EXPECT_NEAR(result.summary[0].mean, mean, 1e-12);
  EXPECT_NEAR(result.summary[0].std, std::sqrt(var), 1e-12);
}

TEST(Sweep, WorkerCountDoesNotChangeOutput) {
  const fs::path d1 = scratch_dir("workers1"), d4 = scratch_dir("workers4");
  auto p1 = tiny_plan(d1);
  auto p4 = tiny_plan(d4);
  p1.workers = 1;
  p4.workers = 4;
  const auto r1 = h::run_sweep(p1, true);
  const auto r4 = h::run_sweep(p4, true);
  EXPECT_EQ(slurp(r1.summary_path), slurp(r4.summary_path));
  ASSERT_EQ(r1.runs.size(), r4.runs.size());
  for (std::size_t i = 0; i < r1.runs.size(); ++i) EXPECT_EQ(r1.runs[i].epoch_losses, r4.runs[i].epoch_losses);
}

TEST(Sweep, FailingCellIsRecordedAndOthersContinue) {
  const fs::path dir = scratch_dir("partial");
  auto plan = tiny_plan(dir);
  h::PlanConfig bad = plan.configs.front();
  bad.label = "bad";
  bad.fit_dataset = false;
  bad.config.channels = 3;  // dataset is grayscale
  plan.configs.push_back(bad);
  plan.seeds = {3, 5};
  const auto result = h::run_sweep(plan, true);
  EXPECT_EQ(result.runs.size(), 2u);
  EXPECT_EQ(result.failures.size(), 2u);
  EXPECT_NE(result.failures.front().find("bad"), std::string::npos);
}

TEST(ScoreCsv, ParsesMetricsRowAndComments) {
  const auto t = h::parse_score_csv(
      "# scratch models\nmodel,A,B\nmetric,macro_f1,roc_auc\nm1,0.5,0.7\nm2,0.25,\n");
  EXPECT_EQ(t.models, (std::vector<std::string>{"m1", "m2"}));
  EXPECT_EQ(t.datasets, (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(t.metrics, (std::vector<std::string>{"macro_f1", "roc_auc"}));
  EXPECT_TRUE(std::isnan(t.scores[1][1]));
  try {
    h::rank_report(t, 0.05);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("m2/B"), std::string::npos);
  }
  EXPECT_THROW(h::parse_score_csv("model,A\nm1,zero\n"), ValidationError);
  EXPECT_THROW(h::parse_score_csv("model,A\nm1,0.1,0.2\n"), ValidationError);
}

TEST(RankReport, IdenticalColumnsFormOneGroup) {
  const auto t = h::parse_score_csv("model,A,B\nx,0.5,0.5\ny,0.5,0.5\nz,0.5,0.5\n");
  const auto rep = h::rank_report(t, 0.05);
  ASSERT_EQ(rep.groups.size(), 1u);
  EXPECT_EQ(rep.groups.front().size(), 3u);
  ASSERT_TRUE(rep.friedman.has_value());
  EXPECT_NEAR(rep.friedman->p_value, 1.0, 1e-12);
}

TEST(RankReport, JsonAndPlotCsv) {
  const auto t = h::parse_score_csv("model,A,B,C\nz,0.9,0.8,0.7\ny,0.5,0.6,0.6\nx,0.1,0.2,0.3\n");
  const auto rep = h::rank_report(t, 0.05, "z", {});
  const auto j = h::rank_report_json(t, rep, "z");
  EXPECT_EQ(j.at("models")[0].at("mean_rank"), 1.0);
  EXPECT_NEAR(j.at("critical_difference").get<double>(), nemenyi_cd(3, 3), 1e-15);
  EXPECT_NEAR(j.at("advantage").at("per_dataset").at("A").get<double>(), 0.9 - 0.3, 1e-12);
  EXPECT_NEAR(j.at("friedman").at("statistic").get<double>(), 6.0, 1e-12);
  const std::string csv = h::rank_plot_csv(t, rep);
  EXPECT_TRUE(csv.starts_with("kind,label,x_start,x_end\nmodel,z,1,1\n"));
  EXPECT_NE(csv.find("\ncd,CD,1,"), std::string::npos);
  EXPECT_NE(csv.find("\ngroup,"), std::string::npos);
}

TEST(OutDir, EnvironmentOverride) {
  ::setenv("ZAVIT_OUT", "/tmp/zachvit_env_out", 1);
  EXPECT_EQ(h::default_out_dir(), fs::path("/tmp/zachvit_env_out"));
  ::unsetenv("ZAVIT_OUT");
  EXPECT_EQ(h::default_out_dir(), fs::path("zachvit-out"));
}
