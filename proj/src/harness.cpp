#include "zachvit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "zachvit/dataset.hpp"
#include "zachvit/errors.hpp"
#include "zachvit/model_io.hpp"

namespace zachvit::harness {

using nlohmann::json;
namespace fs = std::filesystem;

std::string config_id(const ModelConfig& config) {
  const std::string text = config_to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

json protocol_to_json(const TrainProtocol& p) {
  return json{{"shots", p.shots},         {"batch_size", p.batch_size}, {"learning_rate", p.learning_rate},
              {"epochs", p.epochs},       {"seed", p.seed},             {"beta1", p.beta1},
              {"beta2", p.beta2},         {"epsilon", p.epsilon}};
}

TrainProtocol protocol_from_json(const json& j, TrainProtocol p) {
  if (!j.is_object()) throw ValidationError("protocol must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "shots") p.shots = v.get<std::size_t>();
      else if (key == "batch_size") p.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") p.learning_rate = v.get<double>();
      else if (key == "epochs") p.epochs = v.get<std::size_t>();
      else if (key == "seed") p.seed = v.get<std::uint64_t>();
      else if (key == "beta1") p.beta1 = v.get<double>();
      else if (key == "beta2") p.beta2 = v.get<double>();
      else if (key == "epsilon") p.epsilon = v.get<double>();
      else throw ValidationError("protocol has unknown field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("protocol: ") + e.what());
  }
  return p;
}

namespace {

json metrics_to_json(const SplitMetrics& m) {
  json j{{"accuracy", m.accuracy},
         {"macro_f1", m.macro_f1},
         {"primary", m.primary},
         {"primary_name", m.primary_name},
         {"roc_auc", nullptr},
         {"threshold_accuracy", nullptr}};
  if (m.roc_auc) j["roc_auc"] = *m.roc_auc;
  if (m.threshold_accuracy) j["threshold_accuracy"] = *m.threshold_accuracy;
  return j;
}

SplitMetrics metrics_from_json(const json& j) {
  SplitMetrics m;
  m.accuracy = j.at("accuracy").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.primary = j.at("primary").get<double>();
  m.primary_name = j.at("primary_name").get<std::string>();
  if (!j.at("roc_auc").is_null()) m.roc_auc = j.at("roc_auc").get<double>();
  if (!j.at("threshold_accuracy").is_null()) m.threshold_accuracy = j.at("threshold_accuracy").get<double>();
  return m;
}

}  // namespace

json run_to_json(const RunRecord& r) {
  return json{{"schema_version", kSchemaVersion},
              {"config_id", config_id(r.config)},
              {"config", config_to_json(r.config)},
              {"dataset", r.dataset_id},
              {"seed", r.seed},
              {"protocol", protocol_to_json(r.protocol)},
              {"epoch_losses", r.epoch_losses},
              {"train", metrics_to_json(r.train)},
              {"test", metrics_to_json(r.test)},
              {"generalization_gap", generalization_gap(r)},
              {"param_count", r.param_count},
              {"wall_seconds", r.wall_seconds}};
}

RunRecord run_from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw ValidationError("run record has unsupported schema_version " + j.at("schema_version").dump());
    RunRecord r;
    r.config = config_from_json(j.at("config"));
    r.dataset_id = j.at("dataset").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.protocol = protocol_from_json(j.at("protocol"));
    r.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    r.train = metrics_from_json(j.at("train"));
    r.test = metrics_from_json(j.at("test"));
    r.param_count = j.at("param_count").get<std::size_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("run record: ") + e.what());
  }
}

std::string run_file_name(const std::string& id, const std::string& dataset, std::uint64_t seed) {
  return "run_" + id + "_" + dataset + "_" + std::to_string(seed) + ".json";
}

fs::path write_run(const fs::path& out_dir, const RunRecord& record) {
  fs::create_directories(out_dir);
  const fs::path path = out_dir / run_file_name(config_id(record.config), record.dataset_id, record.seed);
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << run_to_json(record).dump(2) << '\n';
  return path;
}

RunRecord read_run(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open run file '" + path.string() + "'");
  try {
    return run_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("run file '" + path.string() + "': " + e.what());
  }
}

fs::path default_out_dir() {
  if (const char* env = std::getenv("ZAVIT_OUT"); env && *env) return env;
  return "zachvit-out";
}

DatasetRef dataset_ref(const fs::path& train, const std::optional<fs::path>& test) {
  DatasetRef ref;
  ref.train = train;
  std::string stem = train.stem().string();
  const std::string suffix = "_train";
  const bool paired = stem.size() > suffix.size() && stem.ends_with(suffix);
  if (paired) stem.resize(stem.size() - suffix.size());
  ref.id = stem;
  ref.test = test ? *test : train.parent_path() / (stem + "_test" + train.extension().string());
  return ref;
}

void ExperimentPlan::validate() const {
  if (datasets.empty()) throw ValidationError("plan lists no datasets");
  if (configs.empty()) throw ValidationError("plan lists no configs");
  if (seeds.empty()) throw ValidationError("plan seed list is empty");
  if (workers == 0) throw ValidationError("plan needs at least one worker");
  for (const auto& d : datasets)
    for (const auto& p : {d.train, d.test})
      if (!fs::exists(p)) throw ValidationError("dataset file not found: " + p.string());
  for (const auto& c : configs) {
    if (c.fit_dataset) continue;
    try {
      c.config.validate();
    } catch (const ConfigError& e) {
      throw ValidationError("config '" + c.label + "': " + e.what());
    }
  }
}

namespace {

ModelConfig baseline() {
  ModelConfig c;
  c.input_size = 64;
  c.patch_size = 16;
  c.unit_dims = {128, 64};
  c.mlp_dims = {128, 64};
  c.heads = 8;
  return c;
}

PlanConfig variant(std::string label, std::size_t patch, std::size_t heads, std::vector<std::size_t> tu,
                   std::vector<std::size_t> mlp) {
  ModelConfig c = baseline();
  c.patch_size = patch;
  c.heads = heads;
  c.unit_dims = std::move(tu);
  c.mlp_dims = std::move(mlp);
  return {std::move(label), c, true};
}

}  // namespace

std::vector<std::string> builtin_grid_names() { return {"hparam", "component", "pooling"}; }

std::vector<PlanConfig> builtin_grid(const std::string& name) {
  if (name == "hparam") {
    return {
        variant("Baseline", 16, 8, {128, 64}, {128, 64}),
        variant("PS=8", 8, 8, {128, 64}, {128, 64}),
        variant("PS=32", 32, 8, {128, 64}, {128, 64}),
        variant("H=4", 16, 4, {128, 64}, {128, 64}),
        variant("Deeper TU", 16, 8, {128, 128, 64}, {128, 64}),
        variant("Wider TU", 16, 8, {256, 128}, {128, 64}),
        variant("Wider MLP", 16, 8, {128, 64}, {256, 128}),
        variant("PS=8 + H=4", 8, 4, {128, 64}, {128, 64}),
        variant("PS=32 + H=4", 32, 4, {128, 64}, {128, 64}),
        variant("Deeper+Wider", 16, 8, {128, 128, 64}, {256, 128}),
        variant("PS=8 + Wider TU", 8, 8, {256, 128}, {128, 64}),
        variant("Wider TU + H=4", 16, 4, {256, 128}, {128, 64}),
    };
  }
  if (name == "component") {
    std::vector<PlanConfig> out;
    out.push_back({"Full ZACH-ViT", baseline(), true});
    out.push_back({"+ Positional", baseline(), true});
    out.back().config.use_positional = true;
    out.push_back({"- Adaptive Residuals", baseline(), true});
    out.back().config.use_adaptive_residual = false;
    out.push_back({"Random Shuffle", baseline(), true});
    out.back().config.shuffle_patches = true;
    out.push_back({"[CLS] token", baseline(), true});
    out.back().config.pooling = Pooling::Cls;
    return out;
  }
  if (name == "pooling") {
    std::vector<PlanConfig> out;
    for (auto [label, p] : {std::pair{"Global Average Pooling (GAP)", Pooling::Gap},
                            std::pair{"Attention Pooling", Pooling::Attention},
                            std::pair{"Global Max Pooling", Pooling::Max}, std::pair{"[CLS] Token", Pooling::Cls}}) {
      out.push_back({label, baseline(), true});
      out.back().config.pooling = p;
    }
    return out;
  }
  std::string known;
  for (const auto& n : builtin_grid_names()) known += " " + n;
  throw ValidationError("unknown grid '" + name + "'; known:" + known);
}

ExperimentPlan plan_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ValidationError("plan must be a JSON object");
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  ExperimentPlan plan;
  try {
    for (const auto& [key, _] : j.items())
      if (key != "schema_version" && key != "grid" && key != "configs" && key != "datasets" && key != "seeds" &&
          key != "protocol" && key != "workers" && key != "out")
        throw ValidationError("plan has unknown field '" + key + "'");
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion)
      throw ValidationError("plan has unsupported schema_version " + j.at("schema_version").dump());
    if (j.contains("grid") == j.contains("configs"))
      throw ValidationError("plan needs exactly one of 'grid' or 'configs'");
    if (j.contains("grid")) {
      plan.configs = builtin_grid(j.at("grid").get<std::string>());
    } else {
      for (const auto& c : j.at("configs")) {
        PlanConfig pc;
        pc.label = c.value("label", std::string{});
        pc.fit_dataset = c.value("fit_dataset", false);
        try {
          pc.config = config_from_json(c.at("config"));
        } catch (const ConfigError& e) {
          throw ValidationError("plan config '" + pc.label + "': " + e.what());
        }
        if (pc.label.empty()) pc.label = config_id(pc.config);
        plan.configs.push_back(std::move(pc));
      }
    }
    for (const auto& d : j.at("datasets")) {
      if (d.is_string()) {
        plan.datasets.push_back(dataset_ref(resolve(d.get<std::string>())));
      } else {
        std::optional<fs::path> test;
        if (d.contains("test")) test = resolve(d.at("test").get<std::string>());
        plan.datasets.push_back(dataset_ref(resolve(d.at("train").get<std::string>()), test));
        if (d.contains("id")) plan.datasets.back().id = d.at("id").get<std::string>();
      }
    }
    if (j.contains("seeds")) plan.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("protocol")) plan.protocol = protocol_from_json(j.at("protocol"));
    if (j.contains("workers")) plan.workers = j.at("workers").get<std::size_t>();
    plan.out_dir = j.contains("out") ? resolve(j.at("out").get<std::string>()) : default_out_dir();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("plan: ") + e.what());
  }
  return plan;
}

ExperimentPlan load_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("plan file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("plan '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return plan_from_json(j, path.parent_path());
}

std::vector<Cell> expand_cells(const ExperimentPlan& plan) {
  std::vector<Cell> cells;
  for (std::size_t c = 0; c < plan.configs.size(); ++c)
    for (std::size_t d = 0; d < plan.datasets.size(); ++d)
      for (auto seed : plan.seeds) cells.push_back({c, d, seed});
  return cells;
}

ModelConfig cell_config(const PlanConfig& pc, const DatasetSplit& train) {
  ModelConfig c = pc.config;
  if (pc.fit_dataset) {
    c.channels = train.channels;
    c.num_classes = train.class_count;
  }
  c.validate();
  return c;
}

namespace {

SummaryRow aggregate(const std::string& id, const std::string& dataset, const std::string& metric,
                     const std::vector<double>& xs) {
  SummaryRow row{id, dataset, metric, 0.0, 0.0, xs.size()};
  for (double x : xs) row.mean += x;
  row.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - row.mean) * (x - row.mean);
  row.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return row;
}

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& runs) {
  std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) groups[{config_id(r.config), r.dataset_id}].push_back(&r);
  std::vector<SummaryRow> rows;
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(), [](auto* a, auto* b) { return a->seed < b->seed; });
    std::vector<double> primary, acc, gap;
    for (const auto* r : members) {
      primary.push_back(r->test.primary);
      acc.push_back(r->test.accuracy);
      gap.push_back(generalization_gap(*r));
    }
    rows.push_back(aggregate(key.first, key.second, "test_" + members.front()->test.primary_name, primary));
    rows.push_back(aggregate(key.first, key.second, "test_accuracy", acc));
    rows.push_back(aggregate(key.first, key.second, "generalization_gap", gap));
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "# std is the population standard deviation over seeds\n";
  out += "config_id,dataset,metric,mean,std,n_seeds\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.config_id + "," + r.dataset + "," + r.metric + ",";
    std::snprintf(buf, sizeof buf, "%.17g", r.mean);
    out += buf;
    out += ",";
    std::snprintf(buf, sizeof buf, "%.17g", r.std);
    out += buf;
    out += "," + std::to_string(r.n_seeds) + "\n";
  }
  return out;
}

SweepResult run_sweep(const ExperimentPlan& plan, bool quiet) {
  plan.validate();
  std::vector<DatasetSplit> trains, tests;
  for (const auto& d : plan.datasets) {
    trains.push_back(load_container(d.train));
    tests.push_back(load_container(d.test));
  }
  const std::vector<Cell> cells = expand_cells(plan);
  std::vector<std::optional<RunRecord>> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& cell = cells[i];
      const auto& ds = plan.datasets[cell.dataset_index];
      const auto& pc = plan.configs[cell.config_index];
      try {
        TrainProtocol protocol = plan.protocol;
        protocol.seed = cell.seed;
        RunOptions options;
        options.policy = kernels::Policy::Serial;
        options.dataset_id = ds.id;
        const ModelConfig config = cell_config(pc, trains[cell.dataset_index]);
        RunRecord rec = run_protocol(trains[cell.dataset_index], tests[cell.dataset_index], config, protocol, options);
        write_run(plan.out_dir, rec);
        if (!quiet) {
          std::lock_guard lock(log_mutex);
          std::cerr << "[" << i + 1 << "/" << cells.size() << "] " << pc.label << " " << ds.id << " seed "
                    << cell.seed << ": test " << rec.test.primary_name << " " << rec.test.primary << "\n";
        }
        results[i] = std::move(rec);
      } catch (const std::exception& e) {
        errors[i] = pc.label + " / " + ds.id + " / seed " + std::to_string(cell.seed) + ": " + e.what();
        std::lock_guard lock(log_mutex);
        std::cerr << "cell failed: " << errors[i] << "\n";
      }
    }
  };
  const std::size_t n_threads = std::min(plan.workers, std::max<std::size_t>(1, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SweepResult out;
  // Cells finish in any order; merge by sorted key so output does not
  // depend on scheduling.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < cells.size(); ++i) order.push_back(i);
  auto key = [&](std::size_t i) {
    const auto& r = results[i];
    return std::tuple(r ? config_id(r->config) : std::string{}, plan.datasets[cells[i].dataset_index].id,
                      cells[i].seed, i);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (auto i : order) {
    if (results[i]) out.runs.push_back(*results[i]);
    if (!errors[i].empty()) out.failures.push_back(errors[i]);
  }
  out.summary = summarize(out.runs);
  fs::create_directories(plan.out_dir);
  out.summary_path = plan.out_dir / "summary.csv";
  std::ofstream(out.summary_path) << summary_csv(out.summary);

  json configs = json::object();
  for (const auto& r : out.runs) {
    const std::string id = config_id(r.config);
    if (configs.contains(id)) continue;
    std::string label;
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (results[i] && config_id(results[i]->config) == id) label = plan.configs[cells[i].config_index].label;
    configs[id] = json{{"label", label}, {"config", config_to_json(r.config)}};
  }
  std::ofstream(plan.out_dir / "configs.json") << json{{"schema_version", kSchemaVersion}, {"configs", configs}}.dump(2)
                                               << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Score tables and rank reports

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  for (auto& c : cells) {
    const auto b = c.find_first_not_of(" \t");
    const auto e = c.find_last_not_of(" \t");
    c = b == std::string::npos ? std::string{} : c.substr(b, e - b + 1);
  }
  return cells;
}

}  // namespace

ScoreTable parse_score_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ScoreTable t;
  bool header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_csv_line(line);
    if (!header) {
      if (cells.size() < 2) throw ValidationError("score table header needs a model column and at least one dataset");
      t.datasets.assign(cells.begin() + 1, cells.end());
      header = true;
      continue;
    }
    if (cells.size() != t.datasets.size() + 1)
      throw ValidationError("score table line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(t.datasets.size() + 1));
    if (cells[0] == "metric") {
      t.metrics.assign(cells.begin() + 1, cells.end());
      continue;
    }
    t.models.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      if (cells[c].empty()) {
        row.push_back(std::nan(""));
        continue;
      }
      char* end = nullptr;
      const double v = std::strtod(cells[c].c_str(), &end);
      if (end == cells[c].c_str() || *end != '\0' || !std::isfinite(v))
        throw ValidationError("score table line " + std::to_string(line_no) + ": '" + cells[c] + "' is not a number");
      row.push_back(v);
    }
    t.scores.push_back(std::move(row));
  }
  if (!header) throw ValidationError("score table is empty");
  return t;
}

ScoreTable load_score_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("score table not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_score_csv(ss.str());
}

RankReport rank_report(const ScoreTable& table, double alpha, const std::string& subject,
                       const std::vector<std::string>& baselines) {
  table.validate();
  RankReport rep;
  rep.alpha = alpha;
  rep.ranking = rank_models(table);
  if (table.models.size() >= 3 && table.datasets.size() >= 2) rep.friedman = friedman_test(rep.ranking.ranks);
  rep.cd = nemenyi_cd(table.models.size(), table.datasets.size(), alpha);
  rep.groups = cd_grouping(rep.ranking.mean_ranks, rep.cd);
  if (!subject.empty()) {
    std::vector<std::string> base = baselines;
    if (base.empty())
      for (const auto& m : table.models)
        if (m != subject) base.push_back(m);
    table.model_index(subject);
    for (const auto& d : table.datasets) rep.advantage[d] = regime_advantage(table, subject, base, d);
  }
  return rep;
}

json rank_report_json(const ScoreTable& table, const RankReport& rep, const std::string& subject) {
  json models = json::array();
  for (std::size_t m = 0; m < table.models.size(); ++m) {
    json ranks = json::object();
    for (std::size_t d = 0; d < table.datasets.size(); ++d) ranks[table.datasets[d]] = rep.ranking.ranks[m][d];
    models.push_back({{"model", table.models[m]}, {"mean_rank", rep.ranking.mean_ranks[m]}, {"ranks", ranks}});
  }
  json groups = json::array();
  for (const auto& g : rep.groups) {
    json names = json::array();
    for (auto i : g) names.push_back(table.models[i]);
    groups.push_back(names);
  }
  json j{{"schema_version", kSchemaVersion},
         {"models", models},
         {"datasets", table.datasets},
         {"alpha", rep.alpha},
         {"critical_difference", rep.cd},
         {"groups", groups},
         {"friedman", nullptr}};
  if (!table.metrics.empty()) j["metrics"] = table.metrics;
  if (rep.friedman)
    j["friedman"] = {{"statistic", rep.friedman->statistic}, {"df", rep.friedman->df}, {"p_value", rep.friedman->p_value}};
  if (!subject.empty()) j["advantage"] = {{"subject", subject}, {"per_dataset", rep.advantage}};
  return j;
}

std::string rank_plot_csv(const ScoreTable& table, const RankReport& rep) {
  std::string out = "kind,label,x_start,x_end\n";
  char buf[96];
  for (std::size_t m = 0; m < table.models.size(); ++m) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", rep.ranking.mean_ranks[m], rep.ranking.mean_ranks[m]);
    out += "model," + table.models[m] + buf;
  }
  for (const auto& g : rep.groups) {
    std::string label;
    double lo = rep.ranking.mean_ranks[g.front()], hi = lo;
    for (auto i : g) {
      if (!label.empty()) label += ";";
      label += table.models[i];
      lo = std::min(lo, rep.ranking.mean_ranks[i]);
      hi = std::max(hi, rep.ranking.mean_ranks[i]);
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", lo, hi);
    out += "group," + label + buf;
  }
  std::snprintf(buf, sizeof buf, "cd,CD,1,%.17g\n", 1.0 + rep.cd);
  out += buf;
  return out;
}

}  // namespace zachvit::harness
