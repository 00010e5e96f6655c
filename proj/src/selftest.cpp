#include "zachvit/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "zachvit/autograd.hpp"
#include "zachvit/dataset.hpp"
#include "zachvit/errors.hpp"
#include "zachvit/metrics.hpp"
#include "zachvit/model.hpp"
#include "zachvit/rng.hpp"
#include "zachvit/train.hpp"

namespace zachvit::selftest {

namespace {

struct Check {
  bool ok = true;
  std::string detail;
  void fail(std::string why) {
    if (ok) detail = std::move(why);
    ok = false;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

ModelConfig toy_config(Pooling pooling = Pooling::Gap, bool positional = false) {
  ModelConfig c;
  c.input_size = 8;
  c.channels = 1;
  c.patch_size = 4;
  c.unit_dims = {8, 4};
  c.mlp_dims = {8, 4};
  c.heads = 2;
  c.num_classes = 3;
  c.pooling = pooling;
  c.use_positional = positional;
  return c;
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

std::vector<double> logits(const ModelParams& params, const ModelConfig& config, const Tensor& image,
                           std::span<const std::size_t> order) {
  Tape tape;
  auto vars = bind_params(tape, params);
  return forward(tape, vars, config, image, order).value().values();
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Check permutation_invariance() {
  Check c;
  Rng rng(17);
  for (auto pooling : {Pooling::Gap, Pooling::Max, Pooling::Attention, Pooling::Cls}) {
    const ModelConfig cfg = toy_config(pooling);
    const ModelParams params = init_params(cfg, rng);
    const Tensor image = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
    auto perm = identity(cfg.num_patches());
    const auto ref = logits(params, cfg, image, perm);
    double worst = 0.0;
    do {
      worst = std::max(worst, max_abs_diff(ref, logits(params, cfg, image, perm)));
    } while (std::next_permutation(perm.begin(), perm.end()));
    if (worst > 1e-9) c.fail(to_string(pooling) + " pooling deviates by " + fmt("%.3g", worst));
    else if (c.ok) c.detail = "24 permutations x 4 poolings, max dev " + fmt("%.2g", worst);
  }
  return c;
}

Check positional_sensitivity() {
  Check c;
  Rng rng(23);
  const ModelConfig cfg = toy_config(Pooling::Gap, true);
  const ModelParams params = init_params(cfg, rng);
  const Tensor image = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  auto perm = identity(cfg.num_patches());
  const auto ref = logits(params, cfg, image, perm);
  double best = 0.0;
  while (std::next_permutation(perm.begin(), perm.end()))
    best = std::max(best, max_abs_diff(ref, logits(params, cfg, image, perm)));
  if (best <= 1e-6) c.fail("no permutation moved a logit by more than 1e-6 (max " + fmt("%.3g", best) + ")");
  else c.detail = "max logit change " + fmt("%.3g", best);
  return c;
}

// Builds the loss on a fresh tape and returns it with the handles of the
// inputs being checked, in the same order as the tensors passed alongside.
using Builder = std::function<std::pair<Var, std::vector<Var>>(Tape&)>;

// Largest relative error between backward and central differences, over
// every element of every input. Inputs are perturbed in place and restored.
double gradient_error(const std::vector<Tensor*>& inputs, const Builder& build) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    auto [loss, vars] = build(tape);
    tape.backward(loss);
    for (auto& v : vars) {
      auto g = tape.grad(v);
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  auto eval = [&] {
    Tape tape;
    return build(tape).first.value()[0];
  };
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = *inputs[k];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = eval();
      t[i] = saved - h;
      const double down = eval();
      t[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / scale);
    }
  }
  return worst;
}

// Contracts an op output with fixed random weights so every output element
// contributes to the loss.
Var contract(Var out, Rng& rng) {
  Tape& tape = *out.tape;
  Var w = tape.constant(random_tensor(out.shape(), rng));
  return ops::sum(ops::mul(out, w));
}

Check op_gradients() {
  Check c;
  Rng rng(31);
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    std::function<Var(const std::vector<Var>&)> op;
  };
  std::vector<std::size_t> perm{2, 0, 1};
  const std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 3}}, [](auto& v) { return ops::matmul(v[0], v[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return ops::add(v[0], v[1]); }},
      {"add_bias", {{3, 4}, {4}}, [](auto& v) { return ops::add_bias(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return ops::mul(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](auto& v) { return ops::scale(v[0], -1.7); }},
      {"transpose", {{3, 4}}, [](auto& v) { return ops::transpose(v[0]); }},
      {"reshape", {{3, 4}}, [](auto& v) { return ops::reshape(v[0], {2, 6}); }},
      {"concat_rows", {{3, 4}, {2, 4}}, [](auto& v) { return ops::concat_rows(std::span<const Var>(v)); }},
      {"concat_cols", {{3, 4}, {3, 2}}, [](auto& v) { return ops::concat_cols(std::span<const Var>(v)); }},
      {"slice_rows", {{3, 4}}, [](auto& v) { return ops::slice_rows(v[0], 1, 2); }},
      {"slice_cols", {{3, 4}}, [](auto& v) { return ops::slice_cols(v[0], 1, 2); }},
      {"permute_rows", {{3, 4}}, [&perm](auto& v) { return ops::permute_rows(v[0], perm); }},
      {"mean_rows", {{3, 4}}, [](auto& v) { return ops::mean_rows(v[0]); }},
      {"max_rows", {{3, 4}}, [](auto& v) { return ops::max_rows(v[0]); }},
      {"sum", {{3, 4}}, [](auto& v) { return ops::sum(v[0]); }},
      {"softmax(axis 0)", {{3, 4}}, [](auto& v) { return ops::softmax(v[0], 0); }},
      {"softmax(axis 1)", {{3, 4}}, [](auto& v) { return ops::softmax(v[0], 1); }},
      {"layer_norm", {{3, 4}, {4}, {4}}, [](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }},
      {"gelu", {{3, 4}}, [](auto& v) { return ops::gelu(v[0]); }},
      {"relu", {{3, 4}}, [](auto& v) { return ops::relu(v[0]); }},
  };
  double overall = 0.0;
  for (const auto& cs : cases) {
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<Tensor> inputs;
      for (const auto& s : cs.shapes) {
        inputs.push_back(random_tensor(s, rng));
        inputs.back().requires_grad = true;
      }
      std::vector<Tensor*> ptrs;
      for (auto& t : inputs) ptrs.push_back(&t);
      const std::uint64_t wseed = rng.next();
      const double err = gradient_error(ptrs, [&](Tape& tape) {
        std::vector<Var> v;
        for (auto& t : inputs) v.push_back(tape.leaf(t));
        Rng wrng(wseed);
        return std::pair{contract(cs.op(v), wrng), v};
      });
      overall = std::max(overall, err);
      if (err > 1e-5) {
        c.fail(std::string(cs.name) + " relative error " + fmt("%.3g", err));
        break;
      }
    }
  }
  if (c.ok) c.detail = "20 ops x 10 instances, max rel err " + fmt("%.2g", overall);
  return c;
}

Check model_gradient() {
  Check c;
  Rng rng(41);
  ModelConfig cfg = toy_config();
  cfg.num_classes = 2;
  ModelParams params = init_params(cfg, rng);
  const Tensor image = random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  const std::size_t label = 1;

  params.set_requires_grad(true);
  std::vector<Tensor*> ptrs;
  params.for_each([&](const std::string&, Tensor& t) { ptrs.push_back(&t); });

  auto check_at = [&](const char* tag) {
    const double err = gradient_error(ptrs, [&](Tape& tape) {
      ParamVars vars = bind_params(tape, params);
      Var z = forward(tape, vars, cfg, image);
      const std::size_t labels[] = {label};
      return std::pair{cross_entropy(ops::reshape(z, {1, cfg.num_classes}), labels), vars.flat};
    });
    if (err > 1e-4) c.fail(std::string(tag) + ": relative error " + fmt("%.3g", err));
    return err;
  };
  const double at_init = check_at("at init");
  // Second point: W_proj moved off zero so the skip path carries signal.
  for (auto& b : params.blocks)
    if (b.w_proj)
      for (auto& v : b.w_proj->values()) v = rng.uniform(-0.5, 0.5);
  const double moved = check_at("with nonzero W_proj");
  if (c.ok)
    c.detail = std::to_string(params.scalar_count()) + " parameters, max rel err " + fmt("%.2g", std::max(at_init, moved));
  return c;
}

Check zero_init_residual() {
  Check c;
  Rng rng(53);
  ModelConfig cfg = toy_config();
  cfg.unit_dims = {8, 4, 4, 2};
  cfg.mlp_dims = {8};
  const ModelParams params = init_params(cfg, rng);
  std::size_t changing = 0;
  for (std::size_t i = 0; i < cfg.unit_dims.size(); ++i) {
    const std::size_t din = cfg.block_input_dim(i), dout = cfg.unit_dims[i];
    const auto& b = params.blocks[i];
    if (din == dout) {
      if (b.w_proj) c.fail("block " + std::to_string(i) + " has W_proj without a width change");
      continue;
    }
    ++changing;
    if (!b.w_proj) {
      c.fail("block " + std::to_string(i) + " is missing W_proj");
      continue;
    }
    Tape tape;
    Var x = tape.constant(random_tensor({5, din}, rng));
    Var y = tape.constant(Tensor({5, dout}, 0.0));
    Var w = tape.leaf(*b.w_proj);
    const auto& out = adaptive_residual(x, y, w).value().values();
    double m = 0.0;
    for (double v : out) m = std::max(m, std::abs(v));
    if (m > 1e-12) c.fail("block " + std::to_string(i) + " residual term is " + fmt("%.3g", m));
  }
  if (c.ok) c.detail = std::to_string(changing) + " width-changing blocks, residual term exactly zero";
  return c;
}

PredictionSet random_prediction(Rng& rng, std::size_t classes) {
  PredictionSet p;
  p.classes = classes;
  p.task = classes == 2 ? TaskKind::Binary : TaskKind::Multiclass;
  const std::size_t n = 1 + rng.below(12);
  for (std::size_t i = 0; i < n; ++i) {
    p.labels.push_back(rng.below(classes));
    std::vector<double> row(classes);
    double s = 0.0;
    // Coarse scores so ties occur.
    for (auto& v : row) s += v = 1.0 + static_cast<double>(rng.below(4));
    for (auto v : row) p.scores.push_back(v / s);
  }
  if (classes == 2)
    for (std::size_t i = 0; i < n; ++i) p.scores[2 * i] = 1.0 - p.scores[2 * i + 1];
  return p;
}

Check metric_oracles() {
  Check c;
  Rng rng(61);
  std::size_t auc_cases = 0;
  for (int inst = 0; inst < 200 && c.ok; ++inst) {
    const std::size_t k = 2 + rng.below(3);
    const PredictionSet p = random_prediction(rng, k);
    double total = 0.0;
    for (std::size_t cls = 0; cls < k; ++cls) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        std::size_t pred = 0;
        for (std::size_t j = 1; j < k; ++j)
          if (p.score(i, j) > p.score(i, pred)) pred = j;
        tp += pred == cls && p.labels[i] == cls;
        fp += pred == cls && p.labels[i] != cls;
        fn += pred != cls && p.labels[i] == cls;
      }
      const std::size_t d = 2 * tp + fp + fn;
      total += d ? static_cast<double>(2 * tp) / static_cast<double>(d) : 0.0;
    }
    const double f1 = total / static_cast<double>(k);
    if (macro_f1(p) != f1) c.fail("macro_f1 disagrees with the oracle on instance " + std::to_string(inst));
    if (k == 2) {
      double wins = 0.0;
      std::size_t pos = 0, neg = 0;
      for (std::size_t i = 0; i < p.size(); ++i) (p.labels[i] == 1 ? pos : neg)++;
      if (pos == 0 || neg == 0) continue;
      for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p.size(); ++j)
          if (p.labels[i] == 1 && p.labels[j] == 0)
            wins += p.score(i, 1) > p.score(j, 1) ? 1.0 : p.score(i, 1) == p.score(j, 1) ? 0.5 : 0.0;
      ++auc_cases;
      if (roc_auc(p) != wins / static_cast<double>(pos * neg))
        c.fail("roc_auc disagrees with the pairwise oracle on instance " + std::to_string(inst));
    }
  }
  if (c.ok) c.detail = "200 instances (" + std::to_string(auc_cases) + " with AUC), exact agreement";
  return c;
}

Check rank_statistics() {
  Check c;
  const std::vector<std::vector<double>> ranks{{1, 1, 1, 1}, {2, 2, 2, 2}, {3, 3, 3, 3}};
  const auto fr = friedman_test(ranks);
  if (fr.statistic != 8.0 || fr.df != 2) c.fail("friedman statistic " + fmt("%.17g", fr.statistic) + ", expected 8");
  for (auto [k, n] : {std::pair<std::size_t, std::size_t>{5, 7}, {15, 7}}) {
    const double kd = static_cast<double>(k);
    const double expect = nemenyi_q(k, 0.05) * std::sqrt(kd * (kd + 1) / (6.0 * static_cast<double>(n)));
    if (std::abs(nemenyi_cd(k, n, 0.05) - expect) > 1e-9) c.fail("nemenyi_cd mismatch for k=" + std::to_string(k));
  }
  const double tied = friedman_test({{2, 2}, {2, 2}, {2, 2}}).p_value;
  if (tied != 1.0) c.fail("fully tied table gives p " + fmt("%.17g", tied));
  if (c.ok) c.detail = "chi2 = 8 on the k=3, N=4 fixture; CD for (5,7) and (15,7)";
  return c;
}

Check container_roundtrip() {
  Check c;
  SyntheticSpec spec;
  spec.class_count = 3;
  spec.n_per_class = 4;
  spec.seed = 71;
  const DatasetSplit split = make_synthetic(spec);
  const std::string bytes = serialize_container(split);
  const DatasetSplit back = parse_container(bytes);
  if (serialize_container(back) != bytes) c.fail("round trip changed the bytes");
  try {
    parse_container(std::string_view(bytes).substr(0, bytes.size() - 3));
    c.fail("truncated container was accepted");
  } catch (const FormatError&) {
  }
  if (c.ok) c.detail = std::to_string(bytes.size()) + " bytes, byte-exact";
  return c;
}

Check container_file(const std::filesystem::path& path) {
  Check c;
  try {
    const DatasetSplit s = load_container(path);
    c.detail = path.string() + ": n=" + std::to_string(s.size()) + " " + std::to_string(s.height) + "x" +
               std::to_string(s.width) + "x" + std::to_string(s.channels) + " classes=" +
               std::to_string(s.class_count) + " " + to_string(s.task);
  } catch (const std::exception& e) {
    c.fail(e.what());
  }
  return c;
}

template <class F>
SuiteResult timed(const std::string& name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{name, false, {}, 0.0};
  try {
    Check c = f();
    r.passed = c.ok;
    r.detail = c.detail;
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

std::vector<SuiteResult> run(const Options& options) {
  struct FaultGuard {
    explicit FaultGuard(bool on) : on_(on) {
      if (on_) ops::testing::set_softmax_fault(true);
    }
    ~FaultGuard() {
      if (on_) ops::testing::set_softmax_fault(false);
    }
    bool on_;
  } guard(options.corrupt_softmax);

  std::vector<SuiteResult> out;
  out.push_back(timed("permutation-invariance", permutation_invariance));
  out.push_back(timed("positional-sensitivity", positional_sensitivity));
  out.push_back(timed("op-gradients", op_gradients));
  out.push_back(timed("model-gradient", model_gradient));
  out.push_back(timed("zero-init-residual", zero_init_residual));
  out.push_back(timed("metric-oracles", metric_oracles));
  out.push_back(timed("rank-statistics", rank_statistics));
  out.push_back(timed("container-roundtrip", container_roundtrip));
  if (options.file) out.push_back(timed("container-file", [&] { return container_file(*options.file); }));
  return out;
}

std::string format_report(const std::vector<SuiteResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::string out;
  char buf[256];
  std::size_t passed = 0;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-4s  %-*s  %8.3fs  ", r.passed ? "PASS" : "FAIL", static_cast<int>(width),
                  r.name.c_str(), r.seconds);
    out += buf + r.detail + "\n";
    passed += r.passed;
  }
  out += std::to_string(passed) + "/" + std::to_string(results.size()) + " suites passed\n";
  return out;
}

}  // namespace zachvit::selftest
