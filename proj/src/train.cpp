#include "zachvit/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>

#include "zachvit/errors.hpp"

namespace zachvit {

SplitMetrics compute_metrics(const PredictionSet& pred) {
  SplitMetrics m;
  m.accuracy = accuracy(pred);
  m.macro_f1 = macro_f1(pred);
  if (pred.task == TaskKind::Binary) {
    m.threshold_accuracy = threshold_accuracy(pred, 0.5);
    try {
      m.roc_auc = roc_auc(pred);
    } catch (const UndefinedMetricError&) {
      m.roc_auc.reset();
    }
    // A single-class evaluation set leaves AUC undefined; fall back to 0.5.
    m.primary = m.roc_auc.value_or(0.5);
    m.primary_name = "roc_auc";
  } else {
    m.primary = m.macro_f1;
    m.primary_name = "macro_f1";
  }
  return m;
}

double generalization_gap(const RunRecord& record) { return record.train.primary - record.test.primary; }

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x K], got " + shape_str(z.shape()));
  const std::size_t b = z.dim(0), k = z.dim(1);
  if (labels.size() != b) throw DimensionError("cross_entropy: label count differs from batch size");
  for (auto l : labels)
    if (l >= k) throw UsageError("cross_entropy: label " + std::to_string(l) + " out of range for " + std::to_string(k) + " classes");
  std::vector<double> probs(b * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z.data().data() + i * k;
    double mx = row[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < k; ++c) probs[i * k + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t iz = logits.id;
  return logits.tape->record("cross_entropy", Tensor::scalar(loss), {logits},
                             [iz, b, k, lab = std::move(lab), probs = std::move(probs)](Tape& t, std::size_t out) {
                               const double g = t.grad_mut(out)[0] / static_cast<double>(b);
                               if (!t.requires_grad(iz)) return;
                               auto gz = t.grad_mut(iz);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t c = 0; c < k; ++c)
                                   gz[i * k + c] += g * (probs[i * k + c] - (c == lab[i] ? 1.0 : 0.0));
                             });
}

AdamState make_adam_state(const ModelParams& params) {
  AdamState s;
  params.for_each([&](const std::string&, const Tensor& t) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  });
  return s;
}

void adam_step(ModelParams& params, std::span<const std::vector<double>> grads, AdamState& state, std::size_t t,
               const TrainProtocol& protocol) {
  if (t == 0) throw UsageError("adam_step: step index starts at 1");
  std::vector<Tensor*> tensors;
  params.for_each([&](const std::string&, Tensor& x) { tensors.push_back(&x); });
  if (grads.size() != tensors.size() || state.m.size() != tensors.size() || state.v.size() != tensors.size())
    throw UsageError("adam_step: gradient/state count does not match parameters");
  const double td = static_cast<double>(t);
  const double lr_t = protocol.learning_rate * std::sqrt(1.0 - std::pow(protocol.beta2, td)) /
                      (1.0 - std::pow(protocol.beta1, td));
  for (std::size_t p = 0; p < tensors.size(); ++p) {
    auto& x = tensors[p]->values();
    const auto& g = grads[p];
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (g.size() != x.size() || m.size() != x.size() || v.size() != x.size())
      throw UsageError("adam_step: shape mismatch for parameter tensor " + std::to_string(p));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = protocol.beta1 * m[i] + (1.0 - protocol.beta1) * g[i];
      v[i] = protocol.beta2 * v[i] + (1.0 - protocol.beta2) * g[i] * g[i];
      x[i] -= lr_t * m[i] / (std::sqrt(v[i]) + protocol.epsilon);
    }
  }
}

namespace {

struct SampleGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};

SampleGrad sample_gradient(const ModelParams& params, const ModelConfig& config, const Tensor& image,
                           std::size_t label, std::span<const std::size_t> order) {
  Tape tape;
  ParamVars vars = bind_params(tape, params);
  Var logits = forward(tape, vars, config, image, order);
  const std::size_t lab[] = {label};
  Var loss = cross_entropy(ops::reshape(logits, {1, config.num_classes}), lab);
  tape.backward(loss);
  SampleGrad out;
  out.loss = loss.value()[0];
  out.grads.reserve(vars.flat.size());
  for (const Var& v : vars.flat) {
    auto g = tape.grad(v);
    out.grads.emplace_back(g.begin(), g.end());
    if (out.grads.back().empty()) out.grads.back().assign(v.value().size(), 0.0);
  }
  return out;
}

std::span<const std::size_t> order_for(std::span<const std::vector<std::size_t>> orders, std::size_t i) {
  if (orders.empty()) return {};
  return orders[i];
}

}  // namespace

BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& config, std::span<const Tensor> images,
                             std::span<const std::size_t> labels,
                             std::span<const std::vector<std::size_t>> patch_orders, kernels::Policy policy) {
  const std::size_t b = images.size();
  if (b == 0 || labels.size() != b) throw UsageError("batch_gradient: empty batch or label count mismatch");
  if (!patch_orders.empty() && patch_orders.size() != b)
    throw UsageError("batch_gradient: need one patch order per image");
  std::vector<SampleGrad> per(b);
  if (policy == kernels::Policy::Parallel) {
    const auto n = static_cast<std::int64_t>(b);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto s = static_cast<std::size_t>(i);
      per[s] = sample_gradient(params, config, images[s], labels[s], order_for(patch_orders, s));
    }
  } else {
    for (std::size_t s = 0; s < b; ++s)
      per[s] = sample_gradient(params, config, images[s], labels[s], order_for(patch_orders, s));
  }
  // Fixed-order reduction keeps the result independent of thread count.
  BatchGradient out;
  out.grads = std::move(per[0].grads);
  out.loss = per[0].loss;
  for (std::size_t s = 1; s < b; ++s) {
    out.loss += per[s].loss;
    for (std::size_t p = 0; p < out.grads.size(); ++p)
      for (std::size_t i = 0; i < out.grads[p].size(); ++i) out.grads[p][i] += per[s].grads[p][i];
  }
  const double inv = 1.0 / static_cast<double>(b);
  out.loss *= inv;
  for (auto& g : out.grads)
    for (auto& v : g) v *= inv;
  return out;
}

PredictionSet predict(const ModelParams& params, const ModelConfig& config, const DatasetSplit& split,
                      std::span<const std::size_t> indices, std::span<const std::vector<std::size_t>> patch_orders,
                      kernels::Policy policy) {
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(split.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    indices = all;
  }
  const std::size_t n = indices.size();
  if (!patch_orders.empty() && patch_orders.size() != n) throw UsageError("predict: need one patch order per image");
  const std::size_t k = config.num_classes;
  PredictionSet pred;
  pred.classes = k;
  pred.task = split.task;
  pred.scores.assign(n * k, 0.0);
  pred.labels.resize(n);
  auto one = [&](std::size_t s) {
    const Tensor image = image_tensor(split, indices[s], config.input_size);
    Tape tape;
    ParamVars vars = bind_params(tape, params);
    const Tensor& z = forward(tape, vars, config, image, order_for(patch_orders, s)).value();
    double mx = z[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < k; ++c) pred.scores[s * k + c] = std::exp(z[c] - mx) / sum;
    pred.labels[s] = split.labels[indices[s]];
  };
  if (policy == kernels::Policy::Parallel) {
    const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 4)
    for (std::int64_t i = 0; i < count; ++i) one(static_cast<std::size_t>(i));
  } else {
    for (std::size_t s = 0; s < n; ++s) one(s);
  }
  return pred;
}

RunRecord run_protocol(const DatasetSplit& train, const DatasetSplit& test, const ModelConfig& config,
                       const TrainProtocol& protocol, const RunOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  kernels::ScopedPolicy scoped(options.policy);
  config.validate();
  train.validate();
  test.validate();
  if (train.channels != config.channels || test.channels != config.channels)
    throw ConfigError("dataset has " + std::to_string(train.channels) + " channel(s), config expects " +
                      std::to_string(config.channels));
  if (train.class_count != config.num_classes || test.class_count != config.num_classes)
    throw ConfigError("dataset has " + std::to_string(train.class_count) + " classes, config expects " +
                      std::to_string(config.num_classes));
  if (protocol.batch_size == 0) throw ConfigError("batch size must be positive");

  Rng rng(protocol.seed);
  const std::vector<std::size_t> chosen = few_shot_indices(train, protocol.shots, rng);
  ModelParams params = init_params(config, rng);
  params.set_requires_grad(true);
  AdamState adam = make_adam_state(params);

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  images.reserve(chosen.size());
  for (auto i : chosen) {
    images.push_back(image_tensor(train, i, config.input_size));
    labels.push_back(train.labels[i]);
  }

  RunRecord rec;
  rec.config = config;
  rec.dataset_id = options.dataset_id;
  rec.seed = protocol.seed;
  rec.protocol = protocol;
  rec.param_count = count_params(config);

  const std::size_t n = chosen.size();
  const std::size_t patches = config.num_patches();
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < protocol.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += protocol.batch_size) {
      const std::size_t end = std::min(n, start + protocol.batch_size);
      std::vector<Tensor> batch_images;
      std::vector<std::size_t> batch_labels;
      std::vector<std::vector<std::size_t>> perms;
      for (std::size_t j = start; j < end; ++j) {
        batch_images.push_back(images[order[j]]);
        batch_labels.push_back(labels[order[j]]);
        if (config.shuffle_patches) perms.push_back(rng.permutation(patches));
      }
      BatchGradient bg = batch_gradient(params, config, batch_images, batch_labels, perms, options.policy);
      epoch_loss += bg.loss * static_cast<double>(end - start);
      adam_step(params, bg.grads, adam, ++step, protocol);
    }
    rec.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
  }

  auto eval_orders = [&](std::size_t count) {
    std::vector<std::vector<std::size_t>> perms;
    if (config.shuffle_patches)
      for (std::size_t i = 0; i < count; ++i) perms.push_back(rng.permutation(patches));
    return perms;
  };
  const auto train_orders = eval_orders(n);
  rec.train = compute_metrics(predict(params, config, train, chosen, train_orders, options.policy));
  const auto test_orders = eval_orders(test.size());
  rec.test = compute_metrics(predict(params, config, test, {}, test_orders, options.policy));

  if (options.trained) *options.trained = params;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

}  // namespace zachvit
