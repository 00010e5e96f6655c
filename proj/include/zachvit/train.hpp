#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zachvit/autograd.hpp"
#include "zachvit/dataset.hpp"
#include "zachvit/kernels.hpp"
#include "zachvit/metrics.hpp"
#include "zachvit/model.hpp"

namespace zachvit {

/// Few-shot training protocol. Defaults: 50 shots/class, batch 16, Adam at
/// 1e-4 for 23 epochs.
struct TrainProtocol {
  std::size_t shots = 50;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::size_t epochs = 23;
  std::uint64_t seed = 3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const TrainProtocol&) const = default;
};

inline constexpr std::array<std::uint64_t, 5> kProtocolSeeds{3, 5, 7, 11, 13};

struct SplitMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> roc_auc;             // binary tasks only
  std::optional<double> threshold_accuracy;  // binary tasks only, tau = 0.5
  /// roc_auc for binary tasks, macro_f1 otherwise.
  double primary = 0.0;
  std::string primary_name;
};

SplitMetrics compute_metrics(const PredictionSet& pred);

struct RunRecord {
  ModelConfig config;
  std::string dataset_id;
  std::uint64_t seed = 0;
  TrainProtocol protocol;
  std::vector<double> epoch_losses;
  SplitMetrics train;
  SplitMetrics test;
  std::size_t param_count = 0;
  double wall_seconds = 0.0;
};

/// train primary metric - test primary metric.
double generalization_gap(const RunRecord& record);

/// Mean over the batch of -log softmax(logits)[label]; logits is [B x K].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

struct AdamState {
  std::vector<std::vector<double>> m, v;
};
AdamState make_adam_state(const ModelParams& params);

/// One Adam update with bias correction folded into the step size:
///   lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)
///   theta -= lr_t * m / (sqrt(v) + epsilon)
/// `grads` holds one buffer per parameter tensor in ModelParams order.
void adam_step(ModelParams& params, std::span<const std::vector<double>> grads, AdamState& state, std::size_t t,
               const TrainProtocol& protocol);

/// Batch loss and gradients (mean over samples), one buffer per parameter
/// tensor. Each sample gets its own tape; per-sample gradients are summed
/// in sample order, so Serial and Parallel results are bitwise equal.
struct BatchGradient {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};
BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& config, std::span<const Tensor> images,
                             std::span<const std::size_t> labels,
                             std::span<const std::vector<std::size_t>> patch_orders, kernels::Policy policy);

/// Class probabilities for split images `indices` (all images when empty).
/// Images are resized on the fly. `patch_orders` is empty or holds one
/// permutation per evaluated image.
PredictionSet predict(const ModelParams& params, const ModelConfig& config, const DatasetSplit& split,
                      std::span<const std::size_t> indices, std::span<const std::vector<std::size_t>> patch_orders,
                      kernels::Policy policy);

struct RunOptions {
  kernels::Policy policy = kernels::Policy::Parallel;
  std::string dataset_id;
  /// Optional: receives the trained parameters.
  ModelParams* trained = nullptr;
};

/// Executes the few-shot protocol for one (config, dataset, seed). A single
/// RNG seeded with protocol.seed drives, in order: the few-shot draw,
/// parameter init, and per epoch the sample shuffle followed by per-sample
/// patch permutations (when shuffling); evaluation permutations come last.
RunRecord run_protocol(const DatasetSplit& train, const DatasetSplit& test, const ModelConfig& config,
                       const TrainProtocol& protocol, const RunOptions& options = {});

}  // namespace zachvit
