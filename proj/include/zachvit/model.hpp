#pragma once

// ZACH-ViT: patch embedding without positional encoding, a stack of pre-norm
// transformer blocks with zero-initialized adaptive residual projections,
// a symmetric pooling head and a linear classifier. The ablation switches
// (positional table, [CLS] token, patch shuffling, disabled projections,
// alternative pooling) live in ModelConfig.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zachvit/autograd.hpp"
#include "zachvit/rng.hpp"
#include "zachvit/tensor.hpp"

namespace zachvit {

enum class Pooling { Gap, Max, Attention, Cls };

std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t channels = 3;
  std::size_t patch_size = 16;
  std::vector<std::size_t> unit_dims{128, 64};
  std::vector<std::size_t> mlp_dims{128, 64};
  std::size_t heads = 8;
  std::size_t num_classes = 2;
  Pooling pooling = Pooling::Gap;
  bool use_positional = false;
  bool use_adaptive_residual = true;
  bool shuffle_patches = false;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  std::size_t num_patches() const;
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  /// Sequence length seen by the blocks (patches plus optional [CLS]).
  std::size_t tokens() const { return num_patches() + (pooling == Pooling::Cls ? 1 : 0); }
  std::size_t block_input_dim(std::size_t block) const;
  /// Feed-forward hidden width of a block; the last mlp_dims entry repeats.
  std::size_t mlp_width(std::size_t block) const;

  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  /// [d_out x d_in]; present iff widths differ and adaptive residuals are on.
  std::optional<Tensor> w_proj;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct ModelParams {
  Tensor patch_w, patch_b;
  std::optional<Tensor> positional;  // [N x d0]
  std::optional<Tensor> cls_token;   // [1 x d0]
  std::vector<BlockParams> blocks;
  Tensor final_ln_gain, final_ln_bias;
  std::optional<Tensor> attn_query;  // [d_L]
  Tensor head_w, head_b;

  /// Visits every present parameter tensor in canonical order with its
  /// dotted name. The order is stable and defines serialization layout.
  template <class Self, class F>
  static void visit(Self& self, F&& f);

  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t scalar_count() const;
  void set_requires_grad(bool on);
  void zero_grad();
};

/// Glorot-uniform weights, zero biases, unit LayerNorm gains, zero W_proj,
/// N(0, 0.02^2) positional table and [CLS] token.
ModelParams init_params(const ModelConfig& config, Rng& rng);

/// Exact scalar count implied by a config, computed from the architecture
/// alone (not by instantiating parameters).
struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> items;
  std::size_t total = 0;
  std::string to_string() const;
};
ParamBreakdown param_breakdown(const ModelConfig& config);
std::size_t count_params(const ModelConfig& config);

/// Tape handles for one ModelParams, in the same layout.
struct BlockVars {
  Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
  std::optional<Var> w_proj;
  Var ln2_gain, ln2_bias, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct ParamVars {
  Var patch_w, patch_b;
  std::optional<Var> positional, cls_token;
  std::vector<BlockVars> blocks;
  Var final_ln_gain, final_ln_bias;
  std::optional<Var> attn_query;
  Var head_w, head_b;
  /// All handles in ModelParams::for_each order.
  std::vector<Var> flat;
};

/// Registers params as borrowed leaves (gradients stay on the tape).
ParamVars bind_params(Tape& tape, const ModelParams& params);
/// Registers params so backward accumulates into each Tensor::grad.
ParamVars watch_params(Tape& tape, ModelParams& params);

/// [S x S x C] image -> [N x P*P*C]; row i is patch i in raster order,
/// flattened row-major within the patch with channels innermost.
Tensor patchify(const Tensor& image, std::size_t patch_size);

Var embed(Var patches, const ParamVars& params, const ModelConfig& config);

/// x + y when widths match; x * W_proj^T + y otherwise. With `enabled`
/// false and differing widths the skip path is dropped and y is returned.
Var adaptive_residual(Var x, Var y, const std::optional<Var>& w_proj, bool enabled = true);

/// Pre-norm multi-head self-attention + feed-forward, each followed by an
/// adaptive residual. Input [M x d_in], output [M x d_out].
Var attention_block(Var z, const BlockVars& block, std::size_t heads, bool use_adaptive_residual);

/// [M x d] -> [d]. For Cls pooling row 0 must be the [CLS] position.
Var pool(Var z, const ParamVars& params, Pooling pooling);

/// Full forward pass to logits [num_classes]. `patch_order`, when given,
/// permutes patch rows before embedding (out[i] = patch[order[i]]).
Var forward(Tape& tape, const ParamVars& params, const ModelConfig& config, const Tensor& image,
            std::span<const std::size_t> patch_order = {});

/// Convenience: builds a private tape. `rng` is required iff
/// config.shuffle_patches and supplies one fresh permutation.
Tensor forward(const Tensor& image, const ModelParams& params, const ModelConfig& config, Rng* rng = nullptr);

// ---------------------------------------------------------------------------

template <class Self, class F>
void ModelParams::visit(Self& self, F&& f) {
  f("patch.weight", self.patch_w);
  f("patch.bias", self.patch_b);
  if (self.positional) f("positional", *self.positional);
  if (self.cls_token) f("cls_token", *self.cls_token);
  for (std::size_t i = 0; i < self.blocks.size(); ++i) {
    auto& b = self.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.gain", b.ln1_gain);
    f(p + "ln1.bias", b.ln1_bias);
    f(p + "attn.q.weight", b.wq);
    f(p + "attn.q.bias", b.bq);
    f(p + "attn.k.weight", b.wk);
    f(p + "attn.k.bias", b.bk);
    f(p + "attn.v.weight", b.wv);
    f(p + "attn.v.bias", b.bv);
    f(p + "attn.out.weight", b.wo);
    f(p + "attn.out.bias", b.bo);
    if (b.w_proj) f(p + "residual.proj", *b.w_proj);
    f(p + "ln2.gain", b.ln2_gain);
    f(p + "ln2.bias", b.ln2_bias);
    f(p + "mlp.fc1.weight", b.ff1_w);
    f(p + "mlp.fc1.bias", b.ff1_b);
    f(p + "mlp.fc2.weight", b.ff2_w);
    f(p + "mlp.fc2.bias", b.ff2_b);
  }
  f("final_ln.gain", self.final_ln_gain);
  f("final_ln.bias", self.final_ln_bias);
  if (self.attn_query) f("pool.query", *self.attn_query);
  f("head.weight", self.head_w);
  f("head.bias", self.head_b);
}

}  // namespace zachvit
