#include "zachvit/model.hpp"

#include <cmath>
#include <sstream>

#include "zachvit/errors.hpp"

namespace zachvit {

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::Gap: return "gap";
    case Pooling::Max: return "max";
    case Pooling::Attention: return "attention";
    case Pooling::Cls: return "cls";
  }
  throw ConfigError("unknown pooling kind");
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "gap") return Pooling::Gap;
  if (s == "max") return Pooling::Max;
  if (s == "attention") return Pooling::Attention;
  if (s == "cls") return Pooling::Cls;
  throw ConfigError("unknown pooling kind '" + s + "' (expected gap|max|attention|cls)");
}

void ModelConfig::validate() const {
  if (input_size == 0 || patch_size == 0) throw ConfigError("input_size and patch_size must be positive");
  if (input_size % patch_size != 0)
    throw ConfigError("input_size " + std::to_string(input_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (unit_dims.empty()) throw ConfigError("unit_dims must list at least one block width");
  if (mlp_dims.empty()) throw ConfigError("mlp_dims must list at least one hidden width");
  if (mlp_dims.size() > unit_dims.size()) throw ConfigError("mlp_dims is longer than unit_dims");
  if (heads == 0) throw ConfigError("heads must be positive");
  for (auto d : unit_dims)
    if (d == 0 || d % heads != 0)
      throw ConfigError("unit width " + std::to_string(d) + " is not divisible by heads " + std::to_string(heads));
  for (auto h : mlp_dims)
    if (h == 0) throw ConfigError("mlp widths must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

std::size_t ModelConfig::num_patches() const {
  const std::size_t g = input_size / patch_size;
  return g * g;
}

std::size_t ModelConfig::block_input_dim(std::size_t block) const {
  return block == 0 ? unit_dims.front() : unit_dims[block - 1];
}

std::size_t ModelConfig::mlp_width(std::size_t block) const {
  return block < mlp_dims.size() ? mlp_dims[block] : mlp_dims.back();
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void ModelParams::set_requires_grad(bool on) {
  for_each([&](const std::string&, Tensor& t) { t.requires_grad = on; });
}

void ModelParams::zero_grad() {
  for_each([&](const std::string&, Tensor& t) { t.grad.reset(); });
}

namespace {

Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out, Shape shape) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

Tensor normal(Rng& rng, double stddev, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  const std::size_t d0 = config.unit_dims.front();
  const std::size_t pc = config.patch_dim();
  p.patch_w = glorot(rng, pc, d0, {pc, d0});
  p.patch_b = Tensor({d0});
  if (config.use_positional) p.positional = normal(rng, 0.02, {config.num_patches(), d0});
  if (config.pooling == Pooling::Cls) p.cls_token = normal(rng, 0.02, {1, d0});
  for (std::size_t i = 0; i < config.unit_dims.size(); ++i) {
    const std::size_t din = config.block_input_dim(i);
    const std::size_t dout = config.unit_dims[i];
    const std::size_t hid = config.mlp_width(i);
    BlockParams b;
    b.ln1_gain = Tensor({din}, 1.0);
    b.ln1_bias = Tensor({din});
    b.wq = glorot(rng, din, dout, {din, dout});
    b.bq = Tensor({dout});
    b.wk = glorot(rng, din, dout, {din, dout});
    b.bk = Tensor({dout});
    b.wv = glorot(rng, din, dout, {din, dout});
    b.bv = Tensor({dout});
    b.wo = glorot(rng, dout, dout, {dout, dout});
    b.bo = Tensor({dout});
    if (din != dout && config.use_adaptive_residual) b.w_proj = Tensor({dout, din});
    b.ln2_gain = Tensor({dout}, 1.0);
    b.ln2_bias = Tensor({dout});
    b.ff1_w = glorot(rng, dout, hid, {dout, hid});
    b.ff1_b = Tensor({hid});
    b.ff2_w = glorot(rng, hid, dout, {hid, dout});
    b.ff2_b = Tensor({dout});
    p.blocks.push_back(std::move(b));
  }
  const std::size_t dl = config.unit_dims.back();
  p.final_ln_gain = Tensor({dl}, 1.0);
  p.final_ln_bias = Tensor({dl});
  if (config.pooling == Pooling::Attention) p.attn_query = glorot(rng, dl, 1, {dl});
  p.head_w = glorot(rng, dl, config.num_classes, {dl, config.num_classes});
  p.head_b = Tensor({config.num_classes});
  return p;
}

ParamBreakdown param_breakdown(const ModelConfig& config) {
  config.validate();
  ParamBreakdown b;
  auto add = [&](std::string name, std::size_t n) {
    b.items.emplace_back(std::move(name), n);
    b.total += n;
  };
  const std::size_t d0 = config.unit_dims.front();
  add("patch projection", config.patch_dim() * d0 + d0);
  if (config.use_positional) add("positional table", config.num_patches() * d0);
  if (config.pooling == Pooling::Cls) add("cls token", d0);
  for (std::size_t i = 0; i < config.unit_dims.size(); ++i) {
    const std::size_t din = config.block_input_dim(i);
    const std::size_t dout = config.unit_dims[i];
    const std::size_t hid = config.mlp_width(i);
    const std::string p = "block " + std::to_string(i) + " ";
    add(p + "norm1", 2 * din);
    add(p + "qkv", 3 * (din * dout + dout));
    add(p + "attn out", dout * dout + dout);
    if (din != dout && config.use_adaptive_residual) add(p + "residual proj", dout * din);
    add(p + "norm2", 2 * dout);
    add(p + "mlp", dout * hid + hid + hid * dout + dout);
  }
  const std::size_t dl = config.unit_dims.back();
  add("final norm", 2 * dl);
  if (config.pooling == Pooling::Attention) add("pool query", dl);
  add("classifier", dl * config.num_classes + config.num_classes);
  return b;
}

std::size_t count_params(const ModelConfig& config) { return param_breakdown(config).total; }

std::string ParamBreakdown::to_string() const {
  std::ostringstream os;
  for (const auto& [name, n] : items) os << "  " << name << ": " << n << '\n';
  os << "  total: " << total << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Binding

namespace {
template <class P, class Reg>
ParamVars bind_with(P& params, Reg&& reg) {
  ParamVars v;
  auto r = [&](auto& t) {
    Var x = reg(t);
    v.flat.push_back(x);
    return x;
  };
  // Same order as ModelParams::visit.
  v.patch_w = r(params.patch_w);
  v.patch_b = r(params.patch_b);
  if (params.positional) v.positional = r(*params.positional);
  if (params.cls_token) v.cls_token = r(*params.cls_token);
  for (auto& b : params.blocks) {
    BlockVars bv;
    bv.ln1_gain = r(b.ln1_gain);
    bv.ln1_bias = r(b.ln1_bias);
    bv.wq = r(b.wq);
    bv.bq = r(b.bq);
    bv.wk = r(b.wk);
    bv.bk = r(b.bk);
    bv.wv = r(b.wv);
    bv.bv = r(b.bv);
    bv.wo = r(b.wo);
    bv.bo = r(b.bo);
    if (b.w_proj) bv.w_proj = r(*b.w_proj);
    bv.ln2_gain = r(b.ln2_gain);
    bv.ln2_bias = r(b.ln2_bias);
    bv.ff1_w = r(b.ff1_w);
    bv.ff1_b = r(b.ff1_b);
    bv.ff2_w = r(b.ff2_w);
    bv.ff2_b = r(b.ff2_b);
    v.blocks.push_back(std::move(bv));
  }
  v.final_ln_gain = r(params.final_ln_gain);
  v.final_ln_bias = r(params.final_ln_bias);
  if (params.attn_query) v.attn_query = r(*params.attn_query);
  v.head_w = r(params.head_w);
  v.head_b = r(params.head_b);
  return v;
}
}  // namespace

ParamVars bind_params(Tape& tape, const ModelParams& params) {
  return bind_with(params, [&](const Tensor& t) { return tape.leaf(t); });
}

ParamVars watch_params(Tape& tape, ModelParams& params) {
  return bind_with(params, [&](Tensor& t) { return tape.watch(t); });
}

// ---------------------------------------------------------------------------
// Forward stages

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(0) != image.dim(1))
    throw DimensionError("patchify: expected a square S x S x C image, got " + shape_str(image.shape()));
  const std::size_t s = image.dim(0), c = image.dim(2);
  if (patch_size == 0 || s % patch_size != 0)
    throw ConfigError("patchify: image size " + std::to_string(s) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  const std::size_t g = s / patch_size;
  const std::size_t width = patch_size * patch_size * c;
  Tensor out({g * g, width});
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* row = out.data().data() + (pr * g + pc) * width;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            row[k++] = image[((pr * patch_size + y) * s + (pc * patch_size + x)) * c + ch];
    }
  return out;
}

Var embed(Var patches, const ParamVars& params, const ModelConfig& config) {
  Var z = ops::add_bias(ops::matmul(patches, params.patch_w), params.patch_b);
  if (config.use_positional) {
    if (!params.positional) throw ConfigError("embed: positional table missing");
    z = ops::add(z, *params.positional);
  }
  if (config.pooling == Pooling::Cls) {
    if (!params.cls_token) throw ConfigError("embed: cls token missing");
    const Var parts[] = {*params.cls_token, z};
    z = ops::concat_rows(parts);
  }
  return z;
}

Var adaptive_residual(Var x, Var y, const std::optional<Var>& w_proj, bool enabled) {
  const std::size_t din = x.value().cols(), dout = y.value().cols();
  if (x.value().rows() != y.value().rows()) throw DimensionError("adaptive_residual: row counts differ");
  if (din == dout) return ops::add(x, y);
  if (!enabled) return y;
  if (!w_proj)
    throw ConfigError("adaptive_residual: widths " + std::to_string(din) + " -> " + std::to_string(dout) +
                      " need a projection");
  const Shape& ws = w_proj->value().shape();
  if (ws != Shape{dout, din}) throw DimensionError("adaptive_residual: projection has shape " + shape_str(ws));
  return ops::add(ops::matmul(x, ops::transpose(*w_proj)), y);
}

Var attention_block(Var z, const BlockVars& b, std::size_t heads, bool use_adaptive_residual) {
  const std::size_t dout = b.wq.value().cols();
  if (heads == 0 || dout % heads != 0) throw ConfigError("attention_block: width not divisible by heads");
  const std::size_t dh = dout / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Var h = ops::layer_norm(z, b.ln1_gain, b.ln1_bias);
  Var q = ops::add_bias(ops::matmul(h, b.wq), b.bq);
  Var k = ops::add_bias(ops::matmul(h, b.wk), b.bk);
  Var v = ops::add_bias(ops::matmul(h, b.wv), b.bv);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var qh = ops::slice_cols(q, i * dh, dh);
    Var kh = ops::slice_cols(k, i * dh, dh);
    Var vh = ops::slice_cols(v, i * dh, dh);
    Var scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    Var weights = ops::softmax(scores, 1);
    outs.push_back(ops::matmul(weights, vh));
  }
  Var attn = heads == 1 ? outs.front() : ops::concat_cols(outs);
  attn = ops::add_bias(ops::matmul(attn, b.wo), b.bo);
  Var z1 = adaptive_residual(z, attn, b.w_proj, use_adaptive_residual);

  Var h2 = ops::layer_norm(z1, b.ln2_gain, b.ln2_bias);
  Var f = ops::gelu(ops::add_bias(ops::matmul(h2, b.ff1_w), b.ff1_b));
  f = ops::add_bias(ops::matmul(f, b.ff2_w), b.ff2_b);
  return adaptive_residual(z1, f, std::nullopt, use_adaptive_residual);
}

Var pool(Var z, const ParamVars& params, Pooling pooling) {
  const std::size_t d = z.value().cols();
  Var out;
  switch (pooling) {
    case Pooling::Gap: out = ops::mean_rows(z); break;
    case Pooling::Max: out = ops::max_rows(z); break;
    case Pooling::Attention: {
      if (!params.attn_query) throw ConfigError("pool: attention query missing");
      Var q = ops::reshape(*params.attn_query, {d, 1});
      Var scores = ops::scale(ops::matmul(z, q), 1.0 / std::sqrt(static_cast<double>(d)));
      Var w = ops::softmax(scores, 0);
      out = ops::matmul(ops::transpose(w), z);
      break;
    }
    case Pooling::Cls: out = ops::slice_rows(z, 0, 1); break;
    default: throw ConfigError("pool: unknown pooling kind");
  }
  return ops::reshape(out, {d});
}

Var forward(Tape& tape, const ParamVars& params, const ModelConfig& config, const Tensor& image,
            std::span<const std::size_t> patch_order) {
  if (image.rank() != 3 || image.dim(0) != config.input_size || image.dim(1) != config.input_size ||
      image.dim(2) != config.channels)
    throw DimensionError("forward: image " + shape_str(image.shape()) + " does not match config " +
                         std::to_string(config.input_size) + "x" + std::to_string(config.input_size) + "x" +
                         std::to_string(config.channels));
  Var patches = tape.constant(patchify(image, config.patch_size));
  if (!patch_order.empty()) patches = ops::permute_rows(patches, patch_order);
  Var z = embed(patches, params, config);
  if (params.blocks.size() != config.unit_dims.size()) throw ConfigError("forward: block count mismatch");
  for (const auto& b : params.blocks) z = attention_block(z, b, config.heads, config.use_adaptive_residual);
  z = ops::layer_norm(z, params.final_ln_gain, params.final_ln_bias);
  Var h = ops::reshape(pool(z, params, config.pooling), {1, config.unit_dims.back()});
  Var logits = ops::add_bias(ops::matmul(h, params.head_w), params.head_b);
  return ops::reshape(logits, {config.num_classes});
}

Tensor forward(const Tensor& image, const ModelParams& params, const ModelConfig& config, Rng* rng) {
  std::vector<std::size_t> order;
  if (config.shuffle_patches) {
    if (!rng) throw UsageError("forward: shuffle_patches requires an rng");
    order = rng->permutation(config.num_patches());
  }
  Tape tape;
  ParamVars vars = bind_params(tape, params);
  Tensor logits = forward(tape, vars, config, image, order).value();
  return Tensor(logits.shape(), logits.values());
}

}  // namespace zachvit
