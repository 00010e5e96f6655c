#include "zachvit/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "zachvit/errors.hpp"
#include "zachvit/kernels.hpp"

namespace zachvit {

const Tensor& Var::value() const {
  if (!tape) throw UsageError("Var is not attached to a tape");
  return tape->value(id);
}

void Tape::check_open() const {
  if (consumed_) throw UsageError("tape already consumed by a backward pass");
}

Var Tape::push(Node node) {
  check_open();
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(const Tensor& t) {
  Node n;
  n.borrowed = &t;
  n.requires_grad = t.requires_grad;
  return push(std::move(n));
}

Var Tape::watch(Tensor& t) {
  Node n;
  n.borrowed = &t;
  n.sink = &t;
  n.requires_grad = t.requires_grad;
  return push(std::move(n));
}

Var Tape::constant(Tensor t) {
  Node n;
  n.owned = std::move(t);
  n.owned.requires_grad = false;
  return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, Backward backward) {
  check_open();
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw UsageError(std::string(op) + ": input belongs to a different tape");
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.borrowed ? *n.borrowed : n.owned;
}

std::span<const double> Tape::grad(Var v) const {
  if (v.tape != this) throw UsageError("Var belongs to a different tape");
  return nodes_.at(v.id).grad;
}

std::span<double> Tape::grad_mut(std::size_t id) { return nodes_[id].grad; }

void Tape::backward(Var loss) {
  check_open();
  if (loss.tape != this) throw UsageError("loss is not on this tape");
  if (value(loss.id).size() != 1)
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
  consumed_ = true;
  for (std::size_t i = 0; i <= loss.id; ++i)
    if (nodes_[i].requires_grad) nodes_[i].grad.assign(value(i).size(), 0.0);
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward) n.backward(*this, i);
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (!n.sink || !n.requires_grad) continue;
    if (!n.sink->grad) {
      n.sink->grad = n.grad;
    } else {
      auto& g = *n.sink->grad;
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }
}

void backward(Var loss, Tape& tape) { tape.backward(loss); }

namespace ops {

namespace testing {
namespace {
std::atomic<bool> g_softmax_fault{false};
}
void set_softmax_fault(bool on) noexcept { g_softmax_fault.store(on); }
bool softmax_fault() noexcept { return g_softmax_fault.load(); }
}  // namespace testing

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Accumulate `g` into the gradient of node `id` if it is differentiable.
template <class F>
void accumulate(Tape& tape, std::size_t id, F&& f) {
  if (tape.requires_grad(id)) f(tape.grad_mut(id));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k)
    throw DimensionError("matmul: inner extents differ " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor C({m, n});
  kernels::matmul(A.data(), B.data(), C.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(C), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    // dA = dC * B^T, dB = A^T * dC
    accumulate(t, ia, [&](std::span<double> ga) { kernels::matmul_a_bt_acc(g, t.value(ib).data(), ga, m, n, k); });
    accumulate(t, ib, [&](std::span<double> gb) { kernels::matmul_at_b_acc(t.value(ia).data(), g, gb, k, m, n); });
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "add");
  Tensor C = A;
  C.requires_grad = false;
  C.grad.reset();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(C), {a, b}, [ia, ib](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    for (std::size_t id : {ia, ib})
      accumulate(t, id, [&](std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
  });
}

Var add_bias(Var x, Var b) {
  const Tensor& X = x.value();
  const Tensor& B = b.value();
  require_rank2(X, "add_bias");
  const std::size_t m = X.dim(0), d = X.dim(1);
  if (B.size() != d)
    throw DimensionError("add_bias: bias of size " + std::to_string(B.size()) + " for width " + std::to_string(d));
  Tensor Y(X.shape(), std::vector<double>(X.values()));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) Y[i * d + j] += B[j];
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->record("add_bias", std::move(Y), {x, b}, [ix, ib, m, d](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ix, [&](std::span<double> gx) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    accumulate(t, ib, [&](std::span<double> gb) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    });
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "mul");
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(C), {a, b}, [ia, ib](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      const Tensor& B = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    });
    accumulate(t, ib, [&](std::span<double> gb) {
      const Tensor& A = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    });
  });
}

Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * s;
  const std::size_t ia = a.id;
  return a.tape->record("scale", std::move(C), {a}, [ia, s](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  require_rank2(A, "transpose");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor C({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C[j * m + i] = A[i * n + j];
  const std::size_t ia = a.id;
  return a.tape->record("transpose", std::move(C), {a}, [ia, m, n](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  });
}

Var reshape(Var a, Shape shape) {
  Tensor C = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record("reshape", std::move(C), {a}, [ia](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  std::vector<double> data;
  for (const Var& p : parts) {
    const Tensor& T = p.value();
    if (T.cols() != d) throw DimensionError("concat_rows: width mismatch " + shape_str(T.shape()));
    ids.push_back(p.id);
    offsets.push_back(data.size());
    data.insert(data.end(), T.values().begin(), T.values().end());
    rows += T.rows();
  }
  return parts[0].tape->record("concat_rows", Tensor({rows, d}, std::move(data)), parts,
                               [ids, offsets](Tape& t, std::size_t out) {
                                 auto g = t.grad_mut(out);
                                 for (std::size_t p = 0; p < ids.size(); ++p)
                                   accumulate(t, ids[p], [&](std::span<double> gx) {
                                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[offsets[p] + i];
                                   });
                               });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> ids, widths, offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& T = p.value();
    if (T.rows() != m) throw DimensionError("concat_cols: row count mismatch " + shape_str(T.shape()));
    ids.push_back(p.id);
    widths.push_back(T.cols());
    offsets.push_back(total);
    total += T.cols();
  }
  Tensor C({m, total});
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& T = parts[p].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(T.data().begin() + static_cast<std::ptrdiff_t>(i * widths[p]), widths[p],
                  C.data().begin() + static_cast<std::ptrdiff_t>(i * total + offsets[p]));
  }
  return parts[0].tape->record("concat_cols", std::move(C), parts,
                               [ids, widths, offsets, m, total](Tape& t, std::size_t out) {
                                 auto g = t.grad_mut(out);
                                 for (std::size_t p = 0; p < ids.size(); ++p)
                                   accumulate(t, ids[p], [&](std::span<double> gx) {
                                     for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < widths[p]; ++j)
                                         gx[i * widths[p] + j] += g[i * total + offsets[p] + j];
                                   });
                               });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require_rank2(A, "slice_rows");
  const std::size_t d = A.dim(1);
  if (count == 0 || start + count > A.dim(0))
    throw DimensionError("slice_rows: range out of bounds for " + shape_str(A.shape()));
  auto first = A.values().begin() + static_cast<std::ptrdiff_t>(start * d);
  Tensor C({count, d}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * d)));
  const std::size_t ia = a.id;
  return a.tape->record("slice_rows", std::move(C), {a}, [ia, start, d](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[start * d + i] += g[i];
    });
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require_rank2(A, "slice_cols");
  const std::size_t m = A.dim(0), n = A.dim(1);
  if (count == 0 || start + count > n)
    throw DimensionError("slice_cols: range out of bounds for " + shape_str(A.shape()));
  Tensor C({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) C[i * count + j] = A[i * n + start + j];
  const std::size_t ia = a.id;
  return a.tape->record("slice_cols", std::move(C), {a}, [ia, start, count, m, n](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
    });
  });
}

Var permute_rows(Var a, std::span<const std::size_t> perm) {
  const Tensor& A = a.value();
  require_rank2(A, "permute_rows");
  const std::size_t m = A.dim(0), d = A.dim(1);
  if (perm.size() != m) throw DimensionError("permute_rows: permutation length mismatch");
  std::vector<bool> seen(m, false);
  for (auto p : perm) {
    if (p >= m || seen[p]) throw DimensionError("permute_rows: not a permutation");
    seen[p] = true;
  }
  Tensor C({m, d});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(A.data().begin() + static_cast<std::ptrdiff_t>(perm[i] * d), d,
                C.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  std::vector<std::size_t> pv(perm.begin(), perm.end());
  const std::size_t ia = a.id;
  return a.tape->record("permute_rows", std::move(C), {a}, [ia, pv, d](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < pv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) ga[pv[i] * d + j] += g[i * d + j];
    });
  });
}

Var mean_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), d = A.cols();
  Tensor C({1, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) C[j] += A[i * d + j];
  for (std::size_t j = 0; j < d; ++j) C[j] /= static_cast<double>(m);
  const std::size_t ia = a.id;
  return a.tape->record("mean_rows", std::move(C), {a}, [ia, m, d](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[j] / static_cast<double>(m);
    });
  });
}

Var max_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), d = A.cols();
  Tensor C({1, d});
  std::vector<std::size_t> arg(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    double best = A[j];
    for (std::size_t i = 1; i < m; ++i)
      if (A[i * d + j] > best) {
        best = A[i * d + j];
        arg[j] = i;
      }
    C[j] = best;
  }
  const std::size_t ia = a.id;
  return a.tape->record("max_rows", std::move(C), {a}, [ia, arg, d](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t j = 0; j < d; ++j) ga[arg[j] * d + j] += g[j];
    });
  });
}

Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t out) {
    const double g = t.grad_mut(out)[0];
    accumulate(t, ia, [&](std::span<double> ga) {
      for (double& v : ga) v += g;
    });
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& A = a.value();
  if (A.rank() > 2 || axis >= A.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(A.shape()));
  // View as rows x cols; normalize each line of length `len` with stride `stride`.
  const std::size_t rows = A.rows(), cols = A.cols();
  const bool along_cols = (A.rank() == 1) || axis == 1;
  const std::size_t lines = along_cols ? rows : cols;
  const std::size_t len = along_cols ? cols : rows;
  const std::size_t stride = along_cols ? 1 : cols;
  const std::size_t step = along_cols ? cols : 1;
  Tensor Y(A.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * step;
    double mx = A[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, A[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(A[base + i * stride] - mx);
      Y[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) Y[base + i * stride] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record("softmax", std::move(Y), {a}, [ia, lines, len, stride, step](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    const Tensor& Y = t.value(out);
    const bool fault = testing::softmax_fault();
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * step;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * Y[base + i * stride];
        if (fault) dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * stride;
          ga[k] += Y[k] * (g[k] - dot);
        }
      }
    });
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  const Tensor& X = x.value();
  require_rank2(X, "layer_norm");
  const std::size_t m = X.dim(0), d = X.dim(1);
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  if (G.size() != d || B.size() != d) throw DimensionError("layer_norm: gain/bias width mismatch");
  Tensor Y({m, d});
  std::vector<double> xhat(m * d), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      Y[i * d + j] = xhat[i * d + j] * G[j] + B[j];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record("layer_norm", std::move(Y), {x, gain, bias},
                        [ix, ig, ib, m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                               std::size_t out) {
                          auto g = t.grad_mut(out);
                          accumulate(t, ig, [&](std::span<double> gg) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                          });
                          accumulate(t, ib, [&](std::span<double> gb) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                          });
                          accumulate(t, ix, [&](std::span<double> gx) {
                            const Tensor& G = t.value(ig);
                            std::vector<double> dxhat(d);
                            for (std::size_t i = 0; i < m; ++i) {
                              double mean_d = 0.0, mean_dx = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                dxhat[j] = g[i * d + j] * G[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat[i * d + j];
                              }
                              mean_d /= static_cast<double>(d);
                              mean_dx /= static_cast<double>(d);
                              for (std::size_t j = 0; j < d; ++j)
                                gx[i * d + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
                            }
                          });
                        });
}

Var gelu(Var a) {
  const Tensor& A = a.value();
  Tensor Y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) Y[i] = 0.5 * A[i] * (1.0 + std::erf(A[i] * std::numbers::sqrt2 / 2.0));
  const std::size_t ia = a.id;
  return a.tape->record("gelu", std::move(Y), {a}, [ia](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    const Tensor& A = t.value(ia);
    accumulate(t, ia, [&](std::span<double> ga) {
      constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = A[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  });
}

Var relu(Var a) {
  const Tensor& A = a.value();
  Tensor Y(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] > 0.0 ? A[i] : 0.0;
  const std::size_t ia = a.id;
  return a.tape->record("relu", std::move(Y), {a}, [ia](Tape& t, std::size_t out) {
    auto g = t.grad_mut(out);
    const Tensor& A = t.value(ia);
    accumulate(t, ia, [&](std::span<double> ga) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A[i] > 0.0) ga[i] += g[i];
    });
  });
}

}  // namespace ops
}  // namespace zachvit
