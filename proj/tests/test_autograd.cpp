#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>

#include "oracles.hpp"
#include "zachvit/autograd.hpp"
#include "zachvit/errors.hpp"

using namespace zachvit;

namespace {

std::vector<double> eval(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value().values();
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  Var i2 = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var a = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(ops::matmul(i2, a).value().values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, DotProductByHand) {
  Tape t;
  Var a = t.constant(Tensor::matrix({{1, 2}}));
  Var b = t.constant(Tensor::matrix({{3}, {4}}));
  Var c = ops::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.value()[0], 11.0);
}

TEST(Matmul, InnerExtentMismatchIsDimensionError) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  EXPECT_THROW(ops::matmul(a, b), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor a = oracle::random_tensor({3, 4}, rng);
    Tensor b = oracle::random_tensor({4, 2}, rng);
    a.requires_grad = b.requires_grad = true;
    auto rep_err = oracle::fd_check({&a, &b}, [&](Tape& t) {
      Var va = t.leaf(a), vb = t.leaf(b);
      return std::pair{ops::sum(ops::matmul(va, vb)), std::vector<Var>{va, vb}};
    });
    EXPECT_LT(rep_err.max_rel, 1e-6);
  }
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    Var a = t.constant(oracle::random_tensor({3, 4}, rng));
    Var b = t.constant(oracle::random_tensor({4, 5}, rng));
    Var c = t.constant(oracle::random_tensor({5, 2}, rng));
    const auto& l = ops::matmul(ops::matmul(a, b), c).value().values();
    const auto& r = ops::matmul(a, ops::matmul(b, c)).value().values();
    for (std::size_t i = 0; i < l.size(); ++i)
      EXPECT_LE(std::abs(l[i] - r[i]), 1e-10 * std::max(1.0, std::abs(l[i])));
  }
}

TEST(Softmax, SymmetricInputGivesHalves) {
  auto y = eval([](Tape& t) { return ops::softmax(t.constant(Tensor::vector({0, 0})), 0); });
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  auto a = eval([](Tape& t) { return ops::softmax(t.constant(Tensor::vector({0.3, 1.1})), 0); });
  auto b = eval([](Tape& t) { return ops::softmax(t.constant(Tensor::vector({100.3, 101.1})), 0); });
  EXPECT_NEAR(a[0], b[0], 1e-12);
  EXPECT_NEAR(a[1], b[1], 1e-12);
}

TEST(Softmax, ClosedFormLogThree) {
  auto y = eval([](Tape& t) { return ops::softmax(t.constant(Tensor::vector({0, std::log(3.0)})), 0); });
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndStayInUnitInterval) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = oracle::random_tensor({5, 6}, rng, -30.0, 30.0);
    auto y = eval([&](Tape& t) { return ops::softmax(t.constant(x), 1); });
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_GE(y[r * 6 + c], 0.0);
        EXPECT_LE(y[r * 6 + c], 1.0);
        s += y[r * 6 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, InvalidAxisThrows) {
  Tape t;
  EXPECT_THROW(ops::softmax(t.constant(Tensor({2, 2})), 2), DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto y = eval([](Tape& t) {
    return ops::layer_norm(t.constant(Tensor::matrix({{3, 3, 3}})), t.constant(Tensor({3}, 1.0)),
                           t.constant(Tensor({3}, 0.0)));
  });
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsUnchanged) {
  auto y = eval([](Tape& t) {
    return ops::layer_norm(t.constant(Tensor::matrix({{1, -1}})), t.constant(Tensor({2}, 1.0)),
                           t.constant(Tensor({2}, 0.0)), 1e-14);
  });
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], -1.0, 1e-12);
}

TEST(LayerNorm, NonPositiveEpsIsRejected) {
  Tape t;
  Var x = t.constant(Tensor({1, 2}));
  Var g = t.constant(Tensor({2}, 1.0));
  EXPECT_THROW(ops::layer_norm(x, g, g, 0.0), UsageError);
}

TEST(Elementwise, GeluAndReluAtZero) {
  EXPECT_EQ(eval([](Tape& t) { return ops::gelu(t.constant(Tensor::scalar(0.0))); })[0], 0.0);
  EXPECT_EQ(eval([](Tape& t) { return ops::relu(t.constant(Tensor::scalar(-2.0))); })[0], 0.0);
  // gelu(1) = 0.5 * (1 + erf(1/sqrt 2))
  EXPECT_NEAR(eval([](Tape& t) { return ops::gelu(t.constant(Tensor::scalar(1.0))); })[0],
              0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Structural, MeanRowsOfOneRowIsThatRow) {
  auto y = eval([](Tape& t) { return ops::mean_rows(t.constant(Tensor::matrix({{1, 2, 3}}))); });
  EXPECT_EQ(y, (std::vector<double>{1, 2, 3}));
}

TEST(Structural, MaxRowsAndShapes) {
  Tape t;
  Var x = t.constant(Tensor::matrix({{1, 3}, {3, 1}}));
  EXPECT_EQ(ops::max_rows(x).value().values(), (std::vector<double>{3, 3}));
  EXPECT_EQ(ops::mean_rows(x).value().values(), (std::vector<double>{2, 2}));
  EXPECT_EQ(ops::transpose(t.constant(Tensor::matrix({{1, 2, 3}}))).shape(), (Shape{3, 1}));
  EXPECT_THROW(ops::add(x, t.constant(Tensor({2, 3}))), DimensionError);
  EXPECT_THROW(ops::slice_rows(x, 1, 2), DimensionError);
  const std::size_t bad[] = {0, 0};
  EXPECT_THROW(ops::permute_rows(x, bad), DimensionError);
}

TEST(Structural, PermuteRowsSelectsSourceRows) {
  Tape t;
  Var x = t.constant(Tensor::matrix({{1, 1}, {2, 2}, {3, 3}}));
  const std::size_t perm[] = {2, 0, 1};
  EXPECT_EQ(ops::permute_rows(x, perm).value().values(), (std::vector<double>{3, 3, 1, 1, 2, 2}));
}

// Every op's vector-Jacobian product against central differences on random
// 3x4 inputs. The output is contracted with fixed random weights so that
// ops whose plain sum is constant (softmax, layer_norm) are still tested.
struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(const std::vector<Var>&)> op;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto& cs = GetParam();
  Rng rng(1000 + cs.name.size());
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Tensor> in;
    for (const auto& s : cs.shapes) {
      in.push_back(oracle::random_tensor(s, rng));
      in.back().requires_grad = true;
    }
    std::vector<Tensor*> ptrs;
    for (auto& t : in) ptrs.push_back(&t);
    std::optional<Tensor> weights;
    auto rep_err = oracle::fd_check(ptrs, [&](Tape& t) {
      std::vector<Var> v;
      for (auto& x : in) v.push_back(t.leaf(x));
      Var out = cs.op(v);
      if (!weights) weights = oracle::random_tensor(out.shape(), rng);
      return std::pair{ops::sum(ops::mul(out, t.constant(*weights))), v};
    });
    EXPECT_LT(rep_err.max_rel, 1e-5) << cs.name << " instance " << rep;
  }
}

const std::size_t kPerm[] = {2, 0, 1};

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"matmul", {{3, 4}, {4, 3}}, [](auto& v) { return ops::matmul(v[0], v[1]); }},
        OpCase{"add", {{3, 4}, {3, 4}}, [](auto& v) { return ops::add(v[0], v[1]); }},
        OpCase{"add_bias", {{3, 4}, {4}}, [](auto& v) { return ops::add_bias(v[0], v[1]); }},
        OpCase{"mul", {{3, 4}, {3, 4}}, [](auto& v) { return ops::mul(v[0], v[1]); }},
        OpCase{"scale", {{3, 4}}, [](auto& v) { return ops::scale(v[0], 0.37); }},
        OpCase{"transpose", {{3, 4}}, [](auto& v) { return ops::transpose(v[0]); }},
        OpCase{"reshape", {{3, 4}}, [](auto& v) { return ops::reshape(v[0], {4, 3}); }},
        OpCase{"concat_rows", {{3, 4}, {1, 4}}, [](auto& v) { return ops::concat_rows(std::span<const Var>(v)); }},
        OpCase{"concat_cols", {{3, 4}, {3, 1}}, [](auto& v) { return ops::concat_cols(std::span<const Var>(v)); }},
        OpCase{"slice_rows", {{3, 4}}, [](auto& v) { return ops::slice_rows(v[0], 1, 2); }},
        OpCase{"slice_cols", {{3, 4}}, [](auto& v) { return ops::slice_cols(v[0], 2, 2); }},
        OpCase{"permute_rows", {{3, 4}}, [](auto& v) { return ops::permute_rows(v[0], kPerm); }},
        OpCase{"mean_rows", {{3, 4}}, [](auto& v) { return ops::mean_rows(v[0]); }},
        OpCase{"max_rows", {{3, 4}}, [](auto& v) { return ops::max_rows(v[0]); }},
        OpCase{"sum", {{3, 4}}, [](auto& v) { return ops::sum(v[0]); }},
        OpCase{"softmax_axis0", {{3, 4}}, [](auto& v) { return ops::softmax(v[0], 0); }},
        OpCase{"softmax_axis1", {{3, 4}}, [](auto& v) { return ops::softmax(v[0], 1); }},
        OpCase{"softmax_vector", {{4}}, [](auto& v) { return ops::softmax(v[0], 0); }},
        OpCase{"layer_norm", {{3, 4}, {4}, {4}}, [](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }},
        OpCase{"gelu", {{3, 4}}, [](auto& v) { return ops::gelu(v[0]); }},
        OpCase{"relu", {{3, 4}}, [](auto& v) { return ops::relu(v[0]); }}),
    [](const auto& info) { return info.param.name; });

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3}, 0.5);
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  t.backward(ops::sum(v));
  for (double g : t.grad(v)) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tensor x = Tensor::matrix({{1, -2}, {3, 0.5}});
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  t.backward(ops::sum(ops::mul(v, v)));
  auto g = t.grad(v);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], 2 * x[i]);
}

TEST(Backward, FanOutAccumulatesBothPaths) {
  // loss = sum(3x + x*x): d/dx = 3 + 2x
  Tensor x = Tensor::vector({1, 2, -4});
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  t.backward(ops::sum(ops::add(ops::scale(v, 3.0), ops::mul(v, v))));
  auto g = t.grad(v);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g[i], 3.0 + 2.0 * x[i]);
}

TEST(Backward, WatchedTensorsAccumulateAcrossTapes) {
  Tensor x = Tensor::vector({1, 2});
  x.requires_grad = true;
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(ops::sum(t.watch(x)));
  }
  ASSERT_TRUE(x.grad.has_value());
  EXPECT_EQ(*x.grad, (std::vector<double>{2, 2}));
}

TEST(Backward, NonScalarLossIsUsageError) {
  Tensor x({2, 2}, 1.0);
  x.requires_grad = true;
  Tape t;
  EXPECT_THROW(t.backward(t.leaf(x)), UsageError);
}

TEST(Backward, ReusedTapeIsUsageError) {
  Tensor x({2}, 1.0);
  x.requires_grad = true;
  Tape t;
  Var loss = ops::sum(t.leaf(x));
  t.backward(loss);
  EXPECT_TRUE(t.consumed());
  EXPECT_THROW(t.backward(loss), UsageError);
  EXPECT_THROW(ops::sum(t.leaf(x)), UsageError);
}

TEST(Backward, LossFromAnotherTapeIsUsageError) {
  Tensor x({2}, 1.0);
  Tape a, b;
  Var loss = ops::sum(a.leaf(x));
  EXPECT_THROW(b.backward(loss), UsageError);
  EXPECT_THROW(ops::add(a.leaf(x), b.leaf(x)), UsageError);
}

TEST(Backward, NonDifferentiableLeavesGetNoGradient) {
  Tensor x({2}, 1.0), w({2}, 2.0);
  x.requires_grad = true;
  Tape t;
  Var vx = t.leaf(x), vw = t.leaf(w);
  t.backward(ops::sum(ops::mul(vx, vw)));
  EXPECT_TRUE(t.grad(vw).empty());
  EXPECT_EQ(t.grad(vx)[0], 2.0);
}

TEST(Numerics, NonFiniteResultIsReported) {
  Tape t;
  Var big = t.constant(Tensor::vector({1e308, 1e308}));
  EXPECT_THROW(ops::add(big, big), NumericError);
  EXPECT_THROW(ops::scale(big, std::numeric_limits<double>::infinity()), NumericError);
}
