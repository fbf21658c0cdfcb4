#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "dccl/random.hpp"
#include "dccl/tensor.hpp"
#include "gradcheck.hpp"

using namespace dccl;
using dccl::testing::max_relative_error;
using dccl::testing::numeric_gradient;

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
}

TEST(Primitives, MatmulByHand) {
  Tape t;
  auto y = matmul(t.constant(Tensor::matrix({{1, 2}, {3, 4}})), t.constant(Tensor::matrix({{1}, {1}})));
  EXPECT_EQ(y.value(), Tensor::matrix({{3}, {7}}));
}

TEST(Primitives, NormalizeThreeFourFive) {
  Tape t;
  auto y = l2_normalize(t.constant(Tensor::vector({3, 4})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.6);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.8);
}

TEST(Primitives, SoftplusAtZero) {
  Tape t;
  auto y = softplus(t.constant(Tensor::scalar(0.0)));
  EXPECT_NEAR(y.value().item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(y.value().item(), 0.693147, 1e-6);
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  Tape t;
  auto a = t.constant(Tensor::zeros({2, 3}));
  auto b = t.constant(Tensor::zeros({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
  try {
    add(t.constant(Tensor::zeros({2, 3})), t.constant(Tensor::zeros({2, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Primitives, DegenerateInputsRejected) {
  Tape t;
  EXPECT_THROW(l2_normalize(t.constant(Tensor::vector({0.0, 0.0}))), DegenerateInput);
  EXPECT_THROW(l2_normalize(t.constant(Tensor::vector({1e-13, 0.0}))), DegenerateInput);
  EXPECT_THROW(log(t.constant(Tensor::vector({1.0, 0.0}))), DegenerateInput);
  EXPECT_THROW(log(t.constant(Tensor::vector({-1.0}))), DegenerateInput);
}

TEST(Primitives, BroadcastingAddsRowVector) {
  Tape t;
  auto x = t.variable(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  auto b = t.variable(Tensor::matrix({{10, 20}}));
  auto y = x + b;
  EXPECT_EQ(y.value(), Tensor::matrix({{11, 22}, {13, 24}, {15, 26}}));
  auto g = t.backward(sum(y));
  EXPECT_EQ(g.at(b), Tensor::matrix({{3, 3}}));
  EXPECT_EQ(g.at(x), Tensor::full({3, 2}, 1.0));
}

TEST(Primitives, MaskedLogSumExpIsStable) {
  Tape t;
  auto x = t.constant(Tensor::matrix({{1000.0, 1000.0, -5.0}}));
  auto y = masked_log_sum_exp(x, {1, 1, 0});
  EXPECT_NEAR(y.value()[0], 1000.0 + std::log(2.0), 1e-9);
  EXPECT_THROW(masked_log_sum_exp(x, {0, 0, 0}), Error);
}

TEST(Backward, QuadraticDerivative) {
  Tape t;
  auto x = t.variable(Tensor::vector({1, 2, 3}));
  auto g = t.backward(sum(x * x));
  EXPECT_EQ(g.at(x), Tensor::vector({2, 4, 6}));
}

TEST(Backward, NonScalarRootRejected) {
  Tape t;
  auto x = t.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(x * x), ShapeError);
}

TEST(Backward, DetachedNodeHasNoEntry) {
  Tape t;
  auto x = t.variable(Tensor::vector({1, 2}));
  auto c = t.constant(Tensor::vector({3, 4}));
  auto g = t.backward(sum(x * c));
  EXPECT_EQ(g.find(c), nullptr);
  ASSERT_NE(g.find(x), nullptr);
  EXPECT_EQ(*g.find(x), Tensor::vector({3, 4}));
}

TEST(Backward, NormalizeThenDotMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x0 = rng.normal({8});
    Tensor w = rng.normal({8});
    auto f = [&](const Tensor& x) {
      Tape t;
      return sum(l2_normalize(t.constant(x)) * t.constant(w)).value().item();
    };
    Tape t;
    auto x = t.variable(x0);
    auto g = t.backward(sum(l2_normalize(x) * t.constant(w)));
    EXPECT_LE(max_relative_error(g.at(x), numeric_gradient(f, x0)), 1e-5);
  }
}

TEST(Backward, RepeatedPassesAreBitIdentical) {
  Rng rng(3);
  Tape t;
  auto a = t.variable(rng.normal({4, 5}));
  auto b = t.variable(rng.normal({5, 3}));
  auto root = sum(softplus(matmul(l2_normalize(a), b)));
  auto g1 = t.backward(root);
  auto g2 = t.backward(root);
  EXPECT_EQ(g1.at(a), g2.at(a));
  EXPECT_EQ(g1.at(b), g2.at(b));
}

namespace {

using UnaryBuilder = std::function<Var(const Var&)>;

struct PrimitiveCase {
  std::string name;
  Shape shape;
  UnaryBuilder build;  // must end in a scalar
  bool positive_input = false;
};

std::vector<PrimitiveCase> primitive_cases(Rng& rng) {
  Tensor w23 = rng.normal({2, 3});
  Tensor w34 = rng.normal({3, 4});
  Tensor row = rng.normal({1, 3});
  Tensor weights = rng.normal({2, 3});
  auto weighted = [weights](const Var& y) {
    if (y.value().numel() == weights.numel() && y.value().shape() == weights.shape()) {
      return sum(y * y.tape().constant(weights));
    }
    return sum(y * y);
  };
  return {
      {"add", {2, 3}, [=](const Var& x) { return weighted(x + x.tape().constant(w23)); }},
      {"sub", {2, 3}, [=](const Var& x) { return weighted(x.tape().constant(w23) - x); }},
      {"mul", {2, 3}, [=](const Var& x) { return weighted(x * x.tape().constant(w23)); }},
      {"div", {2, 3}, [=](const Var& x) { return weighted(x.tape().constant(w23) / x); }, true},
      {"broadcast_add", {2, 3}, [=](const Var& x) { return weighted(x + x.tape().constant(row)); }},
      {"broadcast_grad", {1, 3}, [=](const Var& x) { return weighted(x.tape().constant(w23) * x); }},
      {"matmul_left", {2, 3}, [=](const Var& x) { return sum(square(matmul(x, x.tape().constant(w34)))); }},
      {"matmul_right", {3, 4}, [=](const Var& x) { return sum(square(matmul(x.tape().constant(w23), x))); }},
      {"transpose", {2, 3}, [=](const Var& x) { return sum(square(matmul(transpose(x), x.tape().constant(w23)))); }},
      {"exp", {2, 3}, [=](const Var& x) { return weighted(exp(x)); }},
      {"log", {2, 3}, [=](const Var& x) { return weighted(log(x)); }, true},
      {"sqrt", {2, 3}, [=](const Var& x) { return weighted(sqrt(x)); }, true},
      {"softplus", {2, 3}, [=](const Var& x) { return weighted(softplus(x)); }},
      {"relu", {2, 3}, [=](const Var& x) { return weighted(relu(x)); }},
      {"square", {2, 3}, [=](const Var& x) { return weighted(square(x)); }},
      {"sum", {2, 3}, [=](const Var& x) { return square(sum(x)); }},
      {"mean", {2, 3}, [=](const Var& x) { return square(mean(x)); }},
      {"sum_axis0", {2, 3}, [=](const Var& x) { return sum(square(sum_axis(x, 0)) * x.tape().constant(row)); }},
      {"sum_axis1", {2, 3}, [=](const Var& x) { return sum(square(sum_axis(x, 1))); }},
      {"l2_normalize", {2, 3}, [=](const Var& x) { return weighted(l2_normalize(x)); }},
      {"log_sum_exp", {2, 3}, [=](const Var& x) { return sum(square(log_sum_exp(x * 3.0))); }},
      {"masked_lse", {2, 3}, [=](const Var& x) { return sum(square(masked_log_sum_exp(x, {1, 0, 1, 1, 1, 0}))); }},
      {"slice_rows", {3, 3}, [=](const Var& x) { return sum(square(slice_rows(x, 1, 2)) * x.tape().constant(w23)); }},
      {"concat_rows", {1, 3}, [=](const Var& x) { return weighted(concat_rows(x, x * 2.0)); }},
      {"concat_cols", {2, 1}, [=](const Var& x) { return sum(square(concat_cols(x, x.tape().constant(w23)))); }},
      {"row_dot", {2, 3}, [=](const Var& x) { return sum(square(row_dot(x, x.tape().constant(w23)))); }},
  };
}

}  // namespace

// Every primitive's rule against central differences (step 1e-5) on 100 random inputs.
TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  Rng rng(2024);
  auto cases = primitive_cases(rng);
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x0 = rng.normal(c.shape);
      if (c.positive_input) {
        for (auto& v : x0.data()) v = 0.5 + std::abs(v);
      } else if (c.name == "relu") {
        for (auto& v : x0.data())  // keep away from the kink
          if (std::abs(v) < 1e-3) v = 0.1;
      }
      auto f = [&](const Tensor& x) {
        Tape t;
        return c.build(t.constant(x)).value().item();
      };
      Tape t;
      auto x = t.variable(x0);
      auto g = t.backward(c.build(x));
      worst = std::max(worst, max_relative_error(g.at(x), numeric_gradient(f, x0)));
    }
    EXPECT_LE(worst, 1e-4) << c.name;
  }
}

// Randomly composed chains of primitives against finite differences.
TEST(Backward, RandomCompositionsMatchFiniteDifferences) {
  Rng rng(99);
  std::vector<std::function<Var(const Var&)>> steps = {
      [](const Var& v) { return softplus(v); },
      [](const Var& v) { return l2_normalize(v); },
      [](const Var& v) { return v * v; },
      [](const Var& v) { return exp(scale(v, 0.3)); },
      [](const Var& v) { return v - mean_axis(v, 0); },
      [](const Var& v) { return v + sum_axis(v, 1); },
      [](const Var& v) { return log(add_scalar(square(v), 1.0)); },
  };
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> chain;
    for (int k = 0; k < 4; ++k) chain.push_back(rng.index(steps.size()));
    Tensor w = rng.normal({3, 3});
    Tensor readout = rng.normal({3, 3});
    auto build = [&](const Var& x) {
      Var v = matmul(x, x.tape().constant(w));
      for (auto s : chain) v = steps[s](v);
      return sum(v * x.tape().constant(readout));
    };
    Tensor x0 = rng.normal({3, 3});
    auto f = [&](const Tensor& x) {
      Tape t;
      return build(t.constant(x)).value().item();
    };
    Tape t;
    auto x = t.variable(x0);
    auto g = t.backward(build(x));
    EXPECT_LE(max_relative_error(g.at(x), numeric_gradient(f, x0)), 1e-4) << "trial " << trial;
  }
}
