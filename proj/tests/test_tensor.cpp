#include "imaformer/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "imaformer/rng.hpp"
#include "oracles.hpp"

using namespace imaformer;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m = oracle::make_mat(t.extent(0), t.extent(1));
  for (std::size_t i = 0; i < t.extent(0); ++i)
    for (std::size_t j = 0; j < t.extent(1); ++j) m[i][j] = t.data()[i * t.extent(1) + j];
  return m;
}

}  // namespace

TEST(Matmul, IdentityPassthrough) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(eye, b);
  EXPECT_EQ(c.data(), b.data());
}

TEST(Matmul, OneByOne) {
  Tensor a({1, 1}, {2});
  Tensor b({1, 1}, {3});
  EXPECT_DOUBLE_EQ(matmul(a, b).value(), 6.0);
}

TEST(Matmul, MatchesLoopOracle) {
  Rng rng(7);
  Tensor a = random_tensor({7, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  Tensor c = matmul(a, b);
  oracle::Mat expect = oracle::matmul(to_mat(a), to_mat(b));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c.data()[i * 3 + j], expect[i][j], 1e-12);
}

TEST(Matmul, RandomShapesMatchOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t m = 1 + rng.uniform_int(32);
    std::size_t k = 1 + rng.uniform_int(32);
    std::size_t n = 1 + rng.uniform_int(32);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    oracle::Mat expect = oracle::matmul(to_mat(a), to_mat(b));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(c.data()[i * n + j], expect[i][j], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({7, 5});
  Tensor b = Tensor::zeros({4, 3});
  try {
    matmul(a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[7,5]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, SymmetricPair) {
  Tensor x({2}, {0, 0});
  Tensor y = softmax(x, 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(Softmax, HandEvaluatedPair) {
  Tensor x({2}, {std::log(2.0), 0.0});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.data()[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(3);
  Tensor x = random_tensor({6}, rng);
  std::vector<double> shifted = x.data();
  for (auto& v : shifted) v += 123.456;
  Tensor xs({6}, std::move(shifted));
  Tensor a = softmax(x, 0);
  Tensor b = softmax(xs, 0);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Softmax, SlicesSumToOneOnBothAxes) {
  Rng rng(5);
  Tensor x = random_tensor({4, 7}, rng);
  for (std::size_t axis : {std::size_t{0}, std::size_t{1}}) {
    Tensor y = softmax(x, axis);
    std::size_t outer = y.extent(axis == 0 ? 1 : 0);
    for (std::size_t o = 0; o < outer; ++o) {
      double total = 0.0;
      for (std::size_t j = 0; j < y.extent(axis); ++j)
        total += axis == 0 ? y.data()[j * 7 + o] : y.data()[o * 7 + j];
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
  Tensor x({1, 4}, {5, 5, 5, 5});
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  Tensor y = layer_norm(x, gamma, beta, 1e-6);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
  Tensor x({1, 2}, {1, -1});
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor y = layer_norm(x, gamma, beta, 1e-12);
  EXPECT_NEAR(y.data()[0], 1.0, 1e-9);
  EXPECT_NEAR(y.data()[1], -1.0, 1e-9);
}

TEST(LayerNorm, RowStatistics) {
  Rng rng(17);
  Tensor x = random_tensor({5, 16}, rng);
  Tensor gamma = Tensor::full({16}, 1.0);
  Tensor beta = Tensor::zeros({16});
  Tensor y = layer_norm(x, gamma, beta, 1e-10);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += y.data()[r * 16 + j];
    mean /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) {
      double c = y.data()[r * 16 + j] - mean;
      var += c * c;
    }
    var /= 16.0;
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, MatchesRowOracle) {
  Rng rng(19);
  Tensor x = random_tensor({3, 8}, rng);
  Tensor gamma = random_tensor({8}, rng);
  Tensor beta = random_tensor({8}, rng);
  Tensor y = layer_norm(x, gamma, beta, 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> xr(x.data().begin() + r * 8, x.data().begin() + (r + 1) * 8);
    auto expect = oracle::layer_norm(xr, gamma.data(), beta.data(), 1e-5);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.data()[r * 8 + j], expect[j], 1e-12);
  }
}

TEST(Gelu, PinnedValues) {
  Tensor x({3}, {0.0, 1.0, -10.0});
  Tensor y = gelu(x);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 0.8413447460685429, 1e-12);  // Phi(1) via erf
  EXPECT_LT(std::abs(y.data()[2]), 1e-9);
}

TEST(Cosine, PinnedCases) {
  EXPECT_DOUBLE_EQ(cosine_similarity(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})).value(), 0.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(Tensor({2}, {1, 2}), Tensor({2}, {2, 4})).value(), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(Tensor({2}, {1, 0}), Tensor({2}, {-1, 0})).value(), -1.0);
}

TEST(Cosine, SelfMatchIsExactlyOne) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({9}, rng);
    Tensor b = a.clone();
    EXPECT_EQ(cosine_similarity(a, b).value(), 1.0);
  }
}

TEST(Cosine, ZeroNormIsAnError) {
  Tensor a = Tensor::zeros({3});
  Tensor b({3}, {1, 2, 3});
  EXPECT_THROW(cosine_similarity(a, b), std::invalid_argument);
  EXPECT_THROW(cosine_similarity(b, a), std::invalid_argument);
}

TEST(CrossEntropy, UniformFiveWay) {
  Tensor p = Tensor::full({5}, 0.2);
  EXPECT_NEAR(cross_entropy(p, 2).value(), std::log(5.0), 1e-15);
}

TEST(CrossEntropy, CertainPrediction) {
  Tensor p({3}, {0, 1, 0});
  EXPECT_DOUBLE_EQ(cross_entropy(p, 1).value(), 0.0);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  // oracle: central differences through softmax-then-CE
  Rng rng(29);
  Tensor logits = random_tensor({5}, rng, true);
  auto f = [](Tensor& t) { return cross_entropy(softmax(t, 0), 3); };
  EXPECT_LT(grad_check(f, logits, 1e-5), 1e-5);
}

TEST(CrossEntropy, OutOfRangeIndex) {
  Tensor p = Tensor::full({4}, 0.25);
  EXPECT_THROW(cross_entropy(p, 4), std::out_of_range);
}

TEST(CrossEntropy, ZeroProbabilityClampsAndFlags) {
  Tensor p({2}, {1.0, 0.0});
  std::size_t before = cross_entropy_clamp_count();
  Tensor loss = cross_entropy(p, 1);
  EXPECT_EQ(cross_entropy_clamp_count(), before + 1);
  EXPECT_NEAR(loss.value(), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, RejectsUnnormalizedInput) {
  Tensor p = Tensor::full({4}, 0.3);
  EXPECT_THROW(cross_entropy(p, 0), std::invalid_argument);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(31);
  Tensor x = random_tensor({3, 4}, rng, true);
  Tensor y = sum(x);
  backward(y);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SquareAtThree) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::scalar(1.5, true);
  Tensor y = add(x, x);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Backward, RepeatedCallRejected) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y = mul(x, x);
  backward(y);
  EXPECT_THROW(backward(y), std::logic_error);
}

TEST(Backward, NonScalarRootRejected) {
  Tensor x = Tensor::zeros({3}, true);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(backward(y), std::invalid_argument);
}

TEST(Backward, DeepChainDoesNotOverflow) {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = x;
  for (int i = 0; i < 200000; ++i) y = scale(y, 1.0);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, SquareFunction) {
  Tensor x = Tensor::scalar(3.0);
  auto f = [](Tensor& t) { return mul(t, t); };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-8);
}

TEST(GradCheck, SoftmaxThenPick) {
  Rng rng(37);
  Tensor x = random_tensor({6}, rng);
  auto f = [](Tensor& t) { return cross_entropy(softmax(t, 0), 2); };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-6);
}

// every registered differentiable op passes grad_check at h=1e-4
TEST(GradCheck, AllOps) {
  Rng rng(41);
  const double h = 1e-4;
  const double tol = 1e-4;
  auto check = [&](Shape shape, std::function<Tensor(Tensor&)> f) {
    Tensor x = random_tensor(std::move(shape), rng);
    EXPECT_LT(grad_check(f, x, h), tol);
  };

  Tensor other = random_tensor({4, 3}, rng);
  Tensor a43 = random_tensor({4, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  Tensor gamma = random_tensor({3}, rng);
  Tensor beta = random_tensor({3}, rng);
  Tensor x43 = random_tensor({4, 3}, rng);
  Tensor v7 = random_tensor({7}, rng);

  check({2, 4}, [&](Tensor& t) { return sum(matmul(t, other)); });
  check({4, 3}, [&](Tensor& t) { return sum(matmul(a43, transpose(t))); });
  check({4, 3}, [&](Tensor& t) { return sum(add(t, a43)); });
  check({4, 3}, [&](Tensor& t) { return sum(mul(t, a43)); });
  check({4, 3}, [&](Tensor& t) { return sum(scale(t, -2.5)); });
  check({4, 3}, [&](Tensor& t) { return sum(transpose(t)); });
  check({4, 3}, [&](Tensor& t) { return sum(reshape(t, {12})); });
  check({4, 3}, [&](Tensor& t) { return sum(slice_rows(t, 1, 3)); });
  check({4, 3}, [&](Tensor& t) { return sum(slice_cols(t, 0, 2)); });
  check({2, 3}, [&](Tensor& t) { return sum(concat_rows({t, a43})); });
  check({4, 2}, [&](Tensor& t) { return sum(concat_cols({t, a43})); });
  check({4, 3}, [&](Tensor& t) { return sum(average({t, a43, a43})); });
  check({4, 3}, [&](Tensor& t) { return sum(add_bias(t, bias)); });
  check({3}, [&](Tensor& t) { return sum(add_bias(x43, t)); });
  check({4, 3}, [&](Tensor& t) { return sum(mul(softmax(t, 1), a43)); });
  check({5}, [&](Tensor& t) { return cross_entropy(softmax(t, 0), 1); });
  check({4, 3}, [&](Tensor& t) { return sum(gelu(t)); });
  check({4, 3}, [&](Tensor& t) { return sum(mul(layer_norm(t, gamma, beta, 1e-5), a43)); });
  check({3}, [&](Tensor& t) { return sum(mul(layer_norm(x43, t, beta, 1e-5), a43)); });
  check({3}, [&](Tensor& t) { return sum(layer_norm(x43, gamma, t, 1e-5)); });
  check({7}, [&](Tensor& t) { return cosine_similarity(t, v7); });
  check({7}, [&](Tensor& t) { return cosine_similarity(v7, t); });
  check({7}, [&](Tensor& t) {
    return sum(stack_scalars({sum(t), cosine_similarity(t, v7)}));
  });
}

TEST(Tensor, ShapeDataInvariant) {
  EXPECT_THROW(Tensor({2, 3}, {1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, SetRequiresGradOnOpOutputRejected) {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.set_requires_grad(false), std::logic_error);
}

TEST(Tensor, GradAbsentBeforeBackward) {
  Tensor x = Tensor::scalar(1.0, true);
  EXPECT_FALSE(x.has_grad());
  EXPECT_THROW(x.grad(), std::logic_error);
}
