#include <gtest/gtest.h>

#include "qdrop/finite_diff.hpp"
#include "qdrop/ops.hpp"
#include "test_util.hpp"

using namespace qdrop;
using qdrop::testing::grad_check;
using qdrop::testing::push_off_kinks;
using qdrop::testing::random_tensor;

TEST(Tensor, RejectsZeroDimsAndLengthMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, CopiesAliasClonesDoNot) {
  Tensor<float> a(Shape{2}, 1.0f);
  Tensor<float> b = a;
  Tensor<float> c = a.clone();
  b[0] = 5.0f;
  EXPECT_EQ(a[0], 5.0f);
  EXPECT_EQ(c[0], 1.0f);
}

TEST(Elementwise, Examples) {
  auto r = relu(Tensor<float>::vector({-1, 0, 2}));
  EXPECT_EQ(std::vector<float>(r.data().begin(), r.data().end()), (std::vector<float>{0, 0, 2}));
  auto c = clamp(Tensor<float>::vector({-3, 0.5f, 7}), 0.0f, 3.0f);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{0, 0.5f, 3}));

  TapeScope<double> scope;
  auto x = Tensor<double>::scalar(2.3);
  x.set_requires_grad();
  auto y = round_ste(x);
  EXPECT_EQ(y.item(), 2.0);
  backward(y);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Elementwise, RoundHalfToEven) {
  auto y = round_ste(Tensor<double>::vector({0.5, 1.5, 2.5, -0.5, -1.5}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 2.0);
  EXPECT_EQ(y[2], 2.0);
  EXPECT_EQ(y[3], 0.0);
  EXPECT_EQ(y[4], -2.0);
}

TEST(Elementwise, RoundIdempotent) {
  Rng rng(3);
  auto x = random_tensor({500}, rng, -20, 20);
  auto a = round_ste(x), b = round_ste(a);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Elementwise, BroadcastRules) {
  auto a = Tensor<float>::vector({1, 2, 3});
  auto s = Tensor<float>::scalar(2);
  auto r = a * s;
  EXPECT_EQ(r[2], 6.0f);
  EXPECT_THROW(add(a, Tensor<float>::vector({1, 2})), ShapeError);
}

TEST(Elementwise, DivByZeroPropagatesInfAndFlags) {
  diagnostics().clear();
  auto r = div(Tensor<float>::vector({1, 2}), Tensor<float>::vector({0, 1}));
  EXPECT_TRUE(std::isinf(r[0]));
  EXPECT_EQ(r[1], 2.0f);
  EXPECT_EQ(diagnostics().div_by_zero, 1u);
}

TEST(Matmul, Examples) {
  auto I = Tensor<float>::matrix(2, 2, {1, 0, 0, 1});
  auto A = Tensor<float>::matrix(2, 2, {1, 2, 3, 4});
  auto r = matmul(I, A);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r[i], A[i]);
  auto s = matmul(A, Tensor<float>::matrix(2, 1, {1, 1}));
  EXPECT_EQ(s[0], 3.0f);
  EXPECT_EQ(s[1], 7.0f);
  EXPECT_THROW(matmul(A, Tensor<float>::matrix(3, 1, {1, 1, 1})), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    auto A = random_tensor({5, 4}, rng), B = random_tensor({4, 3}, rng);
    auto C = matmul(A, B);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += A[i * 4 + k] * B[k * 3 + j];
        EXPECT_NEAR(C[i * 3 + j], s, 1e-6);
      }
  }
}

namespace {

Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out(Shape{N, Co, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                const long y = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const long z = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (y < 0 || z < 0 || y >= static_cast<long>(H) || z >= static_cast<long>(W)) continue;
                s += x[((n * Ci + c) * H + y) * W + z] * k[((o * Ci + c) * kh + p) * kw + q];
              }
          out[((n * Co + o) * Ho + i) * Wo + j] = s;
        }
  return out;
}

}  // namespace

TEST(Conv2d, Examples) {
  Rng rng(1);
  auto x = random_tensor({1, 1, 4, 4}, rng);
  auto y = conv2d(x, Tensor<double>(Shape{1, 1, 1, 1}, 2.5));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 2.5 * x[i]);
  auto ones = conv2d(Tensor<double>(Shape{1, 1, 3, 3}, 1.0), Tensor<double>(Shape{1, 1, 3, 3}, 1.0));
  ASSERT_EQ(ones.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(ones[0], 9.0);
  EXPECT_THROW(conv2d(Tensor<double>(Shape{1, 1, 2, 2}), Tensor<double>(Shape{1, 1, 3, 3})), ShapeError);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(2);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    auto x = random_tensor({2, 3, 7, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng);
    auto y = conv2d(x, k, {}, stride, pad);
    auto ref = conv_oracle(x, k, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
  }
}

TEST(Backward, Examples) {
  {
    TapeScope<double> scope;
    auto w = Tensor<double>::vector({1, 2, 3});
    w.set_requires_grad();
    backward(sum(w));
    for (double g : w.grad()) EXPECT_EQ(g, 1.0);
  }
  {
    TapeScope<double> scope;
    auto w = Tensor<double>::vector({1, -2});
    w.set_requires_grad();
    backward(scale(sum(square(w)), 0.5));
    EXPECT_EQ(w.grad()[0], 1.0);
    EXPECT_EQ(w.grad()[1], -2.0);
  }
}

TEST(Backward, Errors) {
  TapeScope<double> scope;
  auto w = Tensor<double>::vector({1, 2});
  w.set_requires_grad();
  auto v = scale(w, 2.0);
  EXPECT_THROW(backward(v), RankError);
  auto l = sum(v);
  backward(l);
  EXPECT_THROW(backward(l), StaleTapeError);
  scope.tape().reset();
  w.zero_grad();
  auto l2 = sum(scale(w, 3.0));
  backward(l2);
  EXPECT_EQ(w.grad()[0], 3.0);
}

TEST(Backward, AccumulatesOverMultipleUses) {
  TapeScope<double> scope;
  auto w = Tensor<double>::vector({1.5, -0.5});
  w.set_requires_grad();
  // d/dw [sum(w*w) + sum(3w)] = 2w + 3
  auto loss = add(sum(mul(w, w)), sum(scale(w, 3.0)));
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
}

TEST(Backward, NoGradScopeSkipsRecording) {
  TapeScope<double> scope;
  auto w = Tensor<double>::vector({1, 2});
  w.set_requires_grad();
  {
    NoGradScope<double> off;
    auto y = scale(w, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(scope.tape().size(), 0u);
}

TEST(FiniteDiff, Examples) {
  auto g = finite_diff_gradient([](const Tensor<double>& x) { return x[0] * x[0]; }, Tensor<double>::scalar(3.0), 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-7);
  auto h = finite_diff_gradient([](const Tensor<double>& x) { return sum(relu(x)).item(); },
                                Tensor<double>::vector({2, -2}), 1e-4);
  EXPECT_NEAR(h[0], 1.0, 1e-9);
  EXPECT_NEAR(h[1], 0.0, 1e-9);
  EXPECT_THROW(finite_diff_gradient([](const Tensor<double>&) { return 0.0; }, Tensor<double>::scalar(1), 0.0),
               ConfigError);
}

// Each differentiable op against central differences, 20 seeds, 64-bit.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 100);
  const double tol = 1e-4;
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng, 0.5, 1.5);
  auto wsum = random_tensor({3, 4}, rng);  // random projection so the loss is not symmetric
  auto proj = [&](const Tensor<double>& t) { return sum(mul(t, wsum)); };

  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(add(x, b)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(sub(b, x)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(mul(x, b)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(div(x, b)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(div(b, x)); }, b), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(sigmoid(x)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(square(x)); }, a), tol);
  auto ak = a.clone();
  push_off_kinks(ak, {0.0});
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(relu(x)); }, ak), tol);
  auto ac = a.clone();
  push_off_kinks(ac, {-0.5, 0.5});
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(clamp(x, -0.5, 0.5)); }, ac), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return mean(mul(x, x)); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(reshape(flatten(x), {3, 4})); }, a), tol);

  auto B = random_tensor({4, 2}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(matmul(x, B))); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(matmul(a, x))); }, B), tol);

  auto W = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(linear(x, W, bias))); }, a), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(linear(a, x, bias))); }, W), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(linear(a, W, x))); }, bias), tol);

  auto img = random_tensor({2, 2, 5, 5}, rng), ker = random_tensor({3, 2, 3, 3}, rng), kb = random_tensor({3}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(conv2d(x, ker, kb, 2, 1))); }, img), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(conv2d(img, x, kb, 1, 1))); }, ker), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(conv2d(img, ker, x, 1, 0))); }, kb), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(square(global_avgpool(x))); }, img), tol);

  auto mu = random_tensor({2}, rng), var = random_tensor({2}, rng, 0.5, 2.0);
  auto gam = random_tensor({2}, rng), bet = random_tensor({2}, rng);
  auto wimg = random_tensor({2, 2, 5, 5}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(mul(batchnorm2d(x, mu, var, gam, bet, 1e-5), wimg)); }, img), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(mul(batchnorm2d(img, mu, var, x, bet, 1e-5), wimg)); }, gam), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(mul(batchnorm2d_train(x, gam, bet, 1e-5).out, wimg)); }, img), tol);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return sum(mul(batchnorm2d_train(img, x, bet, 1e-5).out, wimg)); }, gam), tol);

  auto target = random_tensor({3, 4}, rng);
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return mse_loss(x, target); }, a), tol);
  const std::vector<int> labels{0, 3, 1};
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return cross_entropy(x, labels); }, a), tol);

  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1};
  EXPECT_LT(grad_check([&](const Tensor<double>& x) { return proj(select(mask, x, square(x))); }, a), tol);
}

TEST_P(OpGradient, ThreeLayerCnnMatchesFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 500);
  // Resample until no pre-activation sits within 1e-3 of a ReLU kink.
  for (int attempt = 0;; ++attempt) {
    ASSERT_LT(attempt, 100);
    auto x = random_tensor({2, 2, 6, 6}, rng);
    auto k1 = random_tensor({3, 2, 3, 3}, rng), k2 = random_tensor({3, 3, 3, 3}, rng);
    auto W = random_tensor({4, 3}, rng);
    auto z1 = conv2d(x, k1, {}, 1, 1);
    auto z2 = conv2d(relu(z1), k2, {}, 2, 1);
    auto near = [](const Tensor<double>& z) {
      return std::any_of(z.data().begin(), z.data().end(), [](double v) { return std::abs(v) < 1e-3; });
    };
    if (near(z1) || near(z2)) continue;
    auto net = [&](const Tensor<double>& k) {
      auto h = relu(conv2d(x, k, {}, 1, 1));
      auto h2 = relu(conv2d(h, k2, {}, 2, 1));
      return sum(square(linear(flatten(global_avgpool(h2)), W)));
    };
    EXPECT_LT(grad_check(net, k1), 1e-4);
    break;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));
