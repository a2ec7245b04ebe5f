#include <gtest/gtest.h>

#include "gradient_cases.hpp"

using namespace sbnn;

TEST(Autograd, EveryOpMatchesFiniteDifferences) {
  std::size_t checked = 0;
  for (std::uint64_t draw = 0; draw < 3; ++draw) {
    std::mt19937_64 rng(1000 + draw);
    for (auto& c : oracle::gradient_cases(rng)) {
      const double err = oracle::gradcheck(c.fn, c.inputs);
      EXPECT_LT(err, 1e-4) << c.name << " draw " << draw;
      ++checked;
    }
  }
  EXPECT_GE(checked, 50u);
}

TEST(Autograd, BackwardIsDeterministic) {
  std::mt19937_64 rng(5);
  const TensorD x0 = oracle::randn({3, 2, 5, 5}, rng), w0 = oracle::randn({4, 2, 3, 3}, rng);
  auto run = [&] {
    TensorD x = x0.clone(), w = w0.clone();
    sum(mul(conv2d(x, w, 1, 1), conv2d(x, w, 1, 1))).backward();
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Autograd, UnreachedLeafGetsZeroGrad) {
  Tensor a = Tensor::from({1, 2}), b = Tensor::from({3, 4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tensor c = Tensor::from({5, 6});
  c.set_requires_grad(true);
  // c feeds a branch that is multiplied by zero.
  sum(add(mul(a, b), scale(c, 0.0f))).backward();
  ASSERT_TRUE(c.has_grad());
  EXPECT_EQ(c.grad()[0], 0.0f);
  EXPECT_EQ(a.grad()[1], 4.0f);
}

TEST(Autograd, SharedSubexpressionVisitedOnce) {
  Tensor x = Tensor::from({3});
  x.set_requires_grad(true);
  Tensor y = mul(x, x);
  sum(add(y, y)).backward();  // d(2x²)/dx = 4x
  EXPECT_FLOAT_EQ(x.grad()[0], 12.0f);
}

TEST(Autograd, LeafGradientsAccumulate) {
  Tensor x = Tensor::from({2});
  x.set_requires_grad(true);
  sum(scale(x, 3.0f)).backward();
  sum(scale(x, 3.0f)).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
  x.zero_grad();
  EXPECT_FLOAT_EQ(x.grad()[0], 0.0f);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({1, 2});
  x.set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  EXPECT_THROW(Tensor::zeros({2}).item(), DimensionError);
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor x = Tensor::zeros({2}, true);
  EXPECT_THROW(scale(x, 2.0f).backward(), DimensionError);
}

TEST(Tensor, GradHasDataShape) {
  std::mt19937_64 rng(2);
  TensorD x = oracle::randn({2, 3, 4}, rng);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Matmul, HandValues) {
  const Tensor i2 = Tensor::from({1, 0, 0, 1}, {2, 2});
  const Tensor b = Tensor::from({2, 3, 4, 5}, {2, 2});
  const Tensor c = matmul(i2, b);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{2, 3, 4, 5}));
  EXPECT_EQ(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({3, 4}, {2, 1})).item(), 11.0f);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientWrtA) {
  std::mt19937_64 rng(3);
  const double err = oracle::gradcheck([](auto& v) { return sum(matmul(v[0], v[1])); },
                                       {oracle::randn({3, 4}, rng), oracle::randn({4, 2}, rng, 1.0, false)});
  EXPECT_LT(err, 1e-4);
}

TEST(Conv2d, OnesGiveNine) {
  const Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f), w = Tensor::full({1, 1, 3, 3}, 1.0f);
  const Tensor y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(4);
  const TensorD x = oracle::randn({2, 1, 5, 6}, rng, 1.0, false);
  TensorD w = TensorD::zeros({1, 1, 3, 3});
  w[4] = 1.0;
  const TensorD y = conv2d(x, w, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, MatchesDirectLoopsExactlyInF64) {
  std::mt19937_64 rng(6);
  // Small-integer values keep every partial sum exact, so the match must be bit-exact.
  std::uniform_int_distribution<int> d(-4, 4);
  TensorD x = TensorD::zeros({2, 3, 8, 8}), w = TensorD::zeros({5, 3, 3, 3});
  for (auto& v : x.data()) v = d(rng);
  for (auto& v : w.data()) v = d(rng);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      const TensorD y = conv2d(x, w, stride, pad);
      const auto ref = oracle::conv_ref(x, w, stride, pad);
      ASSERT_EQ(y.numel(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(y[i], ref[i]) << "stride " << stride << " pad " << pad;
    }
}

TEST(Conv2d, RandomRealValuesMatchDirectLoops) {
  std::mt19937_64 rng(7);
  const TensorD x = oracle::randn({2, 3, 8, 8}, rng, 1.0, false), w = oracle::randn({4, 3, 3, 3}, rng, 1.0, false);
  const TensorD y = conv2d(x, w, 1, 1, -1.0);
  const auto ref = oracle::conv_ref(x, w, 1, 1, -1.0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Conv2d, OutputExtentAndErrors) {
  const Tensor y = conv2d(Tensor::zeros({1, 2, 7, 9}), Tensor::zeros({3, 2, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 5}));
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), DimensionError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 1, 0), DimensionError);
}

TEST(Softmax, SymmetricAndStable) {
  const Tensor s = softmax(Tensor::from({0, 0}, {1, 2}));
  EXPECT_EQ(s[0], 0.5f);
  EXPECT_EQ(s[1], 0.5f);
  const TensorD big = softmax(TensorD::from({1000.0, 0.0}, {1, 2}));
  EXPECT_EQ(big[0], 1.0);
  EXPECT_LT(big[1], 1e-30);
  EXPECT_TRUE(std::isfinite(big[1]));
}

TEST(Softmax, RowsSumToOneAndLogMatches) {
  std::mt19937_64 rng(8);
  const TensorD xd = oracle::uniform({16, 10}, rng, -50, 50, false);
  const Tensor s = softmax(cast<float>(xd));
  const TensorD sd = softmax(xd), lsd = log_softmax(xd);
  for (std::size_t r = 0; r < 16; ++r) {
    double t = 0;
    for (std::size_t c = 0; c < 10; ++c) {
      t += s[r * 10 + c];
      EXPECT_NEAR(lsd[r * 10 + c], std::log(sd[r * 10 + c]), 1e-6);
    }
    EXPECT_NEAR(t, 1.0, 1e-6);
  }
}

TEST(Softmax, NonFiniteInputRejected) {
  EXPECT_THROW(softmax(Tensor::from({1.0f, std::nanf("")}, {1, 2})), NumericError);
  EXPECT_THROW(log_softmax(Tensor::from({1.0f, INFINITY}, {1, 2})), NumericError);
}

TEST(CustomGrad, StraightThroughMask) {
  auto ste = [](float v) {
    Tensor x = Tensor::from({v});
    x.set_requires_grad(true);
    sum(custom_grad(x, [](float a) { return a < 0 ? -1.0f : 1.0f; },
                    [](float a) { return std::abs(a) < 1 ? 1.0f : 0.0f; }))
        .backward();
    return x.grad()[0];
  };
  EXPECT_EQ(ste(0.5f), 1.0f);
  EXPECT_EQ(ste(2.0f), 0.0f);
}

TEST(CustomGrad, IdentityIsNoOp) {
  std::mt19937_64 rng(9);
  TensorD x = oracle::randn({3, 4}, rng);
  const TensorD p = oracle::randn({3, 4}, rng, 1.0, false);
  const TensorD y = custom_grad(x, [](double a) { return a; }, [](double) { return 1.0; });
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  sum(mul(y, p)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], p[i]);
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  Tensor x = Tensor::from({1, 3, 5, 7}, {4, 1});
  Tensor g = Tensor::full({1}, 1.0f), b = Tensor::zeros({1});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
  batch_norm(x, g, b, rm, rv);
  EXPECT_NEAR(rm[0], 0.1 * 4.0, 1e-6);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * (20.0 / 3.0), 1e-5);  // unbiased variance
  BatchNormOptions off;
  off.track_running_stats = false;
  batch_norm(x, g, b, rm, rv, off);
  EXPECT_NEAR(rm[0], 0.4, 1e-6);
}
