#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "metalth/autodiff.hpp"
#include "reference.hpp"

using namespace metalth;

namespace {

Tensor T(Shape s, std::vector<float> v) { return Tensor(std::move(s), std::move(v)); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph g;
  const NodeId a = g.constant(T({2, 2}, {1, 0, 0, 1}));
  const NodeId b = g.constant(T({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(g.tensor(g.matmul(a, b)).values, (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Graph g;
  const NodeId y = g.matmul(g.constant(T({1, 2}, {1, 2})), g.constant(T({2, 1}, {3, 4})));
  EXPECT_EQ(g.tensor(y).shape, (Shape{1, 1}));
  EXPECT_EQ(g.tensor(y).values[0], 11.0f);
}

TEST(Matmul, MismatchNamesBothShapes) {
  Graph g;
  const NodeId a = g.constant(Tensor({2, 3}));
  const NodeId b = g.constant(Tensor({4, 5}));
  try {
    g.matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find(shape_to_string({2, 3})), std::string::npos) << what;
    EXPECT_NE(what.find(shape_to_string({4, 5})), std::string::npos) << what;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  const auto av = testutil::uniform(9, 1), bv = testutil::uniform(9, 2);
  Graph g;
  const NodeId a = g.leaf(T({3, 3}, av));
  const NodeId b = g.constant(T({3, 3}, bv));
  g.backward(g.sum(g.matmul(a, b)));

  const ref::Vec B = ref::to_double(bv);
  const auto f = [&](const ref::Vec& A) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) s += A[i * 3 + k] * B[k * 3 + j];
    return s;
  };
  const ref::Vec fd = ref::fd_gradient(f, ref::to_double(av));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_LT(ref::rel_error(g.tensor(a).grad[i], fd[i]), 1e-3) << i;
}

TEST(Conv2d, ZeroKernelsGiveConstantBias) {
  Graph g;
  const NodeId x = g.constant(testutil::random_tensor({2, 5, 4}, 3));
  const NodeId k = g.constant(Tensor({3, 2, 3, 3}));
  const NodeId b = g.constant(T({3}, {0.5f, -1.0f, 2.0f}));
  const Tensor& y = g.tensor(g.conv2d(x, k, b));
  ASSERT_EQ(y.shape, (Shape{3, 5, 4}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(y.values[o * 20 + i], g.tensor(b).values[o]);
}

TEST(Conv2d, CenteredDeltaIsIdentity) {
  Graph g;
  const Tensor in = testutil::random_tensor({1, 6, 7}, 4);
  Tensor k({1, 1, 3, 3});
  k.values[4] = 1.0f;
  const NodeId y = g.conv2d(g.constant(in), g.constant(k), g.constant(Tensor({1})));
  EXPECT_EQ(g.tensor(y).values, in.values);
}

TEST(Conv2d, ChannelMismatchThrows) {
  Graph g;
  const NodeId x = g.constant(Tensor({2, 4, 4}));
  EXPECT_THROW(g.conv2d(x, g.constant(Tensor({1, 3, 3, 3})), g.constant(Tensor({1}))), DimensionError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  const auto xv = testutil::uniform(16, 5), kv = testutil::uniform(18, 6), bv = testutil::uniform(2, 7);
  const auto rv = testutil::uniform(32, 8);  // random projection so the loss is not a plain sum
  Graph g;
  const NodeId x = g.leaf(T({1, 4, 4}, xv));
  const NodeId k = g.leaf(T({2, 1, 3, 3}, kv));
  const NodeId b = g.leaf(T({2}, bv));
  g.backward(g.sum(g.mul(g.conv2d(x, k, b), g.constant(T({2, 4, 4}, rv)))));

  ref::Vec X = ref::to_double(xv), K = ref::to_double(kv), Bv = ref::to_double(bv);
  const ref::Vec R = ref::to_double(rv);
  const auto loss = [&] {
    const ref::Vec y = ref::conv3x3(X, 1, 4, 4, K, Bv, 2);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * R[i];
    return s;
  };
  auto check = [&](ref::Vec& target, const std::vector<float>& grad, const char* name) {
    const ref::Vec fd = ref::fd_gradient(
        [&](const ref::Vec& v) {
          const ref::Vec keep = target;
          target = v;
          const double l = loss();
          target = keep;
          return l;
        },
        target);
    for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_LT(ref::rel_error(grad[i], fd[i]), 1e-3) << name << i;
  };
  check(X, g.tensor(x).grad, "x");
  check(K, g.tensor(k).grad, "k");
  check(Bv, g.tensor(b).grad, "b");
}

TEST(Conv2d, BatchedMatchesPerInstance) {
  const Tensor x = testutil::random_tensor({3, 2, 5, 5}, 9);
  const Tensor k = testutil::random_tensor({4, 2, 3, 3}, 10);
  const Tensor b = testutil::random_tensor({4}, 11);
  Graph g;
  const Tensor y = g.tensor(g.conv2d(g.constant(x), g.constant(k), g.constant(b)));
  for (std::size_t n = 0; n < 3; ++n) {
    Graph h;
    Tensor one({2, 5, 5}, std::vector<float>(x.values.begin() + n * 50, x.values.begin() + (n + 1) * 50));
    const Tensor z = h.tensor(h.conv2d(h.constant(one), h.constant(k), h.constant(b)));
    EXPECT_TRUE(testutil::bit_equal(z.values, std::vector<float>(y.values.begin() + n * 100,
                                                                 y.values.begin() + (n + 1) * 100)));
  }
}

TEST(Relu, ClampsNegatives) {
  Graph g;
  EXPECT_EQ(g.tensor(g.relu(g.constant(T({3}, {-1, 0, 2})))).values, (std::vector<float>{0, 0, 2}));
}

TEST(MaxPool, CeilModeOnOddExtents) {
  Graph g;
  const NodeId y = g.maxpool2(g.constant(T({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})));
  EXPECT_EQ(g.tensor(y).shape, (Shape{1, 2, 2}));
  EXPECT_EQ(g.tensor(y).values, (std::vector<float>{5, 6, 8, 9}));
}

TEST(MaxPool, TieRoutesGradientToFirstOccurrence) {
  Graph g;
  const NodeId x = g.leaf(T({1, 2, 2}, {3, 3, 3, 3}));
  g.backward(g.sum(g.maxpool2(x)));
  EXPECT_EQ(g.tensor(x).grad, (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
  const auto xv = testutil::uniform(16, 12), rv = testutil::uniform(4, 13);
  Graph g;
  const NodeId x = g.leaf(T({1, 4, 4}, xv));
  g.backward(g.sum(g.mul(g.maxpool2(x), g.constant(T({1, 2, 2}, rv)))));
  const ref::Vec R = ref::to_double(rv);
  const ref::Vec fd = ref::fd_gradient(
      [&](const ref::Vec& v) {
        const ref::Vec y = ref::maxpool2(v, 1, 4, 4);
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += y[i] * R[i];
        return s;
      },
      ref::to_double(xv));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_LT(ref::rel_error(g.tensor(x).grad[i], fd[i]), 1e-3) << i;
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  Graph g;
  const std::vector<int> labels{2, 0};
  const NodeId l = g.softmax_cross_entropy(g.constant(Tensor({2, 5})), labels);
  EXPECT_NEAR(g.tensor(l).values[0], std::log(5.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Graph g;
  const std::vector<int> labels{5};
  EXPECT_THROW(g.softmax_cross_entropy(g.constant(Tensor({1, 5})), labels), LabelError);
  const std::vector<int> negative{-1};
  EXPECT_THROW(g.softmax_cross_entropy(g.constant(Tensor({1, 5})), negative), LabelError);
}

TEST(SoftmaxCrossEntropy, NonFiniteLossIsAnError) {
  Graph g;
  const std::vector<int> labels{0};
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_THROW(g.softmax_cross_entropy(g.constant(T({1, 2}, {-inf, inf})), labels), NumericError);
}

TEST(Mse, HalfMeanSquaredError) {
  Graph g;
  const NodeId p = g.leaf(T({2}, {1, 3}));
  const NodeId l = g.mse(p, T({2}, {0, 1}));
  EXPECT_FLOAT_EQ(g.tensor(l).values[0], 0.5f * (1 + 4) / 2);
  g.backward(l);
  EXPECT_EQ(g.tensor(p).grad, (std::vector<float>{0.5f, 1.0f}));
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  const NodeId x = g.leaf(testutil::random_tensor({2, 3, 4}, 14));
  g.backward(g.sum(x));
  for (float v : g.tensor(x).grad) EXPECT_EQ(v, 1.0f);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Graph g;
  const Tensor t = testutil::random_tensor({7}, 15);
  const NodeId x = g.leaf(t);
  g.backward(g.scale(g.sum(g.mul(x, x)), 0.5f));
  EXPECT_EQ(g.tensor(x).grad, t.values);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Graph g;
  const NodeId x = g.leaf(Tensor({3}));
  EXPECT_THROW(g.backward(x), UsageError);
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroed) {
  Graph g;
  const NodeId x = g.leaf(testutil::random_tensor({4}, 16));
  const NodeId l = g.sum(g.scale(x, 3.0f));
  g.backward(l);
  g.backward(l);
  for (float v : g.tensor(x).grad) EXPECT_EQ(v, 6.0f);
  g.zero_grads();
  for (float v : g.tensor(x).grad) EXPECT_EQ(v, 0.0f);
  g.backward(l);
  for (float v : g.tensor(x).grad) EXPECT_EQ(v, 3.0f);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Graph g;
  const NodeId c = g.constant(testutil::random_tensor({3}, 17));
  const NodeId x = g.leaf(testutil::random_tensor({3}, 18));
  g.backward(g.sum(g.mul(c, x)));
  for (float v : g.tensor(c).grad) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, LinearInTheLoss) {
  const Tensor xv = testutil::random_tensor({3, 4}, 19);
  const Tensor wv = testutil::random_tensor({4, 5}, 20);
  const std::vector<int> labels{1, 4, 0};
  auto grads = [&](int which) {
    Graph g;
    const NodeId w = g.leaf(wv);
    const NodeId logits = g.matmul(g.constant(xv), w);
    const NodeId l1 = g.softmax_cross_entropy(logits, labels);
    const NodeId l2 = g.scale(g.sum(g.mul(w, w)), 0.25f);
    g.backward(which == 0 ? g.add(l1, l2) : which == 1 ? l1 : l2);
    return g.tensor(w).grad;
  };
  const auto both = grads(0), a = grads(1), b = grads(2);
  for (std::size_t i = 0; i < both.size(); ++i) {
    const float sum = a[i] + b[i];
    EXPECT_LE(std::abs(both[i] - sum), std::nextafter(std::abs(sum), INFINITY) - std::abs(sum)) << i;
  }
}

TEST(Backward, DeterministicAcrossRuns) {
  const NetworkSpec spec = NetworkSpec::conv4_tiny(1, 9, 9, 5, 4);
  const ParamSet p = testutil::random_params(spec, 21);
  const Batch b = testutil::random_batch(spec, 4, 22);
  const LossGrad a = loss_and_grad(p, b), c = loss_and_grad(p, b);
  EXPECT_EQ(std::bit_cast<std::uint32_t>(a.loss), std::bit_cast<std::uint32_t>(c.loss));
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(testutil::bit_equal(a.grads[i], c.grads[i]));
}

TEST(Backward, Conv4TinyGradientOnSampledParameters) {
  const NetworkSpec spec = NetworkSpec::conv4_tiny(1, 8, 8, 5, 4);
  const ParamSet p = testutil::random_params(spec, 23);
  const Batch b = testutil::random_batch(spec, 3, 24);
  const LossGrad lg = loss_and_grad(p, b);
  ref::Params P = ref::to_double(p);
  std::mt19937_64 rng(25);
  for (int s = 0; s < 8; ++s) {
    const std::size_t e = rng() % P.size();
    const std::size_t i = rng() % P[e].size();
    const double keep = P[e][i];
    P[e][i] = keep + 1e-3;
    const double up = ref::task_loss(spec, P, b);
    P[e][i] = keep - 1e-3;
    const double down = ref::task_loss(spec, P, b);
    P[e][i] = keep;
    EXPECT_LT(ref::rel_error(lg.grads[e][i], (up - down) / 2e-3), 1e-2) << p.entries[e].name() << '[' << i << ']';
  }
}
