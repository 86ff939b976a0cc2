#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "metalth/model.hpp"
#include "reference.hpp"

using namespace metalth;

TEST(NetworkSpec, TextRoundTrip) {
  for (const NetworkSpec& s : {NetworkSpec::mlp_tiny(8, 5), NetworkSpec::conv4_tiny(1, 20, 20, 5, 8),
                               NetworkSpec::mlp_tiny(1, 1, 40)}) {
    EXPECT_EQ(NetworkSpec::parse(s.to_string()), s) << s.to_string();
  }
  NetworkSpec reg = NetworkSpec::mlp_tiny(1, 1);
  reg.regression = true;
  EXPECT_EQ(NetworkSpec::parse(reg.to_string()), reg);
  EXPECT_EQ(NetworkSpec::mlp_tiny(8, 5).to_string(), "mlp-tiny in=8 out=5 widths=40,40 loss=ce");
}

TEST(NetworkSpec, ExactlyOneClassifierLayer) {
  for (const NetworkSpec& s : {NetworkSpec::mlp_tiny(8, 5), NetworkSpec::conv4_tiny(3, 12, 12, 5)}) {
    const ParamSet p = init_params(s, 0);
    std::set<std::string> classifier_layers;
    for (const auto& e : p.entries)
      if (e.classifier) classifier_layers.insert(e.layer);
    EXPECT_EQ(classifier_layers.size(), 1u);
    EXPECT_TRUE(p.entries.back().classifier);
  }
}

TEST(NetworkSpec, InvalidSpecsRejected) {
  NetworkSpec s = NetworkSpec::mlp_tiny(8, 5);
  s.widths = {40};
  EXPECT_THROW(s.validate(), ConfigError);
  NetworkSpec c = NetworkSpec::conv4_tiny(1, 20, 20, 5);
  c.input_shape = {20};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_architecture("resnet"), ConfigError);
}

TEST(InitParams, SameSeedIsBitIdentical) {
  const NetworkSpec s = NetworkSpec::conv4_tiny(1, 20, 20, 5);
  EXPECT_TRUE(testutil::bit_equal(init_params(s, 42), init_params(s, 42)));
  EXPECT_FALSE(testutil::bit_equal(init_params(s, 42), init_params(s, 43)));
}

TEST(InitParams, BiasesZeroAndStageInitial) {
  const ParamSet p = init_params(NetworkSpec::mlp_tiny(8, 5), 1);
  EXPECT_EQ(p.stage, Stage::Initial);
  for (const auto& e : p.entries) {
    if (e.kind != ParamKind::Bias) continue;
    for (float v : e.tensor.values) EXPECT_EQ(v, 0.0f);
  }
}

TEST(InitParams, HeUniformBoundsAndMean) {
  const ParamSet p = init_params(NetworkSpec::conv4_tiny(1, 20, 20, 5), 0);
  double sum = 0.0, var_sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : p.entries) {
    if (e.kind != ParamKind::Weight) continue;
    const std::size_t fan_in = e.tensor.rank() == 4 ? e.tensor.shape[1] * 9 : e.tensor.shape[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (float v : e.tensor.values) {
      EXPECT_LE(std::abs(v), bound);
      sum += v;
    }
    var_sum += bound * bound / 3.0 * static_cast<double>(e.tensor.size());
    n += e.tensor.size();
  }
  const double mean = sum / static_cast<double>(n);
  const double sigma = std::sqrt(var_sum) / static_cast<double>(n);
  EXPECT_LT(std::abs(mean), 3.0 * sigma);
}

TEST(Predict, ZeroParamsGiveZeroLogits) {
  const NetworkSpec s = NetworkSpec::conv4_tiny(1, 20, 20, 5);
  ParamSet p = init_params(s, 0);
  for (auto& e : p.entries) std::fill(e.tensor.values.begin(), e.tensor.values.end(), 0.0f);
  const Batch b = testutil::random_batch(s, 4, 1);
  const Forward f = predict(p, b.inputs);
  EXPECT_EQ(f.output().shape, (Shape{4, 5}));
  for (float v : f.output().values) EXPECT_EQ(v, 0.0f);
}

TEST(Predict, IdenticalInputsGiveIdenticalRows) {
  const NetworkSpec s = NetworkSpec::conv4_tiny(1, 20, 20, 5);
  const ParamSet p = init_params(s, 3);
  const Tensor one = testutil::random_tensor({1, 20, 20}, 4);
  Tensor batch({3, 1, 20, 20});
  for (std::size_t i = 0; i < 3; ++i) std::copy(one.values.begin(), one.values.end(), batch.values.begin() + i * 400);
  const Forward f = predict(p, batch);
  const Tensor& y = f.output();
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y.values[i * 5 + c], y.values[c]);
}

TEST(Predict, HandComputedMlp) {
  NetworkSpec s = NetworkSpec::mlp_tiny(1, 1, 1);
  ParamSet p = init_params(s, 0);
  // fc1: 1.5x - 1, fc2: -0.5h + 3, classifier: 2h + 0.25
  const float values[] = {1.5f, -1.0f, -0.5f, 3.0f, 2.0f, 0.25f};
  for (std::size_t i = 0; i < 6; ++i) p.entries[i].tensor.values = {values[i]};
  const auto eval = [&](float x) { return predict(p, Tensor({1, 1}, {x})).output().values[0]; };
  EXPECT_FLOAT_EQ(eval(2.0f), 2.0f * std::max(0.0f, -0.5f * std::max(0.0f, 1.5f * 2.0f - 1.0f) + 3.0f) + 0.25f);
  EXPECT_FLOAT_EQ(eval(0.0f), 2.0f * 3.0f + 0.25f);
  EXPECT_FLOAT_EQ(eval(6.0f), 0.25f);  // second hidden unit is clamped: -0.5 * 8 + 3 < 0
}

TEST(Predict, PureAcrossCalls) {
  const NetworkSpec s = NetworkSpec::mlp_tiny(8, 5);
  const ParamSet p = init_params(s, 5);
  const Batch b = testutil::random_batch(s, 6, 6);
  EXPECT_TRUE(testutil::bit_equal(predict(p, b.inputs).output().values, predict(p, b.inputs).output().values));
}

TEST(Predict, InputShapeMismatch) {
  const ParamSet p = init_params(NetworkSpec::mlp_tiny(8, 5), 0);
  EXPECT_THROW(predict(p, Tensor({2, 7})), DimensionError);
}

TEST(TaskLoss, PerfectLogitsNearZero) {
  const NetworkSpec s = NetworkSpec::mlp_tiny(8, 5);
  ParamSet p = init_params(s, 0);
  for (auto& e : p.entries) std::fill(e.tensor.values.begin(), e.tensor.values.end(), 0.0f);
  p.entries.back().tensor.values = {-20, -20, 20, -20, -20};
  Batch b = testutil::random_batch(s, 4, 7);
  b.labels.assign(4, 2);
  EXPECT_LT(task_loss(p, b).value(), 1e-6f);
}

TEST(TaskLoss, UniformLogitsGiveLog5) {
  const NetworkSpec s = NetworkSpec::mlp_tiny(8, 5);
  ParamSet p = init_params(s, 0);
  for (auto& e : p.entries) std::fill(e.tensor.values.begin(), e.tensor.values.end(), 0.0f);
  EXPECT_NEAR(task_loss(p, testutil::random_batch(s, 4, 8)).value(), std::log(5.0), 1e-6);
}

TEST(TaskLoss, GradientMatchesReferenceOnMlp) {
  const NetworkSpec s = NetworkSpec::mlp_tiny(4, 3, 6);
  const ParamSet p = testutil::random_params(s, 9);
  const Batch b = testutil::random_batch(s, 5, 10);
  const LossGrad lg = loss_and_grad(p, b);
  EXPECT_NEAR(lg.loss, ref::task_loss(s, ref::to_double(p), b), 1e-5);
  const ref::Params fd = ref::fd_param_gradient(s, ref::to_double(p), b);
  for (std::size_t e = 0; e < fd.size(); ++e)
    for (std::size_t i = 0; i < fd[e].size(); ++i)
      EXPECT_LT(ref::rel_error(lg.grads[e][i], fd[e][i]), 1e-2) << p.entries[e].name() << i;
}

TEST(TaskLoss, RegressionUsesHalfMse) {
  NetworkSpec s = NetworkSpec::mlp_tiny(1, 1, 5);
  s.regression = true;
  const ParamSet p = testutil::random_params(s, 11);
  const Batch b = testutil::random_batch(s, 4, 12);
  EXPECT_NEAR(task_loss(p, b).value(), ref::task_loss(s, ref::to_double(p), b), 1e-6);
}

TEST(FlattenPrunable, MlpLength) {
  const ParamSet p = init_params(NetworkSpec::mlp_tiny(4, 5, 40), 0);
  EXPECT_EQ(flatten_prunable(p).size(), 4u * 40 + 40u * 40);
}

TEST(FlattenPrunable, Conv4Length) {
  const ParamSet p = init_params(NetworkSpec::conv4_tiny(1, 20, 20, 5, 8), 0);
  EXPECT_EQ(flatten_prunable(p).size(), 1800u);
}

TEST(FlattenPrunable, ExcludesClassifierAndBiases) {
  const ParamSet p = init_params(NetworkSpec::conv4_tiny(1, 20, 20, 5), 0);
  const auto view = flatten_prunable(p);
  for (const auto& seg : view.segments()) {
    const ParamEntry& e = p.entries[seg.entry];
    EXPECT_EQ(e.kind, ParamKind::Weight) << e.name();
    EXPECT_FALSE(e.classifier) << e.name();
    EXPECT_NE(e.layer, "classifier");
  }
}

TEST(FlattenPrunable, OrderIsLayerThenRowMajor) {
  const ParamSet p = init_params(NetworkSpec::mlp_tiny(3, 2, 4), 0);
  const auto view = flatten_prunable(p);
  std::vector<float> expected = p.entry("fc1.weight").tensor.values;
  const auto& fc2 = p.entry("fc2.weight").tensor.values;
  expected.insert(expected.end(), fc2.begin(), fc2.end());
  ASSERT_EQ(view.size(), expected.size());
  for (std::size_t i = 0; i < view.size(); ++i) EXPECT_EQ(view[i], expected[i]);
}

TEST(FlattenPrunable, WritesThroughToParams) {
  ParamSet p = init_params(NetworkSpec::mlp_tiny(3, 2, 4), 0);
  auto view = flatten_prunable(p);
  view[0] = 7.0f;
  view[view.size() - 1] = -3.0f;
  EXPECT_EQ(p.entry("fc1.weight").tensor.values.front(), 7.0f);
  EXPECT_EQ(p.entry("fc2.weight").tensor.values.back(), -3.0f);
}

TEST(ParamSet, AlignmentIsSpecDriven) {
  const ParamSet a = init_params(NetworkSpec::mlp_tiny(8, 5), 0);
  EXPECT_TRUE(a.aligned_with(init_params(NetworkSpec::mlp_tiny(8, 5), 9)));
  EXPECT_FALSE(a.aligned_with(init_params(NetworkSpec::mlp_tiny(8, 5, 20), 0)));
}
