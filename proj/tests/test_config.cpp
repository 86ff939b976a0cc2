#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "metalth/config.hpp"

using namespace metalth;

TEST(Config, DefaultsValidate) {
  const PipelineConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_TRUE(cfg.warnings().empty());
  EXPECT_EQ(cfg.pretrain.iterations, 2000u);
  EXPECT_EQ(cfg.retrain.iterations, 600u);
  EXPECT_FLOAT_EQ(cfg.pretrain.alpha, 0.4f);
  EXPECT_FLOAT_EQ(cfg.pretrain.beta, 0.001f);
}

TEST(Config, EveryKeyRoundTripsThroughText) {
  PipelineConfig a;
  a.set("model.arch", "conv4-tiny");
  a.set("task.kind", "glyphs");
  a.set("pretrain.alpha", "0.1");
  a.set("test.mode", "classifier-only");
  a.set("seeds", "3, 4,5");
  PipelineConfig b;
  for (const auto& key : PipelineConfig::keys()) b.set(key, a.get(key));
  EXPECT_EQ(a.canonical_text(), b.canonical_text());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(b.seeds, (std::vector<std::uint64_t>{3, 4, 5}));
}

TEST(Config, FloatsPrintExactly) {
  PipelineConfig cfg;
  cfg.set("pretrain.beta", "0.001");
  EXPECT_EQ(cfg.get("pretrain.beta"), "0.001");
  cfg.set("prune.pct", "33.3");
  EXPECT_EQ(cfg.get("prune.pct"), "33.3");
}

TEST(Config, BadInputsAreConfigErrors) {
  PipelineConfig cfg;
  EXPECT_THROW(cfg.set("pretrain.gamma", "1"), ConfigError);
  EXPECT_THROW(cfg.set("task.way", "five"), ConfigError);
  EXPECT_THROW(cfg.set("task.way", "5x"), ConfigError);
  EXPECT_THROW(cfg.set("task.rotations", "maybe"), ConfigError);
  EXPECT_THROW(cfg.set("prune.scope", "everywhere"), ConfigError);
  EXPECT_THROW(cfg.set("seeds", ""), ConfigError);
}

TEST(Config, ValidationCatchesBadCombinations) {
  PipelineConfig cfg;
  cfg.prune_pct = 100.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PipelineConfig{};
  cfg.way = 30;
  cfg.test_classes = 20;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PipelineConfig{};
  cfg.generator = GeneratorKind::ImageDir;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PipelineConfig{};
  cfg.generator = GeneratorKind::Sinusoid;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PipelineConfig{};
  cfg.pretrain.beta = 0.0f;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, LongRetrainIsOnlyAWarning) {
  PipelineConfig cfg;
  cfg.retrain.iterations = 5000;
  EXPECT_NO_THROW(cfg.validate());
  ASSERT_EQ(cfg.warnings().size(), 1u);
  EXPECT_NE(cfg.warnings()[0].find("retrain.iterations"), std::string::npos);
}

TEST(Config, HashIgnoresOutputAndSeeds) {
  PipelineConfig a, b;
  b.out = "elsewhere";
  b.seeds = {7, 8};
  EXPECT_EQ(a.hash(), b.hash());
  b.test.steps = 11;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, LoadFileWithComments) {
  testutil::TempDir tmp("config_load");
  std::ofstream(tmp.str("c.cfg")) << "# preset\n"
                                     "model.arch = conv4-tiny   # inline\n"
                                     "\n"
                                     "  task.kind=glyphs\n"
                                     "retrain.iterations = 7\n";
  PipelineConfig cfg;
  cfg.load_file(tmp.str("c.cfg"));
  EXPECT_EQ(cfg.arch, Architecture::Conv4Tiny);
  EXPECT_EQ(cfg.generator, GeneratorKind::Glyphs);
  EXPECT_EQ(cfg.retrain.iterations, 7u);
}

TEST(Config, LoadFileErrorsNameTheLine) {
  testutil::TempDir tmp("config_err");
  std::ofstream(tmp.str("c.cfg")) << "model.width = 8\nno equals sign here\n";
  PipelineConfig cfg;
  try {
    cfg.load_file(tmp.str("c.cfg"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("c.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cfg.load_file(tmp.str("missing.cfg")), IoError);
}

TEST(Config, DerivedObjects) {
  PipelineConfig cfg;
  cfg.arch = Architecture::Conv4Tiny;
  cfg.generator = GeneratorKind::Glyphs;
  cfg.width = 8;
  const NetworkSpec spec = cfg.network_spec();
  EXPECT_EQ(spec.input_shape, (Shape{1, 20, 20}));
  EXPECT_EQ(spec.classes, 5u);
  EXPECT_EQ(spec.widths, (std::vector<std::size_t>{8, 8, 8, 8}));
  const TaskSource src = cfg.task_source();
  EXPECT_EQ(src.train_classes.size(), 64u);
  EXPECT_EQ(src.test_classes.size(), 20u);
  const MetaTrainConfig pre = cfg.pretrain_config(9);
  EXPECT_EQ(pre.seed, 9u);
  EXPECT_FALSE(pre.mask.has_value());
  EXPECT_EQ(pre.way, 5u);
  EXPECT_EQ(cfg.test_config().query, 15u);
}

TEST(FormatNumber, SixSignificantDigits) {
  EXPECT_EQ(format_number(0.123456789), "0.123457");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
}
