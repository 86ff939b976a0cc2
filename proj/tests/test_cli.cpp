#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "metalth/checkpoint.hpp"
#include "metalth/cli.hpp"

using namespace metalth;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_small_config(const std::string& path) {
  std::ofstream(path) << "pretrain.iterations = 30\n"
                         "pretrain.batch = 8\n"
                         "retrain.iterations = 10\n"
                         "retrain.batch = 8\n"
                         "test.tasks = 10\n"
                         "test.lr = 0.4\n";
}

}  // namespace

TEST(ExitCodes, ByErrorKind) {
  EXPECT_EQ(exit_code_for(ErrorKind::Config), 1);
  EXPECT_EQ(exit_code_for(ErrorKind::Usage), 1);
  EXPECT_EQ(exit_code_for(ErrorKind::Pipeline), 1);
  EXPECT_EQ(exit_code_for(ErrorKind::Divergence), 2);
  EXPECT_EQ(exit_code_for(ErrorKind::Dimension), 2);
  EXPECT_EQ(exit_code_for(ErrorKind::Io), 3);
  EXPECT_EQ(exit_code_for(ErrorKind::Checkpoint), 3);
}

TEST(Cli, PipelineCreatesContractFiles) {
  testutil::TempDir tmp("cli_pipe");
  write_small_config(tmp.str("c.cfg"));
  const CliResult r = cli({"pipeline", "--config", tmp.str("c.cfg"), "--seed", "0", "--out", tmp.str("out")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"checkpoint_pretrain.bin", "checkpoint_prune.bin", "checkpoint_retrain.bin", "eval.csv",
                        "summary.txt"})
    EXPECT_TRUE(fs::exists(tmp.path / "out" / f)) << f;
  EXPECT_NE(r.out.find("across_seeds meta-lth n 1"), std::string::npos) << r.out;
  EXPECT_NE(r.err.find("[seed 0] pretrain"), std::string::npos);
}

TEST(Cli, SingleStagesChain) {
  testutil::TempDir tmp("cli_stages");
  write_small_config(tmp.str("c.cfg"));
  const std::vector<std::string> common{"--config", tmp.str("c.cfg"), "--out", tmp.str("out")};
  for (const char* stage : {"pretrain", "prune", "retrain", "metatest", "ablate"}) {
    std::vector<std::string> args{stage};
    args.insert(args.end(), common.begin(), common.end());
    const CliResult r = cli(args);
    ASSERT_EQ(r.code, 0) << stage << ": " << r.err;
  }
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "ablation.csv"));
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "deltas.csv"));
}

TEST(Cli, VerifyPrunedCheckpointReportsExactSparsity) {
  testutil::TempDir tmp("cli_verify");
  write_small_config(tmp.str("c.cfg"));
  ASSERT_EQ(cli({"pipeline", "--config", tmp.str("c.cfg"), "--out", tmp.str("out"), "--stop-after", "prune"}).code, 0);
  const CliResult r = cli({"verify", "--in", tmp.str("out/checkpoint_prune.bin")});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("sparsity=0.900\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("stage=pruned"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, VerifyFlagsBrokenInvariant) {
  testutil::TempDir tmp("cli_verify_bad");
  write_small_config(tmp.str("c.cfg"));
  ASSERT_EQ(cli({"pipeline", "--config", tmp.str("c.cfg"), "--out", tmp.str("out"), "--stop-after", "prune"}).code, 0);
  Checkpoint c = load_checkpoint(tmp.str("out/checkpoint_prune.bin"));
  for (std::size_t i = 0; i < c.mask->layers[0].bits.size(); ++i) {
    if (c.mask->layers[0].bits[i]) continue;
    c.current.entries[0].tensor.values[i] = 0.5f;
    break;
  }
  save_checkpoint(c, tmp.str("bad.bin"));
  const CliResult r = cli({"verify", "--in", tmp.str("bad.bin")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("check pruned-zero FAIL"), std::string::npos) << r.out;
}

TEST(Cli, PruneOnInitialCheckpointIsStageError) {
  testutil::TempDir tmp("cli_gate");
  Checkpoint c;
  c.initial = init_params(NetworkSpec::mlp_tiny(8, 5), 0);
  c.current = c.initial;
  save_checkpoint(c, tmp.str("init.bin"));
  const CliResult r = cli({"prune", "--in", tmp.str("init.bin"), "--out", tmp.str("out")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("pretrained"), std::string::npos) << r.err;
}

TEST(Cli, UsageErrors) {
  CliResult r = cli({"pipeline", "--bogus"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"train"}).code, 1);
  EXPECT_EQ(cli({"pipeline", "--prune-pct", "150"}).code, 1);
  EXPECT_EQ(cli({"pipeline", "--task.way", "x"}).code, 1);
  EXPECT_EQ(cli({"verify"}).code, 1);
}

TEST(Cli, HelpExitsZero) {
  const CliResult r = cli({"prune", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--prune-pct"), std::string::npos);
  EXPECT_NE(r.out.find("--pretrain.alpha"), std::string::npos);
}

TEST(Cli, IoAndCheckpointErrorsExitThree) {
  testutil::TempDir tmp("cli_io");
  EXPECT_EQ(cli({"pipeline", "--config", tmp.str("missing.cfg")}).code, 3);
  EXPECT_EQ(cli({"verify", "--in", tmp.str("missing.bin")}).code, 3);
  write_file(tmp.str("junk.bin"), "metalth-checkpoint\nversion 1\n");
  const CliResult r = cli({"verify", "--in", tmp.str("junk.bin")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("truncated"), std::string::npos) << r.err;
}

TEST(Cli, DivergenceExitsTwo) {
  testutil::TempDir tmp("cli_div");
  write_small_config(tmp.str("c.cfg"));
  const CliResult r = cli({"pipeline", "--config", tmp.str("c.cfg"), "--out", tmp.str("out"), "--pretrain.alpha", "1e30",
                     "--pretrain.inner_steps", "3"});
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "checkpoint_pretrain_last_good.bin"));
}
