#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "metalth/checkpoint.hpp"
#include "metalth/config.hpp"
#include "metalth/fomaml.hpp"
#include "metalth/metatest.hpp"

namespace metalth {

enum class PipelineStage { Pretrain, Prune, Retrain, Metatest };

std::string to_string(PipelineStage stage);
PipelineStage parse_pipeline_stage(const std::string& text);

/// Independent streams per seed: parameter init, training tasks, test tasks.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t train_seed(std::uint64_t seed);
std::uint64_t eval_seed(std::uint64_t seed);

struct StageRun {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

// Single stages. Each checks the incoming stage tag.
StageRun run_pretrain(const PipelineConfig& cfg, const TaskSource& src, std::uint64_t seed);
Checkpoint run_prune(const PipelineConfig& cfg, const Checkpoint& pretrained);
StageRun run_retrain(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& pruned);
/// Evaluates in cfg.test.mode. A pretrained (dense) checkpoint is scored
/// with an all-ones mask.
EvalReport run_metatest(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& trained);
AblationResult run_ablate(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& trained);

struct PipelineOptions {
  bool resume = false;
  bool force = false;  // resume even when the config hash differs
  std::optional<PipelineStage> stop_after;
  std::ostream* progress = nullptr;  // human-readable progress, usually stderr
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool completed = false;  // reached metatest
  std::string error;
  std::optional<ErrorKind> error_kind;
  std::vector<EvalReport> reports;  // the configured mode first, then ablations
};

struct PipelineSummary {
  std::vector<SeedOutcome> seeds;
  std::vector<std::string> warnings;
};

/// pretrain -> prune -> retrain -> metatest (+ ablations) for every seed.
/// A single seed writes into cfg.out; several seeds use cfg.out/seed_<s>.
/// A failing seed keeps its earlier checkpoints and does not stop the others.
PipelineSummary run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts);

/// Directory holding one seed's artifacts.
std::string seed_dir(const PipelineConfig& cfg, std::uint64_t seed);

void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& log);
/// Cross-seed report: per-seed means, then mean and sample std of those means.
void write_summary(std::ostream& os, const PipelineConfig& cfg, const PipelineSummary& summary);
/// eval.csv rows for every seed, prefixed with a seed column.
void write_pipeline_eval(std::ostream& os, const PipelineSummary& summary);

}  // namespace metalth
