#include "metalth/pipeline.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace metalth {

std::string to_string(PipelineStage stage) {
  switch (stage) {
    case PipelineStage::Pretrain: return "pretrain";
    case PipelineStage::Prune: return "prune";
    case PipelineStage::Retrain: return "retrain";
    case PipelineStage::Metatest: return "metatest";
  }
  return "unknown";
}

PipelineStage parse_pipeline_stage(const std::string& text) {
  for (auto s : {PipelineStage::Pretrain, PipelineStage::Prune, PipelineStage::Retrain, PipelineStage::Metatest})
    if (to_string(s) == text) return s;
  throw ConfigError("unknown stage '" + text + "' (expected pretrain, prune, retrain or metatest)");
}

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

void require_stage(const Checkpoint& c, std::initializer_list<Stage> allowed, const std::string& step) {
  for (Stage s : allowed)
    if (c.current.stage == s) return;
  std::string names;
  for (Stage s : allowed) names += (names.empty() ? "" : " or ") + to_string(s);
  throw PipelineError(step + " needs a " + names + " checkpoint, got stage '" + to_string(c.current.stage) + "'");
}

Mask mask_for_test(const Checkpoint& c) {
  if (c.mask) return *c.mask;
  return all_ones_mask(c.current);
}

double wall_ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

struct Stats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t n = 0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

}  // namespace

std::uint64_t init_seed(std::uint64_t seed) { return derive(seed, 1); }
std::uint64_t train_seed(std::uint64_t seed) { return derive(seed, 2); }
std::uint64_t eval_seed(std::uint64_t seed) { return derive(seed, 3); }

StageRun run_pretrain(const PipelineConfig& cfg, const TaskSource& src, std::uint64_t seed) {
  StageRun run;
  Checkpoint& c = run.checkpoint;
  c.seed = seed;
  c.config_hash = cfg.hash();
  c.initial = init_params(cfg.network_spec(), init_seed(seed));
  Rng rng(train_seed(seed));
  TrainResult trained = meta_train(c.initial, src, cfg.pretrain_config(seed), rng);
  c.current = std::move(trained.params);
  c.stage = c.current.stage;
  c.rng_state = save_rng(rng);
  run.log = std::move(trained.log);
  return run;
}

Checkpoint run_prune(const PipelineConfig& cfg, const Checkpoint& pretrained) {
  require_stage(pretrained, {Stage::Pretrained}, "prune");
  Checkpoint c = pretrained;
  c.config_hash = cfg.hash();
  const Threshold t = compute_threshold(pretrained.current, cfg.prune_pct, cfg.scope);
  c.mask = make_mask(pretrained.current, t);
  c.current = apply_mask_reinit(pretrained.initial, *c.mask);
  c.stage = c.current.stage;
  return c;
}

StageRun run_retrain(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& pruned) {
  require_stage(pruned, {Stage::Pruned}, "retrain");
  if (!pruned.mask) throw PipelineError("retrain: pruned checkpoint carries no mask");
  StageRun run;
  Checkpoint& c = run.checkpoint;
  c = pruned;
  c.config_hash = cfg.hash();
  Rng rng = pruned.rng_state.empty() ? Rng(train_seed(pruned.seed)) : load_rng(pruned.rng_state);
  TrainResult trained = meta_train(pruned.current, src, cfg.retrain_config(pruned.seed, *pruned.mask), rng);
  c.current = std::move(trained.params);
  c.stage = c.current.stage;
  c.rng_state = save_rng(rng);
  run.log = std::move(trained.log);
  return run;
}

EvalReport run_metatest(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& trained) {
  require_stage(trained, {Stage::Retrained, Stage::Pretrained}, "metatest");
  Rng rng(eval_seed(trained.seed));
  return evaluate(trained.current, mask_for_test(trained), src, cfg.test_config(), rng);
}

AblationResult run_ablate(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& trained) {
  require_stage(trained, {Stage::Retrained, Stage::Pretrained}, "ablate");
  return run_ablations(trained.current, mask_for_test(trained), src, cfg.test_config(), eval_seed(trained.seed));
}

std::string seed_dir(const PipelineConfig& cfg, std::uint64_t seed) {
  if (cfg.seeds.size() <= 1) return cfg.out;
  return (std::filesystem::path(cfg.out) / ("seed_" + std::to_string(seed))).string();
}

void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& log) {
  os << std::setprecision(6) << "iteration,mean_query_loss,mean_query_accuracy,prunable_sparsity\n";
  for (const auto& r : log)
    os << r.iteration << ',' << r.mean_query_loss << ',' << r.mean_query_accuracy << ',' << r.prunable_sparsity << '\n';
}

void write_pipeline_eval(std::ostream& os, const PipelineSummary& summary) {
  os << "seed,mode,task_index,accuracy\n";
  for (const auto& s : summary.seeds) {
    std::ostringstream rows;
    write_eval_csv(rows, s.reports, false);
    std::istringstream in(rows.str());
    std::string line;
    while (std::getline(in, line)) os << s.seed << ',' << line << '\n';
  }
}

void write_summary(std::ostream& os, const PipelineConfig& cfg, const PipelineSummary& summary) {
  os << std::setprecision(6);
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(cfg.hash()));
  os << "config_hash " << hash << '\n';
  os << "mode " << to_string(cfg.test.mode) << '\n';
  os << "prune_pct " << cfg.prune_pct << " scope " << to_string(cfg.scope) << '\n';
  for (const auto& w : summary.warnings) os << "warning " << w << '\n';

  std::vector<AdaptMode> modes;
  for (const auto& s : summary.seeds)
    for (const auto& r : s.reports)
      if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);

  for (const auto& s : summary.seeds) {
    if (!s.completed) {
      os << "seed " << s.seed << " failed " << (s.error.empty() ? "stopped before metatest" : s.error) << '\n';
      continue;
    }
    for (const auto& r : s.reports)
      os << "seed " << s.seed << ' ' << to_string(r.mode) << " mean " << r.mean << " std " << r.stddev << '\n';
  }
  for (AdaptMode mode : modes) {
    std::vector<double> means;
    for (const auto& s : summary.seeds)
      for (const auto& r : s.reports)
        if (r.mode == mode) means.push_back(r.mean);
    const Stats st = stats(means);
    os << "across_seeds " << to_string(mode) << " n " << st.n << " mean " << st.mean << " std " << st.stddev << '\n';
  }
}

namespace {

std::string ckpt_path(const std::string& dir, const std::string& stage) {
  return (std::filesystem::path(dir) / ("checkpoint_" + stage + ".bin")).string();
}

std::optional<Checkpoint> latest_checkpoint(const PipelineConfig& cfg, const std::string& dir, std::uint64_t seed,
                                            bool force) {
  for (const char* stage : {"retrain", "prune", "pretrain"}) {
    const std::string path = ckpt_path(dir, stage);
    if (!std::filesystem::exists(path)) continue;
    Checkpoint c = load_checkpoint(path);
    if (c.seed != seed) throw ConfigError(path + ": checkpoint belongs to seed " + std::to_string(c.seed));
    if (c.config_hash != cfg.hash() && !force) {
      throw ConfigError(path + ": config hash differs from the checkpoint's; rerun with --force to resume anyway");
    }
    return c;
  }
  return std::nullopt;
}

void save_log(const std::string& dir, const std::string& name, const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  write_train_log(os, log);
  write_file((std::filesystem::path(dir) / name).string(), os.str());
}

std::vector<EvalReport> evaluate_all(const PipelineConfig& cfg, const TaskSource& src, const Checkpoint& c) {
  AblationResult abl = run_ablate(cfg, src, c);
  std::vector<EvalReport> out;
  auto primary = std::find_if(abl.reports.begin(), abl.reports.end(),
                              [&](const EvalReport& r) { return r.mode == cfg.test.mode; });
  if (primary != abl.reports.end()) {
    out.push_back(*primary);
    abl.reports.erase(primary);
  } else {
    out.push_back(run_metatest(cfg, src, c));
  }
  for (auto& r : abl.reports) out.push_back(std::move(r));
  return out;
}

void run_seed(const PipelineConfig& cfg, const TaskSource& src, const PipelineOptions& opts, SeedOutcome& outcome,
              std::ostringstream& timing) {
  std::ostream& log = opts.progress ? *opts.progress : std::clog;
  const std::uint64_t seed = outcome.seed;
  const std::string dir = seed_dir(cfg, seed);
  std::filesystem::create_directories(dir);

  std::optional<Checkpoint> current;
  if (opts.resume) {
    current = latest_checkpoint(cfg, dir, seed, opts.force);
    if (current) log << "[seed " << seed << "] resuming from stage " << to_string(current->current.stage) << '\n';
  }
  auto stop_here = [&](PipelineStage s) { return opts.stop_after && *opts.stop_after == s; };
  auto stage_reached = [&](Stage s) { return current && current->current.stage == s; };

  if (!current) {
    log << "[seed " << seed << "] pretrain: " << cfg.pretrain.iterations << " iterations\n";
    const auto t0 = std::chrono::steady_clock::now();
    StageRun run;
    try {
      run = run_pretrain(cfg, src, seed);
    } catch (const MetaTrainDivergence& e) {
      Checkpoint partial;
      partial.seed = seed;
      partial.config_hash = cfg.hash();
      partial.initial = init_params(cfg.network_spec(), init_seed(seed));
      partial.current = e.last_good();
      save_checkpoint(partial, ckpt_path(dir, "pretrain_last_good"));
      throw;
    }
    timing << seed << ",pretrain," << wall_ms_since(t0) << '\n';
    save_checkpoint(run.checkpoint, ckpt_path(dir, "pretrain"));
    save_log(dir, "pretrain_log.csv", run.log);
    current = std::move(run.checkpoint);
    if (stop_here(PipelineStage::Pretrain)) return;
  }
  if (stage_reached(Stage::Pretrained)) {
    log << "[seed " << seed << "] prune: p=" << cfg.prune_pct << ' ' << to_string(cfg.scope) << '\n';
    const auto t0 = std::chrono::steady_clock::now();
    Checkpoint pruned = run_prune(cfg, *current);
    timing << seed << ",prune," << wall_ms_since(t0) << '\n';
    save_checkpoint(pruned, ckpt_path(dir, "prune"));
    current = std::move(pruned);
    if (stop_here(PipelineStage::Prune)) return;
  }
  if (stage_reached(Stage::Pruned)) {
    log << "[seed " << seed << "] retrain: " << cfg.retrain.iterations << " iterations\n";
    const auto t0 = std::chrono::steady_clock::now();
    StageRun run;
    try {
      run = run_retrain(cfg, src, *current);
    } catch (const MetaTrainDivergence& e) {
      Checkpoint partial = *current;
      partial.current = e.last_good();
      save_checkpoint(partial, ckpt_path(dir, "retrain_last_good"));
      throw;
    }
    timing << seed << ",retrain," << wall_ms_since(t0) << '\n';
    save_checkpoint(run.checkpoint, ckpt_path(dir, "retrain"));
    save_log(dir, "retrain_log.csv", run.log);
    current = std::move(run.checkpoint);
    if (stop_here(PipelineStage::Retrain)) return;
  }
  require_stage(*current, {Stage::Retrained}, "metatest");
  log << "[seed " << seed << "] metatest: " << cfg.test.tasks << " tasks, mode " << to_string(cfg.test.mode) << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  outcome.reports = evaluate_all(cfg, src, *current);
  timing << seed << ",metatest," << wall_ms_since(t0) << '\n';

  std::ostringstream eval;
  write_eval_csv(eval, outcome.reports);
  std::ostringstream deltas;
  for (const auto& r : outcome.reports)
    if (r.mode == AdaptMode::MetaLth) write_delta_csv(deltas, r.layer_deltas);
  if (cfg.seeds.size() > 1) write_file((std::filesystem::path(dir) / "eval.csv").string(), eval.str());
  if (!deltas.str().empty()) write_file((std::filesystem::path(dir) / "deltas.csv").string(), deltas.str());
  outcome.completed = true;
  log << "[seed " << seed << "] " << to_string(outcome.reports.front().mode) << " accuracy "
      << format_number(outcome.reports.front().mean) << '\n';
}

}  // namespace

PipelineSummary run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts) {
  cfg.validate();
  std::ostream& log = opts.progress ? *opts.progress : std::clog;
  PipelineSummary summary;
  summary.warnings = cfg.warnings();
  if (cfg.prune_pct == 0.0 && cfg.test.mode == AdaptMode::MetaLth) {
    summary.warnings.push_back(
        "prune.pct = 0 leaves no pruned connections; meta-lth adaptation has nothing to train and scores as zero-shot");
  }
  for (const auto& w : summary.warnings) log << "warning: " << w << '\n';

  const TaskSource src = cfg.task_source();
  for (const auto& w : src.warnings) summary.warnings.push_back(w);
  std::filesystem::create_directories(cfg.out);

  std::ostringstream timing;
  timing << "seed,stage,wall_ms\n";
  for (std::uint64_t seed : cfg.seeds) {
    SeedOutcome outcome;
    outcome.seed = seed;
    try {
      run_seed(cfg, src, opts, outcome, timing);
    } catch (const Error& e) {
      outcome.error = e.what();
      outcome.error_kind = e.kind();
      log << "[seed " << seed << "] error: " << e.what() << '\n';
    } catch (const std::filesystem::filesystem_error& e) {
      outcome.error = e.what();
      outcome.error_kind = ErrorKind::Io;
      log << "[seed " << seed << "] error: " << e.what() << '\n';
    }
    summary.seeds.push_back(std::move(outcome));
  }

  const std::filesystem::path out(cfg.out);
  write_file((out / "timing.csv").string(), timing.str());
  write_file((out / "config.txt").string(), cfg.canonical_text());
  const bool any_eval = std::any_of(summary.seeds.begin(), summary.seeds.end(),
                                    [](const SeedOutcome& s) { return s.completed; });
  if (any_eval) {
    std::ostringstream eval;
    write_pipeline_eval(eval, summary);
    write_file((out / "eval.csv").string(), eval.str());
    std::ostringstream text;
    write_summary(text, cfg, summary);
    write_file((out / "summary.txt").string(), text.str());
  }
  return summary;
}

}  // namespace metalth
