#include "metalth/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "metalth/checkpoint.hpp"
#include "metalth/config.hpp"
#include "metalth/pipeline.hpp"

namespace metalth {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Usage:
    case ErrorKind::Pipeline:
      return 1;
    case ErrorKind::Dimension:
    case ErrorKind::Label:
    case ErrorKind::Alignment:
    case ErrorKind::Divergence:
      return 2;
    case ErrorKind::Io:
    case ErrorKind::Checkpoint:
      return 3;
  }
  return 2;
}

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> prune_pct;
  std::optional<std::string> scope;
  std::optional<std::string> mode;
  std::optional<std::string> out;
  std::string in;
  bool resume = false;
  bool force = false;
  bool average_tasks = false;
  std::string stop_after;
  std::map<std::string, std::string> keys;
};

void add_common(CLI::App& sub, Args& a, bool with_in) {
  sub.add_option("--config", a.config, "key = value config file");
  sub.add_option("--seed", a.seed, "run a single seed");
  sub.add_option("--prune-pct", a.prune_pct, "pruning percentage p in [0, 100)");
  sub.add_option("--scope", a.scope, "global or per-layer");
  sub.add_option("--mode", a.mode, "meta-lth, zero-shot, unpruned-only, classifier-only or full");
  sub.add_option("--out", a.out, "output directory");
  sub.add_flag("--average-tasks", a.average_tasks, "outer update uses the task mean instead of the sum");
  if (with_in) sub.add_option("--in", a.in, "input checkpoint");
  auto* group = sub.add_option_group("config keys", "every config key can be set as --<key> <value>");
  for (const auto& key : PipelineConfig::keys()) {
    if (key == "out") continue;
    group->add_option_function<std::string>("--" + key, [&a, key](const std::string& v) { a.keys[key] = v; });
  }
}

PipelineConfig build_config(const Args& a, std::ostream& err) {
  PipelineConfig cfg;
  if (!a.config.empty()) cfg.load_file(a.config);
  for (const auto& [key, value] : a.keys) cfg.set(key, value);
  if (a.seed) cfg.seeds = {*a.seed};
  if (a.prune_pct) cfg.set("prune.pct", *a.prune_pct);
  if (a.scope) cfg.set("prune.scope", *a.scope);
  if (a.mode) cfg.set("test.mode", *a.mode);
  if (a.out) cfg.out = *a.out;
  if (a.average_tasks) cfg.pretrain.average_tasks = cfg.retrain.average_tasks = true;
  cfg.validate();
  for (const auto& w : cfg.warnings()) err << "warning: " << w << '\n';
  return cfg;
}

std::string in_path(const Args& a, const PipelineConfig& cfg, const std::string& fallback) {
  if (!a.in.empty()) return a.in;
  return (std::filesystem::path(cfg.out) / fallback).string();
}

std::string out_file(const PipelineConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out) / name).string();
}

void note_hash(const Checkpoint& c, const PipelineConfig& cfg, std::ostream& err) {
  if (c.config_hash != cfg.hash()) err << "warning: checkpoint was produced under a different config\n";
}

void save_log(const PipelineConfig& cfg, const std::string& name, const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  write_train_log(os, log);
  write_file(out_file(cfg, name), os.str());
}

std::uint64_t single_seed(const PipelineConfig& cfg) {
  if (cfg.seeds.size() != 1) throw ConfigError("this subcommand runs one seed; pass --seed");
  return cfg.seeds.front();
}

int cmd_pretrain(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  const TaskSource src = cfg.task_source();
  err << "pretrain: " << cfg.pretrain.iterations << " iterations\n";
  StageRun run = run_pretrain(cfg, src, single_seed(cfg));
  const std::string path = out_file(cfg, "checkpoint_pretrain.bin");
  save_checkpoint(run.checkpoint, path);
  save_log(cfg, "pretrain_log.csv", run.log);
  out << path << '\n';
  return 0;
}

int cmd_prune(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  const Checkpoint in = load_checkpoint(in_path(a, cfg, "checkpoint_pretrain.bin"));
  note_hash(in, cfg, err);
  const Checkpoint pruned = run_prune(cfg, in);
  const std::string path = out_file(cfg, "checkpoint_prune.bin");
  save_checkpoint(pruned, path);
  out << path << '\n';
  return 0;
}

int cmd_retrain(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  const Checkpoint in = load_checkpoint(in_path(a, cfg, "checkpoint_prune.bin"));
  note_hash(in, cfg, err);
  const TaskSource src = cfg.task_source();
  err << "retrain: " << cfg.retrain.iterations << " iterations\n";
  StageRun run = run_retrain(cfg, src, in);
  const std::string path = out_file(cfg, "checkpoint_retrain.bin");
  save_checkpoint(run.checkpoint, path);
  save_log(cfg, "retrain_log.csv", run.log);
  out << path << '\n';
  return 0;
}

int cmd_metatest(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  const Checkpoint in = load_checkpoint(in_path(a, cfg, "checkpoint_retrain.bin"));
  note_hash(in, cfg, err);
  const TaskSource src = cfg.task_source();
  const EvalReport report = run_metatest(cfg, src, in);
  std::ostringstream csv;
  write_eval_csv(csv, {report});
  write_file(out_file(cfg, "eval.csv"), csv.str());
  out << to_string(report.mode) << " mean=" << format_number(report.mean) << " std=" << format_number(report.stddev)
      << '\n';
  return 0;
}

int cmd_ablate(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  const Checkpoint in = load_checkpoint(in_path(a, cfg, "checkpoint_retrain.bin"));
  note_hash(in, cfg, err);
  const TaskSource src = cfg.task_source();
  const AblationResult result = run_ablate(cfg, src, in);
  std::ostringstream csv;
  write_eval_csv(csv, result.reports);
  write_file(out_file(cfg, "ablation.csv"), csv.str());
  std::ostringstream deltas;
  write_delta_csv(deltas, result.layer_deltas);
  write_file(out_file(cfg, "deltas.csv"), deltas.str());
  for (const auto& r : result.reports)
    out << to_string(r.mode) << " mean=" << format_number(r.mean) << " std=" << format_number(r.stddev) << '\n';
  return 0;
}

int cmd_pipeline(const Args& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = build_config(a, err);
  PipelineOptions opts;
  opts.resume = a.resume;
  opts.force = a.force;
  if (!a.stop_after.empty()) opts.stop_after = parse_pipeline_stage(a.stop_after);
  opts.progress = &err;
  const PipelineSummary summary = run_pipeline(cfg, opts);
  int code = 0;
  bool any_eval = false;
  for (const auto& s : summary.seeds) {
    if (s.error_kind && code == 0) code = exit_code_for(*s.error_kind);
    any_eval = any_eval || s.completed;
  }
  if (any_eval) out << read_file(out_file(cfg, "summary.txt"));
  return code;
}

// Structural checks on one checkpoint. Returns the number of failures.
int cmd_verify(const Args& a, std::ostream& out, std::ostream& err) {
  if (a.in.empty()) throw ConfigError("verify needs --in <checkpoint>");
  const Checkpoint c = load_checkpoint(a.in);
  int failures = 0;
  auto check = [&](const std::string& name, bool ok) {
    out << "check " << name << ' ' << (ok ? "ok" : "FAIL") << '\n';
    if (!ok) ++failures;
  };

  out << "stage=" << to_string(c.current.stage) << '\n';
  out << "spec=" << c.spec().to_string() << '\n';
  out << "parameters=" << c.current.parameter_count() << '\n';

  bool finite = true;
  for (const auto& e : c.current.entries) finite = finite && e.tensor.all_finite();
  check("finite", finite);
  check("initial-aligned", c.initial.aligned_with(c.current));

  if (c.mask) {
    const Mask& m = *c.mask;
    check("mask-aligned", m.aligned_with(c.current));
    bool exempt = true;
    for (const auto& layer : m.layers) {
      if (layer.prunable) continue;
      for (auto b : layer.bits) exempt = exempt && b == (m.complemented ? 0 : 1);
    }
    check("exempt-entries", exempt);

    std::size_t expected = 0;
    if (m.scope == PruneScope::Global) {
      expected = prune_count(m.percent, m.prunable_count());
    } else {
      for (const auto& layer : m.layers)
        if (layer.prunable) expected += prune_count(m.percent, layer.bits.size());
    }
    if (!m.complemented) check("mask-count", m.prunable_zeros() == expected);

    bool pruned_zero = true;
    bool rewound = true;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      const auto& bits = m.layers[i].bits;
      const auto& cur = c.current.entries[i].tensor.values;
      const auto& init = c.initial.entries[i].tensor.values;
      for (std::size_t j = 0; j < bits.size(); ++j) {
        if (!bits[j]) pruned_zero = pruned_zero && cur[j] == 0.0f;
        if (bits[j] && c.current.stage == Stage::Pruned)
          rewound = rewound && std::bit_cast<std::uint32_t>(cur[j]) == std::bit_cast<std::uint32_t>(init[j]);
      }
    }
    check("pruned-zero", pruned_zero);
    if (c.current.stage == Stage::Pruned) check("rewound", rewound);
    out << "mask_percent=" << format_number(m.percent) << " scope=" << to_string(m.scope) << '\n';
  } else if (c.current.stage == Stage::Pruned || c.current.stage == Stage::Retrained) {
    check("mask-present", false);
  }

  const std::string data = read_file(a.in);
  const CheckpointLayout layout = checkpoint_layout(data);
  std::size_t total = layout.header_bytes;
  for (const auto& b : layout.blobs) total += b.bytes;
  check("layout", total == data.size());
  check("round-trip", serialize_checkpoint(c) == data);

  out << std::fixed << std::setprecision(3) << "sparsity=" << prunable_sparsity(c.current) << '\n';
  if (failures) err << failures << " invariant check(s) failed\n";
  return failures ? 2 : 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learning with lottery-ticket pruning", "metalth"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    bool with_in;
    int (*fn)(const Args&, std::ostream&, std::ostream&);
  };
  const Command commands[] = {
      {"pretrain", "dense FOMAML meta-training from a fresh initialization", false, cmd_pretrain},
      {"prune", "magnitude-prune a pretrained checkpoint and rewind survivors", true, cmd_prune},
      {"retrain", "FOMAML on the pruned subnetwork", true, cmd_retrain},
      {"metatest", "test-time adaptation and query accuracy", true, cmd_metatest},
      {"ablate", "evaluate every adaptation mode on one task stream", true, cmd_ablate},
      {"pipeline", "pretrain, prune, retrain and metatest for every seed", false, cmd_pipeline},
      {"verify", "check a checkpoint's invariants", true, cmd_verify},
  };
  std::map<std::string, Args> parsed;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    Args& a = parsed[cmd.name];
    add_common(*sub, a, cmd.with_in);
    if (std::string(cmd.name) == "pipeline") {
      sub->add_flag("--resume", a.resume, "continue from the latest checkpoint in --out");
      sub->add_flag("--force", a.force, "resume even if the config hash differs");
      sub->add_option("--stop-after", a.stop_after, "pretrain, prune, retrain or metatest");
    }
    subs[cmd.name] = sub;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto chosen = app.get_subcommands();
    out << (chosen.empty() ? app.help() : chosen.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return 1;
  }

  for (const auto& cmd : commands) {
    if (!subs[cmd.name]->parsed()) continue;
    try {
      return cmd.fn(parsed[cmd.name], out, err);
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
      err << "error: " << e.what() << '\n';
      return 3;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 2;
    }
  }
  return 1;
}

}  // namespace metalth
