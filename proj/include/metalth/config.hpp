#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metalth/fomaml.hpp"
#include "metalth/metatest.hpp"
#include "metalth/model.hpp"
#include "metalth/pruning.hpp"
#include "metalth/tasks.hpp"

namespace metalth {

/// Everything one pipeline run needs. Every field has a flat dotted key
/// (e.g. "pretrain.alpha") settable from a config file or a CLI flag.
struct PipelineConfig {
  // model
  Architecture arch = Architecture::MlpTiny;
  std::size_t width = 40;  // hidden units (mlp-tiny) or filters per block (conv4-tiny)

  // tasks
  GeneratorKind generator = GeneratorKind::Blobs;
  std::size_t dim = 8;
  float noise = 0.1f;
  float prototype_std = 0.5f;
  std::size_t train_classes = 64;
  std::size_t test_classes = 20;
  float flip_noise = 0.05f;
  int max_shift = 3;
  std::string data_path;
  bool rotations = false;
  std::uint64_t data_seed = 1234;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;

  MetaTrainConfig pretrain = default_phase(2000);
  MetaTrainConfig retrain = default_phase(600);

  double prune_pct = 90.0;
  PruneScope scope = PruneScope::Global;

  TestConfig test;

  std::vector<std::uint64_t> seeds = {0};
  std::string out = "out";

  static MetaTrainConfig default_phase(std::size_t iterations) {
    MetaTrainConfig c;
    c.iterations = iterations;
    return c;
  }

  /// Sets one key from its text form; unknown keys and bad values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Reads `key = value` lines; '#' starts a comment.
  void load_file(const std::string& path);
  void validate() const;
  /// Returns advisory warnings (e.g. retrain budget above pretrain budget).
  std::vector<std::string> warnings() const;

  /// Sorted `key = value` lines for every key.
  std::string canonical_text() const;
  /// Hash of every key that affects results (excludes `out` and `seeds`).
  std::uint64_t hash() const;

  NetworkSpec network_spec() const;
  TaskSource task_source() const;
  MetaTrainConfig pretrain_config(std::uint64_t seed) const;
  MetaTrainConfig retrain_config(std::uint64_t seed, const Mask& mask) const;
  TestConfig test_config() const;
};

/// Formats with 6 significant digits.
std::string format_number(double value);

}  // namespace metalth
