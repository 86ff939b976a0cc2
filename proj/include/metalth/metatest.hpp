#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "metalth/model.hpp"
#include "metalth/pruning.hpp"
#include "metalth/random.hpp"
#include "metalth/tasks.hpp"

namespace metalth {

/// Which coordinates may move during test-time adaptation.
enum class AdaptMode {
  MetaLth,         // re-opened (pruned) connections only: complement of M
  ZeroShot,        // no adaptation
  UnprunedOnly,    // surviving connections only: M
  ClassifierOnly,  // classifier weights and bias
  Full,            // everything
};

std::string to_string(AdaptMode mode);
AdaptMode parse_mode(const std::string& text);

struct TestConfig {
  float lr = 0.01f;
  std::size_t steps = 10;
  std::size_t tasks = 100;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;
  AdaptMode mode = AdaptMode::MetaLth;

  void validate() const;
};

/// Gradient mask G for a mode. `mask` is the pruning mask M; it is only
/// consulted by meta-lth and unpruned-only.
Mask gradient_mask(const ParamSet& params, const Mask& mask, AdaptMode mode);

/// `steps` descent steps theta <- theta - lr * (grad L * G). Coordinates with
/// G = 0 come back bit-identical.
ParamSet adapt_test(const ParamSet& trained, const Mask& mask, const Batch& support, const TestConfig& cfg);

struct LayerDelta {
  std::string layer;
  double mean_delta_l2 = 0.0;
};

struct EvalReport {
  AdaptMode mode = AdaptMode::MetaLth;
  TestConfig config;
  std::vector<double> task_accuracy;
  std::vector<std::uint64_t> task_fingerprint;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across tasks
  std::vector<LayerDelta> layer_deltas;  // ||theta*' - theta*||_2 per layer, averaged over tasks
};

/// Per task: adapt a fresh copy of `trained` on the support set, score the
/// query set, discard the copy. Tasks come from the test split.
EvalReport evaluate(const ParamSet& trained, const Mask& mask, const TaskSource& src, const TestConfig& cfg,
                    Rng& rng);

struct AblationResult {
  std::vector<EvalReport> reports;  // zero-shot, unpruned-only, classifier-only, meta-lth
  std::vector<LayerDelta> layer_deltas;  // from the meta-lth run
};

/// Runs every ablation mode over the same task stream, seeded by `seed`.
AblationResult run_ablations(const ParamSet& trained, const Mask& mask, const TaskSource& src,
                             const TestConfig& cfg, std::uint64_t seed);

/// CSV writers; numbers use 6 significant digits.
void write_eval_csv(std::ostream& os, const std::vector<EvalReport>& reports, bool header = true);
void write_delta_csv(std::ostream& os, const std::vector<LayerDelta>& deltas);

}  // namespace metalth
