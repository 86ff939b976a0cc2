#include "metalth/metatest.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>

namespace metalth {

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::MetaLth: return "meta-lth";
    case AdaptMode::ZeroShot: return "zero-shot";
    case AdaptMode::UnprunedOnly: return "unpruned-only";
    case AdaptMode::ClassifierOnly: return "classifier-only";
    case AdaptMode::Full: return "full";
  }
  return "unknown";
}

AdaptMode parse_mode(const std::string& text) {
  for (AdaptMode m : {AdaptMode::MetaLth, AdaptMode::ZeroShot, AdaptMode::UnprunedOnly,
                      AdaptMode::ClassifierOnly, AdaptMode::Full}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown adaptation mode '" + text + "'");
}

void TestConfig::validate() const {
  if (lr < 0.0f || !std::isfinite(lr)) throw ConfigError("test learning rate must be finite and non-negative");
  if (tasks == 0) throw ConfigError("test task count must be positive");
  if (way == 0 || shot == 0 || query == 0) throw ConfigError("way, shot and query must be positive");
}

Mask gradient_mask(const ParamSet& params, const Mask& mask, AdaptMode mode) {
  switch (mode) {
    case AdaptMode::MetaLth:
    case AdaptMode::UnprunedOnly:
      if (!mask.aligned_with(params)) throw AlignmentError("pruning mask not aligned with parameters");
      return mode == AdaptMode::MetaLth ? complement(mask) : mask;
    case AdaptMode::ZeroShot: {
      Mask g = all_ones_mask(params);
      for (auto& l : g.layers) std::fill(l.bits.begin(), l.bits.end(), 0);
      return g;
    }
    case AdaptMode::ClassifierOnly: {
      Mask g = all_ones_mask(params);
      for (std::size_t i = 0; i < g.layers.size(); ++i)
        std::fill(g.layers[i].bits.begin(), g.layers[i].bits.end(), params.entries[i].classifier ? 1 : 0);
      return g;
    }
    case AdaptMode::Full:
      return all_ones_mask(params);
  }
  throw ConfigError("unknown adaptation mode");
}

namespace {

void check_test_stage(const ParamSet& trained) {
  if (trained.stage != Stage::Retrained && trained.stage != Stage::Pretrained) {
    throw PipelineError("meta-test needs trained parameters, got stage '" + to_string(trained.stage) + "'");
  }
}

ParamSet adapt_with(const ParamSet& trained, const Mask& grad_mask, const Batch& support,
                    const TestConfig& cfg) {
  ParamSet theta = trained;
  theta.stage = Stage::TestAdapted;
  const std::size_t steps = cfg.mode == AdaptMode::ZeroShot ? 0 : cfg.steps;
  for (std::size_t step = 0; step < steps; ++step) {
    LossGrad lg;
    try {
      lg = loss_and_grad(theta, support);
    } catch (const NumericError& e) {
      throw DivergenceError(step, e.what());
    }
    if (!std::isfinite(lg.loss)) throw DivergenceError(step, "non-finite loss during test adaptation");
    for (std::size_t i = 0; i < theta.entries.size(); ++i) {
      auto& v = theta.entries[i].tensor.values;
      const auto& bits = grad_mask.layers[i].bits;
      for (std::size_t j = 0; j < v.size(); ++j)
        if (bits[j]) v[j] -= cfg.lr * lg.grads[i][j];
    }
  }
  return theta;
}

}  // namespace

ParamSet adapt_test(const ParamSet& trained, const Mask& mask, const Batch& support, const TestConfig& cfg) {
  check_test_stage(trained);
  return adapt_with(trained, gradient_mask(trained, mask, cfg.mode), support, cfg);
}

EvalReport evaluate(const ParamSet& trained, const Mask& mask, const TaskSource& src, const TestConfig& cfg,
                    Rng& rng) {
  cfg.validate();
  check_test_stage(trained);
  if (src.regression()) throw ConfigError("query accuracy is undefined for regression task sources");
  if (src.test_classes.empty()) throw ConfigError("test split has no classes");
  const Mask grad_mask = gradient_mask(trained, mask, cfg.mode);

  EvalReport report;
  report.mode = cfg.mode;
  report.config = cfg;
  std::vector<std::string> layers;
  std::map<std::string, double> delta_sum;
  for (const auto& e : trained.entries) {
    if (delta_sum.emplace(e.layer, 0.0).second) layers.push_back(e.layer);
  }

  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    const Task task = sample_task(src, Split::Test, cfg.way, cfg.shot, cfg.query, rng);
    const ParamSet adapted = adapt_with(trained, grad_mask, task.support, cfg);
    const Forward fwd = predict(adapted, task.query.inputs);
    report.task_accuracy.push_back(accuracy(fwd.output(), task.query.labels));
    report.task_fingerprint.push_back(task.fingerprint());

    std::map<std::string, double> sq;
    for (std::size_t i = 0; i < trained.entries.size(); ++i) {
      const auto& a = adapted.entries[i].tensor.values;
      const auto& b = trained.entries[i].tensor.values;
      double s = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = static_cast<double>(a[j]) - b[j];
        s += d * d;
      }
      sq[trained.entries[i].layer] += s;
    }
    for (const auto& [layer, s] : sq) delta_sum[layer] += std::sqrt(s);
  }

  const double n = static_cast<double>(cfg.tasks);
  for (double a : report.task_accuracy) report.mean += a;
  report.mean /= n;
  if (cfg.tasks > 1) {
    double ss = 0.0;
    for (double a : report.task_accuracy) ss += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(ss / (n - 1.0));
  }
  for (const auto& layer : layers) report.layer_deltas.push_back({layer, delta_sum[layer] / n});
  return report;
}

AblationResult run_ablations(const ParamSet& trained, const Mask& mask, const TaskSource& src,
                             const TestConfig& cfg, std::uint64_t seed) {
  AblationResult result;
  for (AdaptMode mode : {AdaptMode::ZeroShot, AdaptMode::UnprunedOnly, AdaptMode::ClassifierOnly,
                         AdaptMode::MetaLth}) {
    TestConfig mode_cfg = cfg;
    mode_cfg.mode = mode;
    Rng rng(seed);
    result.reports.push_back(evaluate(trained, mask, src, mode_cfg, rng));
  }
  result.layer_deltas = result.reports.back().layer_deltas;
  return result;
}

void write_eval_csv(std::ostream& os, const std::vector<EvalReport>& reports, bool header) {
  os << std::setprecision(6);
  if (header) os << "mode,task_index,accuracy\n";
  for (const auto& r : reports) {
    const std::string mode = to_string(r.mode);
    for (std::size_t i = 0; i < r.task_accuracy.size(); ++i) os << mode << ',' << i << ',' << r.task_accuracy[i] << '\n';
    os << mode << ",mean," << r.mean << '\n';
    os << mode << ",std," << r.stddev << '\n';
  }
}

void write_delta_csv(std::ostream& os, const std::vector<LayerDelta>& deltas) {
  os << std::setprecision(6) << "layer,mean_delta_l2\n";
  for (const auto& d : deltas) os << d.layer << ',' << d.mean_delta_l2 << '\n';
}

}  // namespace metalth
