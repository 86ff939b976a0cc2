#include "metalth/fomaml.hpp"

#include <chrono>
#include <cmath>

namespace metalth {

void MetaTrainConfig::validate() const {
  if (!(alpha > 0.0f)) throw ConfigError("inner learning rate must be positive");
  if (!(beta > 0.0f)) throw ConfigError("outer learning rate must be positive");
  if (task_batch == 0) throw ConfigError("task batch size must be at least 1");
  if (inner_steps == 0) throw ConfigError("inner steps must be at least 1");
  if (way == 0 || shot == 0 || query == 0) throw ConfigError("way, shot and query must be positive");
}

namespace {

LossGrad checked_loss_and_grad(const ParamSet& params, const Batch& data, std::size_t step) {
  LossGrad lg;
  try {
    lg = loss_and_grad(params, data);
  } catch (const NumericError& e) {
    throw DivergenceError(step, e.what());
  }
  if (!std::isfinite(lg.loss)) throw DivergenceError(step, "non-finite loss");
  return lg;
}

void descend(ParamSet& params, const ParamGrads& grads, float lr) {
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto& v = params.entries[i].tensor.values;
    const auto& g = grads[i];
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * g[j];
  }
}

void check_inner_stage(const ParamSet& theta) {
  if (theta.stage != Stage::Initial && theta.stage != Stage::Pruned && theta.stage != Stage::Retrained) {
    throw PipelineError("inner adaptation cannot start from stage '" + to_string(theta.stage) + "'");
  }
}

ParamSet adapt(const ParamSet& theta, const Batch& support, float alpha, std::size_t steps, const Mask* mask) {
  ParamSet phi = theta;
  phi.stage = Stage::Adapted;
  if (alpha == 0.0f) return phi;
  for (std::size_t step = 0; step < steps; ++step) {
    LossGrad lg = checked_loss_and_grad(phi, support, step);
    if (mask) apply_gradient_mask(lg.grads, *mask);
    descend(phi, lg.grads, alpha);
  }
  return phi;
}

}  // namespace

AdaptResult inner_adapt(const ParamSet& theta, const Batch& support, float alpha, std::size_t steps,
                        const Mask* mask) {
  check_inner_stage(theta);
  if (mask && !mask->aligned_with(theta)) throw AlignmentError("inner_adapt: mask not aligned with parameters");
  AdaptResult r;
  r.adapted = adapt(theta, support, alpha, steps, mask);
  LossGrad lg = checked_loss_and_grad(r.adapted, support, steps);
  if (mask) apply_gradient_mask(lg.grads, *mask);
  r.final_grad = std::move(lg.grads);
  return r;
}

OuterResult outer_update(const ParamSet& theta, std::span<const Task> tasks, const MetaTrainConfig& cfg) {
  if (tasks.size() != cfg.task_batch) {
    throw ConfigError("outer_update: expected " + std::to_string(cfg.task_batch) + " tasks, got " +
                      std::to_string(tasks.size()));
  }
  check_inner_stage(theta);
  const Mask* mask = cfg.mask ? &*cfg.mask : nullptr;
  if (mask && !mask->aligned_with(theta)) throw AlignmentError("outer_update: mask not aligned with parameters");

  ParamGrads total;
  for (const auto& e : theta.entries) total.emplace_back(e.tensor.size(), 0.0f);
  OuterResult out;
  for (const Task& task : tasks) {
    const ParamSet phi = adapt(theta, task.support, cfg.alpha, cfg.inner_steps, mask);
    LossGrad lg = checked_loss_and_grad(phi, task.query, cfg.inner_steps);
    if (mask) apply_gradient_mask(lg.grads, *mask);
    for (std::size_t i = 0; i < total.size(); ++i)
      for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += lg.grads[i][j];
    out.mean_query_loss += lg.loss;
    out.mean_query_accuracy += lg.accuracy;
  }
  const double n = static_cast<double>(tasks.size());
  out.mean_query_loss /= n;
  out.mean_query_accuracy /= n;
  const float lr = cfg.average_tasks ? cfg.beta / static_cast<float>(tasks.size()) : cfg.beta;
  out.updated = theta;
  descend(out.updated, total, lr);
  return out;
}

TrainResult meta_train(const ParamSet& theta, const TaskSource& src, const MetaTrainConfig& cfg, Rng& rng) {
  cfg.validate();
  TrainResult result;
  result.params = theta;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<Task> batch;
    batch.reserve(cfg.task_batch);
    for (std::size_t i = 0; i < cfg.task_batch; ++i)
      batch.push_back(sample_task(src, Split::Train, cfg.way, cfg.shot, cfg.query, rng));
    OuterResult step;
    try {
      step = outer_update(result.params, batch, cfg);
    } catch (const DivergenceError& e) {
      throw MetaTrainDivergence(it, e.what(), result.params);
    }
    result.params = std::move(step.updated);
    const auto stop = std::chrono::steady_clock::now();
    TrainLogRow row;
    row.iteration = it;
    row.mean_query_loss = step.mean_query_loss;
    row.mean_query_accuracy = step.mean_query_accuracy;
    row.prunable_sparsity = prunable_sparsity(result.params);
    row.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    result.log.push_back(row);
  }
  result.params.stage = cfg.mask ? Stage::Retrained : Stage::Pretrained;
  return result;
}

TrainResult meta_train(const ParamSet& theta, const TaskSource& src, const MetaTrainConfig& cfg) {
  Rng rng(cfg.seed);
  return meta_train(theta, src, cfg, rng);
}

}  // namespace metalth
