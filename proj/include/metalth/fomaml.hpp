#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "metalth/model.hpp"
#include "metalth/pruning.hpp"
#include "metalth/random.hpp"
#include "metalth/tasks.hpp"

namespace metalth {

struct MetaTrainConfig {
  float alpha = 0.4f;    // inner learning rate
  float beta = 0.001f;   // outer learning rate
  std::size_t inner_steps = 1;
  std::size_t task_batch = 32;
  std::size_t iterations = 0;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;
  bool average_tasks = false;  // mean instead of sum over the task batch
  std::optional<Mask> mask;    // gradient mask; pruned coordinates never move
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptResult {
  ParamSet adapted;
  ParamGrads final_grad;  // masked support gradient at the adapted point
};

/// `steps` full-batch descent steps on the support set,
/// phi <- phi - alpha * (grad L(phi) * mask). `theta` is left untouched.
AdaptResult inner_adapt(const ParamSet& theta, const Batch& support, float alpha, std::size_t steps,
                        const Mask* mask = nullptr);

struct OuterResult {
  ParamSet updated;
  double mean_query_loss = 0.0;
  double mean_query_accuracy = 0.0;
};

/// First-order meta-update: theta' = theta - beta * sum_i grad L(phi_i, query_i) * mask,
/// reduced in task order.
OuterResult outer_update(const ParamSet& theta, std::span<const Task> tasks, const MetaTrainConfig& cfg);

struct TrainLogRow {
  std::size_t iteration = 0;
  double mean_query_loss = 0.0;
  double mean_query_accuracy = 0.0;
  double prunable_sparsity = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  ParamSet params;
  std::vector<TrainLogRow> log;
};

/// Raised by meta_train; carries the parameters from the last completed
/// iteration so the caller can checkpoint them.
class MetaTrainDivergence : public DivergenceError {
 public:
  MetaTrainDivergence(std::size_t iteration, const std::string& what, ParamSet last_good)
      : DivergenceError(iteration, what), last_good_(std::move(last_good)) {}

  const ParamSet& last_good() const noexcept { return last_good_; }

 private:
  ParamSet last_good_;
};

/// Runs cfg.iterations outer updates on fresh task batches from the train
/// split. Output stage is `retrained` when a mask is set, else `pretrained`.
TrainResult meta_train(const ParamSet& theta, const TaskSource& src, const MetaTrainConfig& cfg, Rng& rng);
TrainResult meta_train(const ParamSet& theta, const TaskSource& src, const MetaTrainConfig& cfg);

}  // namespace metalth
