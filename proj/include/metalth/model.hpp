#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metalth/autodiff.hpp"

namespace metalth {

enum class Architecture { Conv4Tiny, MlpTiny };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& text);

/// Layer topology. conv4-tiny: four (conv3x3 -> ReLU -> maxpool2) blocks and
/// a dense classifier. mlp-tiny: two ReLU hidden layers and a dense
/// classifier. `widths` holds the 4 filter counts or the 2 hidden widths.
struct NetworkSpec {
  Architecture arch = Architecture::MlpTiny;
  Shape input_shape;            // {d} for mlp-tiny, {c, h, w} for conv4-tiny
  std::size_t classes = 5;      // output dimension
  std::vector<std::size_t> widths;
  bool regression = false;      // mse against targets instead of cross-entropy

  static NetworkSpec conv4_tiny(std::size_t channels, std::size_t height, std::size_t width,
                                std::size_t classes, std::size_t filters = 8);
  static NetworkSpec mlp_tiny(std::size_t input_dim, std::size_t classes, std::size_t width = 40);

  void validate() const;
  /// Canonical one-line form, e.g. "mlp-tiny in=8 out=5 widths=40,40 loss=ce".
  std::string to_string() const;
  static NetworkSpec parse(const std::string& text);

  bool operator==(const NetworkSpec&) const = default;
};

enum class ParamKind { Weight, Bias };

/// Pipeline position of a parameter set.
enum class Stage { Initial, Pretrained, Adapted, Pruned, Retrained, TestAdapted };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct ParamEntry {
  std::string layer;
  ParamKind kind = ParamKind::Weight;
  bool classifier = false;
  Tensor tensor;

  std::string name() const { return layer + (kind == ParamKind::Weight ? ".weight" : ".bias"); }
  bool prunable() const { return kind == ParamKind::Weight && !classifier; }
};

/// Ordered parameters of one network. Entry order is fixed by the spec:
/// for every layer, weight then bias.
struct ParamSet {
  NetworkSpec spec;
  Stage stage = Stage::Initial;
  std::vector<ParamEntry> entries;

  std::size_t parameter_count() const;
  bool aligned_with(const ParamSet& other) const;
  const ParamEntry& entry(const std::string& name) const;
  ParamEntry& entry(const std::string& name);
};

/// Per-entry gradients, aligned with ParamSet::entries.
using ParamGrads = std::vector<std::vector<float>>;

/// A labeled batch. Classification uses `labels`; regression uses `targets`
/// ([n x out]). `source_class` records the generator class of each row.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
  Tensor targets;
  std::vector<int> source_class;

  std::size_t size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
};

ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Forward pass. The graph is retained so callers can run backward().
struct Forward {
  Graph graph;
  std::vector<NodeId> param_nodes;  // aligned with ParamSet::entries
  NodeId logits = 0;

  const Tensor& output() const { return graph.tensor(logits); }
};

Forward predict(const ParamSet& params, const Tensor& inputs);

struct LossEval {
  Forward forward;
  NodeId loss = 0;

  float value() const { return forward.graph.tensor(loss).values[0]; }
};

/// Cross-entropy for classification specs, mse for regression specs.
LossEval task_loss(const ParamSet& params, const Batch& data);

struct LossGrad {
  float loss = 0.0f;
  float accuracy = 0.0f;  // 0 for regression
  ParamGrads grads;
};

/// task_loss followed by backward; gradients copied out per entry.
LossGrad loss_and_grad(const ParamSet& params, const Batch& data);

/// Row-wise argmax, first index on ties.
std::vector<int> argmax_rows(const Tensor& logits);
float accuracy(const Tensor& logits, std::span<const int> labels);

/// Ordered references to every prunable weight (non-classifier weights, in
/// entry order then row-major). Mutating through a mutable view writes the
/// underlying ParamSet.
template <typename T>
class PrunableView {
 public:
  struct Segment {
    std::size_t entry;
    std::span<T> values;
  };

  explicit PrunableView(std::vector<Segment> segments);

  std::size_t size() const noexcept { return size_; }
  T& operator[](std::size_t i) const;
  const std::vector<Segment>& segments() const noexcept { return segments_; }

 private:
  std::vector<Segment> segments_;
  std::vector<std::size_t> starts_;
  std::size_t size_ = 0;
};

PrunableView<float> flatten_prunable(ParamSet& params);
PrunableView<const float> flatten_prunable(const ParamSet& params);

}  // namespace metalth
