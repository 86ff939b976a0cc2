#include "metalth/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <utility>

namespace metalth {

std::string to_string(Architecture arch) {
  return arch == Architecture::Conv4Tiny ? "conv4-tiny" : "mlp-tiny";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "conv4-tiny") return Architecture::Conv4Tiny;
  if (text == "mlp-tiny") return Architecture::MlpTiny;
  throw ConfigError("unknown architecture '" + text + "' (expected conv4-tiny or mlp-tiny)");
}

NetworkSpec NetworkSpec::conv4_tiny(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t classes, std::size_t filters) {
  NetworkSpec s;
  s.arch = Architecture::Conv4Tiny;
  s.input_shape = {channels, height, width};
  s.classes = classes;
  s.widths.assign(4, filters);
  s.validate();
  return s;
}

NetworkSpec NetworkSpec::mlp_tiny(std::size_t input_dim, std::size_t classes, std::size_t width) {
  NetworkSpec s;
  s.arch = Architecture::MlpTiny;
  s.input_shape = {input_dim};
  s.classes = classes;
  s.widths.assign(2, width);
  s.validate();
  return s;
}

void NetworkSpec::validate() const {
  const bool conv = arch == Architecture::Conv4Tiny;
  if (input_shape.size() != (conv ? 3u : 1u)) {
    throw ConfigError(metalth::to_string(arch) + ": input shape " + shape_to_string(input_shape) +
                      " has the wrong rank");
  }
  if (widths.size() != (conv ? 4u : 2u)) {
    throw ConfigError(metalth::to_string(arch) + ": expected " + std::to_string(conv ? 4 : 2) +
                      " layer widths, got " + std::to_string(widths.size()));
  }
  if (classes == 0) throw ConfigError("output dimension must be positive");
  for (std::size_t e : input_shape)
    if (e == 0) throw ConfigError("input extents must be positive");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("layer widths must be positive");
}

std::string NetworkSpec::to_string() const {
  std::ostringstream os;
  os << metalth::to_string(arch) << " in=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
  os << " out=" << classes << " widths=";
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
  os << " loss=" << (regression ? "mse" : "ce");
  return os.str();
}

namespace {

std::vector<std::size_t> parse_extents(const std::string& text, char sep) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad extent '" + item + "' in network spec");
    }
  }
  return out;
}

}  // namespace

NetworkSpec NetworkSpec::parse(const std::string& text) {
  std::istringstream is(text);
  std::string arch_text;
  is >> arch_text;
  NetworkSpec s;
  s.arch = parse_architecture(arch_text);
  std::string field;
  bool have_in = false, have_out = false, have_widths = false;
  while (is >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed network spec field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "in") {
      s.input_shape = parse_extents(value, 'x');
      have_in = true;
    } else if (key == "out") {
      const auto v = parse_extents(value, ',');
      if (v.size() != 1) throw ConfigError("malformed output dimension '" + value + "'");
      s.classes = v[0];
      have_out = true;
    } else if (key == "widths") {
      s.widths = parse_extents(value, ',');
      have_widths = true;
    } else if (key == "loss") {
      if (value != "ce" && value != "mse") throw ConfigError("unknown loss '" + value + "'");
      s.regression = value == "mse";
    } else {
      throw ConfigError("unknown network spec field '" + key + "'");
    }
  }
  if (!have_in || !have_out || !have_widths) throw ConfigError("incomplete network spec '" + text + "'");
  s.validate();
  return s;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Initial: return "initial";
    case Stage::Pretrained: return "pretrained";
    case Stage::Adapted: return "adapted";
    case Stage::Pruned: return "pruned";
    case Stage::Retrained: return "retrained";
    case Stage::TestAdapted: return "test-adapted";
  }
  return "unknown";
}

Stage parse_stage(const std::string& text) {
  for (Stage s : {Stage::Initial, Stage::Pretrained, Stage::Adapted, Stage::Pruned,
                  Stage::Retrained, Stage::TestAdapted}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown stage '" + text + "'");
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.tensor.size();
  return n;
}

bool ParamSet::aligned_with(const ParamSet& other) const {
  if (entries.size() != other.entries.size()) return false;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name() != other.entries[i].name() ||
        entries[i].tensor.shape != other.entries[i].tensor.shape)
      return false;
  }
  return true;
}

const ParamEntry& ParamSet::entry(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name() == name) return e;
  throw UsageError("no parameter named '" + name + "'");
}

ParamEntry& ParamSet::entry(const std::string& name) {
  return const_cast<ParamEntry&>(std::as_const(*this).entry(name));
}

namespace {

struct LayerShape {
  std::string name;
  Shape weight;
  Shape bias;
  std::size_t fan_in;
  bool classifier;
};

std::size_t pooled(std::size_t extent) { return (extent + 1) / 2; }

std::vector<LayerShape> layer_shapes(const NetworkSpec& spec) {
  std::vector<LayerShape> layers;
  if (spec.arch == Architecture::Conv4Tiny) {
    std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t f = spec.widths[i];
      layers.push_back({"conv" + std::to_string(i + 1), {f, c, 3, 3}, {f}, c * 9, false});
      c = f;
      h = pooled(h);
      w = pooled(w);
    }
    const std::size_t features = c * h * w;
    layers.push_back({"classifier", {features, spec.classes}, {spec.classes}, features, true});
  } else {
    std::size_t in = spec.input_shape[0];
    for (std::size_t i = 0; i < 2; ++i) {
      layers.push_back({"fc" + std::to_string(i + 1), {in, spec.widths[i]}, {spec.widths[i]}, in, false});
      in = spec.widths[i];
    }
    layers.push_back({"classifier", {in, spec.classes}, {spec.classes}, in, true});
  }
  return layers;
}

}  // namespace

ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamSet params;
  params.spec = spec;
  params.stage = Stage::Initial;
  std::mt19937_64 rng(seed);
  for (const LayerShape& layer : layer_shapes(spec)) {
    const float bound = std::sqrt(6.0f / static_cast<float>(layer.fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    Tensor w(layer.weight);
    for (float& v : w.values) v = dist(rng);
    params.entries.push_back({layer.name, ParamKind::Weight, layer.classifier, std::move(w)});
    params.entries.push_back({layer.name, ParamKind::Bias, layer.classifier, Tensor(layer.bias)});
  }
  return params;
}

Forward predict(const ParamSet& params, const Tensor& inputs) {
  const NetworkSpec& spec = params.spec;
  if (inputs.rank() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), inputs.shape.begin() + 1)) {
    throw DimensionError("predict: input batch " + shape_to_string(inputs.shape) +
                         " does not match network input " + shape_to_string(spec.input_shape));
  }
  Forward fwd;
  Graph& g = fwd.graph;
  for (const auto& e : params.entries) fwd.param_nodes.push_back(g.leaf(e.tensor));
  const std::size_t n = inputs.shape[0];
  NodeId x = g.constant(inputs);
  const std::size_t hidden_layers = params.entries.size() / 2 - 1;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    const NodeId w = fwd.param_nodes[2 * l], b = fwd.param_nodes[2 * l + 1];
    if (spec.arch == Architecture::Conv4Tiny) {
      x = g.maxpool2(g.relu(g.conv2d(x, w, b)));
    } else {
      x = g.relu(g.add_row_bias(g.matmul(x, w), b));
    }
  }
  if (spec.arch == Architecture::Conv4Tiny) {
    x = g.reshape(x, {n, g.tensor(x).size() / n});
  }
  const NodeId w = fwd.param_nodes[2 * hidden_layers], b = fwd.param_nodes[2 * hidden_layers + 1];
  fwd.logits = g.add_row_bias(g.matmul(x, w), b);
  return fwd;
}

LossEval task_loss(const ParamSet& params, const Batch& data) {
  LossEval eval{predict(params, data.inputs), 0};
  Graph& g = eval.forward.graph;
  if (params.spec.regression) {
    eval.loss = g.mse(eval.forward.logits, data.targets);
  } else {
    eval.loss = g.softmax_cross_entropy(eval.forward.logits, data.labels);
  }
  return eval;
}

LossGrad loss_and_grad(const ParamSet& params, const Batch& data) {
  LossEval eval = task_loss(params, data);
  eval.forward.graph.backward(eval.loss);
  LossGrad out;
  out.loss = eval.value();
  if (!params.spec.regression) out.accuracy = accuracy(eval.forward.output(), data.labels);
  out.grads.reserve(params.entries.size());
  for (NodeId id : eval.forward.param_nodes) out.grads.push_back(std::move(eval.forward.graph.tensor(id).grad));
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.shape.at(0), c = logits.shape.at(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = &logits.values[i * c];
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

float accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.empty()) return 0.0f;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<float>(hits) / static_cast<float>(pred.size());
}

template <typename T>
PrunableView<T>::PrunableView(std::vector<Segment> segments) : segments_(std::move(segments)) {
  for (const auto& s : segments_) {
    starts_.push_back(size_);
    size_ += s.values.size();
  }
}

template <typename T>
T& PrunableView<T>::operator[](std::size_t i) const {
  const auto it = std::upper_bound(starts_.begin(), starts_.end(), i);
  const std::size_t seg = static_cast<std::size_t>(it - starts_.begin()) - 1;
  return segments_[seg].values[i - starts_[seg]];
}

template class PrunableView<float>;
template class PrunableView<const float>;

PrunableView<float> flatten_prunable(ParamSet& params) {
  std::vector<PrunableView<float>::Segment> segs;
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    if (e.prunable()) segs.push_back({i, std::span<float>(e.tensor.values)});
  }
  return PrunableView<float>(std::move(segs));
}

PrunableView<const float> flatten_prunable(const ParamSet& params) {
  std::vector<PrunableView<const float>::Segment> segs;
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    const auto& e = params.entries[i];
    if (e.prunable()) segs.push_back({i, std::span<const float>(e.tensor.values)});
  }
  return PrunableView<const float>(std::move(segs));
}

}  // namespace metalth
