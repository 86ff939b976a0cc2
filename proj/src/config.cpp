#include "metalth/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace metalth {

std::string format_number(double value) {
  std::ostringstream os;
  os << std::setprecision(6) << value;
  return os.str();
}

namespace {

template <typename T>
std::string exact(T v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("bad value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("bad boolean '" + text + "' for " + key);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field number_field(T PipelineConfig::*member) {
  return {[member](const PipelineConfig& c) { return exact(c.*member); },
          [member](PipelineConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); }};
}

template <typename T>
Field phase_field(MetaTrainConfig PipelineConfig::*phase, T MetaTrainConfig::*member) {
  return {[=](const PipelineConfig& c) { return exact((c.*phase).*member); },
          [=](PipelineConfig& c, const std::string& k, const std::string& v) { (c.*phase).*member = parse_number<T>(k, v); }};
}

template <typename T>
Field test_field(T TestConfig::*member) {
  return {[=](const PipelineConfig& c) { return exact(c.test.*member); },
          [=](PipelineConfig& c, const std::string& k, const std::string& v) { c.test.*member = parse_number<T>(k, v); }};
}

void add_phase(std::map<std::string, Field>& f, const std::string& prefix, MetaTrainConfig PipelineConfig::*phase) {
  f[prefix + ".alpha"] = phase_field(phase, &MetaTrainConfig::alpha);
  f[prefix + ".beta"] = phase_field(phase, &MetaTrainConfig::beta);
  f[prefix + ".inner_steps"] = phase_field(phase, &MetaTrainConfig::inner_steps);
  f[prefix + ".batch"] = phase_field(phase, &MetaTrainConfig::task_batch);
  f[prefix + ".iterations"] = phase_field(phase, &MetaTrainConfig::iterations);
  f[prefix + ".average_tasks"] = {
      [=](const PipelineConfig& c) { return std::string((c.*phase).average_tasks ? "true" : "false"); },
      [=](PipelineConfig& c, const std::string& k, const std::string& v) { (c.*phase).average_tasks = parse_bool(k, v); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["model.arch"] = {[](const PipelineConfig& c) { return to_string(c.arch); },
                       [](PipelineConfig& c, const std::string&, const std::string& v) { c.arch = parse_architecture(v); }};
    f["model.width"] = number_field(&PipelineConfig::width);

    f["task.kind"] = {[](const PipelineConfig& c) { return to_string(c.generator); },
                      [](PipelineConfig& c, const std::string&, const std::string& v) { c.generator = parse_generator(v); }};
    f["task.dim"] = number_field(&PipelineConfig::dim);
    f["task.noise"] = number_field(&PipelineConfig::noise);
    f["task.prototype_std"] = number_field(&PipelineConfig::prototype_std);
    f["task.train_classes"] = number_field(&PipelineConfig::train_classes);
    f["task.test_classes"] = number_field(&PipelineConfig::test_classes);
    f["task.flip_noise"] = number_field(&PipelineConfig::flip_noise);
    f["task.max_shift"] = number_field(&PipelineConfig::max_shift);
    f["task.path"] = {[](const PipelineConfig& c) { return c.data_path; },
                      [](PipelineConfig& c, const std::string&, const std::string& v) { c.data_path = v; }};
    f["task.rotations"] = {[](const PipelineConfig& c) { return std::string(c.rotations ? "true" : "false"); },
                           [](PipelineConfig& c, const std::string& k, const std::string& v) { c.rotations = parse_bool(k, v); }};
    f["task.seed"] = number_field(&PipelineConfig::data_seed);
    f["task.way"] = number_field(&PipelineConfig::way);
    f["task.shot"] = number_field(&PipelineConfig::shot);
    f["task.query"] = number_field(&PipelineConfig::query);

    add_phase(f, "pretrain", &PipelineConfig::pretrain);
    add_phase(f, "retrain", &PipelineConfig::retrain);

    f["prune.pct"] = number_field(&PipelineConfig::prune_pct);
    f["prune.scope"] = {[](const PipelineConfig& c) { return to_string(c.scope); },
                        [](PipelineConfig& c, const std::string&, const std::string& v) { c.scope = parse_scope(v); }};

    f["test.lr"] = test_field(&TestConfig::lr);
    f["test.steps"] = test_field(&TestConfig::steps);
    f["test.tasks"] = test_field(&TestConfig::tasks);
    f["test.mode"] = {[](const PipelineConfig& c) { return to_string(c.test.mode); },
                      [](PipelineConfig& c, const std::string&, const std::string& v) { c.test.mode = parse_mode(v); }};

    f["seeds"] = {[](const PipelineConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                    return s;
                  },
                  [](PipelineConfig& c, const std::string& k, const std::string& v) {
                    std::vector<std::uint64_t> seeds;
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) seeds.push_back(parse_number<std::uint64_t>(k, trim(item)));
                    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
                    c.seeds = std::move(seeds);
                  }};
    f["out"] = {[](const PipelineConfig& c) { return c.out; },
                [](PipelineConfig& c, const std::string&, const std::string& v) { c.out = v; }};
    return f;
  }();
  return table;
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
}

std::string PipelineConfig::get(const std::string& key) const {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

const std::vector<std::string>& PipelineConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, field] : fields()) out.push_back(key);
    return out;
  }();
  return k;
}

void PipelineConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config file");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void PipelineConfig::validate() const {
  network_spec();
  pretrain.validate();
  retrain.validate();
  test.validate();
  if (!(prune_pct >= 0.0 && prune_pct < 100.0)) throw ConfigError("prune.pct must lie in [0, 100)");
  if (way == 0 || shot == 0 || query == 0) throw ConfigError("task.way, task.shot and task.query must be positive");
  if (generator == GeneratorKind::Sinusoid) {
    throw ConfigError("the pipeline scores query accuracy; use a classification generator");
  }
  if (generator == GeneratorKind::ImageDir && data_path.empty()) throw ConfigError("task.path is required for image-dir");
  if (generator != GeneratorKind::ImageDir && (train_classes < way || test_classes < way)) {
    throw ConfigError("each class pool needs at least task.way classes");
  }
}

std::vector<std::string> PipelineConfig::warnings() const {
  std::vector<std::string> w;
  if (retrain.iterations > pretrain.iterations) {
    w.push_back("retrain.iterations (" + std::to_string(retrain.iterations) + ") exceeds pretrain.iterations (" +
                std::to_string(pretrain.iterations) + ")");
  }
  return w;
}

std::string PipelineConfig::canonical_text() const {
  std::string out;
  for (const auto& key : keys()) out += key + " = " + get(key) + "\n";
  return out;
}

std::uint64_t PipelineConfig::hash() const {
  Fnv1a h;
  for (const auto& key : keys()) {
    if (key == "out" || key == "seeds") continue;
    h.update(key + "=" + get(key) + "\n");
  }
  return h.digest();
}

NetworkSpec PipelineConfig::network_spec() const {
  NetworkSpec spec;
  spec.arch = arch;
  if (generator == GeneratorKind::Blobs) {
    spec.input_shape = {dim};
  } else if (generator == GeneratorKind::Sinusoid) {
    spec.input_shape = {1};
  } else {
    spec.input_shape = {1, 20, 20};
  }
  spec.regression = generator == GeneratorKind::Sinusoid;
  spec.classes = way;
  spec.widths.assign(arch == Architecture::Conv4Tiny ? 4 : 2, width);
  spec.validate();
  return spec;
}

TaskSource PipelineConfig::task_source() const {
  switch (generator) {
    case GeneratorKind::Blobs:
      return make_blobs(train_classes, test_classes, dim, noise, data_seed, prototype_std);
    case GeneratorKind::Glyphs:
      return make_glyphs(train_classes, test_classes, flip_noise, max_shift, data_seed);
    case GeneratorKind::Sinusoid:
      return make_sinusoid(data_seed);
    case GeneratorKind::ImageDir:
      return load_image_dir(data_path, shot + query, rotations);
  }
  throw ConfigError("unknown generator");
}

MetaTrainConfig PipelineConfig::pretrain_config(std::uint64_t seed) const {
  MetaTrainConfig c = pretrain;
  c.way = way;
  c.shot = shot;
  c.query = query;
  c.seed = seed;
  c.mask.reset();
  return c;
}

MetaTrainConfig PipelineConfig::retrain_config(std::uint64_t seed, const Mask& mask) const {
  MetaTrainConfig c = retrain;
  c.way = way;
  c.shot = shot;
  c.query = query;
  c.seed = seed;
  c.mask = mask;
  return c;
}

TestConfig PipelineConfig::test_config() const {
  TestConfig c = test;
  c.way = way;
  c.shot = shot;
  c.query = query;
  return c;
}

}  // namespace metalth
