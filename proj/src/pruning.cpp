#include "metalth/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace metalth {

std::string to_string(PruneScope scope) { return scope == PruneScope::Global ? "global" : "per-layer"; }

PruneScope parse_scope(const std::string& text) {
  if (text == "global") return PruneScope::Global;
  if (text == "per-layer") return PruneScope::PerLayer;
  throw ConfigError("unknown pruning scope '" + text + "' (expected global or per-layer)");
}

std::size_t Mask::prunable_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (l.prunable) n += l.bits.size();
  return n;
}

std::size_t Mask::prunable_zeros() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (l.prunable) n += static_cast<std::size_t>(std::count(l.bits.begin(), l.bits.end(), 0));
  return n;
}

bool Mask::aligned_with(const ParamSet& params) const {
  if (layers.size() != params.entries.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& e = params.entries[i];
    if (layers[i].name != e.name() || layers[i].bits.size() != e.tensor.size() ||
        layers[i].prunable != e.prunable())
      return false;
  }
  return true;
}

Mask all_ones_mask(const ParamSet& params) {
  Mask m;
  for (const auto& e : params.entries) m.layers.push_back({e.name(), e.prunable(), std::vector<std::uint8_t>(e.tensor.size(), 1)});
  return m;
}

std::size_t prune_count(double percent, std::size_t n) {
  return static_cast<std::size_t>(std::floor(static_cast<long double>(percent) * n / 100.0L));
}

namespace {

// The k smallest (|w|, index) pairs define the cut.
Cut cut_group(const std::vector<float>& magnitudes, double percent) {
  Cut cut;
  cut.group_size = magnitudes.size();
  cut.pruned = prune_count(percent, magnitudes.size());
  if (cut.pruned == 0) return cut;
  std::vector<std::size_t> order(magnitudes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto less = [&](std::size_t a, std::size_t b) {
    return magnitudes[a] < magnitudes[b] || (magnitudes[a] == magnitudes[b] && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut.pruned - 1), order.end(), less);
  const std::size_t last = order[cut.pruned - 1];
  cut.magnitude = magnitudes[last];
  cut.last_index = last;
  return cut;
}

bool is_pruned(const Cut& cut, float magnitude, std::size_t index) {
  if (cut.prunes_nothing()) return false;
  return magnitude < cut.magnitude || (magnitude == cut.magnitude && index <= cut.last_index);
}

}  // namespace

Threshold compute_threshold(const ParamSet& trained, double percent, PruneScope scope) {
  if (!(percent >= 0.0 && percent < 100.0)) {
    throw ConfigError("pruning percentage must lie in [0, 100), got " + std::to_string(percent));
  }
  Threshold th;
  th.scope = scope;
  th.percent = percent;
  const auto view = flatten_prunable(trained);
  if (scope == PruneScope::Global) {
    std::vector<float> mags(view.size());
    std::size_t i = 0;
    for (const auto& seg : view.segments())
      for (float v : seg.values) mags[i++] = std::fabs(v);
    th.cuts.push_back(cut_group(mags, percent));
  } else {
    for (const auto& seg : view.segments()) {
      std::vector<float> mags(seg.values.size());
      std::transform(seg.values.begin(), seg.values.end(), mags.begin(), [](float v) { return std::fabs(v); });
      th.cuts.push_back(cut_group(mags, percent));
    }
  }
  return th;
}

Mask make_mask(const ParamSet& trained, const Threshold& threshold) {
  const auto view = flatten_prunable(trained);
  const auto& segs = view.segments();
  const bool global = threshold.scope == PruneScope::Global;
  if (global ? (threshold.cuts.size() != 1 || threshold.cuts[0].group_size != view.size())
             : threshold.cuts.size() != segs.size()) {
    throw AlignmentError("threshold does not match the prunable view of the parameters");
  }
  Mask m = all_ones_mask(trained);
  m.percent = threshold.percent;
  m.scope = threshold.scope;
  std::size_t flat = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const Cut& cut = global ? threshold.cuts[0] : threshold.cuts[s];
    if (!global && cut.group_size != segs[s].values.size()) {
      throw AlignmentError("threshold group " + std::to_string(s) + " does not match layer " +
                           trained.entries[segs[s].entry].name());
    }
    auto& bits = m.layers[segs[s].entry].bits;
    for (std::size_t j = 0; j < segs[s].values.size(); ++j) {
      const std::size_t index = global ? flat + j : j;
      bits[j] = is_pruned(cut, std::fabs(segs[s].values[j]), index) ? 0 : 1;
    }
    flat += segs[s].values.size();
  }
  return m;
}

ParamSet apply_mask_reinit(const ParamSet& initial, const Mask& mask) {
  if (initial.stage != Stage::Initial) {
    throw PipelineError("rewind requires the initial parameters, got stage '" + to_string(initial.stage) + "'");
  }
  if (!mask.aligned_with(initial)) throw AlignmentError("mask is not aligned with the parameters");
  ParamSet out = initial;
  out.stage = Stage::Pruned;
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    auto& v = out.entries[i].tensor.values;
    const auto& bits = mask.layers[i].bits;
    for (std::size_t j = 0; j < v.size(); ++j)
      if (!bits[j]) v[j] = 0.0f;
  }
  return out;
}

Mask complement(const Mask& mask) {
  Mask out = mask;
  out.complemented = !mask.complemented;
  for (auto& l : out.layers) {
    if (l.prunable) {
      for (auto& b : l.bits) b = b ? 0 : 1;
    } else {
      std::fill(l.bits.begin(), l.bits.end(), 0);
    }
  }
  return out;
}

void apply_gradient_mask(ParamGrads& grads, const Mask& mask) {
  if (grads.size() != mask.layers.size()) throw AlignmentError("gradient mask has the wrong number of entries");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& bits = mask.layers[i].bits;
    if (bits.size() != grads[i].size()) throw AlignmentError("gradient mask misaligned at " + mask.layers[i].name);
    for (std::size_t j = 0; j < bits.size(); ++j)
      if (!bits[j]) grads[i][j] = 0.0f;
  }
}

double prunable_sparsity(const ParamSet& params) {
  const auto view = flatten_prunable(params);
  if (view.size() == 0) return 0.0;
  std::size_t zeros = 0;
  for (const auto& seg : view.segments())
    zeros += static_cast<std::size_t>(std::count(seg.values.begin(), seg.values.end(), 0.0f));
  return static_cast<double>(zeros) / static_cast<double>(view.size());
}

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits) {
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& packed, std::size_t length) {
  if (packed.size() * 8 < length) throw AlignmentError("packed mask is shorter than its declared length");
  std::vector<std::uint8_t> bits(length);
  for (std::size_t i = 0; i < length; ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return bits;
}

}  // namespace metalth
