#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "metalth/model.hpp"

namespace metalth {

enum class PruneScope { Global, PerLayer };

std::string to_string(PruneScope scope);
PruneScope parse_scope(const std::string& text);

/// Zero-one indicator for one ParamSet entry.
struct LayerMask {
  std::string name;       // entry name, e.g. "fc1.weight"
  bool prunable = false;  // false for classifier weights and all biases
  std::vector<std::uint8_t> bits;

  bool operator==(const LayerMask&) const = default;
};

/// Mask aligned one-to-one with ParamSet::entries. For a pruning mask the
/// exempt entries are all ones; for a complement they are all zeros.
struct Mask {
  std::vector<LayerMask> layers;
  double percent = 0.0;
  PruneScope scope = PruneScope::Global;
  bool complemented = false;

  std::size_t prunable_count() const;
  std::size_t prunable_zeros() const;
  bool aligned_with(const ParamSet& params) const;

  bool operator==(const Mask&) const = default;
};

Mask all_ones_mask(const ParamSet& params);

/// Order statistic that splits one group (the whole prunable view, or one
/// prunable layer). Entries ordered by (|w|, index) at or before
/// (magnitude, last_index) are pruned; exactly `pruned` of them.
struct Cut {
  std::size_t group_size = 0;
  std::size_t pruned = 0;
  float magnitude = 0.0f;     // meaningless when pruned == 0
  std::size_t last_index = 0;

  bool prunes_nothing() const { return pruned == 0; }
};

struct Threshold {
  PruneScope scope = PruneScope::Global;
  double percent = 0.0;
  std::vector<Cut> cuts;  // one for global scope, one per prunable entry otherwise
};

/// floor(percent * n / 100), the exact number of weights removed from n.
std::size_t prune_count(double percent, std::size_t n);

Threshold compute_threshold(const ParamSet& trained, double percent, PruneScope scope);
Mask make_mask(const ParamSet& trained, const Threshold& threshold);
/// Rewinds survivors to their initial values and zeroes the rest.
ParamSet apply_mask_reinit(const ParamSet& initial, const Mask& mask);
/// Swaps ones and zeros over prunable entries; exempt entries become zero.
Mask complement(const Mask& mask);

/// grads[i] *= mask[i], entrywise.
void apply_gradient_mask(ParamGrads& grads, const Mask& mask);
/// Fraction of zero-valued prunable weights.
double prunable_sparsity(const ParamSet& params);

/// Bit-packs a mask layer, least significant bit first.
std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits);
std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& packed, std::size_t length);

}  // namespace metalth
