#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <random>
#include <unistd.h>
#include <vector>

#include "metalth/model.hpp"
#include "metalth/random.hpp"

namespace testutil {

inline std::vector<float> uniform(std::size_t n, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

inline metalth::Tensor random_tensor(metalth::Shape shape, std::uint64_t seed) {
  const std::size_t n = metalth::shape_size(shape);
  return metalth::Tensor(std::move(shape), uniform(n, seed));
}

// Every parameter drawn from U(-1, 1).
inline metalth::ParamSet random_params(const metalth::NetworkSpec& spec, std::uint64_t seed) {
  metalth::ParamSet p = metalth::init_params(spec, seed);
  std::uint64_t s = seed * 7919 + 1;
  for (auto& e : p.entries) e.tensor.values = uniform(e.tensor.size(), s++);
  return p;
}

inline metalth::Batch random_batch(const metalth::NetworkSpec& spec, std::size_t n, std::uint64_t seed) {
  metalth::Shape shape{n};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  metalth::Batch b;
  b.inputs = random_tensor(shape, seed);
  std::mt19937_64 rng(seed + 1);
  if (spec.regression) {
    b.targets = random_tensor({n, spec.classes}, seed + 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng() % spec.classes));
  }
  b.source_class.assign(n, -1);
  return b;
}

inline bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

inline bool bit_equal(const metalth::ParamSet& a, const metalth::ParamSet& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    if (!bit_equal(a.entries[i].tensor.values, b.entries[i].tensor.values)) return false;
  return true;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("metalth_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str(const std::string& child = "") const { return (path / child).string(); }
};

}  // namespace testutil
