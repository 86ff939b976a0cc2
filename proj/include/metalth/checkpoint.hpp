#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metalth/error.hpp"
#include "metalth/model.hpp"
#include "metalth/pruning.hpp"

namespace metalth {

enum class CheckpointErrorCode { BadMagic, VersionMismatch, Truncated, HashMismatch, Malformed };

std::string to_string(CheckpointErrorCode code);

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : Error(ErrorKind::Checkpoint, to_string(code) + ": " + what), code_(code) {}
  CheckpointErrorCode code() const noexcept { return code_; }

 private:
  CheckpointErrorCode code_;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  Stage stage = Stage::Initial;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  ParamSet initial;  // theta_0, needed for rewinding
  ParamSet current;  // spec and stage live here
  std::optional<Mask> mask;
  std::string rng_state;  // text form of the training engine

  const NetworkSpec& spec() const { return current.spec; }
};

/// One row of the manifest's blob table. Offsets are relative to the first
/// byte after the manifest.
struct BlobInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

struct CheckpointLayout {
  std::size_t header_bytes = 0;
  std::vector<BlobInfo> blobs;
};

/// Manifest text, then raw blobs: little-endian f32 parameters, bit-packed
/// masks, the RNG state text.
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(std::string_view data);
CheckpointLayout checkpoint_layout(std::string_view data);

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Whole-file helpers shared with the pipeline.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view data);

}  // namespace metalth
