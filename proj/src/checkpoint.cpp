#include "metalth/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "metalth/random.hpp"

namespace metalth {

std::string to_string(CheckpointErrorCode code) {
  switch (code) {
    case CheckpointErrorCode::BadMagic: return "bad-magic";
    case CheckpointErrorCode::VersionMismatch: return "version-mismatch";
    case CheckpointErrorCode::Truncated: return "truncated";
    case CheckpointErrorCode::HashMismatch: return "hash-mismatch";
    case CheckpointErrorCode::Malformed: return "malformed";
  }
  return "unknown";
}

namespace {

constexpr std::string_view kMagic = "metalth-checkpoint";

[[noreturn]] void malformed(const std::string& what) {
  throw CheckpointError(CheckpointErrorCode::Malformed, what);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
T parse_int(std::string_view text, int base = 10) {
  T v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v, base);
  if (text.empty() || r.ec != std::errc() || r.ptr != end) malformed("bad integer '" + std::string(text) + "'");
  return v;
}

double parse_double(std::string_view text) {
  double v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (text.empty() || r.ec != std::errc() || r.ptr != end) malformed("bad number '" + std::string(text) + "'");
  return v;
}

std::string exact(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void append_floats(std::string& out, const std::vector<float>& values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[start + i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
}

void read_floats(std::string_view blob, std::vector<float>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
}

// key=value tokens after the leading word of a manifest line.
std::map<std::string, std::string> fields_of(std::string_view line) {
  std::map<std::string, std::string> out;
  std::istringstream is{std::string(line)};
  std::string word;
  is >> word;
  while (is >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) malformed("expected key=value in '" + std::string(line) + "'");
    out[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return out;
}

const std::string& need(const std::map<std::string, std::string>& f, const std::string& key) {
  const auto it = f.find(key);
  if (it == f.end()) malformed("missing field '" + key + "'");
  return it->second;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

struct Manifest {
  int version = 0;
  Stage stage = Stage::Initial;
  NetworkSpec spec;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t payload_hash = 0;
  bool has_mask = false;
  double percent = 0.0;
  PruneScope scope = PruneScope::Global;
  bool complemented = false;
  std::vector<std::map<std::string, std::string>> blobs;
  std::size_t header_bytes = 0;
};

Manifest read_manifest(std::string_view data) {
  Manifest m;
  std::size_t pos = 0;
  std::vector<std::string_view> lines;
  bool ended = false;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos) break;
    const auto line = data.substr(pos, nl - pos);
    pos = nl + 1;
    if (lines.empty() && line != kMagic) {
      throw CheckpointError(CheckpointErrorCode::BadMagic, "file does not start with '" + std::string(kMagic) + "'");
    }
    if (line == "end") {
      ended = true;
      break;
    }
    lines.push_back(line);
  }
  if (lines.empty()) {
    if (kMagic.starts_with(data) || data.starts_with(std::string(kMagic) + "\n")) {
      throw CheckpointError(CheckpointErrorCode::Truncated, "manifest cut short");
    }
    throw CheckpointError(CheckpointErrorCode::BadMagic, "file does not start with '" + std::string(kMagic) + "'");
  }
  if (!ended) throw CheckpointError(CheckpointErrorCode::Truncated, "manifest has no end marker");
  m.header_bytes = pos;

  bool saw_version = false;
  bool saw_stage = false;
  bool saw_spec = false;
  bool saw_hash = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string_view line = lines[i];
    const auto sp = line.find(' ');
    const std::string_view word = line.substr(0, sp);
    const std::string_view rest = sp == std::string_view::npos ? std::string_view{} : line.substr(sp + 1);
    if (word == "version") {
      m.version = parse_int<int>(rest);
      if (m.version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrorCode::VersionMismatch,
                              "format version " + std::string(rest) + ", expected " + std::to_string(kCheckpointVersion));
      }
      saw_version = true;
    } else if (!saw_version) {
      malformed("version must follow the magic line");
    } else if (word == "stage") {
      try {
        m.stage = parse_stage(std::string(rest));
      } catch (const Error& e) {
        malformed(e.what());
      }
      saw_stage = true;
    } else if (word == "spec") {
      try {
        m.spec = NetworkSpec::parse(std::string(rest));
        m.spec.validate();
      } catch (const Error& e) {
        malformed(e.what());
      }
      saw_spec = true;
    } else if (word == "seed") {
      m.seed = parse_int<std::uint64_t>(rest);
    } else if (word == "config_hash") {
      m.config_hash = parse_int<std::uint64_t>(rest, 16);
    } else if (word == "payload_hash") {
      m.payload_hash = parse_int<std::uint64_t>(rest, 16);
      saw_hash = true;
    } else if (word == "mask") {
      if (rest == "none") continue;
      const auto f = fields_of(line);
      m.has_mask = true;
      m.percent = parse_double(need(f, "percent"));
      try {
        m.scope = parse_scope(need(f, "scope"));
      } catch (const ConfigError& e) {
        malformed(e.what());
      }
      m.complemented = parse_int<int>(need(f, "complemented")) != 0;
    } else if (word == "blob") {
      m.blobs.push_back(fields_of(line));
    } else {
      malformed("unknown manifest line '" + std::string(line) + "'");
    }
  }
  if (!saw_stage || !saw_spec || !saw_hash) malformed("manifest lacks stage, spec or payload_hash");
  return m;
}

struct BlobSpan {
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

BlobSpan blob_span(const std::map<std::string, std::string>& f) {
  return {parse_int<std::size_t>(need(f, "offset")), parse_int<std::size_t>(need(f, "bytes"))};
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  if (!c.initial.aligned_with(c.current)) throw AlignmentError("checkpoint: initial and current params differ in layout");
  if (c.mask && !c.mask->aligned_with(c.current)) throw AlignmentError("checkpoint: mask does not match params");

  std::string payload;
  std::string table;
  auto add_blob = [&](const std::string& head, std::size_t before) {
    table += head + " offset=" + std::to_string(before) + " bytes=" + std::to_string(payload.size() - before) + "\n";
  };
  for (const auto* set : {&c.initial, &c.current}) {
    const std::string prefix = set == &c.initial ? "initial/" : "current/";
    for (const auto& e : set->entries) {
      const std::size_t before = payload.size();
      append_floats(payload, e.tensor.values);
      add_blob("blob name=" + prefix + e.name() + " type=f32 shape=" + shape_text(e.tensor.shape), before);
    }
  }
  if (c.mask) {
    for (const auto& layer : c.mask->layers) {
      const std::size_t before = payload.size();
      const auto packed = pack_bits(layer.bits);
      payload.append(reinterpret_cast<const char*>(packed.data()), packed.size());
      add_blob("blob name=mask/" + layer.name + " type=bits length=" + std::to_string(layer.bits.size()) +
                   " prunable=" + (layer.prunable ? "1" : "0"),
               before);
    }
  }
  {
    const std::size_t before = payload.size();
    payload += c.rng_state;
    add_blob("blob name=rng type=text", before);
  }

  Fnv1a h;
  h.update(payload);

  std::string out;
  out += std::string(kMagic) + "\n";
  out += "version " + std::to_string(c.version) + "\n";
  out += "stage " + to_string(c.current.stage) + "\n";
  out += "spec " + c.current.spec.to_string() + "\n";
  out += "seed " + std::to_string(c.seed) + "\n";
  out += "config_hash " + hex64(c.config_hash) + "\n";
  if (c.mask) {
    out += "mask percent=" + exact(c.mask->percent) + " scope=" + to_string(c.mask->scope) +
           " complemented=" + (c.mask->complemented ? "1" : "0") + "\n";
  } else {
    out += "mask none\n";
  }
  out += table;
  out += "payload_hash " + hex64(h.digest()) + "\n";
  out += "end\n";
  out += payload;
  return out;
}

CheckpointLayout checkpoint_layout(std::string_view data) {
  const Manifest m = read_manifest(data);
  CheckpointLayout layout;
  layout.header_bytes = m.header_bytes;
  for (const auto& f : m.blobs) {
    const auto s = blob_span(f);
    layout.blobs.push_back({need(f, "name"), s.offset, s.bytes});
  }
  return layout;
}

Checkpoint parse_checkpoint(std::string_view data) {
  const Manifest m = read_manifest(data);
  const std::string_view payload = data.substr(m.header_bytes);

  // Layout arithmetic first: blobs must tile the payload in order.
  std::size_t expected = 0;
  for (const auto& f : m.blobs) {
    const auto s = blob_span(f);
    if (s.offset != expected) malformed("blob '" + need(f, "name") + "' is not contiguous");
    if (s.bytes > (std::size_t{1} << 40)) malformed("blob '" + need(f, "name") + "' is implausibly large");
    expected += s.bytes;
  }
  if (payload.size() < expected) {
    throw CheckpointError(CheckpointErrorCode::Truncated, "payload holds " + std::to_string(payload.size()) +
                                                              " bytes, manifest expects " + std::to_string(expected));
  }
  if (payload.size() > expected) malformed("trailing bytes after the last blob");
  Fnv1a h;
  h.update(payload);
  if (h.digest() != m.payload_hash) {
    throw CheckpointError(CheckpointErrorCode::HashMismatch, "payload hash " + hex64(h.digest()) + " != manifest " +
                                                                 hex64(m.payload_hash));
  }

  Checkpoint c;
  c.version = m.version;
  c.stage = m.stage;
  c.seed = m.seed;
  c.config_hash = m.config_hash;
  c.initial = init_params(m.spec, 0);
  c.current = c.initial;
  c.current.stage = m.stage;
  if (m.has_mask) {
    c.mask = Mask{};
    c.mask->percent = m.percent;
    c.mask->scope = m.scope;
    c.mask->complemented = m.complemented;
  }

  std::size_t next_initial = 0;
  std::size_t next_current = 0;
  bool saw_rng = false;
  for (const auto& f : m.blobs) {
    const std::string& name = need(f, "name");
    const auto s = blob_span(f);
    const std::string_view blob = payload.substr(s.offset, s.bytes);
    const std::string& type = need(f, "type");
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash);
    const std::string entry_name = slash == std::string::npos ? "" : name.substr(slash + 1);

    if (group == "initial" || group == "current") {
      auto& set = group == "initial" ? c.initial : c.current;
      auto& next = group == "initial" ? next_initial : next_current;
      if (type != "f32") malformed("parameter blob '" + name + "' must be f32");
      if (next >= set.entries.size()) malformed("too many parameter blobs for the spec");
      auto& entry = set.entries[next++];
      if (entry.name() != entry_name) malformed("blob '" + name + "' out of order, expected " + entry.name());
      if (need(f, "shape") != shape_text(entry.tensor.shape)) {
        malformed("blob '" + name + "' has shape " + need(f, "shape") + ", spec implies " + shape_text(entry.tensor.shape));
      }
      if (s.bytes != entry.tensor.values.size() * 4) malformed("blob '" + name + "' has the wrong byte count");
      read_floats(blob, entry.tensor.values);
    } else if (group == "mask") {
      if (!c.mask) malformed("mask blob without a mask header");
      if (type != "bits") malformed("mask blob '" + name + "' must be bits");
      const auto length = parse_int<std::size_t>(need(f, "length"));
      if (s.bytes != (length + 7) / 8) malformed("mask blob '" + name + "' has the wrong byte count");
      LayerMask layer;
      layer.name = entry_name;
      layer.prunable = parse_int<int>(need(f, "prunable")) != 0;
      std::vector<std::uint8_t> packed(blob.begin(), blob.end());
      layer.bits = unpack_bits(packed, length);
      c.mask->layers.push_back(std::move(layer));
    } else if (name == "rng") {
      if (type != "text") malformed("rng blob must be text");
      c.rng_state = std::string(blob);
      saw_rng = true;
    } else {
      malformed("unknown blob '" + name + "'");
    }
  }
  if (next_initial != c.initial.entries.size() || next_current != c.current.entries.size()) {
    malformed("parameter blobs missing for some entries");
  }
  if (!saw_rng) malformed("missing rng blob");
  if (c.mask && !c.mask->aligned_with(c.current)) malformed("mask does not match the parameter layout");
  if (!c.rng_state.empty()) {
    Rng probe;
    std::istringstream is(c.rng_state);
    is >> probe;
    if (!is) malformed("rng state does not parse");
  }
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(path, "read failed");
  return ss.str();
}

void write_file(const std::string& path, std::string_view data) {
  const std::filesystem::path p(path);
  std::error_code ec;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path(), ec);
  // Write to a sibling and rename so an interrupted run never leaves half a file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError(path, "write failed");
  }
  std::filesystem::rename(tmp, p, ec);
  if (ec) throw IoError(path, "rename failed: " + ec.message());
}

void save_checkpoint(const Checkpoint& c, const std::string& path) { write_file(path, serialize_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  try {
    return parse_checkpoint(data);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.code(), path + ": " + std::string(e.what()).substr(to_string(e.code()).size() + 2));
  }
}

}  // namespace metalth
