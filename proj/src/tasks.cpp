#include "metalth/tasks.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>

namespace metalth {

namespace fs = std::filesystem;

std::string to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::Blobs: return "blobs";
    case GeneratorKind::Glyphs: return "glyphs";
    case GeneratorKind::Sinusoid: return "sinusoid";
    case GeneratorKind::ImageDir: return "image-dir";
  }
  return "unknown";
}

GeneratorKind parse_generator(const std::string& text) {
  for (GeneratorKind k : {GeneratorKind::Blobs, GeneratorKind::Glyphs, GeneratorKind::Sinusoid,
                          GeneratorKind::ImageDir}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown task generator '" + text + "'");
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Shape TaskSource::input_shape() const {
  switch (kind) {
    case GeneratorKind::Blobs: return {dim};
    case GeneratorKind::Sinusoid: return {1};
    case GeneratorKind::Glyphs:
    case GeneratorKind::ImageDir: return {1, image_size, image_size};
  }
  return {};
}

namespace {

void assign_pools(TaskSource& src, std::size_t train_classes, std::size_t test_classes) {
  for (std::size_t c = 0; c < train_classes; ++c) src.train_classes.push_back(static_cast<int>(c));
  for (std::size_t c = 0; c < test_classes; ++c)
    src.test_classes.push_back(static_cast<int>(train_classes + c));
}

constexpr std::size_t kStencil = 5;
constexpr std::size_t kGlyphScale = 2;

}  // namespace

TaskSource make_blobs(std::size_t train_classes, std::size_t test_classes, std::size_t dim,
                      float sigma, std::uint64_t seed, float prototype_std) {
  if (dim == 0) throw ConfigError("blobs: dimension must be positive");
  if (sigma < 0.0f) throw ConfigError("blobs: noise must be non-negative");
  if (!(prototype_std > 0.0f)) throw ConfigError("blobs: prototype spread must be positive");
  TaskSource src;
  src.kind = GeneratorKind::Blobs;
  src.dim = dim;
  src.noise = sigma;
  src.prototype_std = prototype_std;
  src.stream_seed = seed;
  assign_pools(src, train_classes, test_classes);
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, prototype_std);
  src.class_data.resize(train_classes + test_classes);
  for (auto& proto : src.class_data) {
    proto.resize(dim);
    for (float& v : proto) v = normal(rng);
  }
  return src;
}

TaskSource make_glyphs(std::size_t train_classes, std::size_t test_classes, float flip_noise,
                       int max_shift, std::uint64_t seed) {
  if (flip_noise < 0.0f || flip_noise > 1.0f) throw ConfigError("glyphs: flip noise must lie in [0, 1]");
  TaskSource src;
  src.kind = GeneratorKind::Glyphs;
  src.image_size = 20;
  const int margin = static_cast<int>(src.image_size - kStencil * kGlyphScale) / 2;
  if (max_shift < 0 || max_shift > margin) {
    throw ConfigError("glyphs: translation must lie in [0, " + std::to_string(margin) + "]");
  }
  src.flip_noise = flip_noise;
  src.max_shift = max_shift;
  src.stream_seed = seed;
  assign_pools(src, train_classes, test_classes);
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  src.class_data.resize(train_classes + test_classes);
  for (auto& stencil : src.class_data) {
    stencil.resize(kStencil * kStencil);
    for (float& v : stencil) v = coin(rng) ? 1.0f : 0.0f;
  }
  return src;
}

TaskSource make_sinusoid(std::uint64_t seed) {
  TaskSource src;
  src.kind = GeneratorKind::Sinusoid;
  src.stream_seed = seed;
  return src;
}

// ---------------------------------------------------------------------------
// Image loading

namespace {

std::string next_pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

std::size_t pgm_number(std::istream& in, const std::string& path) {
  const std::string tok = next_pgm_token(in);
  try {
    return static_cast<std::size_t>(std::stoul(tok));
  } catch (const std::exception&) {
    throw IoError(path, "malformed PGM header");
  }
}

Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open image");
  const std::string magic = next_pgm_token(in);
  if (magic != "P5" && magic != "P2") throw IoError(path, "not a PGM file");
  Image img;
  img.width = pgm_number(in, path);
  img.height = pgm_number(in, path);
  const std::size_t maxval = pgm_number(in, path);
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    throw IoError(path, "unsupported PGM dimensions or depth");
  }
  img.pixels.resize(img.width * img.height);
  const float maxv = static_cast<float>(maxval);
  if (magic == "P2") {
    for (float& p : img.pixels) p = static_cast<float>(pgm_number(in, path)) / maxv;
    return img;
  }
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(img.pixels.size() * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError(path, "truncated PGM data");
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::size_t v = bytes_per == 1 ? raw[i] : (std::size_t{raw[2 * i]} << 8) | raw[2 * i + 1];
    img.pixels[i] = static_cast<float>(v) / maxv;
  }
  return img;
}

Image read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError(path, std::string("cannot read PNG: ") + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError(path, std::string("cannot decode PNG: ") + png.message);
  }
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.pixels.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".pgm" || ext == ".png";
}

Image rotate90(const Image& img) {
  Image out;
  out.height = img.width;
  out.width = img.height;
  out.pixels.resize(img.pixels.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      out.pixels[x * out.width + (img.height - 1 - y)] = img.pixels[y * img.width + x];
  return out;
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path())))
      out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Image read_image(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" ? read_png(path) : read_pgm(path);
}

Image resize_nearest(const Image& img, std::size_t height, std::size_t width) {
  Image out;
  out.height = height;
  out.width = width;
  out.pixels.resize(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * img.height / height;
    for (std::size_t x = 0; x < width; ++x) out.pixels[y * width + x] = img.pixels[sy * img.width + x * img.width / width];
  }
  return out;
}

TaskSource load_image_dir(const std::string& root, std::size_t min_images, bool rotations,
                          std::size_t image_size) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError(root, "image directory missing or unreadable");
  TaskSource src;
  src.kind = GeneratorKind::ImageDir;
  src.path = root;
  src.image_size = image_size;
  auto store = std::make_shared<std::vector<std::vector<Image>>>();

  for (Split split : {Split::Train, Split::Test}) {
    const fs::path dir = fs::path(root) / to_string(split);
    if (!fs::is_directory(dir, ec)) throw IoError(dir.string(), "split directory missing");
    std::vector<int>& pool = split == Split::Train ? src.train_classes : src.test_classes;
    try {
      for (const fs::path& class_dir : sorted_entries(dir, true)) {
        std::vector<Image> imgs;
        for (const fs::path& file : sorted_entries(class_dir, false)) {
          imgs.push_back(resize_nearest(read_image(file.string()), image_size, image_size));
        }
        const std::string name = to_string(split) + "/" + class_dir.filename().string();
        if (imgs.size() < min_images) {
          const std::string msg = "skipping class " + name + ": " + std::to_string(imgs.size()) +
                                  " images, need " + std::to_string(min_images);
          std::cerr << "warning: " << msg << '\n';
          src.warnings.push_back(msg);
          continue;
        }
        const int turns = rotations ? 4 : 1;
        for (int r = 0; r < turns; ++r) {
          pool.push_back(static_cast<int>(store->size()));
          src.class_names.push_back(r == 0 ? name : name + "@rot" + std::to_string(90 * r));
          store->push_back(imgs);
          for (Image& img : imgs) img = rotate90(img);
        }
      }
    } catch (const fs::filesystem_error& e) {
      throw IoError(e.path1().string(), e.what());
    }
    if (pool.empty()) throw ConfigError("image directory split '" + dir.string() + "' has no usable classes");
  }
  src.images = std::move(store);
  return src;
}

// ---------------------------------------------------------------------------
// Sampling

std::uint64_t Task::fingerprint() const {
  Fnv1a h;
  for (const Batch* b : {&support, &query}) {
    h.update(std::span<const float>(b->inputs.values));
    h.update(std::span<const int>(b->labels));
    h.update(std::span<const float>(b->targets.values));
  }
  return h.digest();
}

namespace {

void render_glyph(const TaskSource& src, const std::vector<float>& stencil, Rng& rng, float* out) {
  const int size = static_cast<int>(src.image_size);
  const int margin = (size - static_cast<int>(kStencil * kGlyphScale)) / 2;
  std::uniform_int_distribution<int> shift(-src.max_shift, src.max_shift);
  const int oy = margin + shift(rng);
  const int ox = margin + shift(rng);
  std::fill(out, out + size * size, 0.0f);
  for (int y = 0; y < static_cast<int>(kStencil * kGlyphScale); ++y)
    for (int x = 0; x < static_cast<int>(kStencil * kGlyphScale); ++x)
      out[(oy + y) * size + ox + x] = stencil[(y / kGlyphScale) * kStencil + x / kGlyphScale];
  if (src.flip_noise > 0.0f) {
    std::bernoulli_distribution flip(src.flip_noise);
    for (int i = 0; i < size * size; ++i)
      if (flip(rng)) out[i] = 1.0f - out[i];
  }
}

void fill_class_instances(const TaskSource& src, int cls, std::size_t count, Rng& rng,
                          std::vector<std::vector<float>>& out) {
  switch (src.kind) {
    case GeneratorKind::Blobs: {
      std::normal_distribution<float> normal(0.0f, 1.0f);
      const auto& proto = src.class_data[cls];
      for (std::size_t i = 0; i < count; ++i) {
        std::vector<float> x(proto);
        if (src.noise > 0.0f)
          for (float& v : x) v += src.noise * normal(rng);
        out.push_back(std::move(x));
      }
      break;
    }
    case GeneratorKind::Glyphs: {
      for (std::size_t i = 0; i < count; ++i) {
        std::vector<float> x(src.image_size * src.image_size);
        render_glyph(src, src.class_data[cls], rng, x.data());
        out.push_back(std::move(x));
      }
      break;
    }
    case GeneratorKind::ImageDir: {
      const auto& imgs = (*src.images)[cls];
      if (imgs.size() < count) {
        throw ConfigError("class " + src.class_names[cls] + " has " + std::to_string(imgs.size()) +
                          " images, episode needs " + std::to_string(count));
      }
      std::vector<std::size_t> idx(imgs.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t i = 0; i < count; ++i) out.push_back(imgs[idx[i]].pixels);
      break;
    }
    case GeneratorKind::Sinusoid:
      break;
  }
}

Batch make_batch(const Shape& instance_shape, std::vector<std::vector<float>> rows,
                 std::vector<int> labels, std::vector<int> source) {
  Batch b;
  Shape shape{rows.size()};
  shape.insert(shape.end(), instance_shape.begin(), instance_shape.end());
  std::vector<float> values;
  values.reserve(shape_size(shape));
  for (const auto& r : rows) values.insert(values.end(), r.begin(), r.end());
  b.inputs = Tensor(std::move(shape), std::move(values));
  b.labels = std::move(labels);
  b.source_class = std::move(source);
  return b;
}

Task sample_sinusoid(std::size_t way, std::size_t shot, std::size_t query_per_class, Split split, Rng& rng) {
  std::uniform_real_distribution<float> amp(0.1f, 5.0f);
  std::uniform_real_distribution<float> phase(0.0f, std::numbers::pi_v<float>);
  std::uniform_real_distribution<float> xs(-5.0f, 5.0f);
  const float a = amp(rng), p = phase(rng);
  Task t;
  t.way = way;
  t.shot = shot;
  t.query_per_class = query_per_class;
  t.split = split;
  for (Batch* b : {&t.support, &t.query}) {
    const std::size_t n = way * (b == &t.support ? shot : query_per_class);
    std::vector<float> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = xs(rng);
      y[i] = a * std::sin(x[i] + p);
    }
    b->inputs = Tensor({n, 1}, std::move(x));
    b->targets = Tensor({n, 1}, std::move(y));
    b->source_class.assign(n, -1);
  }
  return t;
}

}  // namespace

Task sample_task(const TaskSource& src, Split split, std::size_t way, std::size_t shot,
                 std::size_t query_per_class, Rng& rng) {
  if (way == 0 || shot == 0) throw ConfigError("way and shot must be positive");
  if (src.kind == GeneratorKind::Sinusoid) return sample_sinusoid(way, shot, query_per_class, split, rng);
  const std::vector<int>& pool = src.pool(split);
  if (pool.size() < way) {
    throw ConfigError(std::to_string(way) + "-way task requested but the " + to_string(split) +
                      " pool has only " + std::to_string(pool.size()) + " classes");
  }
  // A shuffled copy doubles as the class -> episode-label permutation.
  std::vector<int> classes(pool);
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(way);

  std::vector<std::vector<float>> sup_rows, qry_rows;
  std::vector<int> sup_labels, qry_labels, sup_src, qry_src;
  for (std::size_t label = 0; label < way; ++label) {
    const int cls = classes[label];
    std::vector<std::vector<float>> rows;
    fill_class_instances(src, cls, shot + query_per_class, rng, rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const bool support = i < shot;
      (support ? sup_rows : qry_rows).push_back(std::move(rows[i]));
      (support ? sup_labels : qry_labels).push_back(static_cast<int>(label));
      (support ? sup_src : qry_src).push_back(cls);
    }
  }
  Task t;
  t.way = way;
  t.shot = shot;
  t.query_per_class = query_per_class;
  t.split = split;
  t.classes = std::move(classes);
  const Shape shape = src.input_shape();
  t.support = make_batch(shape, std::move(sup_rows), std::move(sup_labels), std::move(sup_src));
  t.query = make_batch(shape, std::move(qry_rows), std::move(qry_labels), std::move(qry_src));
  return t;
}

}  // namespace metalth
