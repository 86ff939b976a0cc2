#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metalth/model.hpp"
#include "metalth/random.hpp"

namespace metalth {

enum class GeneratorKind { Blobs, Glyphs, Sinusoid, ImageDir };
enum class Split { Train, Test };

std::string to_string(GeneratorKind kind);
GeneratorKind parse_generator(const std::string& text);
std::string to_string(Split split);

/// One grayscale image, row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
};

/// Immutable description of where episodes come from. Class ids are global
/// across both pools; the train and test pools never share an id.
struct TaskSource {
  GeneratorKind kind = GeneratorKind::Blobs;
  std::vector<int> train_classes;
  std::vector<int> test_classes;

  std::size_t dim = 8;            // blobs
  float noise = 0.1f;             // blobs: Gaussian sigma
  float prototype_std = 0.5f;     // blobs: spread of class prototypes
  std::size_t image_size = 20;    // glyphs / image-dir
  float flip_noise = 0.0f;        // glyphs: per-pixel flip probability
  int max_shift = 3;              // glyphs: translation range in pixels
  std::string path;               // image-dir root
  std::uint64_t stream_seed = 0;  // seed that generated the class data

  std::vector<std::vector<float>> class_data;  // blob prototypes / glyph stencils
  std::shared_ptr<const std::vector<std::vector<Image>>> images;  // image-dir, by class id
  std::vector<std::string> class_names;
  std::vector<std::string> warnings;

  const std::vector<int>& pool(Split split) const {
    return split == Split::Train ? train_classes : test_classes;
  }
  /// Per-instance input shape, without the batch axis.
  Shape input_shape() const;
  bool regression() const { return kind == GeneratorKind::Sinusoid; }
};

/// Class prototypes drawn from N(0, prototype_std^2 I_dim); instances add
/// N(0, sigma^2 I).
TaskSource make_blobs(std::size_t train_classes, std::size_t test_classes, std::size_t dim,
                      float sigma, std::uint64_t seed, float prototype_std = 0.5f);
/// Random 5x5 binary stencils, drawn at 2x scale into a 20x20 canvas.
TaskSource make_glyphs(std::size_t train_classes, std::size_t test_classes, float flip_noise,
                       int max_shift, std::uint64_t seed);
/// Regression tasks y = A sin(x + phase), A in [0.1, 5], phase in [0, pi],
/// x in [-5, 5].
TaskSource make_sinusoid(std::uint64_t seed);
/// Reads root/<train|test>/<class>/<image files> (PGM or PNG). Classes with
/// fewer than `min_images` images are skipped with a warning. With
/// `rotations`, each class is joined by its 90/180/270 degree rotations as
/// new classes.
TaskSource load_image_dir(const std::string& root, std::size_t min_images, bool rotations = false,
                          std::size_t image_size = 20);

/// One N-way k-shot episode. Labels are episode-local; `classes[label]` is
/// the source class behind each label.
struct Task {
  Batch support;
  Batch query;
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t query_per_class = 0;
  Split split = Split::Train;
  std::vector<int> classes;

  std::uint64_t fingerprint() const;
};

Task sample_task(const TaskSource& src, Split split, std::size_t way, std::size_t shot,
                 std::size_t query_per_class, Rng& rng);

/// Reads a binary (P5) or ASCII (P2) PGM, or a PNG, as grayscale in [0, 1].
Image read_image(const std::string& path);
Image resize_nearest(const Image& img, std::size_t height, std::size_t width);

}  // namespace metalth
