#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pixcon/imageops.hpp"

namespace pixcon {

// ---------------------------------------------------------------------------
// Files. Images are binary PPM (P6, maxval 255); label maps are binary PGM
// (P5, maxval 255) with 255 meaning IGNORE.

Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& pixels);
LabelMap read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);

/// Pixel value -> byte, round to nearest, clamped to [0,255].
std::uint8_t quantize(double v);

/// Dataset rooted at `root` with images/, labels/ and splits/{train,val}.txt.
struct Dataset {
  std::filesystem::path root;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
  std::size_t num_classes = 6;
  std::optional<std::uint8_t> background_class = 0;
};

/// Loads every stem listed in the split files. Throws ManifestError naming
/// the first stem whose image or label file is missing, and FormatError on a
/// malformed file.
Dataset load_dataset(const std::filesystem::path& root, std::size_t num_classes,
                     std::optional<std::uint8_t> background_class = 0);

std::vector<std::string> read_split(const std::filesystem::path& root, const std::string& split);
void write_split(const std::filesystem::path& root, const std::string& split, const std::vector<std::string>& stems);

/// Writes images/<id>.ppm and labels/<id>.pgm under `root`.
void save_item(const LabeledImage& item, const std::filesystem::path& root);
/// Writes every item plus both split files.
void save_dataset(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeKind { rectangle, disc, ring, triangle, cross };

const char* to_string(ShapeKind kind);

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  double cx = 0.0, cy = 0.0;  // centre, pixel units
  double rx = 1.0, ry = 1.0;  // half extents
};

/// Coverage test at the pixel centre (x + 0.5, y + 0.5). Used both to paint
/// colors and to rasterize labels, so labels are pixel-exact.
bool shape_covers(const ShapeSpec& shape, std::size_t x, std::size_t y);

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 6;  // class 0 is background
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 4;
  double min_radius = 10.0;
  double max_radius = 20.0;
  std::vector<ShapeKind> kinds{ShapeKind::rectangle, ShapeKind::disc, ShapeKind::ring, ShapeKind::triangle,
                               ShapeKind::cross};
  /// Per-shape uniform shift of each channel around the class base color.
  double color_noise = 0.12;
  /// Per-pixel Gaussian noise standard deviation.
  double pixel_noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Base RGB color of a class (class 0 is background).
std::array<double, 3> class_color(std::size_t class_id);

/// Paints `shape` into the image with `color` and class `label`.
void render_shape(LabeledImage& image, const ShapeSpec& shape, const std::array<double, 3>& color, std::uint8_t label);

/// Image number `index` of the synthetic stream; each index has its own seed.
LabeledImage generate_synthetic_image(const SynthConfig& cfg, std::size_t index);

/// `n` images with ids img_<first_index>.. in sequence.
std::vector<LabeledImage> generate_synthetic(const SynthConfig& cfg, std::size_t n, std::size_t first_index = 0);

/// Train split of `n_train` images followed by a val split of `n_val` images.
Dataset generate_synthetic_dataset(const SynthConfig& cfg, std::size_t n_train, std::size_t n_val,
                                   const std::filesystem::path& root = {});

// ---------------------------------------------------------------------------
// Metrics

class Metrics {
 public:
  explicit Metrics(std::size_t num_classes = 0);

  /// Adds one count per pixel whose ground truth is not IGNORE.
  /// Throws ContractError when a prediction is IGNORE or out of range.
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const Metrics& other);

  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t confusion(std::size_t gt, std::size_t pred) const { return confusion_[gt * num_classes_ + pred]; }
  /// IoU per class; nullopt when the class has zero union.
  std::vector<std::optional<double>> per_class_iou() const;
  /// Mean IoU over classes with nonzero union (0 when there are none).
  double miou() const;

  bool operator==(const Metrics&) const = default;

 private:
  std::size_t num_classes_;
  std::vector<std::uint64_t> confusion_;  // rows = ground truth
};

/// One line of the training log.
struct MetricsRow {
  std::size_t step = 0;
  std::string stage;
  double loss = 0.0;
  std::optional<double> ce_loss;
  std::optional<double> contrast_loss;
  std::optional<Metrics> metrics;
};

/// CSV `step,stage,loss,ce_loss,contrast_loss,miou,iou_class_0,...`; missing
/// values are empty fields.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows, std::size_t num_classes);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows, std::size_t num_classes);

/// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace pixcon
