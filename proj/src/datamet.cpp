#include "pixcon/datamet.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>

#include "pixcon/errors.hpp"
#include "pixcon/rng.hpp"

namespace fs = std::filesystem;

namespace pixcon {

namespace {

// Reads a PNM header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in, const fs::path& path) {
  std::string token;
  int c = in.get();
  while (true) {
    while (c != EOF && std::isspace(c)) c = in.get();
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    break;
  }
  while (c != EOF && !std::isspace(c)) {
    token.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (token.empty()) throw FormatError(path.string() + ": truncated header");
  return token;
}

std::size_t header_number(std::istream& in, const fs::path& path) {
  const std::string tok = header_token(in, path);
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || v == 0) {
    throw FormatError(path.string() + ": bad header field '" + tok + "'");
  }
  return v;
}

struct PnmData {
  std::size_t width, height;
  std::vector<std::uint8_t> bytes;
};

PnmData read_pnm(const fs::path& path, const std::string& magic, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open " + path.string());
  if (header_token(in, path) != magic) throw FormatError(path.string() + ": expected " + magic + " header");
  PnmData d;
  d.width = header_number(in, path);
  d.height = header_number(in, path);
  if (header_number(in, path) != 255) throw FormatError(path.string() + ": maxval must be 255");
  d.bytes.resize(d.width * d.height * channels);
  in.read(reinterpret_cast<char*>(d.bytes.data()), static_cast<std::streamsize>(d.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(d.bytes.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return d;
}

void write_pnm(const fs::path& path, const std::string& magic, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

std::string stem_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05zu", index);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Files

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::clamp<long>(std::lround(v * 255.0), 0, 255));
}

Tensor read_ppm(const fs::path& path) {
  PnmData d = read_pnm(path, "P6", 3);
  std::vector<double> px(d.bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = d.bytes[i] / 255.0;
  return Tensor::from({d.height, d.width, 3}, std::move(px));
}

void write_ppm(const fs::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(2) != 3) throw DimensionError("write_ppm: expected H×W×3");
  std::vector<std::uint8_t> bytes(pixels.numel());
  auto v = pixels.values();
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(v[i]);
  write_pnm(path, "P6", pixels.dim(1), pixels.dim(0), bytes);
}

LabelMap read_pgm(const fs::path& path) {
  PnmData d = read_pnm(path, "P5", 1);
  LabelMap labels(d.height, d.width);
  labels.ids = std::move(d.bytes);
  return labels;
}

void write_pgm(const fs::path& path, const LabelMap& labels) {
  write_pnm(path, "P5", labels.width, labels.height, labels.ids);
}

std::vector<std::string> read_split(const fs::path& root, const std::string& split) {
  const fs::path path = root / "splits" / (split + ".txt");
  std::ifstream in(path);
  if (!in) throw ManifestError("missing split manifest " + path.string());
  std::vector<std::string> stems;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) stems.push_back(line);
  }
  return stems;
}

void write_split(const fs::path& root, const std::string& split, const std::vector<std::string>& stems) {
  fs::create_directories(root / "splits");
  std::ofstream out(root / "splits" / (split + ".txt"), std::ios::binary);
  for (const auto& s : stems) out << s << '\n';
}

Dataset load_dataset(const fs::path& root, std::size_t num_classes, std::optional<std::uint8_t> background_class) {
  Dataset ds;
  ds.root = root;
  ds.num_classes = num_classes;
  ds.background_class = background_class;
  for (const std::string split : {"train", "val"}) {
    auto& items = split == "train" ? ds.train : ds.val;
    for (const std::string& stem : read_split(root, split)) {
      const fs::path image = root / "images" / (stem + ".ppm");
      const fs::path label = root / "labels" / (stem + ".pgm");
      if (!fs::exists(image)) throw ManifestError("stem " + stem + ": missing image file " + image.string());
      if (!fs::exists(label)) throw ManifestError("stem " + stem + ": missing label file " + label.string());
      LabeledImage item{read_ppm(image), read_pgm(label), stem};
      if (item.pixels.dim(0) != item.labels.height || item.pixels.dim(1) != item.labels.width) {
        throw FormatError("stem " + stem + ": image and label sizes differ");
      }
      validate_image(item, num_classes);
      items.push_back(std::move(item));
    }
  }
  return ds;
}

void save_item(const LabeledImage& item, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  write_ppm(root / "images" / (item.id + ".ppm"), item.pixels);
  write_pgm(root / "labels" / (item.id + ".pgm"), item.labels);
}

void save_dataset(const Dataset& dataset) {
  std::vector<std::string> train, val;
  for (const auto& it : dataset.train) {
    save_item(it, dataset.root);
    train.push_back(it.id);
  }
  for (const auto& it : dataset.val) {
    save_item(it, dataset.root);
    val.push_back(it.id);
  }
  write_split(dataset.root, "train", train);
  write_split(dataset.root, "val", val);
}

// ---------------------------------------------------------------------------
// Synthetic shapes

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disc: return "disc";
    case ShapeKind::ring: return "ring";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
  }
  return "?";
}

bool shape_covers(const ShapeSpec& s, std::size_t x, std::size_t y) {
  const double dx = static_cast<double>(x) + 0.5 - s.cx;
  const double dy = static_cast<double>(y) + 0.5 - s.cy;
  switch (s.kind) {
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
    case ShapeKind::disc:
      return dx * dx + dy * dy <= s.rx * s.rx;
    case ShapeKind::ring: {
      const double r2 = dx * dx + dy * dy;
      const double inner = 0.55 * s.rx;
      return r2 <= s.rx * s.rx && r2 >= inner * inner;
    }
    case ShapeKind::triangle: {
      // Apex at the top, base at the bottom; width grows linearly with depth.
      if (dy < -s.ry || dy > s.ry) return false;
      const double half_width = s.rx * (dy + s.ry) / (2.0 * s.ry);
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::cross: {
      const double arm = 0.3 * s.rx;
      return (std::abs(dx) <= s.rx && std::abs(dy) <= arm) || (std::abs(dy) <= s.rx && std::abs(dx) <= arm);
    }
  }
  return false;
}

void SynthConfig::validate() const {
  if (num_classes < 2) throw PreconditionError("SynthConfig: need at least two classes");
  if (num_classes > 255) throw PreconditionError("SynthConfig: at most 255 classes");
  if (kinds.empty()) throw PreconditionError("SynthConfig: no shape kinds");
  if (image_size < 4) throw PreconditionError("SynthConfig: image_size must be >= 4");
  if (min_shapes > max_shapes) throw PreconditionError("SynthConfig: min_shapes > max_shapes");
  if (!(min_radius > 0.0 && min_radius <= max_radius)) throw PreconditionError("SynthConfig: bad radius range");
  if (color_noise < 0.0 || pixel_noise < 0.0) throw PreconditionError("SynthConfig: negative noise");
}

std::array<double, 3> class_color(std::size_t class_id) {
  static constexpr std::array<std::array<double, 3>, 6> kPalette{{
      {0.50, 0.50, 0.50},
      {0.80, 0.30, 0.30},
      {0.30, 0.70, 0.30},
      {0.30, 0.40, 0.80},
      {0.80, 0.70, 0.30},
      {0.60, 0.35, 0.70},
  }};
  if (class_id < kPalette.size()) return kPalette[class_id];
  Rng rng(derive_seed(0x5EED, {class_id}));
  return {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
}

void render_shape(LabeledImage& image, const ShapeSpec& shape, const std::array<double, 3>& color, std::uint8_t label) {
  const std::size_t h = image.height(), w = image.width();
  auto px = image.pixels.mutable_values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!shape_covers(shape, x, y)) continue;
      image.labels.at(y, x) = label;
      for (std::size_t c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = color[c];
    }
  }
}

LabeledImage generate_synthetic_image(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {hash_tag("synthetic"), index}));
  const std::size_t n = cfg.image_size;
  auto jittered = [&](std::array<double, 3> base) {
    for (double& c : base) c = std::clamp(c + rng.uniform(-cfg.color_noise, cfg.color_noise), 0.0, 1.0);
    return base;
  };

  LabeledImage image{Tensor::zeros({n, n, 3}), LabelMap(n, n, 0), stem_name(index)};
  const auto bg = jittered(class_color(0));
  {
    auto px = image.pixels.mutable_values();
    for (std::size_t i = 0; i < n * n; ++i) std::copy(bg.begin(), bg.end(), px.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }

  const std::size_t shapes = cfg.min_shapes + static_cast<std::size_t>(rng.below(cfg.max_shapes - cfg.min_shapes + 1));
  for (std::size_t s = 0; s < shapes; ++s) {
    const std::size_t cls = 1 + static_cast<std::size_t>(rng.below(cfg.num_classes - 1));
    ShapeSpec spec;
    spec.kind = cfg.kinds[(cls - 1) % cfg.kinds.size()];
    spec.cx = rng.uniform(0.0, static_cast<double>(n));
    spec.cy = rng.uniform(0.0, static_cast<double>(n));
    spec.rx = rng.uniform(cfg.min_radius, cfg.max_radius);
    spec.ry = spec.kind == ShapeKind::rectangle ? rng.uniform(cfg.min_radius, cfg.max_radius) : spec.rx;
    render_shape(image, spec, jittered(class_color(cls)), static_cast<std::uint8_t>(cls));
  }

  auto px = image.pixels.mutable_values();
  if (cfg.pixel_noise > 0.0) {
    for (double& v : px) v = std::clamp(v + cfg.pixel_noise * rng.normal(), 0.0, 1.0);
  }
  // Snap to the 8-bit grid so that the in-memory image equals its PPM file.
  for (double& v : px) v = quantize(v) / 255.0;
  return image;
}

std::vector<LabeledImage> generate_synthetic(const SynthConfig& cfg, std::size_t n, std::size_t first_index) {
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_synthetic_image(cfg, first_index + i));
  return out;
}

Dataset generate_synthetic_dataset(const SynthConfig& cfg, std::size_t n_train, std::size_t n_val, const fs::path& root) {
  Dataset ds;
  ds.root = root;
  ds.num_classes = cfg.num_classes;
  ds.background_class = 0;
  ds.train = generate_synthetic(cfg, n_train, 0);
  // Validation images come from a disjoint index range so train size never changes them.
  ds.val = generate_synthetic(cfg, n_val, 1'000'000);
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

Metrics::Metrics(std::size_t num_classes) : num_classes_(num_classes), confusion_(num_classes * num_classes, 0) {}

void Metrics::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw DimensionError("accumulate: map sizes differ");
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    if (pred.ids[i] == kIgnore || pred.ids[i] >= num_classes_) {
      throw ContractError("accumulate: prediction must be a valid class id");
    }
  }
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const std::uint8_t g = gt.ids[i];
    if (g == kIgnore) continue;
    if (g >= num_classes_) throw ContractError("accumulate: ground truth label out of range");
    ++confusion_[g * num_classes_ + pred.ids[i]];
  }
}

void Metrics::merge(const Metrics& other) {
  if (other.num_classes_ != num_classes_) throw DimensionError("merge: class counts differ");
  for (std::size_t i = 0; i < confusion_.size(); ++i) confusion_[i] += other.confusion_[i];
}

std::vector<std::optional<double>> Metrics::per_class_iou() const {
  std::vector<std::optional<double>> iou(num_classes_);
  for (std::size_t c = 0; c < num_classes_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < num_classes_; ++k) {
      row += confusion_[c * num_classes_ + k];
      col += confusion_[k * num_classes_ + c];
    }
    const std::uint64_t tp = confusion_[c * num_classes_ + c];
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return iou;
}

double Metrics::miou() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_class_iou()) {
    if (v) {
      total += *v;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows, std::size_t num_classes) {
  out << "step,stage,loss,ce_loss,contrast_loss,miou";
  for (std::size_t c = 0; c < num_classes; ++c) out << ",iou_class_" << c;
  out << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : rows) {
    out << r.step << ',' << r.stage << ',' << format_double(r.loss) << ',' << opt(r.ce_loss) << ','
        << opt(r.contrast_loss) << ',';
    if (r.metrics) {
      out << format_double(r.metrics->miou());
      for (const auto& v : r.metrics->per_class_iou()) out << ',' << opt(v);
    } else {
      for (std::size_t c = 0; c < num_classes; ++c) out << ',';
    }
    out << '\n';
  }
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows, std::size_t num_classes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_metrics_csv(out, rows, num_classes);
}

}  // namespace pixcon
