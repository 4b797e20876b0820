#include "pixcon/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "pixcon/errors.hpp"
#include "pixcon/imageops.hpp"

namespace pixcon {

namespace {

std::string conv_name(std::size_t index) { return kEncoderPrefix + "conv" + std::to_string(index); }

std::string proj_name(std::size_t index) { return kProjectionPrefix + "conv" + std::to_string(index); }

Tensor he_normal(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(values), true);
}

void add_layer(ModelParams& params, const std::string& name, Shape weight_shape, std::size_t fan_in,
               std::size_t out, std::uint64_t base) {
  params.set(name + ".weight", he_normal(std::move(weight_shape), fan_in, derive_seed(base, {hash_tag(name + ".weight")})));
  params.set(name + ".bias", Tensor::zeros({out}, true));
}

// Pointwise conv on an H×W×C map expressed as (HW × C)·(C × out).
Tensor pointwise(const Tensor& x2d, const ModelParams& params, const std::string& name) {
  return add_bias(matmul(x2d, params.get(name + ".weight")), params.get(name + ".bias"));
}

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& in) {
  using U = std::make_unsigned_t<T>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: truncated file");
    bits |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(bits);
}

}  // namespace

void EncoderSpec::validate() const {
  if (channels.empty() || channels.size() != strides.size()) {
    throw PreconditionError("EncoderSpec: channels and strides must be non-empty and equal length");
  }
  if (feature_dim == 0) throw PreconditionError("EncoderSpec: feature_dim must be positive");
  for (std::size_t c : channels) {
    if (c == 0) throw PreconditionError("EncoderSpec: zero channel count");
  }
  if (output_stride() != 4) throw PreconditionError("EncoderSpec: strides must multiply to 4");
}

std::size_t EncoderSpec::output_stride() const {
  std::size_t s = 1;
  for (std::size_t v : strides) s *= v;
  return s;
}

std::size_t EncoderSpec::feature_size(std::size_t in) const {
  for (std::size_t s : strides) in = (in + s - 1) / s;
  return in;
}

void ModelParams::set(const std::string& name, Tensor tensor) { tensors_[name] = std::move(tensor); }

const Tensor& ModelParams::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("missing parameter tensor: " + name);
  return it->second;
}

bool ModelParams::has_prefix(const std::string& prefix) const {
  auto it = tensors_.lower_bound(prefix);
  return it != tensors_.end() && it->first.starts_with(prefix);
}

std::size_t ModelParams::erase_prefix(const std::string& prefix) {
  return std::erase_if(tensors_, [&](const auto& kv) { return kv.first.starts_with(prefix); });
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  for (const auto& [name, t] : tensors_) copy.set(name, t.clone());
  return copy;
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

bool ModelParams::identical(const ModelParams& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto it = other.tensors_.begin();
  for (const auto& [name, t] : tensors_) {
    if (name != it->first || t.shape() != it->second.shape()) return false;
    auto a = t.values();
    auto b = it->second.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    }
    ++it;
  }
  return true;
}

ModelParams init_params(const ModelSpec& spec, Rng& rng, bool with_projection, bool with_classifier) {
  spec.encoder.validate();
  const std::uint64_t base = rng.next_u64();
  ModelParams params;
  std::size_t in = 3;
  const auto& ch = spec.encoder.channels;
  for (std::size_t i = 0; i <= ch.size(); ++i) {
    const std::size_t out = i < ch.size() ? ch[i] : spec.encoder.feature_dim;
    add_layer(params, conv_name(i + 1), {3, 3, in, out}, 9 * in, out, base);
    in = out;
  }
  if (with_projection) {
    const std::size_t width = spec.head.projection_width;
    std::size_t pin = spec.encoder.feature_dim;
    for (std::size_t i = 1; i <= 3; ++i) {
      add_layer(params, proj_name(i), {pin, width}, pin, width, base);
      pin = width;
    }
  }
  if (with_classifier) {
    add_layer(params, "classifier", {spec.encoder.feature_dim, spec.head.num_classes}, spec.encoder.feature_dim,
              spec.head.num_classes, base);
  }
  return params;
}

void init_classifier(ModelParams& params, const ModelSpec& spec, Rng& rng) {
  params.erase_prefix(kClassifierPrefix);
  const std::uint64_t base = rng.next_u64();
  add_layer(params, "classifier", {spec.encoder.feature_dim, spec.head.num_classes}, spec.encoder.feature_dim,
            spec.head.num_classes, base);
}

void check_encoder(const ModelParams& params, const EncoderSpec& spec) {
  std::size_t in = 3;
  for (std::size_t i = 0; i <= spec.channels.size(); ++i) {
    const std::size_t out = i < spec.channels.size() ? spec.channels[i] : spec.feature_dim;
    const std::string name = conv_name(i + 1);
    if (!params.contains(name + ".weight") || !params.contains(name + ".bias")) {
      throw FormatError("checkpoint is missing encoder tensor " + name);
    }
    if (params.get(name + ".weight").shape() != Shape{3, 3, in, out} || params.get(name + ".bias").shape() != Shape{out}) {
      throw FormatError("encoder tensor " + name + " does not match the encoder spec");
    }
    in = out;
  }
}

Tensor encode(const ModelParams& params, const EncoderSpec& spec, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("encode: expected H×W×3 image");
  if (image.dim(0) < 4 || image.dim(1) < 4) throw PreconditionError("encode: image must be at least 4×4");
  try {
    check_encoder(params, spec);
  } catch (const FormatError& e) {
    throw ContractError(std::string("encode: ") + e.what());
  }
  // Pixels in [0,1] are mapped to [-1,1] before the first convolution.
  Tensor x = add_scalar(scale(image, 2.0), -1.0);
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    const std::string name = conv_name(i + 1);
    x = relu(conv2d(x, params.get(name + ".weight"), params.get(name + ".bias"), spec.strides[i]));
  }
  const std::string last = conv_name(spec.channels.size() + 1);
  return conv2d(x, params.get(last + ".weight"), params.get(last + ".bias"), 1);
}

Tensor project(const ModelParams& params, const Tensor& features) {
  if (features.rank() != 3) throw DimensionError("project: expected H×W×D features");
  const std::size_t h = features.dim(0), w = features.dim(1), d = features.dim(2);
  if (params.get(proj_name(1) + ".weight").dim(0) != d) {
    throw ContractError("project: feature dim " + std::to_string(d) + " does not match projection head");
  }
  Tensor x = reshape(features, {h * w, d});
  x = relu(pointwise(x, params, proj_name(1)));
  x = relu(pointwise(x, params, proj_name(2)));
  x = l2_normalize(pointwise(x, params, proj_name(3)), 1e-12);
  return reshape(x, {h, w, x.dim(1)});
}

Tensor classify(const ModelParams& params, const Tensor& features, std::size_t out_h, std::size_t out_w) {
  if (features.rank() != 3) throw DimensionError("classify: expected H×W×D features");
  if (out_h == 0 || out_w == 0) throw PreconditionError("classify: output size must be >= 1");
  const std::size_t h = features.dim(0), w = features.dim(1), d = features.dim(2);
  Tensor logits = pointwise(reshape(features, {h * w, d}), params, "classifier");
  logits = reshape(logits, {h, w, logits.dim(1)});
  if (out_h == h && out_w == w) return logits;
  return bilinear_resize(logits, out_h, out_w);
}

void write_checkpoint(std::ostream& out, const ModelParams& params) {
  out.write("PXSC", 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xFFFF) throw FormatError("checkpoint: tensor name too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw FormatError("checkpoint: write failed");
}

ModelParams read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "PXSC") throw FormatError("checkpoint: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in);
  ModelParams params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw FormatError("checkpoint: truncated tensor name");
    const auto rank = get_le<std::uint8_t>(in);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get_le<std::uint32_t>(in);
      if (d == 0) throw FormatError("checkpoint: zero dimension in " + name);
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
    if (params.contains(name)) throw FormatError("checkpoint: duplicate tensor " + name);
    params.set(name, Tensor::from(std::move(shape), std::move(values), true));
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, params);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace pixcon
