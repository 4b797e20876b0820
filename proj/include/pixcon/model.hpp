#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "pixcon/rng.hpp"
#include "pixcon/tensor.hpp"

namespace pixcon {

/// Convolutional trunk: one 3×3 conv + ReLU per entry of `channels`, then a
/// final 3×3 conv to `feature_dim` with no activation.
struct EncoderSpec {
  std::vector<std::size_t> channels{32, 64, 64, 64};
  std::vector<std::size_t> strides{2, 2, 1, 1};
  std::size_t feature_dim = 64;

  /// Throws PreconditionError unless sizes agree and the strides multiply to 4.
  void validate() const;
  std::size_t output_stride() const;
  /// ceil(in / 2) applied once per stride-2 stage, i.e. same-padding arithmetic.
  std::size_t feature_size(std::size_t in) const;
};

struct HeadSpec {
  std::size_t projection_width = 256;
  std::size_t num_classes = 6;
};

struct ModelSpec {
  EncoderSpec encoder;
  HeadSpec head;
};

inline const std::string kEncoderPrefix = "encoder.";
inline const std::string kProjectionPrefix = "projection.";
inline const std::string kClassifierPrefix = "classifier.";

/// Named parameter tensors, ordered by name.
class ModelParams {
 public:
  void set(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  bool has_prefix(const std::string& prefix) const;
  std::size_t erase_prefix(const std::string& prefix);
  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }

  /// Deep copy; the copy's tensors keep the requires_grad flags.
  ModelParams clone() const;
  void zero_grad();

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  /// Bitwise equality of names, shapes and values.
  bool identical(const ModelParams& other) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// He-normal weights (std sqrt(2/fan_in)), zero biases. Every tensor draws from
/// its own stream derived from one draw of `rng` and the tensor name, so the
/// encoder is identical whichever heads are requested.
ModelParams init_params(const ModelSpec& spec, Rng& rng, bool with_projection, bool with_classifier);

/// Adds freshly initialised classifier tensors (replacing any existing ones).
void init_classifier(ModelParams& params, const ModelSpec& spec, Rng& rng);

/// Image H×W×3 -> features ceil(H/4)×ceil(W/4)×D (not normalised).
Tensor encode(const ModelParams& params, const EncoderSpec& spec, const Tensor& image);

/// Three pointwise convs (ReLU after the first two) then per-pixel L2
/// normalisation (norm + 1e-12).
Tensor project(const ModelParams& params, const Tensor& features);

/// Pointwise conv to class logits, bilinearly resized to out_h×out_w.
Tensor classify(const ModelParams& params, const Tensor& features, std::size_t out_h, std::size_t out_w);

/// Throws FormatError if any encoder tensor required by `spec` is missing or misshapen.
void check_encoder(const ModelParams& params, const EncoderSpec& spec);

// Checkpoint file: "PXSC", u32 version, u32 count, then per tensor
// u16 name length, name bytes, u8 rank, u32 dims, f64 values (all little-endian).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ModelParams& params);
ModelParams read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace pixcon
