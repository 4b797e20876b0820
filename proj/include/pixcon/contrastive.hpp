#pragma once

// Pixel-wise, label-based contrastive losses.
//
// Notation used below: a bag is a set of unit feature vectors with class
// labels. For anchor p and candidate k the scaled similarity is
// s_pk = f_p·f_k / tau and e_pk = exp(s_pk). Every loss is a weighted sum of
// -log(e_pq / sum_k e_pk) evaluated in log space with a per-row max shift.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <vector>

#include "pixcon/imageops.hpp"
#include "pixcon/rng.hpp"
#include "pixcon/tensor.hpp"

namespace pixcon {

enum class BagKind { original, distorted };

struct BagSource {
  BagKind kind = BagKind::original;
  std::size_t image_index = 0;
};

/// Flattened (unit feature, label) pairs. IGNORE pixels are never present.
struct PixelBag {
  Tensor features;                    // N×d, rows unit-norm
  std::vector<std::uint8_t> labels;   // N
  BagSource source;
  std::map<std::uint8_t, std::size_t> counts;

  std::size_t size() const { return labels.size(); }
  std::size_t count(std::uint8_t label) const;
};

/// Bag from an H×W×d map of unit features; row-major order, IGNORE dropped.
/// Throws EmptyError when every pixel is IGNORE.
PixelBag build_bag(const Tensor& features, const LabelMap& labels, BagSource source = {});

/// Bag from explicit N×d features. Checks unit norm (±1e-6) and labels.
PixelBag make_bag(const Tensor& features, std::vector<std::uint8_t> labels, BagSource source = {});

/// e[p][k] = exp(f_p^A · f_k^B / tau) and the same-class indicator.
struct PairTermTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> e;
  std::vector<std::uint8_t> same_class;

  double at(std::size_t p, std::size_t k) const { return e[p * cols + k]; }
  bool same(std::size_t p, std::size_t k) const { return same_class[p * cols + k] != 0; }
};

PairTermTable pair_terms(const PixelBag& a, const PixelBag& b, double tau);

enum class ContrastVariant { within, cross, batch };

const char* to_string(ContrastVariant v);
ContrastVariant parse_contrast_variant(const std::string& text);

struct ContrastConfig {
  double tau = 0.07;
  ContrastVariant variant = ContrastVariant::within;
  std::size_t batch_sample_count = 10000;
  std::uint64_t batch_sample_seed = 0;

  void validate() const;
};

/// Anchors over `orig`; positives are same-class pixels of `dist` weighted by
/// 1/N^dist_c; the denominator runs over all of `dist`; averaged over anchors.
Tensor within_image_loss(const PixelBag& orig, const PixelBag& dist, const ContrastConfig& cfg);

/// Within-image loss extended with positives from a second distorted image.
/// Pixels of `other_dist` enter the denominator only when they share the
/// anchor's class; positive weights are 1/(N^dist_c + N^other_c).
Tensor cross_image_loss(const PixelBag& orig, const PixelBag& dist, const PixelBag& other_dist,
                        const ContrastConfig& cfg);

/// All bags pooled into one; min(batch_sample_count, N) pixels sampled without
/// replacement. Each sampled pixel is an anchor whose positives are the other
/// sampled pixels of its class and whose denominator is every other sampled
/// pixel. Anchors without positives are skipped. Throws DegenerateBatchError
/// when no anchor has a positive.
Tensor batch_loss(const std::vector<PixelBag>& bags, const ContrastConfig& cfg, Rng& rng);

/// Mean cosine similarity of same-class pairs (intra) and different-class pairs (inter).
struct EmbeddingStats {
  double intra = 0.0;
  double inter = 0.0;
};

EmbeddingStats embedding_stats(const PixelBag& bag);

/// Random permutation with no fixed points (n >= 2). Used to pair every image
/// of a minibatch with a different one.
std::vector<std::size_t> derangement(std::size_t n, Rng& rng);

/// Concatenates bags into one (features detached).
PixelBag pool_bags(const std::vector<PixelBag>& bags);

/// CSV `pixel_index,class_id,f0,...,f{d-1}`; pixel_index runs across bags.
void write_embedding_csv(std::ostream& out, const std::vector<PixelBag>& bags);

}  // namespace pixcon
