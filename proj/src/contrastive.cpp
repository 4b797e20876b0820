#include "pixcon/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "pixcon/errors.hpp"

namespace pixcon {

namespace {

constexpr double kUnitTolerance = 1e-6;

void require_rows_unit(const Tensor& features) {
  const std::size_t d = features.dim(1);
  auto x = features.values();
  for (std::size_t r = 0; r < features.dim(0); ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitTolerance) {
      throw ContractError("pixel bag feature " + std::to_string(r) + " is not unit-normalized");
    }
  }
}

std::map<std::uint8_t, std::size_t> count_labels(const std::vector<std::uint8_t>& labels) {
  std::map<std::uint8_t, std::size_t> counts;
  for (std::uint8_t l : labels) ++counts[l];
  return counts;
}

// Weighted log-ratio loss over an anchor×candidate logit matrix:
//   L = -sum_p a_p sum_q w_pq (s_pq - log sum_{k in D_p} exp(s_pk))
// Candidates outside the denominator set D_p are skipped entirely, so masked
// columns have no effect on the value or on the summation order. Rows with
// a_p == 0 are skipped.
Tensor log_ratio_loss(const Tensor& logits, std::vector<std::uint8_t> denom, std::vector<double> pos_weight,
                      std::vector<double> anchor_weight) {
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  auto s = logits.values();
  auto lse = std::make_shared<std::vector<double>>(n, 0.0);
  std::vector<double> row_terms(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    if (anchor_weight[p] == 0.0) continue;
    const double* row = &s[p * m];
    const std::uint8_t* mask = &denom[p * m];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < m; ++k) {
      if (mask[k]) mx = std::max(mx, row[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (mask[k]) z += std::exp(row[k] - mx);
    }
    const double l = mx + std::log(z);
    (*lse)[p] = l;
    double acc = 0.0;
    for (std::size_t q = 0; q < m; ++q) {
      const double w = pos_weight[p * m + q];
      if (w != 0.0) acc += w * (row[q] - l);
    }
    row_terms[p] = anchor_weight[p] * acc;
  }
  const double value = -pairwise_sum(row_terms);

  return make_result("contrastive_loss", {1}, {value}, {logits},
                     [logits, n, m, lse, denom = std::move(denom), pos_weight = std::move(pos_weight),
                      anchor_weight = std::move(anchor_weight)](const TensorImpl& o) {
    auto& g = logits.impl().grad_buffer();
    auto s = logits.values();
    const double go = o.grad[0];
    for (std::size_t p = 0; p < n; ++p) {
      if (anchor_weight[p] == 0.0) continue;
      double total_w = 0.0;
      for (std::size_t q = 0; q < m; ++q) total_w += pos_weight[p * m + q];
      const double l = (*lse)[p];
      for (std::size_t k = 0; k < m; ++k) {
        const double sigma = denom[p * m + k] ? std::exp(s[p * m + k] - l) : 0.0;
        g[p * m + k] -= go * anchor_weight[p] * (pos_weight[p * m + k] - total_w * sigma);
      }
    }
  });
}

Tensor scaled_similarity(const Tensor& a, const Tensor& b, double tau) {
  return scale(matmul(a, b, /*transpose_b=*/true), 1.0 / tau);
}

void require_nonempty(const PixelBag& bag, const char* what) {
  if (bag.size() == 0 || !bag.features.defined()) throw PreconditionError(std::string(what) + ": empty bag");
}

}  // namespace

std::size_t PixelBag::count(std::uint8_t label) const {
  auto it = counts.find(label);
  return it == counts.end() ? 0 : it->second;
}

PixelBag build_bag(const Tensor& features, const LabelMap& labels, BagSource source) {
  if (features.rank() != 3) throw DimensionError("build_bag: expected H×W×d features");
  if (features.dim(0) != labels.height || features.dim(1) != labels.width) {
    throw DimensionError("build_bag: feature map " + shape_string(features.shape()) + " vs label map " +
                         std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> kept;
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    if (labels.ids[i] == kIgnore) continue;
    rows.push_back(i);
    kept.push_back(labels.ids[i]);
  }
  if (rows.empty()) throw EmptyError("build_bag: every pixel is IGNORE");
  const std::size_t d = features.dim(2);
  Tensor flat = reshape(features, {labels.ids.size(), d});
  Tensor selected = rows.size() == labels.ids.size() ? flat : gather_rows(flat, rows);
  require_rows_unit(selected);
  PixelBag bag{selected, std::move(kept), source, {}};
  bag.counts = count_labels(bag.labels);
  return bag;
}

PixelBag make_bag(const Tensor& features, std::vector<std::uint8_t> labels, BagSource source) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw DimensionError("make_bag: features must be N×d with one label per row");
  }
  for (std::uint8_t l : labels) {
    if (l == kIgnore) throw ContractError("make_bag: IGNORE label inside a bag");
  }
  require_rows_unit(features);
  PixelBag bag{features, std::move(labels), source, {}};
  bag.counts = count_labels(bag.labels);
  return bag;
}

PairTermTable pair_terms(const PixelBag& a, const PixelBag& b, double tau) {
  if (!(tau > 0.0)) throw PreconditionError("pair_terms: tau must be positive");
  if (a.features.dim(1) != b.features.dim(1)) throw DimensionError("pair_terms: feature widths differ");
  PairTermTable t;
  t.rows = a.size();
  t.cols = b.size();
  t.e.resize(t.rows * t.cols);
  t.same_class.resize(t.rows * t.cols);
  const std::size_t d = a.features.dim(1);
  auto fa = a.features.values();
  auto fb = b.features.values();
  for (std::size_t p = 0; p < t.rows; ++p) {
    for (std::size_t k = 0; k < t.cols; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += fa[p * d + j] * fb[k * d + j];
      t.e[p * t.cols + k] = std::exp(dot / tau);
      t.same_class[p * t.cols + k] = a.labels[p] == b.labels[k];
    }
  }
  return t;
}

const char* to_string(ContrastVariant v) {
  switch (v) {
    case ContrastVariant::within: return "within";
    case ContrastVariant::cross: return "cross";
    case ContrastVariant::batch: return "batch";
  }
  return "?";
}

ContrastVariant parse_contrast_variant(const std::string& text) {
  if (text == "within") return ContrastVariant::within;
  if (text == "cross") return ContrastVariant::cross;
  if (text == "batch") return ContrastVariant::batch;
  throw PreconditionError("unknown contrastive variant: " + text);
}

void ContrastConfig::validate() const {
  if (!(tau > 0.0)) throw PreconditionError("tau must be positive");
  if (batch_sample_count == 0) throw PreconditionError("batch_sample_count must be positive");
}

Tensor within_image_loss(const PixelBag& orig, const PixelBag& dist, const ContrastConfig& cfg) {
  cfg.validate();
  require_nonempty(orig, "within_image_loss");
  require_nonempty(dist, "within_image_loss");
  const std::size_t n = orig.size(), m = dist.size();
  std::vector<double> pos(n * m, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t positives = dist.count(orig.labels[p]);
    if (positives == 0) {
      throw ContractError("within_image_loss: anchor class " + std::to_string(orig.labels[p]) +
                          " has no pixels in the distorted bag");
    }
    const double w = 1.0 / static_cast<double>(positives);
    for (std::size_t q = 0; q < m; ++q) {
      if (dist.labels[q] == orig.labels[p]) pos[p * m + q] = w;
    }
  }
  return log_ratio_loss(scaled_similarity(orig.features, dist.features, cfg.tau), std::vector<std::uint8_t>(n * m, 1),
                        std::move(pos), std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

Tensor cross_image_loss(const PixelBag& orig, const PixelBag& dist, const PixelBag& other_dist,
                        const ContrastConfig& cfg) {
  cfg.validate();
  require_nonempty(orig, "cross_image_loss");
  require_nonempty(dist, "cross_image_loss");
  require_nonempty(other_dist, "cross_image_loss");
  const std::size_t n = orig.size(), mi = dist.size(), mj = other_dist.size(), m = mi + mj;
  std::vector<std::uint8_t> denom(n * m, 1);
  std::vector<double> pos(n * m, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint8_t c = orig.labels[p];
    const std::size_t positives = dist.count(c) + other_dist.count(c);
    if (positives == 0) {
      throw ContractError("cross_image_loss: anchor class " + std::to_string(c) + " has no positives");
    }
    const double w = 1.0 / static_cast<double>(positives);
    for (std::size_t q = 0; q < mi; ++q) {
      if (dist.labels[q] == c) pos[p * m + q] = w;
    }
    for (std::size_t q = 0; q < mj; ++q) {
      const bool same = other_dist.labels[q] == c;
      denom[p * m + mi + q] = same;
      if (same) pos[p * m + mi + q] = w;
    }
  }
  // Two separate products keep the Î block bitwise equal to the within-image one.
  Tensor logits = concat({scaled_similarity(orig.features, dist.features, cfg.tau),
                          scaled_similarity(orig.features, other_dist.features, cfg.tau)},
                         1);
  return log_ratio_loss(logits, std::move(denom), std::move(pos),
                        std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

Tensor batch_loss(const std::vector<PixelBag>& bags, const ContrastConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Tensor> parts;
  std::vector<std::uint8_t> labels;
  for (const PixelBag& b : bags) {
    if (b.size() == 0) continue;
    parts.push_back(b.features);
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  if (labels.empty()) throw PreconditionError("batch_loss: combined bag is empty");
  Tensor pooled = parts.size() == 1 ? parts[0] : concat(parts, 0);

  const std::size_t total = labels.size();
  const std::size_t k = std::min(cfg.batch_sample_count, total);
  if (k < total) {
    std::vector<std::size_t> picked = rng.sample_without_replacement(total, k);
    std::sort(picked.begin(), picked.end());
    pooled = gather_rows(pooled, picked);
    std::vector<std::uint8_t> sampled(k);
    for (std::size_t i = 0; i < k; ++i) sampled[i] = labels[picked[i]];
    labels = std::move(sampled);
  }

  std::map<std::uint8_t, std::size_t> counts = count_labels(labels);
  std::vector<std::uint8_t> denom(k * k, 1);
  std::vector<double> pos(k * k, 0.0);
  std::vector<double> anchor(k, 0.0);
  std::size_t valid = 0;
  for (std::size_t p = 0; p < k; ++p) {
    denom[p * k + p] = 0;
    if (counts[labels[p]] > 1) ++valid;
  }
  if (valid == 0) throw DegenerateBatchError("batch_loss: no anchor has a positive");
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t positives = counts[labels[p]] - 1;
    if (positives == 0) continue;
    anchor[p] = 1.0 / static_cast<double>(valid);
    const double w = 1.0 / static_cast<double>(positives);
    for (std::size_t q = 0; q < k; ++q) {
      if (q != p && labels[q] == labels[p]) pos[p * k + q] = w;
    }
  }
  return log_ratio_loss(scaled_similarity(pooled, pooled, cfg.tau), std::move(denom), std::move(pos),
                        std::move(anchor));
}

EmbeddingStats embedding_stats(const PixelBag& bag) {
  std::size_t classes_with_pairs = 0;
  for (const auto& [_, c] : bag.counts) classes_with_pairs += c >= 2;
  if (classes_with_pairs < 2) {
    throw ContractError("embedding_stats: need at least two classes with two or more pixels");
  }
  const std::size_t n = bag.size(), d = bag.features.dim(1);
  auto f = bag.features.values();
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += f[p * d + j] * f[q * d + j];
      if (bag.labels[p] == bag.labels[q]) {
        intra += dot;
        ++n_intra;
      } else {
        inter += dot;
        ++n_inter;
      }
    }
  }
  return {intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter)};
}

PixelBag pool_bags(const std::vector<PixelBag>& bags) {
  if (bags.empty()) throw EmptyError("pool_bags: no bags");
  std::vector<Tensor> features;
  std::vector<std::uint8_t> labels;
  for (const auto& b : bags) {
    features.push_back(b.features.detach());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  PixelBag pooled{features.size() == 1 ? features.front() : concat(features, 0), std::move(labels), {}, {}};
  pooled.counts = count_labels(pooled.labels);
  return pooled;
}

std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw PreconditionError("derangement: need at least two items");
  // Sattolo's algorithm yields a single n-cycle, which never fixes a point.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

void write_embedding_csv(std::ostream& out, const std::vector<PixelBag>& bags) {
  if (bags.empty()) return;
  const std::size_t d = bags.front().features.dim(1);
  out << "pixel_index,class_id";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  out << '\n';
  out << std::setprecision(17);
  std::size_t index = 0;
  for (const PixelBag& bag : bags) {
    auto f = bag.features.values();
    for (std::size_t p = 0; p < bag.size(); ++p, ++index) {
      out << index << ',' << static_cast<int>(bag.labels[p]);
      for (std::size_t j = 0; j < d; ++j) out << ',' << f[p * d + j];
      out << '\n';
    }
  }
}

}  // namespace pixcon
