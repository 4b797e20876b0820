#include "pixcon/semisup.hpp"

#include <iostream>

#include "pixcon/errors.hpp"

namespace pixcon {

double PseudoLabelConfig::threshold_for(std::uint8_t cls) const {
  if (auto it = overrides.find(cls); it != overrides.end()) return it->second;
  if (background_class && *background_class == cls) return background_threshold;
  return threshold_default;
}

void PseudoLabelConfig::validate() const {
  auto ok = [](double t) { return t > 0.0 && t <= 1.0; };
  if (!ok(threshold_default) || !ok(background_threshold)) throw PreconditionError("thresholds must lie in (0,1]");
  for (const auto& [_, t] : overrides) {
    if (!ok(t)) throw PreconditionError("thresholds must lie in (0,1]");
  }
}

LabelMap threshold_scores(const Tensor& probabilities, const PseudoLabelConfig& cfg) {
  cfg.validate();
  if (probabilities.rank() != 3) throw DimensionError("threshold_scores: expected H×W×C scores");
  const std::size_t h = probabilities.dim(0), w = probabilities.dim(1), c = probabilities.dim(2);
  LabelMap out(h, w, kIgnore);
  auto p = probabilities.values();
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (p[i * c + k] > p[i * c + best]) best = k;
    }
    const auto cls = static_cast<std::uint8_t>(best);
    if (p[i * c + best] >= cfg.threshold_for(cls)) out.ids[i] = cls;
  }
  return out;
}

LabelMap pseudo_label(const ModelParams& params, const EncoderSpec& spec, const Tensor& pixels,
                      const PseudoLabelConfig& cfg) {
  const Tensor logits = predict_logits(frozen(params), spec, pixels);
  return threshold_scores(softmax(logits, 2), cfg);
}

double pseudo_coverage(std::span<const LabelMap> maps) {
  if (maps.empty()) throw PreconditionError("pseudo_coverage: no label maps");
  std::size_t labelled = 0, total = 0;
  for (const auto& m : maps) {
    for (std::uint8_t id : m.ids) labelled += id != kIgnore;
    total += m.ids.size();
  }
  return total ? static_cast<double>(labelled) / static_cast<double>(total) : 0.0;
}

SemisupResult semisup_train(std::span<const LabeledImage> labeled, std::span<const LabeledImage> unlabeled,
                            std::span<const LabeledImage> val, const PipelineConfig& pipeline,
                            const PseudoLabelConfig& pseudo) {
  if (labeled.empty()) throw ContractError("semisup_train: labeled set is empty");
  pseudo.validate();
  SemisupResult out;
  out.round1 = run_pipeline(labeled, val, pipeline);
  if (unlabeled.empty()) {
    std::cerr << "warning: semisup_train: no unlabeled images, returning the supervised model\n";
    out.round2 = out.round1;
    return out;
  }

  const ModelParams inference = frozen(out.round1.params);
  const EncoderSpec& spec =
      (pipeline.method == Method::ce_only ? pipeline.ce_only : pipeline.finetune).model.encoder;
  std::vector<LabelMap> maps;
  for (const auto& item : unlabeled) {
    LabeledImage p{item.pixels, pseudo_label(inference, spec, item.pixels, pseudo), item.id};
    maps.push_back(p.labels);
    out.pseudo_labeled.push_back(std::move(p));
  }
  out.coverage = pseudo_coverage(maps);

  std::vector<LabeledImage> combined(labeled.begin(), labeled.end());
  combined.insert(combined.end(), out.pseudo_labeled.begin(), out.pseudo_labeled.end());
  out.round2 = run_pipeline(combined, val, pipeline);
  return out;
}

void write_pseudo_labels(const std::filesystem::path& dir, std::span<const LabeledImage> items) {
  std::filesystem::create_directories(dir);
  for (const auto& item : items) write_pgm(dir / (item.id + ".pgm"), item.labels);
}

}  // namespace pixcon
