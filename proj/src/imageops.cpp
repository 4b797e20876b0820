#include "pixcon/imageops.hpp"

#include <algorithm>
#include <cmath>

#include "pixcon/errors.hpp"

namespace pixcon {

namespace {

// Aligned-corners source coordinate of output index i.
double source_coord(std::size_t i, std::size_t in, std::size_t out) {
  if (out <= 1 || in <= 1) return 0.0;
  return static_cast<double>(i * (in - 1)) / static_cast<double>(out - 1);
}

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> t(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double s = source_coord(i, in, out);
    const std::size_t lo = std::min(static_cast<std::size_t>(std::floor(s)), in - 1);
    t[i] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
  }
  return t;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double luma(const double* rgb) { return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]; }

void rgb_to_hsv(const double* rgb, double& h, double& s, double& v) {
  const double mx = std::max({rgb[0], rgb[1], rgb[2]});
  const double mn = std::min({rgb[0], rgb[1], rgb[2]});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == rgb[0]) {
    h = (rgb[1] - rgb[2]) / delta;
  } else if (mx == rgb[1]) {
    h = 2.0 + (rgb[2] - rgb[0]) / delta;
  } else {
    h = 4.0 + (rgb[0] - rgb[1]) / delta;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: rgb[0] = v, rgb[1] = t, rgb[2] = p; break;
    case 1: rgb[0] = q, rgb[1] = v, rgb[2] = p; break;
    case 2: rgb[0] = p, rgb[1] = v, rgb[2] = t; break;
    case 3: rgb[0] = p, rgb[1] = q, rgb[2] = v; break;
    case 4: rgb[0] = t, rgb[1] = p, rgb[2] = v; break;
    default: rgb[0] = v, rgb[1] = p, rgb[2] = q; break;
  }
}

void jitter_brightness(std::vector<double>& px, double factor) {
  for (double& v : px) v = clamp01(v * factor);
}

void jitter_contrast(std::vector<double>& px, double factor) {
  const std::size_t n = px.size() / 3;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += luma(&px[3 * i]);
  const double m = total / static_cast<double>(n);
  for (double& v : px) v = clamp01((v - m) * factor + m);
}

void jitter_saturation(std::vector<double>& px, double factor) {
  for (std::size_t i = 0; i < px.size(); i += 3) {
    const double g = luma(&px[i]);
    for (std::size_t c = 0; c < 3; ++c) px[i + c] = clamp01((px[i + c] - g) * factor + g);
  }
}

void jitter_hue(std::vector<double>& px, double shift) {
  for (std::size_t i = 0; i < px.size(); i += 3) {
    double h, s, v;
    rgb_to_hsv(&px[i], h, s, v);
    hsv_to_rgb(h + shift, s, v, &px[i]);
    for (std::size_t c = 0; c < 3; ++c) px[i + c] = clamp01(px[i + c]);
  }
}

}  // namespace

void validate_image(const LabeledImage& image, std::size_t num_classes) {
  const auto& p = image.pixels;
  if (!p.defined() || p.rank() != 3 || p.dim(2) != 3) {
    throw ContractError("image " + image.id + ": pixels must be H×W×3");
  }
  if (p.dim(0) != image.labels.height || p.dim(1) != image.labels.width ||
      image.labels.ids.size() != image.labels.height * image.labels.width) {
    throw ContractError("image " + image.id + ": pixel and label sizes differ");
  }
  for (std::uint8_t id : image.labels.ids) {
    if (id != kIgnore && id >= num_classes) {
      throw ContractError("image " + image.id + ": label " + std::to_string(id) + " >= class count " +
                          std::to_string(num_classes));
    }
  }
}

void AugmentConfig::validate() const {
  if (!(distort_probability >= 0.0 && distort_probability <= 1.0)) {
    throw PreconditionError("distort_probability must lie in [0,1]");
  }
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw PreconditionError("scale range must satisfy 0 < lo <= hi");
  if (crop_size < 1) throw PreconditionError("crop_size must be >= 1");
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || hue < 0.0) {
    throw PreconditionError("jitter strengths must be >= 0");
  }
}

AugmentConfig pretrain_augment() { return AugmentConfig{}; }

AugmentConfig finetune_augment() {
  AugmentConfig cfg;
  cfg.saturation = 0.0;
  cfg.hue = 0.0;
  return cfg;
}

Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  if (input.rank() != 3) throw DimensionError("bilinear_resize: expected H×W×D tensor");
  if (out_h == 0 || out_w == 0) throw PreconditionError("bilinear_resize: target size must be >= 1");
  const std::size_t h = input.dim(0), w = input.dim(1), d = input.dim(2);
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
  std::vector<double> out(out_h * out_w * d);
  auto x = input.values();
  for (std::size_t i = 0; i < out_h; ++i) {
    const Tap& a = ty[i];
    for (std::size_t j = 0; j < out_w; ++j) {
      const Tap& b = tx[j];
      const double* p00 = &x[(a.lo * w + b.lo) * d];
      const double* p01 = &x[(a.lo * w + b.hi) * d];
      const double* p10 = &x[(a.hi * w + b.lo) * d];
      const double* p11 = &x[(a.hi * w + b.hi) * d];
      double* o = &out[(i * out_w + j) * d];
      for (std::size_t c = 0; c < d; ++c) {
        const double top = p00[c] * (1.0 - b.frac) + p01[c] * b.frac;
        const double bot = p10[c] * (1.0 - b.frac) + p11[c] * b.frac;
        o[c] = top * (1.0 - a.frac) + bot * a.frac;
      }
    }
  }
  return make_result("bilinear_resize", {out_h, out_w, d}, std::move(out), {input},
                     [input, ty, tx, w, d, out_w](const TensorImpl& o) {
    auto& g = input.impl().grad_buffer();
    for (std::size_t i = 0; i < ty.size(); ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < tx.size(); ++j) {
        const Tap& b = tx[j];
        const double* go = &o.grad[(i * out_w + j) * d];
        const double w00 = (1.0 - a.frac) * (1.0 - b.frac), w01 = (1.0 - a.frac) * b.frac;
        const double w10 = a.frac * (1.0 - b.frac), w11 = a.frac * b.frac;
        double* g00 = &g[(a.lo * w + b.lo) * d];
        double* g01 = &g[(a.lo * w + b.hi) * d];
        double* g10 = &g[(a.hi * w + b.lo) * d];
        double* g11 = &g[(a.hi * w + b.hi) * d];
        for (std::size_t c = 0; c < d; ++c) {
          g00[c] += go[c] * w00;
          g01[c] += go[c] * w01;
          g10[c] += go[c] * w10;
          g11[c] += go[c] * w11;
        }
      }
    }
  });
}

LabelMap nearest_downsample_labels(const LabelMap& labels, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || labels.height == 0 || labels.width == 0) {
    throw PreconditionError("nearest_downsample_labels: sizes must be >= 1");
  }
  auto nearest = [](std::size_t i, std::size_t in, std::size_t out) {
    return std::min(static_cast<std::size_t>(std::floor(source_coord(i, in, out) + 0.5)), in - 1);
  };
  LabelMap out(out_h, out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t sy = nearest(i, labels.height, out_h);
    for (std::size_t j = 0; j < out_w; ++j) out.at(i, j) = labels.at(sy, nearest(j, labels.width, out_w));
  }
  return out;
}

DistortedPair distort(const LabeledImage& image, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  DistortedPair pair{image, image, false};
  pair.distorted.pixels = image.pixels.detach();
  if (!rng.bernoulli(cfg.distort_probability)) return pair;

  pair.was_distorted = true;
  std::vector<double> px(image.pixels.values().begin(), image.pixels.values().end());
  if (cfg.brightness > 0.0) {
    jitter_brightness(px, rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness));
  }
  if (cfg.contrast > 0.0) {
    jitter_contrast(px, rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast));
  }
  if (cfg.saturation > 0.0) {
    jitter_saturation(px, rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation));
  }
  if (cfg.hue > 0.0) jitter_hue(px, rng.uniform(-cfg.hue, cfg.hue));
  pair.distorted.pixels = Tensor::from(image.pixels.shape(), std::move(px));
  return pair;
}

LabeledImage flip_horizontal(const LabeledImage& image) {
  const std::size_t h = image.height(), w = image.width();
  std::vector<double> px(h * w * 3);
  LabelMap labels(h, w);
  auto src = image.pixels.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = w - 1 - x;
      std::copy_n(&src[(y * w + sx) * 3], 3, &px[(y * w + x) * 3]);
      labels.at(y, x) = image.labels.at(y, sx);
    }
  }
  return {Tensor::from({h, w, 3}, std::move(px)), std::move(labels), image.id};
}

LabeledImage geometric_augment(const LabeledImage& image, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  LabeledImage out = image;
  out.pixels = image.pixels.detach();
  if (cfg.flip && rng.bernoulli(cfg.flip_probability)) out = flip_horizontal(out);

  const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(out.height() * s)));
  const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(out.width() * s)));
  if (sh != out.height() || sw != out.width()) {
    out.pixels = bilinear_resize(out.pixels, sh, sw);
    out.labels = nearest_downsample_labels(out.labels, sh, sw);
  }

  const std::size_t crop = cfg.crop_size;
  const std::size_t ph = std::max(sh, crop), pw = std::max(sw, crop);
  const std::size_t oy = static_cast<std::size_t>(rng.below(ph - crop + 1));
  const std::size_t ox = static_cast<std::size_t>(rng.below(pw - crop + 1));
  if (crop == sh && crop == sw) return out;

  std::vector<double> px(crop * crop * 3, 0.0);
  LabelMap labels(crop, crop, kIgnore);
  auto src = out.pixels.values();
  for (std::size_t y = 0; y < crop; ++y) {
    const std::size_t yy = y + oy;
    if (yy >= sh) continue;
    for (std::size_t x = 0; x < crop; ++x) {
      const std::size_t xx = x + ox;
      if (xx >= sw) continue;
      std::copy_n(&src[(yy * sw + xx) * 3], 3, &px[(y * crop + x) * 3]);
      labels.at(y, x) = out.labels.at(yy, xx);
    }
  }
  return {Tensor::from({crop, crop, 3}, std::move(px)), std::move(labels), image.id};
}

}  // namespace pixcon
