#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pixcon/config.hpp"
#include "pixcon/gradcheck.hpp"

namespace py = pybind11;
using namespace pixcon;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

LabelMap to_labels(const ByteArray& a) {
  if (a.ndim() != 2) throw DimensionError("label map must be 2-D");
  LabelMap m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.ids.begin());
  return m;
}

py::array_t<std::uint8_t> from_labels(const LabelMap& m) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  std::copy(m.ids.begin(), m.ids.end(), out.mutable_data());
  return out;
}

PixelBag to_bag(const DoubleArray& features, const ByteArray& labels) {
  if (features.ndim() != 2) throw DimensionError("features must be N x D");
  return make_bag(to_tensor(features), std::vector<std::uint8_t>(labels.data(), labels.data() + labels.size()));
}

ContrastConfig contrast(double tau) {
  ContrastConfig c;
  c.tau = tau;
  return c;
}

Config with_overrides(const std::map<std::string, std::string>& overrides) {
  Config c;
  for (const auto& [k, v] : overrides) c.set(k, v);
  return c;
}

std::vector<LabeledImage> to_items(const py::list& items) {
  std::vector<LabeledImage> out;
  for (const auto& obj : items) {
    const auto t = obj.cast<py::tuple>();
    out.push_back({to_tensor(t[0].cast<DoubleArray>()), to_labels(t[1].cast<ByteArray>()), t[2].cast<std::string>()});
  }
  return out;
}

py::list from_items(const std::vector<LabeledImage>& items) {
  py::list out;
  for (const auto& it : items) out.append(py::make_tuple(to_array(it.pixels), from_labels(it.labels), it.id));
  return out;
}

}  // namespace

PYBIND11_MODULE(_pixcon, m) {
  m.doc() = "Pixel-wise contrastive pretraining for semantic segmentation";
  m.attr("IGNORE") = kIgnore;

  py::register_exception<Error>(m, "PixconError");

  m.def("config_keys", [] {
    py::list out;
    for (const auto& k : config_keys()) {
      py::dict d;
      d["name"] = k.name;
      d["default"] = k.default_value;
      d["full_scale"] = k.full_scale_value;
      d["help"] = k.help;
      out.append(d);
    }
    return out;
  });

  m.def(
      "generate_synthetic",
      [](std::size_t n_train, std::size_t n_val, const std::map<std::string, std::string>& overrides) {
        const Dataset ds = generate_synthetic_dataset(synth_config(with_overrides(overrides)), n_train, n_val);
        return py::make_tuple(from_items(ds.train), from_items(ds.val));
      },
      py::arg("n_train"), py::arg("n_val"), py::arg("overrides") = std::map<std::string, std::string>{},
      "Synthetic (train, val) lists of (pixels HxWx3, labels HxW, id).");

  m.def(
      "within_image_loss",
      [](const DoubleArray& f, const ByteArray& y, const DoubleArray& fd, const ByteArray& yd, double tau) {
        return within_image_loss(to_bag(f, y), to_bag(fd, yd), contrast(tau)).item();
      },
      py::arg("features"), py::arg("labels"), py::arg("distorted_features"), py::arg("distorted_labels"),
      py::arg("tau") = 0.07);

  m.def(
      "cross_image_loss",
      [](const DoubleArray& f, const ByteArray& y, const DoubleArray& fd, const ByteArray& yd, const DoubleArray& fo,
         const ByteArray& yo, double tau) {
        return cross_image_loss(to_bag(f, y), to_bag(fd, yd), to_bag(fo, yo), contrast(tau)).item();
      },
      py::arg("features"), py::arg("labels"), py::arg("distorted_features"), py::arg("distorted_labels"),
      py::arg("other_features"), py::arg("other_labels"), py::arg("tau") = 0.07);

  m.def(
      "batch_loss",
      [](const std::vector<std::pair<DoubleArray, ByteArray>>& bags, double tau, std::uint64_t seed) {
        std::vector<PixelBag> b;
        for (const auto& [f, y] : bags) b.push_back(to_bag(f, y));
        Rng rng(seed);
        return batch_loss(b, contrast(tau), rng).item();
      },
      py::arg("bags"), py::arg("tau") = 0.07, py::arg("seed") = 0);

  m.def(
      "cross_entropy",
      [](const DoubleArray& logits, const ByteArray& labels) {
        return cross_entropy(to_tensor(logits), to_labels(labels)).item();
      },
      py::arg("logits"), py::arg("labels"));

  m.def(
      "miou",
      [](const ByteArray& pred, const ByteArray& gt, std::size_t num_classes) {
        Metrics metrics(num_classes);
        metrics.accumulate(to_labels(pred), to_labels(gt));
        return metrics.miou();
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

  m.def(
      "threshold_scores",
      [](const DoubleArray& probs, double threshold, std::optional<std::uint8_t> background_class,
         double background_threshold) {
        PseudoLabelConfig cfg;
        cfg.threshold_default = threshold;
        cfg.background_class = background_class;
        cfg.background_threshold = background_threshold;
        cfg.validate();
        return from_labels(threshold_scores(to_tensor(probs), cfg));
      },
      py::arg("probabilities"), py::arg("threshold") = 0.8, py::arg("background_class") = std::nullopt,
      py::arg("background_threshold") = 0.97);

  m.def(
      "check_loss_gradients",
      [](std::uint64_t seed) {
        py::dict out;
        for (const auto& r : check_loss_gradients(seed)) out[py::str(r.loss)] = r.max_rel_error;
        return out;
      },
      py::arg("seed") = 0);

  m.def(
      "run_pipeline",
      [](const py::list& train, const py::list& val, const std::map<std::string, std::string>& overrides) {
        const Config cfg = with_overrides(overrides);
        const auto tr = to_items(train), va = to_items(val);
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(tr, va, pipeline_config(cfg));
        }
        py::dict out;
        out["miou"] = r.metrics.miou();
        out["steps_logged"] = r.log.size();
        return out;
      },
      py::arg("train"), py::arg("val"), py::arg("overrides") = std::map<std::string, std::string>{},
      "Runs the configured pipeline (keys as in the CLI) and returns the final validation mIoU.");
}
