#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "nhvt/config.hpp"
#include "nhvt/datapipe.hpp"
#include "nhvt/gradcheck_suite.hpp"
#include "nhvt/loss.hpp"
#include "nhvt/metrics.hpp"
#include "nhvt/models.hpp"
#include "nhvt/runtime.hpp"
#include "nhvt/trainer.hpp"

namespace py = pybind11;
using namespace nhvt;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensorf to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensorf(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensorf& t) {
  FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::memcpy(out.mutable_data(), t.data().data(), t.data().size() * sizeof(float));
  return out;
}

// (N, H, W) or (H, W) integer labels.
LabelBatch to_labels(const ByteArray& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("labels must be (H, W) or (N, H, W)");
  const auto n = a.ndim() == 3 ? a.shape(0) : 1;
  LabelBatch b(n, a.shape(a.ndim() - 2), a.shape(a.ndim() - 1));
  std::memcpy(b.labels.data(), a.data(), b.labels.size());
  return b;
}

ByteArray labels_to_array(const LabelBatch& b) {
  ByteArray out({b.n, b.height, b.width});
  std::memcpy(out.mutable_data(), b.labels.data(), b.labels.size());
  return out;
}

// HWC uint8 (or HW for one channel).
Image to_image(const ByteArray& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw std::invalid_argument("image must be (H, W) or (H, W, C)");
  Image img(a.shape(0), a.shape(1), a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
  return img;
}

ByteArray image_to_array(const Image& img) {
  std::vector<py::ssize_t> shape{img.height, img.width};
  if (img.channels != 1) shape.push_back(img.channels);
  ByteArray out(shape);
  std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size());
  return out;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  d["num_classes"] = r.num_classes;
  d["iou"] = r.iou;
  d["dice"] = r.dice;
  d["present"] = r.present;
  d["confusion"] = r.confusion;
  d["miou"] = r.miou;
  d["mdice"] = r.mdice;
  d["miou_fg"] = r.miou_fg;
  d["mdice_fg"] = r.mdice_fg;
  return d;
}

NormStats norm_from(const py::object& o) {
  if (o.is_none()) return {};
  const auto t = o.cast<std::pair<std::array<double, 3>, std::array<double, 3>>>();
  NormStats n{t.first, t.second};
  n.validate();
  return n;
}

class PyModel {
 public:
  explicit PyModel(const std::string& config_json) : model_(build_model<float>(model_config_from_json(config_json))) {}
  explicit PyModel(std::unique_ptr<SegmentationModel<float>> m) : model_(std::move(m)) {}

  static PyModel from_checkpoint(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    PyModel m(build_model<float>(ckpt.model));
    load_weights(*m.model_, ckpt);
    m.norm_ = ckpt.norm;
    return m;
  }

  FloatArray forward(const FloatArray& x, bool training) {
    model_->set_training(training);
    TapeScope<float> no_tape(nullptr);
    return to_array(model_->forward(to_tensor(x)));
  }

  ByteArray predict(const ByteArray& rgb, const py::object& norm) {
    const NormStats n = norm.is_none() && norm_ ? *norm_ : norm_from(norm);
    return image_to_array(predict_image(*model_, image_to_tensor(to_image(rgb)), n));
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : model_->parameters()) n += t.numel();
    return n;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : model_->parameters()) out.push_back(name);
    return out;
  }

  std::string config() const { return model_config_to_json(model_->config()); }

  void save(const std::string& path) const {
    Checkpoint c = capture(*model_);
    c.norm = norm_;
    save_checkpoint(path, c);
  }

 private:
  static Image predict_image(SegmentationModel<float>& m, const Tensorf& t, const NormStats& n) {
    return nhvt::predict(m, t, n);
  }

  std::unique_ptr<SegmentationModel<float>> model_;
  std::optional<NormStats> norm_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "NucleiHVT segmentation core";

  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("set_worker_count", &kernels::set_worker_count, py::arg("workers"));
  m.def("worker_count", &kernels::worker_count);

  m.def(
      "default_config", [](const std::string& variant) { return model_config_to_json(ModelConfig::toy(parse_variant(variant))); },
      py::arg("variant") = "nucleihvt", "Toy-scale model configuration as JSON.");
  m.def(
      "param_count", [](const std::string& cfg) { return param_count(model_config_from_json(cfg)); },
      py::arg("config_json"));
  m.def(
      "flop_estimate",
      [](const std::string& cfg, std::int64_t h, std::int64_t w) {
        const ModelConfig c = model_config_from_json(cfg);
        return flop_estimate(c, {1, c.in_channels, h, w});
      },
      py::arg("config_json"), py::arg("height"), py::arg("width"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("config_json"))
      .def_static("from_checkpoint", &PyModel::from_checkpoint, py::arg("path"))
      .def("forward", &PyModel::forward, py::arg("images"), py::arg("training") = false,
           "NCHW float32 in, NKHW logits out.")
      .def("predict", &PyModel::predict, py::arg("rgb"), py::arg("norm") = py::none(),
           "HWC uint8 image in, HW class mask out. norm = ((mean x3), (std x3)).")
      .def("parameter_count", &PyModel::parameter_count)
      .def("parameter_names", &PyModel::parameter_names)
      .def("config", &PyModel::config)
      .def("save", &PyModel::save, py::arg("path"));

  m.def(
      "combined_loss",
      [](const FloatArray& logits, const ByteArray& labels, double ce, double dice) {
        return combined_loss(to_tensor(logits), to_labels(labels), LossWeights{ce, dice}).item();
      },
      py::arg("logits"), py::arg("labels"), py::arg("ce") = 1.0, py::arg("dice") = 3.0);
  m.def(
      "cross_entropy", [](const FloatArray& l, const ByteArray& y) { return cross_entropy(to_tensor(l), to_labels(y)).item(); },
      py::arg("logits"), py::arg("labels"));
  m.def(
      "argmax_labels", [](const FloatArray& l) { return labels_to_array(argmax_labels(to_tensor(l))); },
      py::arg("logits"));

  m.def(
      "classwise_report",
      [](const ByteArray& pred, const ByteArray& truth, int k) {
        return report_to_dict(classwise_report(to_labels(pred), to_labels(truth), k));
      },
      py::arg("pred"), py::arg("truth"), py::arg("num_classes"));
  m.def(
      "error_map", [](const ByteArray& p, const ByteArray& t) { return image_to_array(render_error_map(to_image(p), to_image(t))); },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "read_ppm", [](const std::string& p) { return image_to_array(read_ppm(p)); }, py::arg("path"));
  m.def(
      "read_mask", [](const std::string& p, int k) { return image_to_array(read_mask(p, k)); }, py::arg("path"),
      py::arg("num_classes") = 0);
  m.def(
      "synthetic_pair",
      [](std::int64_t h, std::int64_t w, int k, std::uint64_t seed) {
        Rng rng(seed);
        const NamedPair p = synthetic_pair(h, w, k, rng);
        return py::make_tuple(image_to_array(p.image), image_to_array(p.mask));
      },
      py::arg("height"), py::arg("width"), py::arg("num_classes") = 2, py::arg("seed") = 0);

  m.def(
      "gradcheck",
      [](const std::string& scope) {
        py::list rows;
        for (const auto& r : run_gradcheck_suite(scope)) {
          py::dict d;
          d["group"] = r.group;
          d["name"] = r.name;
          d["max_rel_error"] = r.max_rel_error;
          d["checked"] = r.checked;
          d["skipped"] = r.skipped;
          d["passed"] = r.pass();
          rows.append(d);
        }
        return rows;
      },
      py::arg("scope") = "ops");
  m.attr("GRADCHECK_TOLERANCE") = kGradCheckTolerance;
}
