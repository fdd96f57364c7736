#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dfa/cost_model.hpp"
#include "dfa/dataio.hpp"
#include "dfa/training.hpp"

namespace py = pybind11;
using namespace dfa;

namespace {

Variant variant_from(const std::string& v) {
    if (v == "A" || v == "a") return Variant::A;
    if (v == "B" || v == "b") return Variant::B;
    throw ConfigError("unknown variant '" + v + "'");
}

Tensor tensor_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 4) throw ShapeError("expected a rank-4 (N,C,H,W) array");
    Shape4 s{a.shape(0), a.shape(1), a.shape(2), a.shape(3)};
    Tensor t = Tensor::zeros(s);
    std::copy_n(a.data(), static_cast<size_t>(s.numel()), t.data<float>().data());
    return t;
}

py::array_t<float> numpy_from_tensor(const Tensor& t) {
    const Shape4& s = t.shape();
    py::array_t<float> a({s.n, s.c, s.h, s.w});
    Tensor src = t.dtype() == DType::F32 ? t : t.to(DType::F32);
    std::copy_n(src.data<float>().data(), static_cast<size_t>(s.numel()),
                a.mutable_data());
    return a;
}

LabelMap labels_from_numpy(
    const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 3) throw ShapeError("expected a rank-3 (N,H,W) label array");
    LabelMap l(a.shape(0), a.shape(1), a.shape(2));
    std::copy_n(a.data(), l.data.size(), l.data.data());
    return l;
}

py::array_t<int32_t> numpy_from_labels(const LabelMap& l) {
    py::array_t<int32_t> a({l.n, l.h, l.w});
    std::copy_n(l.data.data(), l.data.size(), a.mutable_data());
    return a;
}

ModelSpec make_spec(const std::string& variant, int backbones, int64_t classes) {
    ModelSpec spec;
    spec.variant = variant_from(variant);
    spec.num_backbones = backbones;
    spec.num_classes = classes;
    return build_dfanet(spec);
}

class PyModel {
  public:
    PyModel(const std::string& variant, int backbones, int64_t classes, uint64_t seed)
        : model_(make_spec(variant, backbones, classes), seed) {}
    explicit PyModel(DfaNet&& m) : model_(std::move(m)) {}

    py::array_t<float> forward(
        const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
        NoGradGuard ng;
        model_.set_training(false);
        return numpy_from_tensor(model_.forward(tensor_from_numpy(x)));
    }

    py::array_t<int32_t> predict(
        const py::array_t<float, py::array::c_style | py::array::forcecast>& image,
        std::array<double, 3> mean) {
        return numpy_from_labels(dfa::predict(model_, tensor_from_numpy(image), mean));
    }

    int64_t parameter_count() const { return model_.registry().total_param_elements(); }
    int64_t required_divisor() const { return model_.spec().required_divisor(); }
    std::string variant() const { return variant_name(model_.spec().variant); }
    int backbones() const { return model_.spec().num_backbones; }
    int64_t classes() const { return model_.spec().num_classes; }

    void save(const std::string& path) { save_checkpoint(model_, path); }

    DfaNet& model() { return model_; }

  private:
    DfaNet model_;
};

}  // namespace

PYBIND11_MODULE(_dfanet, m) {
    m.doc() = "DFANet semantic segmentation core (C++ kernels)";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::string&, int, int64_t, uint64_t>(), py::arg("variant") = "A",
             py::arg("backbones") = 3, py::arg("classes") = 19, py::arg("seed") = 0)
        .def("forward", &PyModel::forward, py::arg("x"),
             "Eval-mode forward pass: (N,3,H,W) float32 -> (N,K,H,W) logits")
        .def("predict", &PyModel::predict, py::arg("image"),
             py::arg("mean") = std::array<double, 3>{0.485, 0.456, 0.406},
             "Mean-subtract, pad, forward and argmax one (1,3,H,W) image")
        .def("save", &PyModel::save, py::arg("path"))
        .def_property_readonly("parameter_count", &PyModel::parameter_count)
        .def_property_readonly("required_divisor", &PyModel::required_divisor)
        .def_property_readonly("variant", &PyModel::variant)
        .def_property_readonly("backbones", &PyModel::backbones)
        .def_property_readonly("classes", &PyModel::classes);

    m.def("load_model", [](const std::string& path) {
        LoadedCheckpoint ckpt = load_checkpoint(path);
        return PyModel(std::move(*ckpt.model));
    }, py::arg("path"));

    m.def("cost_summary",
          [](const std::string& variant, int backbones, int64_t h, int64_t w, int64_t classes,
             const std::string& format) {
              ModelSpec spec = make_spec(variant, backbones, classes);
              return emit_report(analyze_spec(spec, {1, 3, h, w}),
                                 format == "csv" ? ReportFormat::Csv : ReportFormat::Table);
          },
          py::arg("variant") = "A", py::arg("backbones") = 3, py::arg("h") = 1024,
          py::arg("w") = 1024, py::arg("classes") = 19, py::arg("format") = "table");

    m.def("cost_totals",
          [](const std::string& variant, int backbones, int64_t h, int64_t w, int64_t classes,
             bool backbone_only) {
              const CostReport r =
                  backbone_only
                      ? analyze_backbone_stack(variant_from(variant), backbones, {1, 3, h, w})
                      : analyze_spec(make_spec(variant, backbones, classes), {1, 3, h, w});
              return py::make_tuple(r.total_params, r.total_macs);
          },
          py::arg("variant") = "A", py::arg("backbones") = 3, py::arg("h") = 1024,
          py::arg("w") = 1024, py::arg("classes") = 19, py::arg("backbone_only") = false,
          "Returns (params, macs) for the configuration");

    m.def("conv2d",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<float, py::array::c_style | py::array::forcecast>& w, int stride,
             int padding, int64_t groups) {
              Tensor xt = tensor_from_numpy(x);
              Tensor wt = tensor_from_numpy(w);
              ConvParams p{xt.shape().c, wt.shape().n, static_cast<int>(wt.shape().h),
                           static_cast<int>(wt.shape().w), stride, padding, false, groups};
              return numpy_from_tensor(ops::conv2d(xt, p, wt));
          },
          py::arg("x"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 0,
          py::arg("groups") = 1);

    m.def("bilinear_upsample",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, int factor) {
              return numpy_from_tensor(ops::bilinear_upsample(tensor_from_numpy(x), factor));
          },
          py::arg("x"), py::arg("factor"));

    m.def("mean_iou",
          [](const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& pred,
             const py::array_t<int32_t, py::array::c_style | py::array::forcecast>& gt,
             int num_classes) {
              IoUResult r = mean_iou(labels_from_numpy(pred), labels_from_numpy(gt), num_classes);
              return py::make_tuple(r.per_class, r.defined ? py::cast(r.miou) : py::none());
          },
          py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

    m.def("poly_lr", [](int64_t iter, int64_t max_iter, double base_lr, double power) {
        TrainConfig cfg;
        cfg.max_iter = max_iter;
        cfg.base_lr = base_lr;
        cfg.power = power;
        return poly_lr(iter, cfg);
    }, py::arg("iter"), py::arg("max_iter"), py::arg("base_lr") = 0.2, py::arg("power") = 0.9);

    m.def("generate_toy_dataset",
          [](uint64_t seed, int count, int size, int num_classes) {
              py::list out;
              for (auto& s : generate_toy_dataset(seed, count, size, num_classes))
                  out.append(py::make_tuple(numpy_from_tensor(s.image), numpy_from_labels(s.labels)));
              return out;
          },
          py::arg("seed") = 0, py::arg("count") = 16, py::arg("size") = 64,
          py::arg("classes") = 4);

    m.def("set_num_threads", &runtime::set_num_threads, py::arg("n"));
}
