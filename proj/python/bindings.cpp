// Python bindings for the counting toolkit. Arrays cross the boundary as float64 numpy
// copies; structured values (configs, annotations, reports) cross as plain dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "moc/density.hpp"
#include "moc/error.hpp"
#include "moc/gradcheck.hpp"
#include "moc/losses.hpp"
#include "moc/metrics.hpp"
#include "moc/model.hpp"
#include "moc/synth.hpp"
#include "moc/taxonomy.hpp"

namespace py = pybind11;
using ojson = nlohmann::ordered_json;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

moc::Tensor to_tensor(const Array& a, bool requires_grad = false) {
  moc::Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return moc::Tensor(std::move(shape), std::move(v), requires_grad);
}

Array to_array(const moc::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Array grad_array(const moc::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  const auto g = t.grad();
  if (g.empty()) std::fill_n(out.mutable_data(), out.size(), 0.0);
  else std::copy(g.begin(), g.end(), out.mutable_data());
  return out;
}

ojson to_json(const py::object& o) {
  if (o.is_none()) return ojson::object();
  const auto dumps = py::module_::import("json").attr("dumps");
  return ojson::parse(dumps(o).cast<std::string>());
}

py::object from_json(const ojson& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

moc::AnnotationSet annotations_from(const py::dict& d) {
  return moc::AnnotationSet::from_json(to_json(d), moc::moc14_categories());
}

moc::AnnotationSet grouped_from(const py::dict& d) {
  const auto groups = moc::CategoryTaxonomy::moc6().group_names();
  return moc::AnnotationSet::from_json(to_json(d), groups);
}

moc::LossConfig loss_config(double gamma, bool include_diagonal, double eps) {
  moc::LossConfig c;
  c.gamma = gamma;
  c.include_diagonal = include_diagonal;
  c.norm_epsilon = eps;
  c.validate();
  return c;
}

moc::CountTable count_table(const std::vector<std::string>& categories, const Array& gt,
                            const Array& pred) {
  if (gt.ndim() != 2 || pred.ndim() != 2 || gt.shape(0) != pred.shape(0) ||
      gt.shape(1) != pred.shape(1) || gt.shape(1) != static_cast<py::ssize_t>(categories.size())) {
    throw moc::ValidationError("gt and pred must both be (images, categories) arrays");
  }
  moc::CountTable t;
  t.categories = categories;
  const auto n = static_cast<std::size_t>(gt.shape(1));
  for (py::ssize_t i = 0; i < gt.shape(0); ++i) {
    moc::CountRecord r{std::to_string(i), {}, {}};
    r.gt.assign(gt.data() + i * n, gt.data() + (i + 1) * n);
    r.pred.assign(pred.data() + i * n, pred.data() + (i + 1) * n);
    t.records.push_back(std::move(r));
  }
  return t;
}

/// Thin mutable handle around a model; parameters are exposed as copies.
class PyModel {
 public:
  PyModel(const py::object& config, std::uint64_t seed)
      : model_(moc::MccModel::init(moc::ModelConfig::from_json(to_json(config)), seed)) {}
  explicit PyModel(moc::MccModel m) : model_(std::move(m)) {}

  static PyModel load(const std::filesystem::path& stem) {
    return PyModel(moc::load_checkpoint(stem));
  }
  void save(const std::filesystem::path& stem, std::uint64_t step) const {
    moc::save_checkpoint(stem, model_, step);
  }

  py::object config() const { return from_json(model_.config.to_json()); }

  Array forward(const Array& rgb, const std::optional<Array>& nir) const {
    moc::NoGradGuard guard;
    std::optional<moc::Tensor> n;
    if (nir) n = to_tensor(*nir);
    return to_array(moc::forward(to_tensor(rgb), n, model_).values);
  }

  py::dict trace(const Array& rgb, const std::optional<Array>& nir) const {
    moc::NoGradGuard guard;
    std::optional<moc::Tensor> n;
    if (nir) n = to_tensor(*nir);
    const auto t = moc::forward_trace(to_tensor(rgb), n, model_);
    py::dict d;
    d["input"] = to_array(t.input);
    d["f1"] = to_array(t.features.f1);
    d["f2"] = to_array(t.features.f2);
    d["f3"] = to_array(t.features.f3);
    d["fused"] = to_array(t.fused);
    if (t.position) {
      d["position_map"] = to_array(t.position->map);
      d["channel_map"] = to_array(t.channel->map);
    }
    d["prediction"] = to_array(t.prediction);
    return d;
  }

  py::dict parameters() const {
    py::dict d;
    for (const auto& [name, t] : model_.parameters()) d[py::str(name)] = to_array(t);
    return d;
  }

  void set_parameter(const std::string& name, const Array& value) {
    for (auto [n, t] : model_.parameters()) {
      if (n != name) continue;
      const auto v = to_tensor(value);
      if (v.shape() != t.shape()) {
        throw moc::DimensionError(name + " expects shape " + moc::shape_string(t.shape()) +
                                  ", got " + moc::shape_string(v.shape()));
      }
      std::copy(v.values().begin(), v.values().end(), t.mutable_values().begin());
      return;
    }
    throw moc::ValidationError("no parameter named '" + name + "'");
  }

 private:
  moc::MccModel model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-category object counting: density maps, model, losses and metrics";

  py::register_exception<moc::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<moc::DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<moc::ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<moc::NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  // taxonomy and scenes
  m.def("moc14_categories", &moc::moc14_categories);
  m.def("moc6_categories", [] { return moc::CategoryTaxonomy::moc6().group_names(); });
  m.def("moc6_taxonomy", [] { return from_json(moc::CategoryTaxonomy::moc6().to_json()); });
  m.def(
      "group_to_moc6",
      [](const py::dict& a) {
        return from_json(moc::group_to_moc6(annotations_from(a), moc::CategoryTaxonomy::moc6())
                             .to_json());
      },
      py::arg("annotations"));
  m.def(
      "counts", [](const py::dict& a) { return moc::counts(annotations_from(a)); },
      py::arg("annotations"), "Per-category counts of fine-grained annotations.");
  m.def(
      "synth_scene",
      [](const py::object& config, const std::string& image_id) {
        const auto s = moc::synth_scene(moc::SceneConfig::from_json(to_json(config)), image_id);
        py::dict d;
        d["rgb"] = to_array(s.rgb);
        d["nir"] = to_array(s.nir);
        d["annotations"] = from_json(s.annotations.to_json());
        return d;
      },
      py::arg("config") = py::none(), py::arg("image_id") = "scene");

  // density
  m.def(
      "gaussian_kernel",
      [](double sigma, int size) { return to_array(moc::gaussian_kernel({sigma, size})); },
      py::arg("sigma") = 2.0, py::arg("size") = 5);
  m.def(
      "render_channel",
      [](const std::vector<std::pair<int, int>>& points, int height, int width, double sigma,
         int size, bool conserve) {
        std::vector<moc::PixelPoint> p;
        for (const auto& [x, y] : points) p.push_back({x, y});
        return to_array(moc::render_channel(p, height, width, {sigma, size}, conserve));
      },
      py::arg("points"), py::arg("height"), py::arg("width"), py::arg("sigma") = 2.0,
      py::arg("size") = 5, py::arg("conserve") = true);
  m.def(
      "generate_gt",
      [](const py::dict& grouped, double sigma, int size, int stride, bool conserve) {
        const auto gt = moc::generate_gt(grouped_from(grouped), {sigma, size}, stride, conserve);
        return py::make_tuple(to_array(gt.density.values), to_array(gt.mask.values),
                              gt.density.category_order);
      },
      py::arg("annotations"), py::arg("sigma") = 2.0, py::arg("size") = 5,
      py::arg("stride") = 4, py::arg("conserve") = true,
      "Renders grouped annotations; returns (density, mask, category_order).");
  m.def(
      "count_from_density",
      [](const Array& density, const std::optional<Array>& mask) {
        const auto d = to_tensor(density);
        const auto k = mask ? moc::IgnoreMask{to_tensor(*mask)}
                            : moc::IgnoreMask::all_counted(d.shape());
        const moc::DensityMap map{std::vector<std::string>(d.dim(0)), d};
        return moc::count_from_density(map, k);
      },
      py::arg("density"), py::arg("mask") = py::none());

  // losses: each returns (value, gradient with respect to pred)
  m.def(
      "counting_loss",
      [](const Array& pred, const Array& gt, const std::optional<Array>& mask) {
        const auto p = to_tensor(pred, true);
        const auto g = to_tensor(gt);
        const auto k = mask ? to_tensor(*mask) : moc::Tensor::full(g.shape(), 1.0);
        const auto l = moc::counting_loss(p, g, k);
        const double v = l.item();
        moc::backward(l);
        return py::make_tuple(v, grad_array(p));
      },
      py::arg("pred"), py::arg("gt"), py::arg("mask") = py::none());
  m.def(
      "spatial_contrast_loss",
      [](const Array& pred, bool include_diagonal, double eps) {
        const auto p = to_tensor(pred, true);
        const auto l = moc::spatial_contrast_loss(p, loss_config(0.0, include_diagonal, eps));
        const double v = l.item();
        moc::backward(l);
        return py::make_tuple(v, grad_array(p));
      },
      py::arg("pred"), py::arg("include_diagonal") = true, py::arg("eps") = 1e-12);
  m.def(
      "similarity_matrix",
      [](const Array& pred, double eps) {
        moc::NoGradGuard guard;
        return to_array(moc::similarity_matrix(to_tensor(pred), eps));
      },
      py::arg("pred"), py::arg("eps") = 1e-12);
  m.def(
      "total_loss",
      [](const Array& pred, const Array& gt, const std::optional<Array>& mask, double gamma,
         bool include_diagonal) {
        const auto p = to_tensor(pred, true);
        const auto g = to_tensor(gt);
        const auto k = mask ? to_tensor(*mask) : moc::Tensor::full(g.shape(), 1.0);
        const auto t = moc::total_loss(p, g, k, loss_config(gamma, include_diagonal, 1e-12));
        py::dict d;
        d["total"] = t.total.item();
        d["counting"] = t.counting.item();
        d["spatial"] = t.spatial.item();
        moc::backward(t.total);
        d["grad"] = grad_array(p);
        return d;
      },
      py::arg("pred"), py::arg("gt"), py::arg("mask") = py::none(), py::arg("gamma") = 1e-4,
      py::arg("include_diagonal") = true);

  // metrics
  m.def(
      "category_weights",
      [](const std::vector<std::string>& categories, const std::vector<double>& counts,
         double eps, const std::string& mode) {
        const auto w =
            moc::category_weights(categories, counts, eps, moc::weight_mode_from_string(mode));
        return py::make_tuple(w.weights, w.median);
      },
      py::arg("categories"), py::arg("counts"), py::arg("eps") = 1e-6,
      py::arg("mode") = "paper", "Returns (weights, median total).");
  m.def(
      "build_report",
      [](const std::vector<std::string>& categories, const Array& gt, const Array& pred,
         double eps, const std::string& mode) {
        return from_json(moc::build_report(count_table(categories, gt, pred), eps,
                                           moc::weight_mode_from_string(mode))
                             .to_json());
      },
      py::arg("categories"), py::arg("gt"), py::arg("pred"), py::arg("eps") = 1e-6,
      py::arg("mode") = "paper", "gt and pred are (images, categories) count arrays.");
  m.def(
      "report_csv",
      [](const py::dict& report) { return moc::MetricReport::from_json(to_json(report)).to_csv(); },
      py::arg("report"));

  // model
  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::object&, std::uint64_t>(), py::arg("config") = py::none(),
           py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("stem"))
      .def("save", &PyModel::save, py::arg("stem"), py::arg("step") = 0)
      .def_property_readonly("config", &PyModel::config)
      .def("forward", &PyModel::forward, py::arg("rgb"), py::arg("nir") = py::none())
      .def("trace", &PyModel::trace, py::arg("rgb"), py::arg("nir") = py::none())
      .def("parameters", &PyModel::parameters)
      .def("set_parameter", &PyModel::set_parameter, py::arg("name"), py::arg("value"));

  // verification
  m.def("gradcheck_units", &moc::gradcheck_units, py::arg("scope") = "all");
  m.def(
      "run_gradcheck",
      [](const std::string& scope, double tolerance) {
        py::list out;
        for (const auto& o : moc::run_gradcheck(scope, tolerance)) {
          py::dict d;
          d["scope"] = o.scope;
          d["unit"] = o.unit;
          d["worst_error"] = o.worst_error;
          d["elements"] = o.elements;
          d["passed"] = o.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("scope") = "all", py::arg("tolerance") = moc::kGradcheckTolerance);
}
