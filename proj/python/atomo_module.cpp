// Python view of the library: configs, the pipeline commands, fields as
// numpy arrays and the small numerical kernels.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "atomo/config.hpp"
#include "atomo/error.hpp"
#include "atomo/laplace.hpp"
#include "atomo/pipeline.hpp"
#include "atomo/postproc.hpp"

namespace py = pybind11;
using namespace atomo;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const CoefficientField& f) {
  Array a({f.grid.n, f.grid.n});
  std::copy(f.values.begin(), f.values.end(), a.mutable_data());
  return a;
}

CoefficientField from_array(const Array& a, const UniformGrid& g) {
  if (a.ndim() != 2 || a.shape(0) != g.n || a.shape(1) != g.n)
    throw py::value_error("expected an array of shape (" + std::to_string(g.n) + ", " + std::to_string(g.n) + ")");
  return CoefficientField(g, std::vector<double>(a.data(), a.data() + a.size()));
}

pipeline::Context context(const config::RunConfig& cfg, const std::string& out, bool force) {
  pipeline::Context ctx;
  ctx.cfg = cfg;
  ctx.out = out;
  ctx.force = force;
  return ctx;
}

py::dict report_dict(const pipeline::Report& r) {
  py::dict d;
  d["files"] = r.files;
  d["warnings"] = r.warnings;
  d["seconds"] = r.seconds;
  d["skipped"] = r.skipped;
  return d;
}

py::dict row_dict(const pipeline::MetricsRow& r) {
  py::dict d;
  d["method"] = r.method;
  d["delta"] = r.delta;
  d["regularization"] = r.regularization;
  d["filtered"] = r.filtered;
  d["runs"] = r.runs;
  d["rel_l2_xi"] = r.rel_l2_xi;
  d["rel_l2_q"] = r.rel_l2_q;
  d["median_rel_l2"] = r.median_rel_l2;
  d["max_abs_error"] = r.max_abs_error;
  d["peak_error"] = r.peak_error;
  d["runtime"] = r.runtime;
  return d;
}

}  // namespace

PYBIND11_MODULE(_atomo, m) {
  m.doc() = "Coefficient reconstruction for the 2D acoustic wave equation (QRM and BCM)";

  // AtomoError carries .kind and .exit_code (the CLI's exit status)
  static py::handle error = py::exception<Error>(m, "AtomoError").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error)(e.what());
      exc.attr("kind") = std::string(kind_name(e.kind()));
      exc.attr("exit_code") = exit_code_for(e.kind());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  py::class_<config::RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def("set", [](config::RunConfig& c, const std::string& k, const std::string& v) { config::set_value(c, k, v); })
      .def("validate", [](const config::RunConfig& c) { config::validate(c); })
      .def("hash", &config::RunConfig::hash)
      .def("data_hash", &config::RunConfig::data_hash)
      .def("canonical", &config::RunConfig::canonical)
      .def("to_ini", &config::RunConfig::to_ini)
      .def_readwrite("name", &config::RunConfig::name)
      .def_readwrite("output", &config::RunConfig::output)
      .def_property_readonly("grid", [](const config::RunConfig& c) { return c.geometry.grid; })
      .def("__repr__", [](const config::RunConfig& c) { return "<RunConfig " + c.name + " " + c.hash() + ">"; });

  m.def("parse_config", &config::parse, py::arg("text"), py::arg("overrides") = std::vector<std::string>{});
  m.def("load_config", &config::load, py::arg("path"), py::arg("overrides") = std::vector<std::string>{});
  m.def("known_keys", &config::known_keys);

  m.def("truth_field", [](const config::RunConfig& c) { return to_array(pipeline::truth_field(c)); },
        "q on the inscribed grid, shape (n, n), row i = y");
  m.def("read_field", [](const std::string& path) { return to_array(read_field(path)); });

  m.def(
      "simulate",
      [](const config::RunConfig& c, const std::string& out, bool force) {
        pipeline::Report r;
        {
          py::gil_scoped_release nogil;
          r = pipeline::simulate(context(c, out, force));
        }
        return report_dict(r);
      },
      py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def(
      "invert",
      [](const config::RunConfig& c, const std::string& out, const std::string& method) {
        if (method != "qrm" && method != "bcm") throw py::value_error("method must be 'qrm' or 'bcm'");
        pipeline::InvertReport r;
        {
          py::gil_scoped_release nogil;
          r = pipeline::invert(context(c, out, false), method == "qrm" ? pipeline::Method::kQrm : pipeline::Method::kBcm);
        }
        auto d = report_dict(r);
        py::list rows;
        for (const auto& row : r.rows) rows.append(row_dict(row));
        d["rows"] = rows;
        d["bcm_condition"] = r.bcm_condition;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("method"));
  m.def(
      "compare",
      [](const config::RunConfig& c, const std::string& out, bool force) {
        pipeline::CompareReport r;
        {
          py::gil_scoped_release nogil;
          r = pipeline::compare(context(c, out, force));
        }
        auto d = report_dict(r);
        py::list rows;
        for (const auto& row : r.rows) {
          py::dict x;
          x["delta"] = row.delta;
          x["method"] = row.method;
          x["filtered"] = row.filtered;
          x["rel_l2_xi"] = row.rel_l2_xi;
          x["rel_l2_q"] = row.rel_l2_q;
          x["peak_error"] = row.peak_error;
          rows.append(x);
        }
        d["rows"] = rows;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("selftest", [] {
    std::vector<std::string> lines;
    const bool ok = pipeline::selftest([&](const std::string& s) { lines.push_back(s); });
    return py::make_tuple(ok, lines);
  });

  m.def(
      "add_noise",
      [](const Array& data, double delta, std::uint64_t seed) {
        const auto out = postproc::add_noise(std::span<const double>(data.data(), static_cast<std::size_t>(data.size())), {delta, seed});
        Array a(std::vector<py::ssize_t>(data.shape(), data.shape() + data.ndim()));
        std::copy(out.begin(), out.end(), a.mutable_data());
        return a;
      },
      py::arg("data"), py::arg("delta"), py::arg("seed"));
  m.def(
      "sigma_filter",
      [](const Array& image, int window, double sigma_mult, int min_count) {
        if (image.ndim() != 2 || image.shape(0) != image.shape(1)) throw py::value_error("expected a square 2-D array");
        const auto g = build_uniform_grid(1.0, static_cast<int>(image.shape(0)));
        return to_array(postproc::sigma_filter(from_array(image, g), {window, sigma_mult, min_count}));
      },
      py::arg("image"), py::arg("window") = 5, py::arg("sigma_mult") = 2.0, py::arg("min_count") = 4);
  m.def(
      "truncated_laplace",
      [](const std::vector<double>& samples, double dt, double tau, double p) { return laplace::truncated_laplace(samples, dt, tau, p); },
      py::arg("samples"), py::arg("dt"), py::arg("tau"), py::arg("p"));
  m.def(
      "extract_limits",
      [](const std::vector<double>& p, const std::vector<double>& h) {
        const auto f = laplace::extract_limits(laplace::PGrid{p}, h);
        return py::make_tuple(f.h0, f.h1, f.psi);
      },
      py::arg("p"), py::arg("h"), "(H0, H1, psi) from h(p) sampled on p");
  m.attr("euler_gamma") = laplace::kEulerGamma;
}
