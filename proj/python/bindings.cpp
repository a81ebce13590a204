#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <optional>
#include <sstream>

#include "protofed/commands.hpp"
#include "protofed/interpret.hpp"
#include "protofed/log.hpp"

namespace py = pybind11;
using namespace protofed;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict to_dict(const NamedTensors& group) {
  py::dict d;
  for (const auto& [name, t] : group) d[py::str(name)] = to_array(t);
  return d;
}

NamedTensors from_dict(const py::dict& d) {
  NamedTensors out;
  for (auto item : d) out.add(py::cast<std::string>(item.first), to_tensor(py::cast<Array>(item.second)));
  return out;
}

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.x, b.y, b.w, b.h); }

Box tuple_box(const py::tuple& t) {
  if (t.size() != 4) throw ConfigError("a box is (x, y, w, h)");
  return {t[0].cast<int>(), t[1].cast<int>(), t[2].cast<int>(), t[3].cast<int>()};
}

ConfigOverrides overrides_from(const std::map<std::string, std::string>& m) {
  return {m.begin(), m.end()};
}

}  // namespace

PYBIND11_MODULE(_protofed, m) {
  m.doc() = "Federated prototype networks with adapters: kernels, protocol and tooling.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("set_quiet", &log::set_quiet, py::arg("quiet") = true);

  // Kernels on float64 arrays.
  m.def(
      "conv2d",
      [](const Array& x, const Array& k, std::optional<Array> b, int stride, int padding) {
        return to_array(ops::conv2d(to_tensor(x), to_tensor(k), b ? to_tensor(*b) : Tensor(), {stride, padding}));
      },
      py::arg("input"), py::arg("kernel"), py::arg("bias") = py::none(), py::arg("stride") = 1,
      py::arg("padding") = 0);
  m.def("relu", [](const Array& x) { return to_array(ops::relu(to_tensor(x))); });
  m.def(
      "maxpool2d",
      [](const Array& x, int window, int stride) {
        return to_array(ops::maxpool2d(to_tensor(x), window, stride).output);
      },
      py::arg("input"), py::arg("window") = 2, py::arg("stride") = 2);
  m.def("linear", [](const Array& x, const Array& w) { return to_array(ops::linear(to_tensor(x), to_tensor(w))); });
  m.def("sliding_sq_l2", [](const Array& z, const Array& p) {
    return to_array(ops::sliding_sq_l2(to_tensor(z), to_tensor(p)));
  });

  m.def("gradcheck", [](std::uint64_t seed, double step, double tolerance) {
        py::list out;
        for (const auto& c : gradcheck_suite(seed, step, tolerance)) {
          out.append(py::make_tuple(c.name, c.report.max_rel_error, c.report.passed));
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("step") = 1e-6, py::arg("tolerance") = 1e-5,
      "Runs every finite-difference check; returns (name, max relative error, passed) tuples.");

  // Protocol.
  m.def("aggregation_weights", [](const std::vector<std::uint64_t>& sizes) { return aggregation_weights(sizes); });
  m.def(
      "serialize_payload",
      [](std::uint32_t client, std::uint32_t round, std::uint64_t samples, std::optional<py::dict> alpha,
         std::optional<py::dict> phi) {
        RoundPayload p{client, round, samples, std::nullopt, std::nullopt, 0};
        if (alpha) p.alpha = from_dict(*alpha);
        if (phi) p.phi = from_dict(*phi);
        const auto bytes = serialize_payload(p);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("client"), py::arg("round"), py::arg("samples"), py::arg("alpha") = py::none(),
      py::arg("phi") = py::none());
  m.def("deserialize_payload", [](const py::bytes& raw) {
    const std::string s = raw;
    const RoundPayload p = deserialize_payload(std::vector<std::uint8_t>(s.begin(), s.end()));
    py::dict d;
    d["client"] = p.client;
    d["round"] = p.round;
    d["samples"] = p.samples;
    d["alpha"] = p.alpha ? py::object(to_dict(*p.alpha)) : py::none();
    d["phi"] = p.phi ? py::object(to_dict(*p.phi)) : py::none();
    return d;
  });
  m.def("load_checkpoint", [](const std::filesystem::path& path) {
    const ParamGroups p = load_checkpoint(path);
    py::dict d;
    d["omega"] = to_dict(p.omega);
    d["alpha"] = to_dict(p.alpha);
    d["phi"] = to_dict(p.phi);
    return d;
  });

  // Data and interpretation.
  m.def(
      "generate_site",
      [](std::size_t samples, double healthy_fraction, std::uint64_t seed, std::size_t size,
         std::size_t glyph_size) {
        const SiteDataset d = generate_site({1, samples, healthy_fraction, 0.0, 1.0, 0.03, seed},
                                            {1, size, size, 2, glyph_size});
        py::list boxes;
        for (const auto& b : d.boxes) boxes.append(b ? py::object(box_tuple(*b)) : py::none());
        return py::make_tuple(to_array(d.images), d.labels, boxes);
      },
      py::arg("samples"), py::arg("healthy_fraction") = 0.5, py::arg("seed") = 0, py::arg("size") = 64,
      py::arg("glyph_size") = 16, "Returns (images N x 1 x H x W, labels, boxes or None).");
  m.def("upsample_bilinear", [](const Array& map, std::size_t h, std::size_t w) {
    return to_array(upsample_bilinear(to_tensor(map), h, w));
  });
  m.def(
      "activation_bbox",
      [](const Array& heatmap, double percentile) {
        const BoxResult r = activation_bbox(to_tensor(heatmap), percentile);
        return py::make_tuple(box_tuple(r.box), r.degenerate);
      },
      py::arg("heatmap"), py::arg("percentile") = 95.0);
  m.def("iou", [](const py::tuple& a, const py::tuple& b) { return iou(tuple_box(a), tuple_box(b)); });

  // Configuration and commands.
  m.def(
      "resolve_config",
      [](std::optional<std::filesystem::path> path, const std::map<std::string, std::string>& overrides) {
        const auto o = overrides_from(overrides);
        return render_config(path ? load_config(*path, o) : default_config(o));
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::map<std::string, std::string>{},
      "Fully resolved config text; overrides map 'section.key' to a value.");
  m.def(
      "partition",
      [](const std::filesystem::path& out, const std::map<std::string, std::string>& overrides, bool force) {
        return cmd_partition(default_config(overrides_from(overrides)), out, force);
      },
      py::arg("out"), py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("force") = false);
  m.def(
      "train",
      [](const std::map<std::string, std::string>& overrides, bool grid) {
        const RunConfig c = default_config(overrides_from(overrides));
        py::gil_scoped_release release;
        const auto rows = cmd_train(c, grid);
        std::vector<std::pair<std::string, double>> out;
        for (const auto& r : rows) out.emplace_back(r.variant, r.mean_acc);
        return out;
      },
      py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("grid") = false,
      "Runs training; returns (variant, final mean test accuracy) pairs.");
  m.def(
      "report",
      [](const std::vector<std::filesystem::path>& runs) {
        std::ostringstream sink;
        py::list out;
        for (const auto& r : cmd_report(runs, std::nullopt, sink)) {
          py::dict d;
          d["variant"] = r.result.variant;
          d["client_acc"] = r.result.client_acc;
          d["avg"] = r.result.mean_acc;
          d["payload_bytes"] = r.result.payload_bytes;
          d["checkpoint_bytes"] = r.checkpoint_bytes;
          d["payload_ratio"] = r.payload_ratio;
          out.append(d);
        }
        return out;
      },
      py::arg("runs"));
}
