// SPDX-License-Identifier: Apache-2.0
//
// NumPy-facing bindings for the label-map, fusion and metric routines.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "voxseg/error.hpp"
#include "voxseg/infer.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/postprocess.hpp"

namespace py = pybind11;
using namespace voxseg;

namespace {

template <class T>
torch::ScalarType dtype_of();
template <>
torch::ScalarType dtype_of<float>() { return torch::kFloat32; }
template <>
torch::ScalarType dtype_of<uint8_t>() { return torch::kUInt8; }
template <>
torch::ScalarType dtype_of<int32_t>() { return torch::kInt32; }
template <>
torch::ScalarType dtype_of<bool>() { return torch::kBool; }

// Copies a C-contiguous array into a fresh tensor.
template <class T>
torch::Tensor to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  auto t = torch::empty(shape, dtype_of<T>());
  if (t.numel() > 0) std::memcpy(t.data_ptr(), a.data(), t.numel() * sizeof(T));
  return t;
}

template <class T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
  auto c = t.to(dtype_of<T>()).contiguous();
  py::array_t<T> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  if (c.numel() > 0) std::memcpy(out.mutable_data(), c.data_ptr(), c.numel() * sizeof(T));
  return out;
}

using LabelArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;
using MaskArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Spacing spacing_of(const std::array<float, 3>& s) { return {s[0], s[1], s[2]}; }

EnsembleWeights weights_of(const py::object& obj, size_t members) {
  if (obj.is_none()) return EnsembleWeights::uniform(members);
  if (py::isinstance<py::str>(obj)) {
    const auto name = obj.cast<std::string>();
    if (name == "uniform") return EnsembleWeights::uniform(members);
    if (name == "two_model") return EnsembleWeights::two_model();
    if (name == "three_model") return EnsembleWeights::three_model();
    throw ValidationError("unknown weight preset '" + name + "' (expected uniform, two_model or three_model)");
  }
  auto d = obj.cast<py::dict>();
  return {d["ncr"].cast<std::vector<double>>(), d["ed"].cast<std::vector<double>>(),
          d["et"].cast<std::vector<double>>()};
}

std::vector<ProbabilityVolume> members_of(const std::vector<FloatArray>& arrays) {
  std::vector<ProbabilityVolume> out;
  for (const auto& a : arrays) out.emplace_back(to_tensor<float>(a));
  return out;
}

py::dict metrics_dict(const MetricsReport& r) {
  py::dict out;
  for (const auto& [name, m] : r.regions) {
    py::dict d;
    d["dice"] = m.dice;
    d["hd95"] = m.hd95;
    d["sensitivity"] = m.sensitivity;
    d["specificity"] = m.specificity;
    out[py::str(name)] = d;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_voxseg, m) {
  m.doc() = "Brain-tumor segmentation toolkit: phantoms, label cleanup, fusion and metrics.";

  auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", validation.ptr());
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.attr("HD95_EMPTY_PENALTY") = kHd95EmptyPenalty;

  m.def(
      "generate_phantom",
      [](uint64_t seed, std::array<int64_t, 3> shape, double noise_sigma) {
        PhantomOptions opt;
        opt.noise_sigma = noise_sigma;
        auto [img, lab] = generate_phantom(seed, shape, opt);
        return py::make_tuple(to_numpy<float>(img.data()), to_numpy<uint8_t>(lab.data()));
      },
      py::arg("seed"), py::arg("shape"), py::arg("noise_sigma") = 0.05,
      "Synthetic case: (image float32 [4, D, H, W], labels uint8 [D, H, W]).");

  m.def(
      "connected_components",
      [](const MaskArray& mask, int connectivity) {
        auto cc = connected_components(to_tensor<bool>(mask), parse_connectivity(connectivity));
        return py::make_tuple(to_numpy<int32_t>(cc.labels), cc.sizes);
      },
      py::arg("mask"), py::arg("connectivity") = 26,
      "Component ids (int32, 0 = background, 1..K in raster order) and component sizes.");

  m.def(
      "remove_small_components",
      [](const LabelArray& labels, int64_t min_size, int connectivity, const std::string& scope) {
        auto out = remove_small_components(LabelVolume(to_tensor<uint8_t>(labels)), min_size,
                                           parse_connectivity(connectivity), parse_cca_scope(scope));
        return to_numpy<uint8_t>(out.data());
      },
      py::arg("labels"), py::arg("min_size") = 15, py::arg("connectivity") = 26,
      py::arg("scope") = "whole_foreground");

  m.def(
      "et_replacement",
      [](const LabelArray& labels, int64_t threshold) {
        return to_numpy<uint8_t>(et_replacement(LabelVolume(to_tensor<uint8_t>(labels)), threshold).data());
      },
      py::arg("labels"), py::arg("threshold") = 300);

  m.def(
      "ensemble_labels",
      [](const std::vector<FloatArray>& members, const py::object& weights) {
        if (members.empty()) throw ValidationError("ensemble needs at least one member");
        return to_numpy<uint8_t>(ensemble_labels(members_of(members), weights_of(weights, members.size())).data());
      },
      py::arg("members"), py::arg("weights") = py::none(),
      "Fused labels of [4, D, H, W] probability volumes. weights: None, a preset name, or "
      "{'ncr': [...], 'ed': [...], 'et': [...]}.");

  m.def(
      "ensemble_average",
      [](const std::vector<FloatArray>& members, const py::object& weights) {
        if (members.empty()) throw ValidationError("ensemble needs at least one member");
        return to_numpy<float>(ensemble_average(members_of(members), weights_of(weights, members.size())).data());
      },
      py::arg("members"), py::arg("weights") = py::none());

  m.def(
      "dice", [](const MaskArray& a, const MaskArray& b) { return dice(to_tensor<bool>(a), to_tensor<bool>(b)); },
      py::arg("a"), py::arg("b"));

  m.def(
      "hd95",
      [](const MaskArray& a, const MaskArray& b, std::array<float, 3> spacing) {
        return hd95(to_tensor<bool>(a), to_tensor<bool>(b), spacing_of(spacing));
      },
      py::arg("a"), py::arg("b"), py::arg("spacing") = std::array<float, 3>{1, 1, 1});

  m.def(
      "evaluate_case",
      [](const LabelArray& pred, const LabelArray& gt, std::array<float, 3> spacing, const std::string& mode) {
        const auto s = spacing_of(spacing);
        return metrics_dict(evaluate_case(LabelVolume(to_tensor<uint8_t>(pred), s),
                                          LabelVolume(to_tensor<uint8_t>(gt), s), {}, parse_eval_mode(mode)));
      },
      py::arg("pred"), py::arg("gt"), py::arg("spacing") = std::array<float, 3>{1, 1, 1},
      py::arg("mode") = "regions", "Per-region dice, hd95, sensitivity and specificity.");

  m.def("axis_anchors", &axis_anchors, py::arg("length"), py::arg("patch"), "Patch start offsets along one axis.");

  m.def(
      "tta_member_count",
      [](const std::string& variant) { return tta_members(parse_tta_variant(variant)).size(); },
      py::arg("variant"));
}
