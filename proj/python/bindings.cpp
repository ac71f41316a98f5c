#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "crfill/cli.hpp"
#include "crfill/data.hpp"
#include "crfill/maskgen.hpp"
#include "crfill/metrics.hpp"
#include "crfill/train.hpp"

namespace py = pybind11;
using namespace crfill;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_crfill, m) {
  m.doc() = "Attention-free gated-convolution inpainting";

  py::class_<Generator<float>>(m, "Generator")
      .def_static(
          "load", [](const std::string& dir) { return load_generator(dir); }, py::arg("ckpt"))
      .def(
          "inpaint",
          [](const Generator<float>& g, const Array& u, const Array& mask, bool highres) {
            const Tensor<float> tu = to_tensor(u), tm = to_tensor(mask);
            Tensor<float> y;
            {
              py::gil_scoped_release release;
              y = highres ? g.highres_inpaint(tu, tm) : g.inpaint(tu, tm);
            }
            return to_array(y);
          },
          py::arg("u"), py::arg("mask"), py::arg("highres") = false,
          "U (N,3,H,W) in [-1,1] with holes zeroed, mask (N,1,H,W) with 1 = missing; returns the composite.")
      .def_property_readonly("size_multiple", &Generator<float>::size_multiple);

  m.def(
      "square_mask", [](int h, int w, int side, std::uint64_t seed) {
        Rng rng(seed);
        return to_array(square_mask(h, w, side, rng));
      },
      py::arg("height"), py::arg("width"), py::arg("side"), py::arg("seed") = 0);
  m.def(
      "irregular_mask", [](int h, int w, int strokes, int max_width, std::uint64_t seed) {
        Rng rng(seed);
        return to_array(irregular_mask(h, w, strokes, max_width, rng));
      },
      py::arg("height"), py::arg("width"), py::arg("strokes") = 4, py::arg("max_width") = 8, py::arg("seed") = 0);
  m.def(
      "blob_mask", [](int h, int w, int blobs, std::uint64_t seed) {
        Rng rng(seed);
        return to_array(blob_mask(h, w, blobs, rng));
      },
      py::arg("height"), py::arg("width"), py::arg("blobs") = 2, py::arg("seed") = 0);
  m.def(
      "synth_texture",
      [](int size, int tile, const std::string& family, std::uint64_t seed) {
        return to_array(synth_texture(size, tile, parse_texture_family(family), seed));
      },
      py::arg("size") = 64, py::arg("tile") = 16, py::arg("family") = "checker", py::arg("seed") = 0);

  m.def("psnr", [](const Array& a, const Array& b, double range) { return psnr(to_tensor(a), to_tensor(b), range); },
        py::arg("a"), py::arg("b"), py::arg("range") = 1.0);
  m.def("ssim", [](const Array& a, const Array& b, double range) { return ssim(to_tensor(a), to_tensor(b), range); },
        py::arg("a"), py::arg("b"), py::arg("range") = 1.0);
  m.def("l1_error", [](const Array& a, const Array& b) { return l1_error(to_tensor(a), to_tensor(b)); });

  m.def("config_keys", &config_keys);
  m.def(
      "train",
      [](const std::string& config_text, const std::string& out, bool resume) {
        const TrainConfig config = train_config_from(Config::parse_string(config_text));
        py::gil_scoped_release release;
        return run_training(config, out, resume).checkpoint_dir;
      },
      py::arg("config"), py::arg("out"), py::arg("resume") = false,
      "Trains from flat key=value text; returns the checkpoint directory.");
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one subcommand; returns (exit_code, stdout, stderr).");
}
