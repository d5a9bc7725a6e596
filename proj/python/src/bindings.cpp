#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "robomamba/bench.hpp"
#include "robomamba/binio.hpp"
#include "robomamba/ssm.hpp"
#include "robomamba/trainer.hpp"

namespace py = pybind11;
using namespace robomamba;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<float>& t) {
  const auto& shape = t.shape();
  Array out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict pose_dict(const EndEffectorPose& p) {
  py::dict d;
  d["u"] = p.u;
  d["v"] = p.v;
  d["position"] = p.position;
  d["rotation"] = p.rotation;
  d["gripper"] = p.gripper;
  return d;
}

Image scene_image(std::uint64_t seed) { return sim::render(sim::spawn_scene(seed)).image; }

ModelConfig make_config(std::size_t d_model, std::size_t layers, std::size_t d_state, const std::string& head,
                        std::size_t head_hidden, bool gripper, std::uint64_t seed) {
  ModelConfig c;
  c.lm.block.d_model = d_model;
  c.lm.n_layers = layers;
  c.lm.block.d_state = d_state;
  c.head.variant = parse_head_variant(head);
  c.head.hidden = head_hidden;
  c.head.gripper = gripper;
  c.seed = seed;
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Vision-language state space model with a manipulation policy head";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());
  auto data_error = py::register_exception<DataError>(m, "DataError", error.ptr());
  py::register_exception<IoError>(m, "IoError", error.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", data_error.ptr());

  m.def("discretize_zoh", [](double a, double b, double delta) { return ssm::discretize_zoh(a, b, delta); },
        py::arg("a"), py::arg("b"), py::arg("delta"), "Scalar zero-order hold: returns (abar, bbar).");

  m.def(
      "selective_scan",
      [](const Array& u, const Array& delta, const Array& A, const Array& B, const Array& C, const std::string& mode) {
        NoGradGuard g;
        const auto out = selective_scan(to_tensor(u), to_tensor(delta), to_tensor(A), to_tensor(B), to_tensor(C),
                                        mode == "parallel" ? ScanMode::parallel : ScanMode::sequential);
        return to_array(out);
      },
      py::arg("u"), py::arg("delta"), py::arg("A"), py::arg("B"), py::arg("C"), py::arg("mode") = "sequential",
      "u, delta [L, D]; A [D, N]; B, C [L, N] -> y [L, D].");

  m.def(
      "attention",
      [](const Array& x, std::uint64_t seed) {
        if (x.ndim() != 2) throw ShapeError("attention expects a 2D array");
        Rng rng(seed);
        const AttentionBaseline<float> att(std::size_t(x.shape(1)), rng);
        return to_array(att.forward(to_tensor(x)));
      },
      py::arg("x"), py::arg("seed") = 0, "Causal softmax attention baseline with seeded weights.");

  py::class_<Image>(m, "Image")
      .def_readonly("width", &Image::width)
      .def_readonly("height", &Image::height)
      .def_property_readonly("rgb",
                             [](const Image& im) {
                               Array a({py::ssize_t(im.height), py::ssize_t(im.width), py::ssize_t(3)});
                               std::copy(im.rgb.begin(), im.rgb.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("depth", [](const Image& im) -> py::object {
        if (!im.has_depth()) return py::none();
        Array a({py::ssize_t(im.height), py::ssize_t(im.width)});
        std::copy(im.depth.begin(), im.depth.end(), a.mutable_data());
        return a;
      });
  m.def("read_rmim", &read_rmim, py::arg("path"));
  m.def("write_rmim", &write_rmim, py::arg("path"), py::arg("image"));
  m.def("scene_image", &scene_image, py::arg("seed"), "Rendered RGB-D view of the simulator scene for a seed.");

  py::class_<RoboMambaModel>(m, "Model")
      .def(py::init([](std::size_t d_model, std::size_t layers, std::size_t d_state, const std::string& head,
                       std::size_t head_hidden, bool gripper, std::uint64_t seed) {
             return RoboMambaModel(make_config(d_model, layers, d_state, head, head_hidden, gripper, seed),
                                   toy_tokenizer());
           }),
           py::arg("d_model") = 128, py::arg("layers") = 4, py::arg("d_state") = 8, py::arg("head") = "mlp2",
           py::arg("head_hidden") = 8, py::arg("gripper") = false, py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const RoboMambaModel& self, const std::filesystem::path& p) { save_checkpoint(self, p); },
           py::arg("path"))
      .def_property(
          "stage", [](const RoboMambaModel& self) { return std::string(to_string(self.stage())); },
          [](RoboMambaModel& self, const std::string& s) { self.set_stage(parse_stage(s)); })
      .def("param_report",
           [](const RoboMambaModel& self) {
             const auto r = self.param_report();
             py::dict d;
             for (std::size_t g = 0; g < 4; ++g) {
               d[to_string(static_cast<ParamGroup>(g))] = py::make_tuple(r.total[g], r.trainable[g]);
             }
             d["total"] = r.total_count;
             d["trainable"] = r.trainable_count;
             d["ratio"] = r.ratio;
             return d;
           })
      .def("generate", &RoboMambaModel::generate, py::arg("image"), py::arg("prompt") = "describe the image.",
           py::arg("max_new") = 24)
      .def("act", [](const RoboMambaModel& self, const Image& im, const std::string& prompt) {
        return pose_dict(self.act(im, prompt));
      }, py::arg("image"), py::arg("prompt"))
      .def("hidden", [](const RoboMambaModel& self, const Image& im, const std::string& prompt) {
        NoGradGuard g;
        return to_array(self.hidden(im, prompt));
      }, py::arg("image"), py::arg("prompt"))
      .def(
          "train",
          [](RoboMambaModel& self, const std::string& stage_name, std::size_t samples, std::uint64_t seed,
             std::optional<double> lr, std::size_t max_steps, std::size_t batch,
             std::optional<std::filesystem::path> manifest) {
            const Stage stage = parse_stage(stage_name);
            Dataset data;
            if (manifest) {
              data = read_manifest(*manifest);
            } else if (stage == Stage::manip) {
              data = make_manip_dataset(samples, seed);
            } else if (stage == Stage::cotrain) {
              data = make_cotrain_dataset(samples, seed);
            } else {
              data = make_caption_dataset(samples, seed);
            }
            TrainOptions o = stage_defaults(stage);
            if (lr) o.optim.lr = *lr;
            o.max_steps = max_steps;
            o.batch = batch;
            o.seed = seed;
            std::vector<double> losses;
            {
              py::gil_scoped_release release;
              for (const auto& s : run_stage(self, stage, data, o).steps) losses.push_back(s.loss);
            }
            return losses;
          },
          py::arg("stage"), py::arg("samples") = 32, py::arg("seed") = 0, py::arg("lr") = py::none(),
          py::arg("max_steps") = 0, py::arg("batch") = 8, py::arg("manifest") = py::none(),
          "Run one stage on a manifest or a generated toy set; returns per-step losses.")
      .def(
          "pose_losses",
          [](const RoboMambaModel& self, std::size_t samples, std::uint64_t seed) {
            const auto l = pose_losses(self, make_manip_dataset(samples, seed));
            return py::make_tuple(l.position, l.direction);
          },
          py::arg("samples") = 32, py::arg("seed") = 0, "(position, direction) losses on a toy episode set.");

  m.def(
      "evaluate",
      [](py::object policy, std::size_t episodes, std::uint64_t seed) {
        sim::Policy p;
        if (py::isinstance<RoboMambaModel>(policy)) {
          p = model_policy(policy.cast<const RoboMambaModel&>());
        } else {
          const auto name = policy.cast<std::string>();
          if (name == "oracle") {
            p = sim::oracle_policy;
          } else if (name == "center") {
            p = sim::center_policy;
          } else {
            throw DataError("unknown policy '" + name + "' (expected oracle, center or a Model)");
          }
        }
        py::gil_scoped_release release;
        return sim::evaluate(p, episodes, seed).success_rate;
      },
      py::arg("policy"), py::arg("episodes") = 50, py::arg("seed") = 0, "Success rate on fresh scenes.");

  m.def(
      "collect_episode",
      [](std::uint64_t seed) {
        const auto ep = sim::collect_episode(seed);
        py::dict d;
        d["seed"] = ep.seed;
        d["kind"] = sim::to_string(ep.kind);
        d["prompt"] = ep.prompt;
        d["image"] = ep.image;
        d["pose"] = pose_dict(ep.pose);
        d["pixel"] = py::make_tuple(ep.pixel_x, ep.pixel_y);
        d["success"] = ep.success;
        d["dq"] = ep.dq;
        return d;
      },
      py::arg("seed"));

  m.def(
      "bench_scaling",
      [](std::vector<std::size_t> lengths, std::size_t d_model, std::size_t repeats, std::uint64_t seed) {
        BenchConfig c;
        c.lengths = std::move(lengths);
        c.d_model = d_model;
        c.repeats = repeats;
        c.seed = seed;
        BenchResult r;
        {
          py::gil_scoped_release release;
          r = bench_scaling(c);
        }
        py::list rows;
        for (const auto& rec : r.records) {
          py::dict d;
          d["length"] = rec.length;
          d["mechanism"] = to_string(rec.mechanism);
          d["median_ms"] = rec.median_ms;
          d["spread_ms"] = rec.spread_ms;
          d["peak_bytes"] = rec.peak_bytes;
          d["flagged"] = rec.flagged;
          rows.append(d);
        }
        py::dict slopes;
        for (const auto& [mech, s] : r.slopes) slopes[to_string(mech)] = s;
        return py::make_tuple(rows, slopes);
      },
      py::arg("lengths"), py::arg("d_model") = 64, py::arg("repeats") = 5, py::arg("seed") = 0,
      "Returns (records, slopes); slopes is empty unless there are 4+ lengths spanning 8x.");
}
