#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tasl/eedetect.hpp"
#include "tasl/error.hpp"
#include "tasl/objectives.hpp"
#include "tasl/pipeline.hpp"
#include "tasl/synthgen.hpp"
#include "tasl/ticselect.hpp"
#include "tasl/trainer.hpp"

namespace py = pybind11;
using namespace tasl;

namespace {

py::array_t<std::uint8_t> video_array(const Video& v) {
  const auto t = static_cast<py::ssize_t>(v.size());
  const py::ssize_t h = v.empty() ? 0 : v[0].height, w = v.empty() ? 0 : v[0].width;
  py::array_t<std::uint8_t> out({t, h, w});
  auto* dst = out.mutable_data();
  for (const auto& f : v) dst = std::copy(f.pixels.begin(), f.pixels.end(), dst);
  return out;
}

Video video_from(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw ShapeError("expected a [frames, height, width] uint8 array");
  const int t = static_cast<int>(a.shape(0)), h = static_cast<int>(a.shape(1)), w = static_cast<int>(a.shape(2));
  Video v;
  const auto* src = a.data();
  for (int i = 0; i < t; ++i) {
    Frame f(h, w);
    std::copy(src, src + f.pixels.size(), f.pixels.begin());
    src += f.pixels.size();
    v.push_back(std::move(f));
  }
  return v;
}

py::dict selection_dict(const tic::ClipSelection& s) {
  py::dict d;
  d["tts"] = s.tts;
  d["ttp"] = s.ttp;
  d["step"] = s.step;
  d["extended_end"] = s.extended_end;
  d["indices"] = s.indices;
  d["fallback"] = s.fallback;
  return d;
}

py::dict case_dict(const synth::Case& c) {
  py::dict d;
  d["gsus"] = video_array(c.video.gsus);
  d["ceus"] = video_array(c.video.ceus);
  d["label"] = c.truth.class_label;
  d["tts"] = c.truth.tts;
  d["ttp"] = c.truth.ttp;
  d["mean_tic"] = c.truth.mean_tic;
  d["clinical"] = c.truth.clinical;
  return d;
}

py::dict metrics_dict(const obj::MetricsReport& m) {
  return py::module_::import("json").attr("loads")(m.to_json().dump());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings to the tasl C++ core";

  static py::exception<Error> base(m, "TaslError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(base.ptr(), (e.kind() + ": " + e.what()).c_str());
    }
  });

  m.def(
      "gamma_variate_tic",
      [](int onset, double amplitude, double shape, double rate, double baseline, int length) {
        return synth::gamma_variate_tic({onset, amplitude, shape, rate, baseline}, length);
      },
      py::arg("onset"), py::arg("amplitude"), py::arg("shape"), py::arg("rate"), py::arg("baseline") = 0.0,
      py::arg("length") = 192);

  m.def(
      "synth_case",
      [](std::uint64_t seed, int label, int frame_count, int height, int width, double noise_sigma) {
        synth::DatasetOptions o;
        o.frame_count = frame_count;
        o.frame_height = height;
        o.frame_width = width;
        o.noise_sigma = noise_sigma;
        return case_dict(synth::generate_case(synth::make_case_spec(seed, label, o)));
      },
      py::arg("seed"), py::arg("label"), py::arg("frame_count") = 192, py::arg("height") = 896,
      py::arg("width") = 704, py::arg("noise_sigma") = 3.0);

  m.def(
      "write_synth_case",
      [](const std::filesystem::path& dir, std::uint64_t seed, int label, int frame_count, int height, int width) {
        synth::DatasetOptions o;
        o.frame_count = frame_count;
        o.frame_height = height;
        o.frame_width = width;
        synth::write_case(dir, synth::generate_case(synth::make_case_spec(seed, label, o)));
      },
      py::arg("dir"), py::arg("seed"), py::arg("label"), py::arg("frame_count") = 192, py::arg("height") = 896,
      py::arg("width") = 704);

  m.def("read_case", [](const std::filesystem::path& dir) { return case_dict(synth::read_case(dir)); });

  m.def("validate_case", [](const std::filesystem::path& dir) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& v : validate_case_dir(dir)) out.emplace_back(v.kind, v.message);
    return out;
  });

  m.def(
      "ssim",
      [](const std::vector<double>& a, const std::vector<double>& b, double range) {
        return detect::ssim_patch(a, b, range);
      },
      py::arg("a"), py::arg("b"), py::arg("range") = detect::kPixelRange);

  m.def(
      "sg_smooth",
      [](const std::vector<double>& y, int window, int order) { return tic::sg_smooth(y, window, order); },
      py::arg("curve"), py::arg("window") = 31, py::arg("order") = 2);

  m.def(
      "find_tts_ttp", [](const std::vector<double>& y, double threshold) { return tic::find_tts_ttp(y, threshold); },
      py::arg("curve"), py::arg("threshold") = 0.2);

  m.def(
      "select_clip",
      [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& gsus,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& ceus, int frames) {
        BimodalVideo v{video_from(gsus), video_from(ceus)};
        tic::SelectOptions o;
        o.frames = frames;
        const auto r = tic::select_clip(v, o);
        auto d = selection_dict(r.selection);
        d["smoothed_tic"] = r.smoothed_tic.values;
        return d;
      },
      py::arg("gsus"), py::arg("ceus"), py::arg("frames") = 32);

  m.def(
      "detect",
      [](const std::filesystem::path& case_dir, int frames) {
        PrepOptions o;
        o.select.frames = frames;
        detect::DetectResult det;
        const auto p = prepare_case(synth::read_case(case_dir), case_dir.filename().string(), o, nullptr, &det);
        py::list entries;
        for (const auto& e : p.set.entries) {
          py::dict d;
          d["group"] = synth::to_string(e.group);
          d["row"] = e.cell.row;
          d["col"] = e.cell.col;
          d["tts"] = e.tts;
          d["tic"] = e.tic;
          d["padded"] = e.padded;
          entries.append(d);
        }
        py::dict out;
        out["selection"] = selection_dict(p.selection);
        out["entries"] = entries;
        out["patch_size"] = det.grid.patch_size;
        return out;
      },
      py::arg("case_dir"), py::arg("frames") = 32);

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return obj::auc_trapezoid(s, y); });
  m.def(
      "metrics",
      [](const std::vector<double>& s, const std::vector<int>& y, double threshold) {
        return metrics_dict(obj::compute_metrics(s, y, threshold));
      },
      py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);
  m.def(
      "focal_loss",
      [](double logit, int label, double alpha, double gamma) { return obj::focal_loss(logit, label, alpha, gamma); },
      py::arg("logit"), py::arg("label"), py::arg("alpha") = 0.2, py::arg("gamma") = 4.0);
  m.def("mmd_loss", [](const std::vector<double>& a, const std::vector<double>& b) { return obj::mmd_loss(a, b); });
  m.def("kfold_split", &obj::kfold_split, py::arg("case_ids"), py::arg("labels"), py::arg("k") = 5,
        py::arg("seed") = 0);

  m.def(
      "lr_at",
      [](long step, int epochs, double lr, double warmup_epochs, int steps_per_epoch) {
        TrainConfig c;
        c.epochs = epochs;
        c.lr = lr;
        c.warmup_epochs = warmup_epochs;
        return lr_at(step, c, steps_per_epoch);
      },
      py::arg("step"), py::arg("epochs") = 100, py::arg("lr") = 2e-3, py::arg("warmup_epochs") = 2.5,
      py::arg("steps_per_epoch") = 1);

  m.def(
      "predict",
      [](const std::filesystem::path& checkpoint, const std::vector<std::filesystem::path>& case_dirs) {
        const auto ckpt = load_checkpoint(checkpoint);
        auto model = build_model(ckpt);
        std::vector<PreparedCase> cases;
        for (const auto& d : case_dirs) cases.push_back(load_prepared(d, {}, ckpt.config.prep));
        py::gil_scoped_release release;
        return evaluate(*model, cases, ckpt.config).scores;
      },
      py::arg("checkpoint"), py::arg("case_dirs"));
}
