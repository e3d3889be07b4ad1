#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include "tasl/error.hpp"
#include "tasl/nn/ops.hpp"
#include "tasl/pipeline.hpp"
#include "tasl/png_io.hpp"
#include "tasl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tasl;

namespace {

constexpr const char* kVersion = "1.0.0";

/// Collects what a command read and wrote; written as <command>.run.json.
struct RunManifest {
  explicit RunManifest(std::string cmd) : command(std::move(cmd)) {}

  std::string command;
  json config = json::object();
  std::vector<std::pair<std::string, fs::path>> inputs;
  std::vector<fs::path> outputs;
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::time_t started_at = std::time(nullptr);

  void write(const fs::path& dir) const {
    json in = json::array();
    for (const auto& [role, p] : inputs) in.push_back({{"role", role}, {"path", p.string()}, {"sha1", tree_hash(p)}});
    json out = json::array();
    for (const auto& p : outputs) out.push_back(p.string());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&started_at));
    const json m{{"command", command},
                 {"version", kVersion},
                 {"config", config},
                 {"inputs", in},
                 {"outputs", out},
                 {"seed", seed},
                 {"started_at", stamp},
                 {"wall_clock_seconds",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
    fs::create_directories(dir);
    std::ofstream os(dir / (command + ".run.json"));
    if (!os) throw IoError("cannot write run manifest in " + dir.string());
    os << m.dump(2) << '\n';
  }
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Empty (or, with force, emptied) output directory.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw IoError("output directory " + dir.string() + " is not empty (use --force to replace it)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

bool is_case_dir(const fs::path& p) { return fs::exists(p / "manifest.json"); }

std::uint64_t resolve_seed(std::uint64_t config_seed, const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const auto env = env_seed()) return *env;
  return config_seed;
}

void note(const std::string& msg) { std::cerr << msg << '\n'; }

// ---------------------------------------------------------------------------

struct SynthArgs {
  int n = 0;
  std::optional<std::uint64_t> seed;
  fs::path out;
  double balance = 0.5;
  synth::DatasetOptions data;
  bool force = false;
  int jobs = 1;
};

void cmd_synth(const SynthArgs& a) {
  if (a.n < 1) throw ParameterError("--n must be at least 1");
  RunManifest run("synth");
  run.seed = resolve_seed(0, a.seed);
  prepare_out_dir(a.out, a.force);
  const auto specs = synth::make_dataset_specs(a.n, a.balance, run.seed, a.data);
  std::vector<std::string> ids(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%04zu", i);
    ids[i] = buf;
  }
  parallel_for(specs.size(), a.jobs, [&](std::size_t i) { synth::write_case(a.out / ids[i], synth::generate_case(specs[i])); });
  json cases = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    cases.push_back({{"id", ids[i]}, {"class_label", specs[i].class_label}, {"seed", specs[i].seed}});
    run.outputs.push_back(a.out / ids[i]);
  }
  const json options{{"n", a.n},
                     {"seed", run.seed},
                     {"balance", a.balance},
                     {"frame_count", a.data.frame_count},
                     {"frame_height", a.data.frame_height},
                     {"frame_width", a.data.frame_width},
                     {"noise_sigma", a.data.noise_sigma},
                     {"motion_amplitude", a.data.motion_amplitude},
                     {"motion_period", a.data.motion_period},
                     {"speckle_gain", a.data.speckle_gain}};
  write_json(a.out / "dataset.json", {{"format", "tasl-dataset"}, {"options", options}, {"cases", cases}});
  run.config = options;
  run.write(a.out);
  note("synth: wrote " + std::to_string(a.n) + " cases to " + a.out.string());
}

int cmd_validate(const fs::path& in) {
  const auto dirs = is_case_dir(in) ? std::vector<fs::path>{in} : list_cases(in);
  json report = json::array();
  std::size_t total = 0;
  for (const auto& d : dirs) {
    const auto violations = validate_case_dir(d);
    json v = json::array();
    for (const auto& x : violations) v.push_back({{"kind", x.kind}, {"message", x.message}});
    total += violations.size();
    report.push_back({{"case", d.filename().string()}, {"violations", v}});
  }
  std::cout << json{{"cases", report}, {"violation_count", total}}.dump(2) << '\n';
  if (total > 0) {
    std::cerr << "error: DataError: " << total << " violation(s) found\n";
    return 1;
  }
  return 0;
}

struct SelectArgs {
  fs::path in, out;
  tic::SelectOptions opt;
  bool force = false;
  int jobs = 1;
};

void select_one(const fs::path& in, const fs::path& out, const tic::SelectOptions& opt) {
  const auto c = synth::read_case(in);
  const auto sel = tic::select_clip(c.video, opt);
  synth::write_case(out, sampled_case(c, sel));
  auto j = selection_json(sel.selection);
  j["raw_tic"] = sel.raw_tic.values;
  j["smoothed_tic"] = sel.smoothed_tic.values;
  j["source"] = in.string();
  write_json(out / "selection.json", j);
}

void cmd_select(const SelectArgs& a) {
  RunManifest run("select");
  run.inputs.push_back({"input", a.in});
  run.config = {{"window", a.opt.window}, {"order", a.opt.order}, {"grad_threshold", a.opt.grad_threshold},
                {"frames", a.opt.frames}};
  prepare_out_dir(a.out, a.force);
  if (is_case_dir(a.in)) {
    select_one(a.in, a.out, a.opt);
    run.outputs.push_back(a.out);
  } else {
    const auto dirs = list_cases(a.in);
    parallel_for(dirs.size(), a.jobs, [&](std::size_t i) { select_one(dirs[i], a.out / dirs[i].filename(), a.opt); });
    for (const auto& d : dirs) run.outputs.push_back(a.out / d.filename());
  }
  run.write(a.out);
}

struct DetectArgs {
  fs::path in, out, ssim_map;
  detect::DetectOptions opt;
  int sample_step = 0;  // 0: read from selection.json
  std::optional<std::uint64_t> seed;
  bool force = false;
  int jobs = 1;
};

json detect_one(const fs::path& in, const fs::path& out_json, const DetectArgs& a, const fs::path& ssim_path) {
  const auto c = synth::read_case(in);
  auto opt = a.opt;
  opt.sample_step = a.sample_step;
  if (opt.sample_step == 0) {
    opt.sample_step = fs::exists(in / "selection.json") ? read_json(in / "selection.json").value("step", 1) : 1;
  }
  const auto r = detect::earliest_enhanced_tics(c.video, opt);
  auto j = positions_json(r);
  j["sample_step"] = opt.sample_step;
  write_json(out_json, j);
  if (!ssim_path.empty()) detect::write_ssim_map(ssim_path, r.ssim);
  return j;
}

void cmd_detect(const DetectArgs& a_in) {
  auto a = a_in;
  RunManifest run("detect");
  run.seed = a.opt.seed = resolve_seed(0, a.seed);
  run.inputs.push_back({"input", a.in});
  run.config = {{"patch_size", a.opt.patch_size}, {"tau_wall", a.opt.tau_wall},
                {"tau_nwall", a.opt.tau_nwall},   {"wall_fraction", a.opt.wall_fraction},
                {"window", a.opt.sg_window},      {"order", a.opt.sg_order},
                {"grad_threshold", a.opt.grad_threshold}, {"sample_step", a.sample_step}};
  if (is_case_dir(a.in)) {
    if (fs::exists(a.out) && !a.force) throw IoError(a.out.string() + " exists (use --force to overwrite)");
    detect_one(a.in, a.out, a, a.ssim_map);
    run.outputs.push_back(a.out);
    if (!a.ssim_map.empty()) run.outputs.push_back(a.ssim_map);
    run.write(a.out.has_parent_path() ? a.out.parent_path() : fs::path("."));
    return;
  }
  prepare_out_dir(a.out, a.force);
  const auto dirs = list_cases(a.in);
  parallel_for(dirs.size(), a.jobs, [&](std::size_t i) {
    const auto dst = a.out / dirs[i].filename();
    detect_one(dirs[i], dst / "positions.json", a, a.ssim_map.empty() ? fs::path() : dst / "ssim_map.bin");
  });
  for (const auto& d : dirs) run.outputs.push_back(a.out / d.filename() / "positions.json");
  run.write(a.out);
}

std::vector<PreparedCase> load_dataset(const fs::path& data, const fs::path& cache, const PrepOptions& prep,
                                       int jobs) {
  const auto dirs = list_cases(data);
  std::vector<PreparedCase> cases(dirs.size());
  parallel_for(dirs.size(), jobs, [&](std::size_t i) { cases[i] = load_prepared(dirs[i], cache, prep); });
  for (const auto& c : cases) {
    if (c.label != 0 && c.label != 1) throw DataError("case " + c.id + " has no binary class label");
  }
  note("loaded " + std::to_string(cases.size()) + " cases from " + data.string());
  return cases;
}

struct TrainArgs {
  fs::path config, data, val_data, out, cache;
  bool cv = false, micro = false, table1_temporal = false, force = false;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr, weight_decay, lambda;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  const TrainConfig base = a.micro ? TrainConfig::micro() : TrainConfig{};
  FlatConfig flat = a.config.empty() ? FlatConfig{} : FlatConfig::load(a.config);
  if (a.table1_temporal) flat.set("model.table1_temporal", "true");
  auto cfg = TrainConfig::from_flat(flat, base);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr = *a.lr;
  if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
  if (a.lambda) cfg.loss.lambda = *a.lambda;
  cfg.seed = resolve_seed(cfg.seed, a.seed);
  // re-derive the seed-dependent fields
  return TrainConfig::from_flat(cfg.to_flat(), base);
}

void cmd_train(const TrainArgs& a) {
  RunManifest run("train");
  const auto cfg = resolve_train_config(a);
  run.seed = cfg.seed;
  run.config = json::object();
  const auto flat = cfg.to_flat();
  for (const auto& [k, v] : flat.values()) run.config[k] = v;
  run.inputs.push_back({"data", a.data});
  if (!a.config.empty()) run.inputs.push_back({"config", a.config});
  if (!a.val_data.empty()) run.inputs.push_back({"val_data", a.val_data});
  prepare_out_dir(a.out, a.force);
  const auto cache = a.cache.empty() ? a.out / "cache" : a.cache;
  std::ofstream(a.out / "config.cfg") << cfg.to_flat().render();
  run.outputs.push_back(a.out / "config.cfg");

  const auto cases = load_dataset(a.data, cache, cfg.prep, a.jobs);
  std::ofstream log(a.out / "loss_log.jsonl");
  auto on_epoch = [&](const json& rec) {
    log << rec.dump() << '\n';
    log.flush();
    std::string line = "epoch " + std::to_string(rec.at("epoch").get<int>());
    if (rec.contains("fold")) line = "fold " + std::to_string(rec.at("fold").get<int>()) + " " + line;
    line += " loss " + std::to_string(rec.at("train_loss").get<double>());
    if (rec.contains("val_auc")) line += " val_auc " + std::to_string(rec.at("val_auc").get<double>());
    note(line);
  };
  run.outputs.push_back(a.out / "loss_log.jsonl");

  if (a.cv) {
    const auto res = run_cv(cfg, cases, cfg.folds, on_epoch);
    write_json(a.out / "folds.json", res.folds);
    write_json(a.out / "metrics.json", res.report.to_json());
    for (std::size_t f = 0; f < res.checkpoints.size(); ++f) {
      const auto p = a.out / ("fold_" + std::to_string(f)) / "checkpoint.tarc";
      save_checkpoint(p, res.checkpoints[f]);
      run.outputs.push_back(p);
    }
    run.outputs.push_back(a.out / "folds.json");
    run.outputs.push_back(a.out / "metrics.json");
  } else {
    std::vector<PreparedCase> val;
    if (!a.val_data.empty()) val = load_dataset(a.val_data, cache, cfg.prep, a.jobs);
    const auto res = train(cfg, cases, val, on_epoch);
    save_checkpoint(a.out / "checkpoint.tarc", res.best);
    save_checkpoint(a.out / "last.tarc", res.last);
    run.outputs.push_back(a.out / "checkpoint.tarc");
    run.outputs.push_back(a.out / "last.tarc");
    if (!val.empty()) {
      auto model = build_model(res.best);
      const auto ev = evaluate(*model, val, cfg);
      write_json(a.out / "metrics.json", obj::compute_metrics(ev.scores, ev.labels, cfg.threshold).to_json());
      run.outputs.push_back(a.out / "metrics.json");
    }
  }
  run.write(a.out);
}

struct EvalArgs {
  fs::path checkpoint, data, out, cache;
  std::optional<double> threshold;
  bool force = false;
  int jobs = 1;
};

void cmd_eval(const EvalArgs& a) {
  RunManifest run("eval");
  const auto ckpt = load_checkpoint(a.checkpoint);
  auto cfg = ckpt.config;
  if (a.threshold) cfg.threshold = *a.threshold;
  run.seed = cfg.seed;
  run.config = {{"threshold", cfg.threshold}, {"checkpoint_epoch", ckpt.epoch}};
  run.inputs.push_back({"checkpoint", a.checkpoint});
  run.inputs.push_back({"data", a.data});
  prepare_out_dir(a.out, a.force);
  const auto cases = load_dataset(a.data, a.cache.empty() ? a.out / "cache" : a.cache, cfg.prep, a.jobs);
  auto model = build_model(ckpt);
  const auto ev = evaluate(*model, cases, cfg);
  const auto report = obj::compute_metrics(ev.scores, ev.labels, cfg.threshold);
  write_json(a.out / "metrics.json", report.to_json());
  std::ofstream roc(a.out / "roc.txt");
  roc << "# fpr tpr threshold\n";
  char buf[96];
  for (const auto& p : obj::roc_curve(ev.scores, ev.labels)) {
    std::snprintf(buf, sizeof(buf), "%.6f %.6f %.9g\n", p.fpr, p.tpr, p.threshold);
    roc << buf;
  }
  json scores = json::array();
  for (std::size_t i = 0; i < ev.ids.size(); ++i) {
    scores.push_back({{"id", ev.ids[i]}, {"score", ev.scores[i]}, {"label", ev.labels[i]}});
  }
  write_json(a.out / "scores.json", scores);
  run.outputs = {a.out / "metrics.json", a.out / "roc.txt", a.out / "scores.json"};
  run.write(a.out);
  std::cout << report.to_json().dump(2) << '\n';
}

struct ExportArgs {
  fs::path checkpoint, case_dir, out;
  std::string stages;
  bool force = false;
};

// Channel-mean |activation| of x[1, T, H, W, C] -> [T, H, W].
std::vector<double> magnitude(const nn::Tensor& x) {
  const auto& s = x.shape();
  const std::size_t c = static_cast<std::size_t>(s[4]);
  std::vector<double> m(x.size() / c);
  for (std::size_t i = 0; i < m.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += std::fabs(x.values()[i * c + k]);
    m[i] = acc / static_cast<double>(c);
  }
  return m;
}

void cmd_export_attn(const ExportArgs& a) {
  RunManifest run("export-attn");
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto& cfg = ckpt.config;
  run.seed = cfg.seed;
  run.inputs = {{"checkpoint", a.checkpoint}, {"case", a.case_dir}};
  run.config = {{"stages", a.stages}};
  prepare_out_dir(a.out, a.force);

  const auto c = synth::read_case(a.case_dir);
  tic::SelectResult sel;
  detect::DetectResult det;
  const auto prepared = prepare_case(c, a.case_dir.filename().string(), cfg.prep, &sel, &det);
  auto model = build_model(ckpt);
  const auto batch = make_batch({&prepared}, cfg.use_clinical, cfg.model.clinical_dim);

  nn::NoGradGuard no_grad;
  cmt::CmtTrace trace;
  trace.keep_tensors = true;
  model->cmt()(batch.video, &trace);
  etic::EticTrace etrace;
  model->etic()(batch.tics, &etrace);

  std::vector<std::string> wanted;
  for (std::size_t p = 0; p < a.stages.size();) {
    const auto q = a.stages.find(',', p);
    wanted.push_back(a.stages.substr(p, q == std::string::npos ? std::string::npos : q - p));
    p = q == std::string::npos ? a.stages.size() : q + 1;
  }
  const int frames = static_cast<int>(sel.video.frame_count());
  const int fh = sel.video.ceus.front().height, fw = sel.video.ceus.front().width;
  int written = 0;
  json stages = json::array();
  for (std::size_t i = 0; i < trace.tensors.size(); ++i) {
    const auto& name = trace.shapes[i].first;
    const auto& t = trace.tensors[i];
    if (t.rank() != 5) continue;
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    const auto m = magnitude(t);
    const int tt = t.dim(1), th = t.dim(2), tw = t.dim(3);
    const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
    const double span = *hi - *lo;
    const auto dir = a.out / name;
    fs::create_directories(dir);
    for (int f = 0; f < frames; ++f) {
      const int ti = std::min(tt - 1, f * tt / frames);
      // the map spans both modalities side by side
      Frame img(fh, 2 * fw);
      for (int y = 0; y < fh; ++y) {
        const int my = std::min(th - 1, y * th / fh);
        for (int x = 0; x < 2 * fw; ++x) {
          const int mx = std::min(tw - 1, x * tw / (2 * fw));
          const double v = m[(static_cast<std::size_t>(ti) * th + my) * tw + mx];
          img.at(y, x) = static_cast<std::uint8_t>(std::lround(span > 0.0 ? 255.0 * (v - *lo) / span : 0.0));
        }
      }
      write_png(dir / synth::frame_name(static_cast<std::size_t>(f)), img);
      ++written;
    }
    stages.push_back({{"name", name}, {"shape", t.shape()}, {"min", *lo}, {"max", *hi}});
    run.outputs.push_back(dir);
  }

  // Detect-stage overlay: CEUS scaled to [0, 200], selected cells outlined at 255.
  const auto overlay_dir = a.out / "ssim_overlay";
  fs::create_directories(overlay_dir);
  for (int f = 0; f < frames; ++f) {
    const auto& src = sel.video.ceus[static_cast<std::size_t>(f)];
    Frame img(src.height, src.width);
    for (std::size_t k = 0; k < img.pixels.size(); ++k) {
      img.pixels[k] = static_cast<std::uint8_t>(std::lround(src.pixels[k] * 200.0 / 255.0));
    }
    for (const auto& e : det.set.entries) {
      const auto r = det.grid.rect(e.cell);
      const int y1 = std::min(src.height, r.top + r.height) - 1, x1 = std::min(src.width, r.left + r.width) - 1;
      for (int x = r.left; x <= x1; ++x) img.at(r.top, x) = img.at(y1, x) = 255;
      for (int y = r.top; y <= y1; ++y) img.at(y, r.left) = img.at(y, x1) = 255;
    }
    write_png(overlay_dir / synth::frame_name(static_cast<std::size_t>(f)), img);
  }
  write_json(a.out / "positions.json", positions_json(det));

  json attn = json::array();
  for (const auto& w : etrace.attention) attn.push_back({{"shape", w.shape()}, {"values", w.values()}});
  write_json(a.out / "etic_attention.json", attn);
  write_json(a.out / "stages.json", stages);
  run.outputs.push_back(overlay_dir);
  run.outputs.push_back(a.out / "positions.json");
  run.outputs.push_back(a.out / "etic_attention.json");
  run.write(a.out);
  note("export-attn: " + std::to_string(written) + " stage images, " + std::to_string(frames) + " overlay frames");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-branch CEUS/B-mode perfusion classifier: data synthesis, preprocessing, training, evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic bimodal dataset");
  synth_cmd->add_option("--n", sa.n, "Number of cases")->required();
  synth_cmd->add_option("--seed", sa.seed, "Dataset seed (default: TASL_SEED or 0)");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--balance", sa.balance, "Fraction of malignant cases")->capture_default_str();
  synth_cmd->add_option("--frames", sa.data.frame_count, "Frames per video")->capture_default_str();
  synth_cmd->add_option("--height", sa.data.frame_height, "Frame height")->capture_default_str();
  synth_cmd->add_option("--width", sa.data.frame_width, "Frame width")->capture_default_str();
  synth_cmd->add_option("--noise", sa.data.noise_sigma, "Gaussian pixel noise sigma")->capture_default_str();
  synth_cmd->add_option("--motion", sa.data.motion_amplitude, "Respiratory drift amplitude (px)")->capture_default_str();
  synth_cmd->add_option("--motion-period", sa.data.motion_period, "Breathing period (frames)")->capture_default_str();
  synth_cmd->add_option("--speckle", sa.data.speckle_gain, "Contrast speckle gain")->capture_default_str();
  synth_cmd->add_flag("--force", sa.force, "Replace a non-empty output directory");
  synth_cmd->add_option("--jobs", sa.jobs, "Parallel workers")->capture_default_str();

  fs::path validate_in;
  auto* validate_cmd = app.add_subcommand("validate", "Check a case or dataset directory");
  validate_cmd->add_option("--in", validate_in, "Case or dataset directory")->required();

  SelectArgs sel;
  auto* select_cmd = app.add_subcommand("select", "TIC-based clip selection");
  select_cmd->add_option("--in", sel.in, "Case or dataset directory")->required();
  select_cmd->add_option("--out", sel.out, "Output directory")->required();
  select_cmd->add_option("--window", sel.opt.window, "Savitzky-Golay window")->capture_default_str();
  select_cmd->add_option("--order", sel.opt.order, "Savitzky-Golay order")->capture_default_str();
  select_cmd->add_option("--grad-threshold", sel.opt.grad_threshold, "Onset gradient threshold")->capture_default_str();
  select_cmd->add_option("--frames", sel.opt.frames, "Frames to sample")->capture_default_str();
  select_cmd->add_flag("--force", sel.force, "Replace a non-empty output directory");
  select_cmd->add_option("--jobs", sel.jobs, "Parallel workers")->capture_default_str();

  DetectArgs det;
  auto* detect_cmd = app.add_subcommand("detect", "Earliest-enhanced position detection on a sampled case");
  detect_cmd->add_option("--in", det.in, "Sampled case or dataset directory")->required();
  detect_cmd->add_option("--out", det.out, "positions.json (case) or output directory (dataset)")->required();
  detect_cmd->add_option("--ssim-map", det.ssim_map, "Also dump the SSIM map (case mode: this path)");
  detect_cmd->add_option("--patch-size", det.opt.patch_size, "Patch size")->capture_default_str();
  detect_cmd->add_option("--tau-wall", det.opt.tau_wall, "SSIM gate for wall cells")->capture_default_str();
  detect_cmd->add_option("--tau-nwall", det.opt.tau_nwall, "SSIM gate for non-wall cells")->capture_default_str();
  detect_cmd->add_option("--wall-fraction", det.opt.wall_fraction, "Top grid rows treated as wall")->capture_default_str();
  detect_cmd->add_option("--window", det.opt.sg_window, "Savitzky-Golay window")->capture_default_str();
  detect_cmd->add_option("--order", det.opt.sg_order, "Savitzky-Golay order")->capture_default_str();
  detect_cmd->add_option("--grad-threshold", det.opt.grad_threshold, "Onset gradient threshold")->capture_default_str();
  detect_cmd->add_option("--sample-step", det.sample_step, "Raw frames per sampled frame (0: from selection.json)")
      ->capture_default_str();
  detect_cmd->add_option("--seed", det.seed, "Clustering seed (default: TASL_SEED or 0)");
  detect_cmd->add_flag("--force", det.force, "Overwrite existing outputs");
  detect_cmd->add_option("--jobs", det.jobs, "Parallel workers")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the two-branch network");
  train_cmd->add_option("--config", tr.config, "Flat key = value config file");
  train_cmd->add_option("--data", tr.data, "Training dataset directory")->required();
  train_cmd->add_option("--val-data", tr.val_data, "Validation dataset directory");
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--cache", tr.cache, "Preprocessing cache (default: <out>/cache)");
  train_cmd->add_flag("--cv", tr.cv, "Stratified k-fold cross-validation instead of a single run");
  train_cmd->add_flag("--micro", tr.micro, "Start from the desk-scale model configuration");
  train_cmd->add_flag("--table1-temporal", tr.table1_temporal, "Extra temporal pooling after the stem");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs [100]");
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size [2]");
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate [0.002]");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "Weight decay [0.05]");
  train_cmd->add_option("--lambda", tr.lambda, "MMD loss weight [0.83]");
  train_cmd->add_option("--seed", tr.seed, "Seed (default: config, then TASL_SEED)");
  train_cmd->add_flag("--force", tr.force, "Replace a non-empty output directory");
  train_cmd->add_option("--jobs", tr.jobs, "Parallel preprocessing workers")->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Test dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--cache", ev.cache, "Preprocessing cache (default: <out>/cache)");
  eval_cmd->add_option("--threshold", ev.threshold, "Decision threshold on the probability [0.5]");
  eval_cmd->add_flag("--force", ev.force, "Replace a non-empty output directory");
  eval_cmd->add_option("--jobs", ev.jobs, "Parallel preprocessing workers")->capture_default_str();

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-attn", "Per-stage activation heat maps and the detection overlay");
  export_cmd->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  export_cmd->add_option("--case", ex.case_dir, "Raw case directory")->required();
  export_cmd->add_option("--out", ex.out, "Output directory")->required();
  export_cmd->add_option("--stages", ex.stages, "Comma-separated stage names (default: all)");
  export_cmd->add_flag("--force", ex.force, "Replace a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth_cmd) cmd_synth(sa);
    else if (*validate_cmd) return cmd_validate(validate_in);
    else if (*select_cmd) cmd_select(sel);
    else if (*detect_cmd) cmd_detect(det);
    else if (*train_cmd) cmd_train(tr);
    else if (*eval_cmd) cmd_eval(ev);
    else if (*export_cmd) cmd_export_attn(ex);
  } catch (const tasl::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
