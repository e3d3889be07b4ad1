#include "tasl/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "tasl/archive.hpp"
#include "tasl/error.hpp"
#include "tasl/png_io.hpp"

namespace tasl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json entry_json(const detect::EarliestEntry& e) {
  return {{"group", synth::to_string(e.group)},
          {"row", e.cell.row},
          {"col", e.cell.col},
          {"tts", e.tts},
          {"score", e.score},
          {"padded", e.padded},
          {"tic", e.tic}};
}

detect::EarliestEntry entry_from_json(const json& j) {
  detect::EarliestEntry e;
  e.group = synth::tissue_from_string(j.at("group").get<std::string>());
  e.cell = {j.at("row").get<int>(), j.at("col").get<int>()};
  e.tts = j.at("tts");
  e.score = j.at("score");
  e.padded = j.value("padded", false);
  e.tic = j.at("tic").get<std::vector<double>>();
  return e;
}

json set_json(const detect::EarliestEnhancedSet& s) {
  json entries = json::array();
  for (const auto& e : s.entries) entries.push_back(entry_json(e));
  return {{"entries", entries}, {"degenerate", s.degenerate}, {"notes", s.notes}};
}

detect::EarliestEnhancedSet set_from_json(const json& j) {
  detect::EarliestEnhancedSet s;
  for (const auto& e : j.at("entries")) s.entries.push_back(entry_from_json(e));
  s.degenerate = j.value("degenerate", false);
  s.notes = j.value("notes", std::vector<std::string>{});
  return s;
}

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < n; ++i) {
    out += digits[d[i] >> 4];
    out += digits[d[i] & 15];
  }
  return out;
}

}  // namespace

std::string sha1_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned n = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &n, EVP_sha1(), nullptr) != 1) {
    throw IoError("SHA-1 digest failed");
  }
  return hex(md.data(), n);
}

std::string sha1_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return sha1_hex(ss.str());
}

std::string prep_key(const PrepOptions& o) {
  const auto& s = o.select;
  const auto& d = o.detect;
  json j{{"select", {s.window, s.order, s.grad_threshold, s.frames}},
         {"detect",
          {d.patch_size, d.tau_wall, d.tau_nwall, d.wall_fraction, d.sg_window, d.sg_order, d.grad_threshold,
           d.rising_half_window, d.seed, static_cast<int>(d.lesion_rule)}},
         {"video_size", o.video_size}};
  return sha1_hex(j.dump());
}

json selection_json(const tic::ClipSelection& s) {
  return {{"tts", s.tts},     {"ttp", s.ttp},         {"step", s.step},
          {"extended_end", s.extended_end}, {"indices", s.indices}, {"fallback", s.fallback}};
}

tic::ClipSelection selection_from_json(const json& j) {
  tic::ClipSelection s;
  s.tts = j.at("tts");
  s.ttp = j.at("ttp");
  s.step = j.at("step");
  s.extended_end = j.value("extended_end", 0);
  s.indices = j.at("indices").get<std::vector<int>>();
  s.fallback = j.value("fallback", false);
  return s;
}

json positions_json(const detect::DetectResult& r) {
  auto j = set_json(r.set);
  j["grid"] = {{"patch_size", r.grid.patch_size}, {"rows", r.grid.rows}, {"cols", r.grid.cols}};
  j["candidates"] = {{"wall", r.candidates.wall.size()},
                     {"non_wall", r.candidates.non_wall.size()},
                     {"accepted", r.accepted.size()},
                     {"motion_rejected", r.motion_rejected.size()}};
  return j;
}

std::vector<double> side_by_side(const BimodalVideo& clip, int side) {
  if (side < 1) throw ParameterError("video side must be positive");
  const std::size_t f = clip.frame_count();
  if (clip.gsus.size() != f) throw GeometryError("GSUS and CEUS frame counts differ");
  const std::size_t s = static_cast<std::size_t>(side);
  std::vector<double> out(f * s * 2 * s);
  for (std::size_t t = 0; t < f; ++t) {
    const auto g = resize_area(clip.gsus[t], side, side);
    const auto c = resize_area(clip.ceus[t], side, side);
    for (std::size_t y = 0; y < s; ++y) {
      double* row = out.data() + (t * s + y) * 2 * s;
      std::copy_n(g.data() + y * s, s, row);
      std::copy_n(c.data() + y * s, s, row + s);
    }
  }
  return out;
}

PreparedCase prepare_case(const synth::Case& c, const std::string& id, const PrepOptions& options,
                          tic::SelectResult* selection, detect::DetectResult* detection) {
  PreparedCase p;
  p.id = id;
  p.label = c.truth.class_label;
  p.clinical = c.truth.clinical;
  auto sel = tic::select_clip(c.video, options.select);
  p.selection = sel.selection;
  auto dopt = options.detect;
  dopt.sample_step = std::max(1, sel.selection.step);
  auto det = detect::earliest_enhanced_tics(sel.video, dopt);
  p.set = det.set;
  p.frames = static_cast<int>(sel.video.frame_count());
  p.side = options.video_size;
  for (const auto& e : p.set.entries) p.tics.insert(p.tics.end(), e.tic.begin(), e.tic.end());
  p.video = side_by_side(sel.video, options.video_size);
  if (detection) *detection = std::move(det);
  if (selection) *selection = std::move(sel);
  return p;
}

void save_prepared(const fs::path& path, const PreparedCase& p, const std::string& source_hash,
                   const std::string& key) {
  Archive a;
  a.meta = {{"kind", "prepared-case"},
            {"id", p.id},
            {"label", p.label},
            {"frames", p.frames},
            {"side", p.side},
            {"source", source_hash},
            {"options", key},
            {"selection", selection_json(p.selection)},
            {"set", set_json(p.set)}};
  const auto n = static_cast<std::int64_t>(p.set.entries.size());
  a.arrays.push_back({"tics", {n, p.frames}, p.tics});
  a.arrays.push_back({"video", {p.frames, p.side, 2 * p.side}, p.video});
  a.arrays.push_back({"clinical", {static_cast<std::int64_t>(p.clinical.size())}, p.clinical});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // write-then-rename keeps a concurrent reader from seeing a partial file
  const auto tmp = fs::path(path.string() + ".tmp");
  write_archive(tmp, a);
  fs::rename(tmp, path);
}

bool load_prepared_file(const fs::path& path, const std::string& source_hash, const std::string& key,
                        PreparedCase& out) {
  if (!fs::exists(path)) return false;
  Archive a;
  try {
    a = read_archive(path);
  } catch (const Error&) {
    return false;
  }
  if (a.meta.value("source", "") != source_hash || a.meta.value("options", "") != key) return false;
  PreparedCase p;
  p.id = a.meta.at("id");
  p.label = a.meta.at("label");
  p.frames = a.meta.at("frames");
  p.side = a.meta.at("side");
  p.selection = selection_from_json(a.meta.at("selection"));
  p.set = set_from_json(a.meta.at("set"));
  p.tics = a.get("tics").values;
  p.video = a.get("video").values;
  p.clinical = a.get("clinical").values;
  out = std::move(p);
  return true;
}

PreparedCase load_prepared(const fs::path& case_dir, const fs::path& cache_dir, const PrepOptions& options) {
  const auto id = case_dir.filename().string();
  const auto source = sha1_file(case_dir / "manifest.json");
  const auto key = prep_key(options);
  const auto cache_path = cache_dir / (id + ".tarc");
  PreparedCase p;
  if (!cache_dir.empty() && load_prepared_file(cache_path, source, key, p)) return p;
  p = prepare_case(synth::read_case(case_dir), id, options);
  if (!cache_dir.empty()) save_prepared(cache_path, p, source, key);
  return p;
}

std::vector<fs::path> list_cases(const fs::path& dataset) {
  if (!fs::is_directory(dataset)) throw IoError("not a directory: " + dataset.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dataset)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no case directories under " + dataset.string());
  return out;
}

std::string tree_hash(const fs::path& root) {
  if (fs::is_regular_file(root)) return sha1_file(root);
  if (!fs::is_directory(root)) throw IoError("cannot hash missing path " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += fs::relative(f, root).generic_string() + '\0' + sha1_file(f) + '\n';
  return sha1_hex(listing);
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(workers, n); ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

synth::Case sampled_case(const synth::Case& c, const tic::SelectResult& sel) {
  synth::Case out;
  out.video = sel.video;
  out.truth = c.truth;
  if (!c.truth.mean_tic.empty()) {
    out.truth.mean_tic.clear();
    for (int i : sel.selection.indices) out.truth.mean_tic.push_back(c.truth.mean_tic.at(static_cast<std::size_t>(i)));
    const auto [tts, ttp] = synth::analytic_tts_ttp(out.truth.mean_tic, out.truth.grad_threshold);
    out.truth.tts = tts;
    out.truth.ttp = ttp;
  }
  return out;
}

std::vector<Violation> validate_case_dir(const fs::path& dir) {
  std::vector<Violation> v;
  auto add = [&](const char* kind, std::string msg) { v.push_back({kind, std::move(msg)}); };
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    add("FormatError", "missing manifest.json");
    return v;
  }
  json m;
  try {
    std::ifstream is(manifest_path);
    m = json::parse(is);
  } catch (const json::exception& e) {
    add("FormatError", std::string("manifest does not parse: ") + e.what());
    return v;
  }
  int frames = 0, h = 0, w = 0;
  try {
    frames = m.at("frame_count").get<int>();
    h = m.at("frame_height").get<int>();
    w = m.at("frame_width").get<int>();
  } catch (const json::exception& e) {
    add("FormatError", std::string("manifest lacks geometry: ") + e.what());
    return v;
  }
  if (frames < 1 || h < 1 || w < 1) add("GeometryError", "non-positive frame count or geometry");

  for (const char* modality : {"gsus", "ceus"}) {
    std::vector<fs::path> pngs;
    if (fs::is_directory(dir / modality)) {
      for (const auto& e : fs::directory_iterator(dir / modality)) {
        if (e.path().extension() == ".png") pngs.push_back(e.path());
      }
    }
    if (static_cast<int>(pngs.size()) != frames) {
      add("FormatError", std::string(modality) + ": manifest declares " + std::to_string(frames) + " frames, found " +
                             std::to_string(pngs.size()));
    }
    for (int i = 0; i < frames; ++i) {
      const auto p = dir / modality / synth::frame_name(static_cast<std::size_t>(i));
      if (!fs::exists(p)) {
        add("FormatError", std::string(modality) + ": missing frame " + p.filename().string());
        continue;
      }
      try {
        const auto f = read_png(p);
        if (f.height != h || f.width != w) {
          add("GeometryError", std::string(modality) + "/" + p.filename().string() + " is " + std::to_string(f.height) +
                                   "x" + std::to_string(f.width) + ", manifest says " + std::to_string(h) + "x" +
                                   std::to_string(w));
        }
      } catch (const Error& e) {
        add("DecodeError", std::string(modality) + "/" + p.filename().string() + ": " + e.what());
      }
    }
  }

  const int label = m.value("class_label", -1);
  if (label != -1 && label != 0 && label != 1) add("DataError", "class_label must be 0 or 1");
  if (!m.contains("ground_truth")) return v;
  try {
    const auto& g = m.at("ground_truth");
    for (const auto& r : g.at("regions")) {
      const auto& s = r.at("shape");
      const int top = s.at("top"), left = s.at("left"), rh = s.at("height"), rw = s.at("width");
      if (rh < 1 || rw < 1 || top < 0 || left < 0 || top + rh > h || left + rw > w) {
        add("GeometryError", "region " + r.at("tissue").get<std::string>() + " leaves the frame");
      }
      const auto& t = r.at("tic");
      const double amp = t.at("amplitude"), base = t.at("baseline");
      if (amp < 0.0 || base < 0.0 || amp + base > 255.0) {
        add("DataError", "region " + r.at("tissue").get<std::string>() + " intensity exceeds the 8-bit range");
      }
      if (t.at("onset").get<int>() < 0) add("DataError", "negative onset");
    }
    const auto curve = g.value("mean_tic", std::vector<double>{});
    const int tts = g.value("tts", -1), ttp = g.value("ttp", -1);
    if (!curve.empty()) {
      if (static_cast<int>(curve.size()) != frames) add("DataError", "mean_tic length differs from frame_count");
      for (double c : curve) {
        if (!(c >= 0.0 && c <= 255.0)) {
          add("DataError", "mean_tic leaves [0, 255]");
          break;
        }
      }
      const auto [a, b] = synth::analytic_tts_ttp(curve, g.value("grad_threshold", 0.2));
      if (a != tts || b != ttp) {
        add("DataError", "stored tts/ttp (" + std::to_string(tts) + ", " + std::to_string(ttp) +
                             ") disagree with mean_tic (" + std::to_string(a) + ", " + std::to_string(b) + ")");
      }
    }
    if (tts > ttp || ttp >= frames) add("DataError", "tts/ttp out of order or beyond the video");
  } catch (const json::exception& e) {
    add("FormatError", std::string("malformed ground truth: ") + e.what());
  } catch (const Error& e) {
    add(e.kind().c_str(), e.what());
  }
  return v;
}

}  // namespace tasl
