#include "tasl/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "rng.hpp"
#include "tasl/error.hpp"
#include "tasl/png_io.hpp"

namespace tasl::synth {

using nlohmann::json;

std::string to_string(Tissue t) {
  switch (t) {
    case Tissue::wall: return "wall";
    case Tissue::lesion: return "lesion";
    case Tissue::parenchyma: return "parenchyma";
  }
  return "unknown";
}

Tissue tissue_from_string(const std::string& s) {
  if (s == "wall") return Tissue::wall;
  if (s == "lesion") return Tissue::lesion;
  if (s == "parenchyma") return Tissue::parenchyma;
  throw FormatError("unknown tissue tag '" + s + "'");
}

bool RegionShape::contains(int y, int x) const {
  if (y < box.top || y >= box.top + box.height || x < box.left || x >= box.left + box.width) return false;
  if (kind == ShapeKind::rectangle) return true;
  const double ry = 0.5 * box.height;
  const double rx = 0.5 * box.width;
  const double dy = (y + 0.5 - box.top - ry) / ry;
  const double dx = (x + 0.5 - box.left - rx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

std::vector<double> gamma_variate_tic(const GammaVariateParams& p, int length) {
  if (length < 1) throw ParameterError("TIC length must be >= 1");
  if (p.amplitude < 0.0 || !(p.shape > 0.0) || !(p.rate > 0.0)) {
    throw ParameterError("gamma-variate needs amplitude >= 0, shape > 0, rate > 0");
  }
  const double tau = p.time_to_peak();
  std::vector<double> curve(static_cast<std::size_t>(length), p.baseline);
  for (int f = std::max(p.onset, 0); f < length; ++f) {
    const double x = (f - p.onset) / tau;
    const double wash = x <= 0.0 ? 0.0 : std::pow(x, p.shape) * std::exp(p.shape * (1.0 - x));
    curve[f] = p.baseline + p.amplitude * wash;
  }
  for (auto& v : curve) v = std::clamp(v, 0.0, 255.0);
  return curve;
}

void validate_spec(const SynthSpec& spec, bool require_all_tissues) {
  if (spec.frame_count < 1) throw ParameterError("frame_count must be >= 1");
  if (spec.frame_height < 1 || spec.frame_width < 1) throw GeometryError("frame geometry must be positive");
  if (spec.noise_sigma < 0.0 || spec.motion_amplitude < 0.0 || spec.speckle_gain < 0.0) {
    throw ParameterError("noise, motion and speckle must be non-negative");
  }
  if (spec.motion_amplitude > 0.0 && !(spec.motion_period > 0.0)) throw ParameterError("motion_period must be > 0");
  if (spec.regions.empty()) throw GeometryError("at least one region is required");
  bool seen[3] = {false, false, false};
  for (const auto& r : spec.regions) {
    const auto& t = r.tic;
    if (t.onset < 0 || t.onset >= spec.frame_count) throw ParameterError("region onset outside [0, frame_count)");
    if (!(t.amplitude > 0.0) || !(t.shape > 0.0) || !(t.rate > 0.0)) {
      throw ParameterError("region TIC needs amplitude, shape and rate > 0");
    }
    if (t.baseline < 0.0 || t.baseline > 255.0) throw ParameterError("region baseline outside [0, 255]");
    const auto& b = r.shape.box;
    if (b.height < 1 || b.width < 1 || b.top < 0 || b.left < 0 || b.top + b.height > spec.frame_height ||
        b.left + b.width > spec.frame_width) {
      throw GeometryError("region mask outside the frame");
    }
    seen[static_cast<int>(r.tissue)] = true;
  }
  if (require_all_tissues && !(seen[0] && seen[1] && seen[2])) {
    throw GeometryError("spec needs at least one wall, lesion and parenchyma region");
  }
  for (std::size_t i = 0; i < spec.regions.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.regions.size(); ++j) {
      const auto& a = spec.regions[i].shape;
      const auto& b = spec.regions[j].shape;
      const int top = std::max(a.box.top, b.box.top);
      const int bottom = std::min(a.box.top + a.box.height, b.box.top + b.box.height);
      const int left = std::max(a.box.left, b.box.left);
      const int right = std::min(a.box.left + a.box.width, b.box.left + b.box.width);
      for (int y = top; y < bottom; ++y) {
        for (int x = left; x < right; ++x) {
          if (a.contains(y, x) && b.contains(y, x)) {
            throw GeometryError("regions " + std::to_string(i) + " and " + std::to_string(j) + " overlap");
          }
        }
      }
    }
  }
}

namespace {

std::vector<std::int8_t> region_map(const SynthSpec& spec) {
  std::vector<std::int8_t> map(static_cast<std::size_t>(spec.frame_height) * spec.frame_width, -1);
  for (std::size_t r = 0; r < spec.regions.size(); ++r) {
    const auto& shape = spec.regions[r].shape;
    for (int y = shape.box.top; y < shape.box.top + shape.box.height; ++y) {
      for (int x = shape.box.left; x < shape.box.left + shape.box.width; ++x) {
        if (shape.contains(y, x)) map[static_cast<std::size_t>(y) * spec.frame_width + x] = static_cast<std::int8_t>(r);
      }
    }
  }
  return map;
}

struct TissueTexture {
  double mean;
  double stddev;
};

TissueTexture texture_for(Tissue t) {
  switch (t) {
    case Tissue::wall: return {150.0, 30.0};
    case Tissue::lesion: return {70.0, 12.0};
    case Tissue::parenchyma: return {140.0, 40.0};
  }
  return {25.0, 6.0};
}

constexpr TissueTexture kBackgroundTexture{25.0, 6.0};

std::uint8_t to_byte(double v) {
  // Round half up; inputs are finite.
  const double c = std::clamp(v + 0.5, 0.0, 255.0);
  return static_cast<std::uint8_t>(c);
}

int drift_at(const SynthSpec& spec, int f) {
  if (spec.motion_amplitude <= 0.0) return 0;
  return static_cast<int>(std::lround(spec.motion_amplitude * std::sin(2.0 * std::numbers::pi * f / spec.motion_period)));
}

}  // namespace

std::vector<std::int64_t> region_areas(const SynthSpec& spec) {
  std::vector<std::int64_t> areas(spec.regions.size(), 0);
  for (std::size_t r = 0; r < spec.regions.size(); ++r) {
    const auto& shape = spec.regions[r].shape;
    for (int y = shape.box.top; y < shape.box.top + shape.box.height; ++y) {
      for (int x = shape.box.left; x < shape.box.left + shape.box.width; ++x) areas[r] += shape.contains(y, x);
    }
  }
  return areas;
}

std::vector<double> analytic_mean_tic(const SynthSpec& spec) {
  const auto areas = region_areas(spec);
  const double total = static_cast<double>(spec.frame_height) * spec.frame_width;
  std::vector<double> mean(static_cast<std::size_t>(spec.frame_count), 0.0);
  for (std::size_t r = 0; r < spec.regions.size(); ++r) {
    const auto curve = gamma_variate_tic(spec.regions[r].tic, spec.frame_count);
    const double w = static_cast<double>(areas[r]) / total;
    for (std::size_t f = 0; f < mean.size(); ++f) mean[f] += w * curve[f];
  }
  return mean;
}

std::pair<int, int> analytic_tts_ttp(const std::vector<double>& curve, double threshold) {
  const int n = static_cast<int>(curve.size());
  int tts = -1;
  for (int f = 0; f + 1 < n; ++f) {
    if (curve[f + 1] - curve[f] > threshold) {
      tts = f;
      break;
    }
  }
  if (tts < 0) return {-1, -1};
  int ttp = tts;
  for (int f = tts + 1; f < n; ++f) {
    if (curve[f] > curve[ttp]) ttp = f;
  }
  return {tts, ttp};
}

Case generate_case(const SynthSpec& spec) {
  validate_spec(spec);
  const int H = spec.frame_height;
  const int W = spec.frame_width;
  const int F = spec.frame_count;
  const std::size_t R = spec.regions.size();
  const auto map = region_map(spec);

  // Static gray-scale texture.
  std::vector<double> texture(static_cast<std::size_t>(H) * W);
  {
    detail::NormalStream normal(detail::mix_seed(spec.seed, 0x6757u));
    for (std::size_t i = 0; i < texture.size(); ++i) {
      const int r = map[i];
      const auto tex = r < 0 ? kBackgroundTexture : texture_for(spec.regions[r].tissue);
      texture[i] = tex.mean + tex.stddev * normal.next();
    }
  }

  // Region curves, with one extra frame to get the wash-in rate at the end.
  std::vector<std::vector<double>> curves(R);
  for (std::size_t r = 0; r < R; ++r) curves[r] = gamma_variate_tic(spec.regions[r].tic, F + 1);

  Case out;
  out.video.gsus.reserve(F);
  out.video.ceus.reserve(F);
  std::vector<double> level(R), speckle(R);
  std::vector<double> ceus_row(static_cast<std::size_t>(W)), gsus_row(static_cast<std::size_t>(W));
  for (int f = 0; f < F; ++f) {
    for (std::size_t r = 0; r < R; ++r) {
      level[r] = curves[r][f];
      const double rate = std::max(0.0, curves[r][f + 1] - curves[r][f]);
      speckle[r] = std::min({spec.speckle_gain * rate, level[r], 255.0 - level[r]});
    }
    const int dy = drift_at(spec, f);
    Frame ceus(H, W), gsus(H, W);
    detail::NormalStream ceus_noise(detail::mix_seed(spec.seed, static_cast<std::uint64_t>(f), 1));
    detail::NormalStream gsus_noise(detail::mix_seed(spec.seed, static_cast<std::uint64_t>(f), 2));
    detail::FastRng signs(detail::mix_seed(spec.seed, static_cast<std::uint64_t>(f), 3));
    const bool noisy = spec.noise_sigma > 0.0;
    std::uint64_t bits = 0;
    int bits_left = 0;
    for (int y = 0; y < H; ++y) {
      const int sy = y - dy;
      const bool inside = sy >= 0 && sy < H;
      const int ty = std::clamp(sy, 0, H - 1);
      const auto* map_row = map.data() + static_cast<std::size_t>(ty) * W;
      const auto* tex_row = texture.data() + static_cast<std::size_t>(ty) * W;
      // Antithetic speckle pairs keep each region's mean exact.
      for (int x = 0; x < W; x += 2) {
        if (bits_left == 0) {
          bits = signs.next();
          bits_left = 64;
        }
        const double sign = (bits & 1u) ? 1.0 : -1.0;
        bits >>= 1;
        --bits_left;
        for (int k = 0; k < 2 && x + k < W; ++k) {
          const int r = inside ? map_row[x + k] : -1;
          const double s = k == 0 ? sign : -sign;
          ceus_row[x + k] = r < 0 ? 0.0 : level[r] + speckle[r] * s;
          gsus_row[x + k] = inside ? tex_row[x + k] : kBackgroundTexture.mean;
        }
      }
      if (noisy) {
        for (int x = 0; x < W; ++x) ceus_row[x] += spec.noise_sigma * ceus_noise.next();
        for (int x = 0; x < W; ++x) gsus_row[x] += spec.noise_sigma * gsus_noise.next();
      }
      auto* c_out = ceus.pixels.data() + static_cast<std::size_t>(y) * W;
      auto* g_out = gsus.pixels.data() + static_cast<std::size_t>(y) * W;
      for (int x = 0; x < W; ++x) c_out[x] = to_byte(ceus_row[x]);
      for (int x = 0; x < W; ++x) g_out[x] = to_byte(gsus_row[x]);
    }
    out.video.ceus.push_back(std::move(ceus));
    out.video.gsus.push_back(std::move(gsus));
  }

  auto& gt = out.truth;
  gt.regions = spec.regions;
  gt.class_label = spec.class_label;
  gt.seed = spec.seed;
  gt.clinical = spec.clinical;
  gt.mean_tic = analytic_mean_tic(spec);
  std::tie(gt.tts, gt.ttp) = analytic_tts_ttp(gt.mean_tic, gt.grad_threshold);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

json to_json(const RegionSpec& r) {
  const auto& b = r.shape.box;
  return {{"tissue", to_string(r.tissue)},
          {"shape",
           {{"kind", r.shape.kind == ShapeKind::ellipse ? "ellipse" : "rectangle"},
            {"top", b.top},
            {"left", b.left},
            {"height", b.height},
            {"width", b.width}}},
          {"tic",
           {{"onset", r.tic.onset},
            {"amplitude", r.tic.amplitude},
            {"shape", r.tic.shape},
            {"rate", r.tic.rate},
            {"baseline", r.tic.baseline}}}};
}

RegionSpec region_from_json(const json& j) {
  RegionSpec r;
  r.tissue = tissue_from_string(j.at("tissue").get<std::string>());
  const auto& s = j.at("shape");
  const auto kind = s.at("kind").get<std::string>();
  if (kind != "ellipse" && kind != "rectangle") throw FormatError("unknown region shape '" + kind + "'");
  r.shape.kind = kind == "ellipse" ? ShapeKind::ellipse : ShapeKind::rectangle;
  r.shape.box = {s.at("top").get<int>(), s.at("left").get<int>(), s.at("height").get<int>(), s.at("width").get<int>()};
  const auto& t = j.at("tic");
  r.tic.onset = t.at("onset").get<int>();
  r.tic.amplitude = t.at("amplitude").get<double>();
  r.tic.shape = t.at("shape").get<double>();
  r.tic.rate = t.at("rate").get<double>();
  r.tic.baseline = t.at("baseline").get<double>();
  return r;
}

}  // namespace

std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.png", i);
  return buf;
}

namespace {

std::size_t count_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return 0;
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) n += e.path().extension() == ".png";
  return n;
}

}  // namespace

void write_case(const std::filesystem::path& dir, const Case& c) {
  namespace fs = std::filesystem;
  const auto& v = c.video;
  if (v.gsus.size() != v.ceus.size()) throw GeometryError("GSUS and CEUS frame counts differ");
  check_uniform_geometry(v.gsus);
  check_uniform_geometry(v.ceus);
  fs::create_directories(dir / "gsus");
  fs::create_directories(dir / "ceus");
  for (std::size_t i = 0; i < v.ceus.size(); ++i) {
    write_png(dir / "gsus" / frame_name(i), v.gsus[i]);
    write_png(dir / "ceus" / frame_name(i), v.ceus[i]);
  }
  const auto& gt = c.truth;
  json m;
  m["format"] = "tasl-case";
  m["version"] = 1;
  m["frame_count"] = v.ceus.size();
  m["frame_height"] = v.ceus.empty() ? 0 : v.ceus.front().height;
  m["frame_width"] = v.ceus.empty() ? 0 : v.ceus.front().width;
  m["class_label"] = gt.class_label;
  m["seed"] = gt.seed;
  m["clinical"] = gt.clinical;
  json regions = json::array();
  for (const auto& r : gt.regions) regions.push_back(to_json(r));
  m["ground_truth"] = {{"regions", regions},
                       {"tts", gt.tts},
                       {"ttp", gt.ttp},
                       {"grad_threshold", gt.grad_threshold},
                       {"mean_tic", gt.mean_tic}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << m.dump(2) << '\n';
}

Case read_case(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw FormatError("missing manifest: " + manifest_path.string());
  json m;
  try {
    std::ifstream is(manifest_path);
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("unreadable manifest " + manifest_path.string() + ": " + e.what());
  }
  Case c;
  std::size_t frames = 0;
  int h = 0, w = 0;
  try {
    frames = m.at("frame_count").get<std::size_t>();
    h = m.at("frame_height").get<int>();
    w = m.at("frame_width").get<int>();
    auto& gt = c.truth;
    gt.class_label = m.value("class_label", -1);
    gt.seed = m.value("seed", std::uint64_t{0});
    gt.clinical = m.value("clinical", std::vector<double>{});
    if (m.contains("ground_truth")) {
      const auto& g = m.at("ground_truth");
      for (const auto& r : g.at("regions")) gt.regions.push_back(region_from_json(r));
      gt.tts = g.value("tts", -1);
      gt.ttp = g.value("ttp", -1);
      gt.grad_threshold = g.value("grad_threshold", 0.2);
      gt.mean_tic = g.value("mean_tic", std::vector<double>{});
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto n_gsus = count_pngs(dir / "gsus");
  const auto n_ceus = count_pngs(dir / "ceus");
  if (n_gsus != frames || n_ceus != frames) {
    throw FormatError("frame-count mismatch: manifest declares " + std::to_string(frames) + " frames, found " +
                      std::to_string(n_gsus) + " gsus / " + std::to_string(n_ceus) + " ceus files");
  }
  for (std::size_t i = 0; i < frames; ++i) {
    auto g = read_png(dir / "gsus" / frame_name(i));
    auto e = read_png(dir / "ceus" / frame_name(i));
    if (g.height != h || g.width != w || e.height != h || e.width != w) {
      throw GeometryError("frame " + std::to_string(i) + " geometry disagrees with manifest");
    }
    c.video.gsus.push_back(std::move(g));
    c.video.ceus.push_back(std::move(e));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Dataset layouts

namespace {

class SpecRng {
 public:
  explicit SpecRng(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(); }
  int integer(int lo, int hi) { return lo + static_cast<int>(rng_.next() % static_cast<std::uint64_t>(hi - lo + 1)); }
  bool bernoulli(double p) { return rng_.uniform() < p; }

 private:
  detail::FastRng rng_;
};

GammaVariateParams wash_in(int onset, double amplitude, double shape, double time_to_peak, double baseline) {
  return {onset, amplitude, shape, shape / time_to_peak, baseline};
}

}  // namespace

SynthSpec make_case_spec(std::uint64_t seed, int class_label, const DatasetOptions& o) {
  if (class_label != 0 && class_label != 1) throw ParameterError("class_label must be 0 or 1");
  SynthSpec s;
  s.frame_count = o.frame_count;
  s.frame_height = o.frame_height;
  s.frame_width = o.frame_width;
  s.noise_sigma = o.noise_sigma;
  s.motion_amplitude = o.motion_amplitude;
  s.motion_period = o.motion_period;
  s.speckle_gain = o.speckle_gain;
  s.class_label = class_label;
  s.seed = seed;

  SpecRng rng(detail::mix_seed(seed, 0x5eedu));
  const double H = o.frame_height;
  const double W = o.frame_width;
  const double ts = o.frame_count / 192.0;  // time scale relative to the reference length
  auto frames = [&](double t) { return std::max(0, static_cast<int>(std::lround(t * ts))); };

  RegionSpec wall;
  wall.tissue = Tissue::wall;
  wall.shape = {ShapeKind::rectangle, {static_cast<int>(0.02 * H), 0, static_cast<int>(0.18 * H), static_cast<int>(W)}};
  wall.tic = wash_in(frames(rng.integer(52, 64)), rng.uniform(15, 25), 2.0, rng.uniform(36, 48) * ts, 20.0);

  const double cy = rng.uniform(0.53, 0.61) * H;
  const double cx = rng.uniform(0.26, 0.29) * W;
  const double ry = rng.uniform(0.15, 0.19) * H;
  const double rx = rng.uniform(0.19, 0.22) * W;
  RegionSpec lesion;
  lesion.tissue = Tissue::lesion;
  lesion.shape = {ShapeKind::ellipse,
                  {static_cast<int>(cy - ry), static_cast<int>(cx - rx), static_cast<int>(2 * ry), static_cast<int>(2 * rx)}};

  RegionSpec par;
  par.tissue = Tissue::parenchyma;
  par.shape = {ShapeKind::rectangle,
               {static_cast<int>(0.25 * H), static_cast<int>(0.55 * W), static_cast<int>(0.65 * H), static_cast<int>(0.40 * W)}};
  const int par_onset = rng.integer(32, 40);
  par.tic = wash_in(frames(par_onset), rng.uniform(45, 60), 3.0, rng.uniform(52, 64) * ts, 12.0);

  if (class_label == 1) {
    lesion.tic = wash_in(frames(par_onset - rng.integer(12, 20)), rng.uniform(80, 100), 3.0, rng.uniform(28, 40) * ts, 8.0);
  } else {
    lesion.tic = wash_in(frames(par_onset + rng.integer(8, 16)), rng.uniform(45, 60), 3.0, rng.uniform(56, 72) * ts, 8.0);
  }
  s.regions = {wall, lesion, par};

  const double sex = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const double age = 0.55 + 0.1 * class_label + rng.uniform(-0.12, 0.12);
  const double smoking = rng.bernoulli(0.3 + 0.4 * class_label) ? 1.0 : 0.0;
  const double respiratory = rng.bernoulli(0.3) ? 1.0 : 0.0;
  s.clinical = {sex, age, smoking, respiratory};
  return s;
}

std::vector<SynthSpec> make_dataset_specs(int n, double balance, std::uint64_t seed, const DatasetOptions& options) {
  if (n < 1) throw ParameterError("dataset needs at least one case");
  if (balance < 0.0 || balance > 1.0) throw ParameterError("balance must lie in [0, 1]");
  const int positives = static_cast<int>(std::lround(n * balance));
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  std::fill(labels.begin(), labels.begin() + positives, 1);
  detail::FastRng rng(detail::mix_seed(seed, 0xba1au));
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.next() % static_cast<std::uint64_t>(i + 1));
    std::swap(labels[i], labels[j]);
  }
  std::vector<SynthSpec> specs;
  specs.reserve(labels.size());
  for (int i = 0; i < n; ++i) specs.push_back(make_case_spec(detail::mix_seed(seed, static_cast<std::uint64_t>(i), 7), labels[i], options));
  return specs;
}

}  // namespace tasl::synth
