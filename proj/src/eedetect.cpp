#include "tasl/eedetect.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "rng.hpp"
#include "tasl/error.hpp"
#include "tasl/ticselect.hpp"

namespace tasl::detect {

PatchGrid make_grid(int frame_height, int frame_width, int patch_size) {
  if (patch_size < 2) throw ParameterError("patch size must be >= 2");
  if (frame_height < 1 || frame_width < 1) throw GeometryError("empty frame");
  PatchGrid g;
  g.patch_size = patch_size;
  g.rows = (frame_height + patch_size - 1) / patch_size;
  g.cols = (frame_width + patch_size - 1) / patch_size;
  return g;
}

double ssim_patch(std::span<const double> a, std::span<const double> b, double range) {
  if (a.size() != b.size()) throw ShapeError("SSIM patches differ in size");
  if (a.empty()) throw ShapeError("SSIM of empty patches");
  const double n = static_cast<double>(a.size());
  const double mu_a = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mu_b = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double var_a = 0.0, var_b = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - mu_a;
    const double db = b[i] - mu_b;
    var_a += da * da;
    var_b += db * db;
    cov += da * db;
  }
  var_a /= n;
  var_b /= n;
  cov /= n;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
}

namespace {

std::vector<Frame> padded(std::span<const Frame> frames, int patch) {
  std::vector<Frame> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(reflect_pad(f, patch));
  return out;
}

// SSIM of one cell between two 8-bit frames, from exact integer moments.
double cell_ssim(const Frame& a, const Frame& b, const PixelRect& r) {
  std::uint64_t sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (int y = r.top; y < r.top + r.height; ++y) {
    const auto* pa = a.pixels.data() + static_cast<std::size_t>(y) * a.width + r.left;
    const auto* pb = b.pixels.data() + static_cast<std::size_t>(y) * b.width + r.left;
    for (int x = 0; x < r.width; ++x) {
      const std::uint64_t va = pa[x], vb = pb[x];
      sa += va;
      sb += vb;
      saa += va * va;
      sbb += vb * vb;
      sab += va * vb;
    }
  }
  const double n = static_cast<double>(r.height) * r.width;
  const double mu_a = sa / n, mu_b = sb / n;
  // n^2 * population moments, exact in integers before the final division.
  const double nn = n * n;
  const double var_a = (static_cast<double>(saa) * n - static_cast<double>(sa) * sa) / nn;
  const double var_b = (static_cast<double>(sbb) * n - static_cast<double>(sb) * sb) / nn;
  const double cov = (static_cast<double>(sab) * n - static_cast<double>(sa) * sb) / nn;
  const double c1 = (0.01 * kPixelRange) * (0.01 * kPixelRange);
  const double c2 = (0.03 * kPixelRange) * (0.03 * kPixelRange);
  return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
}

SsimMap ssim_map_padded(std::span<const Frame> frames, const PatchGrid& grid) {
  SsimMap map;
  map.rows = grid.rows;
  map.cols = grid.cols;
  map.pairs = static_cast<int>(frames.size()) - 1;
  map.values.resize(static_cast<std::size_t>(map.rows) * map.cols * map.pairs);
  for (int i = 0; i < grid.rows; ++i) {
    for (int j = 0; j < grid.cols; ++j) {
      const auto rect = grid.rect({i, j});
      for (int f = 0; f < map.pairs; ++f) map.at(i, j, f) = cell_ssim(frames[f], frames[f + 1], rect);
    }
  }
  return map;
}

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("truncated SSIM map");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

SsimMap adjacent_ssim_map(std::span<const Frame> ceus, int patch_size) {
  if (ceus.size() < 2) throw ParameterError("SSIM map needs at least two frames");
  check_uniform_geometry(ceus);
  const auto frames = padded(ceus, patch_size);
  const auto grid = make_grid(frames.front().height, frames.front().width, patch_size);
  return ssim_map_padded(frames, grid);
}

void write_ssim_map(const std::filesystem::path& path, const SsimMap& map) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  put_le<std::int32_t>(os, map.rows);
  put_le<std::int32_t>(os, map.cols);
  put_le<std::int32_t>(os, map.pairs);
  for (double v : map.values) put_le<double>(os, v);
}

SsimMap read_ssim_map(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  SsimMap map;
  map.rows = get_le<std::int32_t>(is);
  map.cols = get_le<std::int32_t>(is);
  map.pairs = get_le<std::int32_t>(is);
  if (map.rows < 0 || map.cols < 0 || map.pairs < 0) throw FormatError("negative SSIM map dimension");
  map.values.resize(static_cast<std::size_t>(map.rows) * map.cols * map.pairs);
  for (auto& v : map.values) v = get_le<double>(is);
  return map;
}

WallMask default_wall_mask(int rows, int cols, double fraction) {
  WallMask m;
  m.rows = rows;
  m.cols = cols;
  m.wall.assign(static_cast<std::size_t>(rows) * cols, false);
  const int wall_rows = std::clamp(static_cast<int>(std::floor(rows * fraction)), 1, rows);
  for (int i = 0; i < wall_rows; ++i) {
    for (int j = 0; j < cols; ++j) m.wall[static_cast<std::size_t>(i) * cols + j] = true;
  }
  return m;
}

CandidateSet candidate_positions(const SsimMap& map, const WallMask& mask, double tau_wall, double tau_nwall) {
  if (mask.rows != map.rows || mask.cols != map.cols) throw GeometryError("wall mask does not match the SSIM grid");
  CandidateSet out;
  std::vector<Candidate> wall_cells;
  for (int i = 0; i < map.rows; ++i) {
    for (int j = 0; j < map.cols; ++j) {
      Candidate c;
      c.cell = {i, j};
      c.wall = mask.is_wall(c.cell);
      for (int f = 0; f < map.pairs; ++f) {
        if (f == 0 || map.at(i, j, f) < c.score) {
          c.score = map.at(i, j, f);
          c.min_frame = f;
        }
      }
      if (c.wall) {
        if (c.score <= tau_wall) wall_cells.push_back(c);
      } else if (c.score < tau_nwall) {
        out.non_wall.push_back(c);
      }
    }
  }
  std::stable_sort(wall_cells.begin(), wall_cells.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score < b.score; });
  if (wall_cells.size() > 2) wall_cells.resize(2);
  out.wall = std::move(wall_cells);
  return out;
}

std::vector<double> region_tic(std::span<const Frame> frames, const PixelRect& rect) {
  std::vector<double> tic;
  tic.reserve(frames.size());
  for (const auto& f : frames) tic.push_back(mean_intensity(f, rect));
  return tic;
}

double least_squares_slope(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  const double t_mean = 0.5 * static_cast<double>(n - 1);
  const double y_mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double dt = static_cast<double>(t) - t_mean;
    num += dt * (y[t] - y_mean);
    den += dt * dt;
  }
  return num / den;
}

bool rising_tic_check(std::span<const Frame> ceus, const PatchGrid& grid, Cell cell, int min_frame,
                      int half_window) {
  const int n = static_cast<int>(ceus.size());
  const int lo = std::max(0, min_frame - half_window);
  const int hi = std::min(n - 1, min_frame + half_window);
  if (hi <= lo) return false;
  const auto tic = region_tic(ceus.subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo + 1)),
                              grid.rect(cell));
  return least_squares_slope(tic) > 0.0;
}

bool rising_tic_check(std::span<const Frame> ceus, const PatchGrid& grid, const SsimMap& map, Cell cell,
                      int half_window) {
  int best = 0;
  for (int f = 1; f < map.pairs; ++f) {
    if (map.at(cell.row, cell.col, f) < map.at(cell.row, cell.col, best)) best = f;
  }
  return rising_tic_check(ceus, grid, cell, best, half_window);
}

std::vector<double> TextureStatsEmbedder::embed(std::span<const double> patch, int size) const {
  if (size < 2 || patch.size() != static_cast<std::size_t>(size) * size) throw ShapeError("patch is not size x size");
  const double n = static_cast<double>(patch.size());
  const double mean = std::accumulate(patch.begin(), patch.end(), 0.0) / n;
  double var = 0.0;
  for (double v : patch) var += (v - mean) * (v - mean);
  var /= n;

  double grad = 0.0;
  for (int y = 0; y + 1 < size; ++y) {
    for (int x = 0; x + 1 < size; ++x) {
      const double p = patch[static_cast<std::size_t>(y) * size + x];
      const double gx = patch[static_cast<std::size_t>(y) * size + x + 1] - p;
      const double gy = patch[static_cast<std::size_t>(y + 1) * size + x] - p;
      grad += std::sqrt(gx * gx + gy * gy);
    }
  }
  grad /= static_cast<double>(size - 1) * (size - 1);

  std::vector<double> feat{mean, var, grad, 0, 0, 0, 0, 0, 0, 0, 0};
  for (double v : patch) {
    const int bin = std::clamp(static_cast<int>(std::floor(v / 32.0)), 0, 7);
    feat[3 + bin] += 1.0 / n;
  }
  return feat;
}

std::vector<double> embed_patch(const PatchEmbedder& embedder, std::span<const double> patch, int size,
                                int expected_size) {
  if (size != expected_size || patch.size() != static_cast<std::size_t>(size) * size) {
    throw ShapeError("embedder expects a " + std::to_string(expected_size) + "x" + std::to_string(expected_size) +
                     " patch");
  }
  auto v = embedder.embed(patch, size);
  if (static_cast<int>(v.size()) != embedder.dim()) throw ShapeError("embedder returned a vector of the wrong length");
  return v;
}

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

int nearest(const std::vector<std::vector<double>>& centroids, const std::vector<double>& p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(centroids[c], p);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

Clustering kmeans(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed, int max_iterations,
                  double tolerance) {
  if (k < 1) throw ParameterError("k must be >= 1");
  Clustering out;
  out.labels.assign(points.size(), 0);
  if (points.empty()) {
    out.degenerate = true;
    return out;
  }
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("k-means points differ in dimension");
  }

  std::vector<std::size_t> distinct;
  for (std::size_t i = 0; i < points.size() && static_cast<int>(distinct.size()) < k; ++i) {
    bool fresh = true;
    for (auto d : distinct) fresh = fresh && squared_distance(points[d], points[i]) > 0.0;
    if (fresh) distinct.push_back(i);
  }
  if (static_cast<int>(distinct.size()) < k) {
    out.degenerate = true;
    std::vector<double> mean(dim, 0.0);
    for (const auto& p : points) {
      for (std::size_t d = 0; d < dim; ++d) mean[d] += p[d] / static_cast<double>(points.size());
    }
    out.centroids = {mean};
    return out;
  }

  // k-means++ seeding.
  detail::FastRng rng(detail::mix_seed(seed, 0x6b6du));
  out.centroids.push_back(points[rng.next() % points.size()]);
  std::vector<double> d2(points.size());
  while (static_cast<int>(out.centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = squared_distance(points[i], out.centroids[static_cast<std::size_t>(nearest(out.centroids, points[i]))]);
      total += d2[i];
    }
    double target = rng.uniform() * total;
    std::size_t pick = 0;
    for (; pick + 1 < points.size(); ++pick) {
      if (d2[pick] > 0.0 && target < d2[pick]) break;
      target -= d2[pick];
    }
    if (d2[pick] == 0.0) {
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (d2[i] > 0.0) pick = i;
      }
    }
    out.centroids.push_back(points[pick]);
  }

  for (out.iterations = 1; out.iterations <= max_iterations; ++out.iterations) {
    for (std::size_t i = 0; i < points.size(); ++i) out.labels[i] = nearest(out.centroids, points[i]);
    std::vector<std::vector<double>> next(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto l = static_cast<std::size_t>(out.labels[i]);
      ++counts[l];
      for (std::size_t d = 0; d < dim; ++d) next[l][d] += points[i][d];
    }
    double movement = 0.0;
    for (std::size_t c = 0; c < next.size(); ++c) {
      if (counts[c] == 0) {
        next[c] = out.centroids[c];  // keep an emptied centroid in place
      } else {
        for (auto& v : next[c]) v /= counts[c];
      }
      movement = std::max(movement, std::sqrt(squared_distance(next[c], out.centroids[c])));
    }
    out.centroids = std::move(next);
    if (movement <= tolerance) break;
  }
  out.iterations = std::min(out.iterations, max_iterations);
  for (std::size_t i = 0; i < points.size(); ++i) out.labels[i] = nearest(out.centroids, points[i]);
  return out;
}

Clustering cluster_positions(const std::vector<std::vector<double>>& features, std::span<const int> order_key, int k,
                             std::uint64_t seed) {
  if (order_key.size() != features.size()) throw ShapeError("order key must match the feature count");
  auto out = kmeans(features, k, seed);
  if (static_cast<int>(features.size()) < k) out.degenerate = true;
  if (out.degenerate || features.empty()) return out;
  std::size_t first = 0;
  for (std::size_t i = 1; i < order_key.size(); ++i) {
    if (order_key[i] < order_key[first]) first = i;
  }
  const int anchor = out.labels[first];
  if (anchor != 0) {
    for (auto& l : out.labels) {
      if (l == anchor) {
        l = 0;
      } else if (l == 0) {
        l = anchor;
      }
    }
    std::swap(out.centroids[0], out.centroids[static_cast<std::size_t>(anchor)]);
  }
  return out;
}

int sub_patch_window(int length, const DetectOptions& options) {
  auto odd_floor = [](int v) { return v % 2 == 1 ? v : v - 1; };
  int window = std::min(options.sg_window, odd_floor(length));
  if (options.sample_step > 1) {
    window = std::min(window, std::max(odd_floor(options.sg_window / options.sample_step), 2 * options.sg_order + 1));
  }
  return window;
}

int sub_patch_tts(std::span<const double> tic, const DetectOptions& options) {
  const int n = static_cast<int>(tic.size());
  const int window = std::min(sub_patch_window(n, options), n % 2 == 1 ? n : n - 1);
  if (window < 1) return n;
  const int order = std::min(options.sg_order, window - 1);
  const auto smooth = tic::sg_smooth(tic, window, order);
  for (int f = 0; f + 1 < n; ++f) {
    if (smooth[f + 1] - smooth[f] > options.grad_threshold) return f;
  }
  return n;
}

namespace {

struct Scored {
  Candidate cand;
  int tts = 0;
  std::vector<double> tic;
};

bool earlier(const Scored& a, const Scored& b) {
  if (a.tts != b.tts) return a.tts < b.tts;
  if (a.cand.score != b.cand.score) return a.cand.score < b.cand.score;
  if (a.cand.cell.row != b.cand.cell.row) return a.cand.cell.row < b.cand.cell.row;
  return a.cand.cell.col < b.cand.cell.col;
}

std::vector<double> mean_patch(std::span<const Frame> frames, const PixelRect& rect) {
  std::vector<double> acc(static_cast<std::size_t>(rect.height) * rect.width, 0.0);
  for (const auto& f : frames) {
    const auto p = extract_patch(f, rect);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
  }
  for (auto& v : acc) v /= static_cast<double>(frames.size());
  return acc;
}

}  // namespace

DetectResult earliest_enhanced_tics(const BimodalVideo& sampled, const DetectOptions& options,
                                    const WallMask* wall_mask, const PatchEmbedder* embedder) {
  if (sampled.ceus.size() < 2) throw ParameterError("detection needs at least two sampled frames");
  if (sampled.gsus.size() != sampled.ceus.size()) throw GeometryError("GSUS and CEUS frame counts differ");
  check_uniform_geometry(sampled.ceus);
  check_uniform_geometry(sampled.gsus);

  static const TextureStatsEmbedder default_embedder;
  const PatchEmbedder& emb = embedder ? *embedder : default_embedder;

  const auto ceus = padded(sampled.ceus, options.patch_size);
  const auto gsus = padded(sampled.gsus, options.patch_size);
  DetectResult res;
  res.grid = make_grid(ceus.front().height, ceus.front().width, options.patch_size);
  res.ssim = ssim_map_padded(ceus, res.grid);
  const WallMask mask = wall_mask ? *wall_mask : default_wall_mask(res.grid.rows, res.grid.cols, options.wall_fraction);
  res.candidates = candidate_positions(res.ssim, mask, options.tau_wall, options.tau_nwall);

  auto score = [&](const Candidate& c) {
    Scored s;
    s.cand = c;
    s.tic = region_tic(ceus, res.grid.sub_rect(c.cell));
    s.tts = sub_patch_tts(s.tic, options);
    return s;
  };

  std::vector<Scored> wall, non_wall;
  for (const auto* group : {&res.candidates.wall, &res.candidates.non_wall}) {
    for (const auto& c : *group) {
      if (rising_tic_check(ceus, res.grid, c.cell, c.min_frame, options.rising_half_window)) {
        res.accepted.push_back(c);
        (c.wall ? wall : non_wall).push_back(score(c));
      } else {
        res.motion_rejected.push_back(c);
      }
    }
  }

  // Split the non-wall positions into two tissue groups by gray-scale texture.
  std::vector<Scored> lesion, parenchyma;
  if (!non_wall.empty()) {
    std::vector<std::vector<double>> raw;
    std::vector<int> key;
    for (const auto& s : non_wall) {
      raw.push_back(embed_patch(emb, mean_patch(gsus, res.grid.rect(s.cand.cell)), options.patch_size,
                                options.patch_size));
      key.push_back(s.tts);
    }
    // z-score each feature so no single statistic dominates the distances
    auto z = raw;
    const std::size_t dim = raw.front().size();
    for (std::size_t d = 0; d < dim; ++d) {
      double m = 0.0, v = 0.0;
      for (const auto& r : raw) m += r[d];
      m /= static_cast<double>(raw.size());
      for (const auto& r : raw) v += (r[d] - m) * (r[d] - m);
      const double sd = std::sqrt(v / static_cast<double>(raw.size()));
      for (auto& r : z) r[d] = sd > 0.0 ? (r[d] - m) / sd : 0.0;
    }
    const auto clusters = cluster_positions(z, key, 2, options.seed);
    res.cluster_labels = clusters.labels;
    int lesion_label = 0;
    if (!clusters.degenerate && options.lesion_rule == LesionRule::hypoechoic) {
      double sum[2] = {0, 0};
      int count[2] = {0, 0};
      for (std::size_t i = 0; i < raw.size(); ++i) {
        sum[clusters.labels[i]] += raw[i][0];
        ++count[clusters.labels[i]];
      }
      const double m0 = count[0] ? sum[0] / count[0] : 0.0;
      const double m1 = count[1] ? sum[1] / count[1] : 0.0;
      lesion_label = m1 < m0 ? 1 : 0;
    }
    if (clusters.degenerate) res.set.notes.push_back("clustering degenerate: all non-wall positions in one group");
    for (std::size_t i = 0; i < non_wall.size(); ++i) {
      (clusters.labels[i] == lesion_label ? lesion : parenchyma).push_back(non_wall[i]);
    }
  }

  std::vector<Scored> everyone;
  everyone.insert(everyone.end(), wall.begin(), wall.end());
  everyone.insert(everyone.end(), non_wall.begin(), non_wall.end());
  std::sort(everyone.begin(), everyone.end(), earlier);
  if (everyone.empty()) {
    // Nothing passed the gates: fall back to the lowest-SSIM cell of the grid.
    Candidate best;
    best.score = std::numeric_limits<double>::infinity();
    for (int i = 0; i < res.grid.rows; ++i) {
      for (int j = 0; j < res.grid.cols; ++j) {
        for (int f = 0; f < res.ssim.pairs; ++f) {
          if (res.ssim.at(i, j, f) < best.score) {
            best.cell = {i, j};
            best.score = res.ssim.at(i, j, f);
            best.min_frame = f;
          }
        }
      }
    }
    best.wall = mask.is_wall(best.cell);
    everyone.push_back(score(best));
    res.set.notes.push_back("no candidate passed the SSIM and rising gates");
    res.set.degenerate = true;
  }

  const std::pair<Tissue, std::vector<Scored>*> groups[] = {
      {Tissue::wall, &wall}, {Tissue::lesion, &lesion}, {Tissue::parenchyma, &parenchyma}};
  for (const auto& [tissue, members] : groups) {
    std::sort(members->begin(), members->end(), earlier);
    std::vector<EarliestEntry> picked;
    for (std::size_t i = 0; i < members->size() && picked.size() < 2; ++i) {
      const auto& s = (*members)[i];
      picked.push_back({tissue, s.cand.cell, s.tts, s.tic, s.cand.score, false});
    }
    if (picked.size() < 2) {
      res.set.degenerate = true;
      res.set.notes.push_back(synth::to_string(tissue) + " group has " + std::to_string(picked.size()) +
                              " position(s); padded");
      const EarliestEntry fill = picked.empty() ? EarliestEntry{tissue, everyone.front().cand.cell, everyone.front().tts,
                                                                everyone.front().tic, everyone.front().cand.score, true}
                                                : EarliestEntry{picked.front()};
      while (picked.size() < 2) {
        picked.push_back(fill);
        picked.back().padded = true;
      }
    }
    for (auto& e : picked) res.set.entries.push_back(std::move(e));
  }
  return res;
}

}  // namespace tasl::detect
