#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "tasl/eedetect.hpp"
#include "tasl/error.hpp"
#include "tasl/synthgen.hpp"
#include "tasl/ticselect.hpp"

using namespace tasl;
using namespace tasl::detect;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_patch(std::mt19937& rng, int n = 64 * 64) {
  std::uniform_int_distribution<int> u(0, 255);
  std::vector<double> p(n);
  for (auto& v : p) v = u(rng);
  return p;
}

Video static_video(int frames, int h, int w, unsigned seed) {
  std::mt19937 rng(seed);
  Frame f(h, w);
  for (auto& p : f.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return Video(frames, f);
}

Frame fill_cell(Frame f, int row, int col, std::uint8_t v, int size = 64) {
  for (int y = row * size; y < (row + 1) * size; ++y)
    for (int x = col * size; x < (col + 1) * size; ++x) f.at(y, x) = v;
  return f;
}

}  // namespace

TEST_CASE("SSIM closed-form values") {
  std::mt19937 rng(1);
  const auto a = random_patch(rng);
  CHECK(ssim_patch(a, a) == 1.0);
  const std::vector<double> zero(4096, 0.0), full(4096, 255.0);
  const double e1 = std::pow(0.01 * 255, 2);
  CHECK(ssim_patch(zero, full) == doctest::Approx(e1 / (255.0 * 255.0 + e1)).epsilon(1e-12));
  CHECK(ssim_patch(zero, full) == doctest::Approx(1.0002e-4).epsilon(1e-4));
  CHECK_THROWS_AS(ssim_patch(a, std::vector<double>(10)), ShapeError);
}

TEST_CASE("SSIM matches the brute-force formula and is symmetric") {
  std::mt19937 rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_patch(rng);
    auto b = random_patch(rng);
    if (i % 3 == 0)
      for (std::size_t k = 0; k < b.size(); ++k) b[k] = std::clamp(a[k] + static_cast<double>(rng() % 21) - 10, 0.0, 255.0);
    const double s = ssim_patch(a, b);
    CHECK(std::fabs(s - oracle::ssim_bruteforce(a, b)) < 1e-9);
    CHECK(s == ssim_patch(b, a));
    CHECK(s <= 1.0);
    CHECK(s >= -1.0);
  }
}

TEST_CASE("SSIM map of a static video is all ones and has the grid shape") {
  const auto v = static_video(5, 128, 192, 3);
  const auto m = adjacent_ssim_map(v);
  CHECK(m.rows == 2);
  CHECK(m.cols == 3);
  CHECK(m.pairs == 4);
  for (double x : m.values) CHECK(x == 1.0);
  CHECK_THROWS_AS(adjacent_ssim_map(Video(1, Frame(64, 64))), ParameterError);
}

TEST_CASE("frames are reflection padded to the grid") {
  const auto g = make_grid(100, 130);
  CHECK(g.rows == 2);
  CHECK(g.cols == 3);
  Frame f(3, 5);
  for (int x = 0; x < 5; ++x) f.at(2, x) = static_cast<std::uint8_t>(10 + x);
  const auto p = reflect_pad(f, 4);
  CHECK(p.height == 4);
  CHECK(p.width == 8);
  CHECK(p.at(3, 0) == f.at(1, 0));
  CHECK(p.at(2, 5) == f.at(2, 3));
  const auto m = adjacent_ssim_map(static_video(3, 100, 130, 4));
  CHECK(m.rows == 2);
  CHECK(m.cols == 3);
}

TEST_CASE("an abrupt brightening marks its cell and pair as the minimum") {
  auto v = static_video(10, 192, 192, 5);
  for (int f = 6; f < 10; ++f) v[f] = fill_cell(v[f], 1, 2, 250);
  const auto m = adjacent_ssim_map(v);
  const auto it = std::min_element(m.values.begin(), m.values.end());
  const auto idx = static_cast<int>(it - m.values.begin());
  CHECK(idx / m.pairs == 1 * m.cols + 2);
  CHECK(idx % m.pairs == 5);
}

TEST_CASE("SSIM map binary layout round trip") {
  SsimMap m{2, 3, 4, {}};
  for (int i = 0; i < 24; ++i) m.values.push_back(std::sin(i) * 0.9);
  const auto path = fs::temp_directory_path() / "tasl_ssim_map.bin";
  write_ssim_map(path, m);
  CHECK(fs::file_size(path) == 12 + 24 * 8);
  const auto back = read_ssim_map(path);
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  CHECK(back.pairs == 4);
  CHECK(back.values == m.values);
  fs::resize_file(path, 40);
  CHECK_THROWS_AS(read_ssim_map(path), FormatError);
  fs::remove(path);
}

TEST_CASE("candidate gating") {
  SsimMap m{4, 3, 2, std::vector<double>(24, 0.95)};
  const auto mask = default_wall_mask(4, 3);
  CHECK(mask.is_wall({0, 1}));
  CHECK(!mask.is_wall({1, 1}));
  CHECK(candidate_positions(m, mask).non_wall.empty());

  m.at(0, 0, 1) = 0.5;
  m.at(0, 2, 0) = 0.6;
  m.at(0, 1, 0) = 0.85;
  m.at(2, 1, 1) = 0.3;
  m.at(3, 2, 0) = 0.59;
  m.at(3, 0, 0) = 0.6;  // not strictly below the gate
  const auto c = candidate_positions(m, mask);
  REQUIRE(c.wall.size() == 2);
  CHECK(c.wall[0].cell == Cell{0, 0});
  CHECK(c.wall[0].min_frame == 1);
  CHECK(c.wall[1].cell == Cell{0, 2});
  REQUIRE(c.non_wall.size() == 2);
  for (const auto& x : c.non_wall) CHECK(x.score < 0.6);
}

TEST_CASE("lowering the non-wall gate never adds candidates") {
  std::mt19937 rng(6);
  std::uniform_real_distribution<double> u(-0.2, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    SsimMap m{6, 5, 7, {}};
    for (int i = 0; i < 6 * 5 * 7; ++i) m.values.push_back(u(rng));
    const auto mask = default_wall_mask(6, 5);
    std::size_t prev = 1 << 30;
    for (double tau = 1.0; tau >= -0.2; tau -= 0.1) {
      const auto n = candidate_positions(m, mask, 0.8, tau).non_wall.size();
      CHECK(n <= prev);
      prev = n;
    }
  }
}

TEST_CASE("least-squares slope and the rising check") {
  CHECK(least_squares_slope(std::vector<double>{1, 3, 5, 7}) == doctest::Approx(2.0));
  std::vector<double> wave(16);
  for (int i = 0; i < 16; ++i) wave[i] = 100 + 20 * std::sin(2 * M_PI * i / 16.0);
  // a symmetric sampling of a full period has zero trend up to rounding
  std::vector<double> cosw(17);
  for (int i = 0; i < 17; ++i) cosw[i] = 100 + 20 * std::cos(2 * M_PI * i / 16.0);
  CHECK(std::fabs(least_squares_slope(cosw)) < 1e-9);

  Video rising, oscillating;
  for (int f = 0; f < 16; ++f) {
    rising.emplace_back(64, 64, static_cast<std::uint8_t>(20 + 5 * f));
    oscillating.emplace_back(64, 64, static_cast<std::uint8_t>(std::lround(cosw[f])));
  }
  const auto g = make_grid(64, 64);
  CHECK(rising_tic_check(rising, g, {0, 0}, 8));
  CHECK(!rising_tic_check(oscillating, g, {0, 0}, 0));
  CHECK(!rising_tic_check(Video(12, Frame(64, 64, 90)), g, {0, 0}, 5));
}

TEST_CASE("respiratory motion over a static edge is rejected") {
  synth::SynthSpec s;
  s.frame_count = 32;
  s.frame_height = 128;
  s.frame_width = 128;
  s.motion_amplitude = 12.0;
  s.motion_period = 8.0;
  synth::RegionSpec r;
  r.tissue = synth::Tissue::parenchyma;
  r.shape.box = {40, 0, 60, 128};
  r.tic = {31, 1.0, 2.0, 1.0, 160.0};  // bright, practically constant
  s.regions = {r};
  const auto c = synth::generate_case(s);
  const auto g = make_grid(128, 128);
  const auto m = adjacent_ssim_map(c.video.ceus);
  int edge_cells = 0;
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      double lo = 1.0;
      for (int f = 0; f < m.pairs; ++f) lo = std::min(lo, m.at(i, j, f));
      if (lo >= 0.99) continue;
      ++edge_cells;
      // the nine-frame window spans one breathing cycle, so drift has no net trend
      CHECK(!rising_tic_check(c.video.ceus, g, m, {i, j}, 4));
    }
  }
  CHECK(edge_cells > 0);
}

TEST_CASE("texture embedding") {
  TextureStatsEmbedder e;
  const auto v = embed_patch(e, std::vector<double>(4096, 100.0), 64);
  REQUIRE(v.size() == 11);
  CHECK(v[0] == 100.0);
  CHECK(v[1] == 0.0);
  CHECK(v[2] == 0.0);
  for (int b = 0; b < 8; ++b) CHECK(v[3 + b] == (b == 3 ? 1.0 : 0.0));
  std::mt19937 rng(7);
  const auto p = random_patch(rng);
  CHECK(embed_patch(e, p, 64) == embed_patch(e, p, 64));
  CHECK_THROWS_AS(embed_patch(e, std::vector<double>(32 * 32), 32), ShapeError);
}

TEST_CASE("texture embedding separates lesion from parenchyma patches") {
  synth::DatasetOptions o;
  o.frame_count = 4;
  TextureStatsEmbedder e;
  std::vector<std::vector<double>> les, par;
  for (std::uint64_t seed = 0; les.size() + par.size() < 100 && seed < 200; ++seed) {
    const auto spec = synth::make_case_spec(seed, static_cast<int>(seed % 2), o);
    const auto c = synth::generate_case(spec);
    const auto g = make_grid(spec.frame_height, spec.frame_width);
    for (int i = 0; i < g.rows; ++i) {
      for (int j = 0; j < g.cols; ++j) {
        const auto rect = g.rect({i, j});
        for (const auto& r : spec.regions) {
          bool inside = true;
          for (int y : {rect.top, rect.top + 63})
            for (int x : {rect.left, rect.left + 63}) inside = inside && r.shape.contains(y, x);
          if (!inside) continue;
          auto v = e.embed(extract_patch(c.video.gsus[0], rect), 64);
          if (r.tissue == synth::Tissue::lesion) les.push_back(v);
          if (r.tissue == synth::Tissue::parenchyma && par.size() < 50) par.push_back(v);
        }
      }
    }
  }
  REQUIRE(les.size() >= 5);
  REQUIRE(par.size() >= 5);
  auto centroid = [](const std::vector<std::vector<double>>& pts) {
    std::vector<double> c(pts[0].size(), 0.0);
    for (const auto& p : pts)
      for (std::size_t k = 0; k < c.size(); ++k) c[k] += p[k] / pts.size();
    return c;
  };
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  };
  const auto cl = centroid(les), cp = centroid(par);
  double spread = 0;
  for (const auto& p : les) spread = std::max(spread, dist(p, cl));
  for (const auto& p : par) spread = std::max(spread, dist(p, cp));
  CHECK(dist(cl, cp) > spread);
}

TEST_CASE("k-means on separable and degenerate data") {
  std::mt19937 rng(10);
  std::normal_distribution<double> n(0.0, 0.3);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 40; ++i) pts.push_back({(i < 20 ? 0.0 : 10.0) + n(rng), n(rng)});
  const auto c = kmeans(pts, 2, 1);
  CHECK(!c.degenerate);
  for (int i = 1; i < 20; ++i) CHECK(c.labels[i] == c.labels[0]);
  for (int i = 21; i < 40; ++i) CHECK(c.labels[i] == c.labels[20]);
  CHECK(c.labels[0] != c.labels[20]);
  CHECK(kmeans(pts, 2, 1).labels == c.labels);

  const auto d = kmeans(std::vector<std::vector<double>>(5, {1.0, 2.0}), 2, 1);
  CHECK(d.degenerate);
  for (int l : d.labels) CHECK(l == 0);
  CHECK(kmeans({{1.0}}, 2, 1).degenerate);
}

TEST_CASE("cluster labels put the earliest point in group zero") {
  std::vector<std::vector<double>> pts{{0, 0}, {0.1, 0}, {9, 9}, {9.2, 9}};
  for (auto key : {std::vector<int>{5, 6, 1, 7}, std::vector<int>{0, 6, 1, 7}}) {
    const auto c = cluster_positions(pts, key);
    const auto earliest = std::min_element(key.begin(), key.end()) - key.begin();
    CHECK(c.labels[earliest] == 0);
    CHECK(c.labels[0] == c.labels[1]);
    CHECK(c.labels[2] == c.labels[3]);
  }
  CHECK_THROWS_AS(cluster_positions(pts, std::vector<int>{1, 2}), ShapeError);
}

TEST_CASE("sub-patch onset uses a window clipped to the curve") {
  DetectOptions o;
  CHECK(sub_patch_window(32, o) % 2 == 1);
  CHECK(sub_patch_window(32, o) <= 31);
  CHECK(sub_patch_window(5, o) <= 5);
  CHECK(sub_patch_tts(std::vector<double>(32, 40.0), o) == 32);
  std::vector<double> ramp(32);
  for (int i = 0; i < 32; ++i) ramp[i] = i < 10 ? 20.0 : 20.0 + 3.0 * (i - 10);
  for (int step : {1, 3, 6}) {
    o.sample_step = step;
    const int w = sub_patch_window(32, o);
    const auto smooth = oracle::sg_direct(ramp, w, 2);
    int expect = 32;
    for (int f = 0; f + 1 < 32; ++f) {
      if (smooth[f + 1] - smooth[f] > 0.2) {
        expect = f;
        break;
      }
    }
    CHECK(sub_patch_tts(ramp, o) == expect);
  }
}

TEST_CASE("a static video still yields six padded entries") {
  BimodalVideo v;
  v.gsus = static_video(8, 256, 192, 11);
  v.ceus = static_video(8, 256, 192, 12);
  const auto r = earliest_enhanced_tics(v);
  REQUIRE(r.set.entries.size() == 6);
  CHECK(r.set.degenerate);
  for (const auto& e : r.set.entries) CHECK(e.tic.size() == 8);
}

TEST_CASE("detection on synthetic cases finds the lesion and orders the groups") {
  for (std::uint64_t s = 0; s < 2; ++s) {
    const auto spec = synth::make_case_spec(1000 + s, 1, {});
    const auto c = synth::generate_case(spec);
    const auto sel = tic::select_clip(c.video);
    DetectOptions o;
    o.sample_step = sel.selection.step;
    const auto r = earliest_enhanced_tics(sel.video, o);
    REQUIRE(r.set.entries.size() == 6);
    const synth::Tissue order[] = {synth::Tissue::wall, synth::Tissue::wall, synth::Tissue::lesion,
                                   synth::Tissue::lesion, synth::Tissue::parenchyma, synth::Tissue::parenchyma};
    const synth::RegionSpec* lesion = nullptr;
    const synth::RegionSpec* paren = nullptr;
    for (const auto& rg : spec.regions) {
      if (rg.tissue == synth::Tissue::lesion) lesion = &rg;
      if (rg.tissue == synth::Tissue::parenchyma) paren = &rg;
    }
    int lesion_tts = 1 << 30, paren_tts = 1 << 30;
    for (int k = 0; k < 6; ++k) {
      const auto& e = r.set.entries[k];
      CHECK(e.group == order[k]);
      CHECK(e.tic.size() == 32);
      if (e.group == synth::Tissue::lesion) {
        CHECK(lesion->shape.contains(e.cell.row * 64 + 32, e.cell.col * 64 + 32));
        lesion_tts = std::min(lesion_tts, e.tts);
      }
      if (e.group == synth::Tissue::parenchyma) paren_tts = std::min(paren_tts, e.tts);
    }
    if (lesion->tic.onset < paren->tic.onset) CHECK(lesion_tts < paren_tts);
    const auto again = earliest_enhanced_tics(sel.video, o);
    CHECK(again.cluster_labels == r.cluster_labels);
  }
}
