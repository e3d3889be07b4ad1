#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tasl/image.hpp"
#include "tasl/synthgen.hpp"

namespace tasl::detect {

using synth::Tissue;

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

/// Square-patch partition of a (reflection-padded) frame.
struct PatchGrid {
  int patch_size = 64;
  int rows = 0;
  int cols = 0;

  PixelRect rect(Cell c) const { return {c.row * patch_size, c.col * patch_size, patch_size, patch_size}; }
  /// Half-sized sub-patch centered in the cell.
  PixelRect sub_rect(Cell c) const {
    const int s = patch_size / 2;
    return {c.row * patch_size + s / 2, c.col * patch_size + s / 2, s, s};
  }
  int cell_count() const { return rows * cols; }
};

PatchGrid make_grid(int frame_height, int frame_width, int patch_size = 64);

/// SSIM between each cell and the same cell in the next frame.
/// values is row-major over (rows, cols, pairs).
struct SsimMap {
  int rows = 0;
  int cols = 0;
  int pairs = 0;
  std::vector<double> values;

  double at(int i, int j, int f) const {
    return values[(static_cast<std::size_t>(i) * cols + j) * pairs + f];
  }
  double& at(int i, int j, int f) { return values[(static_cast<std::size_t>(i) * cols + j) * pairs + f]; }
};

inline constexpr double kPixelRange = 255.0;

/// Patch SSIM with population statistics, eps1 = (0.01 R)^2, eps2 = (0.03 R)^2.
double ssim_patch(std::span<const double> a, std::span<const double> b, double range = kPixelRange);

SsimMap adjacent_ssim_map(std::span<const Frame> ceus, int patch_size = 64);

/// Little-endian dump: three int32 dims (rows, cols, pairs) then row-major f64.
void write_ssim_map(const std::filesystem::path& path, const SsimMap& map);
SsimMap read_ssim_map(const std::filesystem::path& path);

/// Per-cell wall flags, row-major over the grid.
struct WallMask {
  int rows = 0;
  int cols = 0;
  std::vector<bool> wall;

  bool is_wall(Cell c) const { return wall[static_cast<std::size_t>(c.row) * cols + c.col]; }
};

/// Marks the top `fraction` of grid rows (at least one row) as wall.
WallMask default_wall_mask(int rows, int cols, double fraction = 0.25);

struct Candidate {
  Cell cell;
  double score = 1.0;  // minimum SSIM over adjacent pairs
  int min_frame = 0;   // pair index of that minimum
  bool wall = false;
};

struct CandidateSet {
  std::vector<Candidate> wall;
  std::vector<Candidate> non_wall;
};

CandidateSet candidate_positions(const SsimMap& map, const WallMask& mask, double tau_wall = 0.8,
                                 double tau_nwall = 0.6);

/// Mean intensity of `rect` in every frame.
std::vector<double> region_tic(std::span<const Frame> frames, const PixelRect& rect);

/// Least-squares slope of y against its index.
double least_squares_slope(std::span<const double> y);

/// True iff the cell's patch-mean TIC has positive least-squares slope over
/// [min_frame - half_window, min_frame + half_window] clipped to the video.
/// Frames must already be padded to the grid.
bool rising_tic_check(std::span<const Frame> ceus, const PatchGrid& grid, Cell cell, int min_frame,
                      int half_window = 4);
bool rising_tic_check(std::span<const Frame> ceus, const PatchGrid& grid, const SsimMap& map, Cell cell,
                      int half_window = 4);

/// Maps a gray-scale patch to a fixed-length feature vector.
class PatchEmbedder {
 public:
  virtual ~PatchEmbedder() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> embed(std::span<const double> patch, int size) const = 0;
};

/// Mean, variance, mean gradient magnitude and an 8-bin intensity histogram
/// (fractions of pixels in [32k, 32k+32)).
class TextureStatsEmbedder final : public PatchEmbedder {
 public:
  int dim() const override { return 11; }
  std::vector<double> embed(std::span<const double> patch, int size) const override;
};

/// Validates that `patch` is size x size with size == expected, then embeds.
std::vector<double> embed_patch(const PatchEmbedder& embedder, std::span<const double> patch, int size,
                                int expected_size = 64);

struct Clustering {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  int iterations = 0;
  bool degenerate = false;
};

/// Lloyd's k-means with k-means++ seeding. Fewer than k distinct points
/// yields a single group flagged degenerate.
Clustering kmeans(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                  int max_iterations = 100, double tolerance = 1e-6);

/// Binary clustering whose labels are renumbered so that group 0 holds the
/// point with the smallest `order_key` (earliest sub-patch TTS).
Clustering cluster_positions(const std::vector<std::vector<double>>& features, std::span<const int> order_key,
                             int k = 2, std::uint64_t seed = 0);

struct EarliestEntry {
  Tissue group = Tissue::lesion;
  Cell cell;
  int tts = 0;
  std::vector<double> tic;  // sub-patch TIC, one value per sampled frame
  double score = 1.0;
  bool padded = false;  // duplicated to fill a short group
};

/// Six earliest-enhanced positions in the order wall, wall, lesion, lesion,
/// parenchyma, parenchyma.
struct EarliestEnhancedSet {
  std::vector<EarliestEntry> entries;
  bool degenerate = false;
  std::vector<std::string> notes;
};

enum class LesionRule {
  hypoechoic,  // cluster with the darker mean gray-scale texture is the lesion
  earliest,    // cluster 0 (earliest sub-patch TTS) is the lesion
};

struct DetectOptions {
  int patch_size = 64;
  double tau_wall = 0.8;
  double tau_nwall = 0.6;
  double wall_fraction = 0.25;
  int sg_window = 31;
  int sg_order = 2;
  double grad_threshold = 0.2;
  int rising_half_window = 4;
  // Raw frames between sampled frames. The sub-patch smoothing window is
  // shrunk by this factor so it spans the same stretch of raw video.
  int sample_step = 1;
  std::uint64_t seed = 0;
  LesionRule lesion_rule = LesionRule::hypoechoic;
};

struct DetectResult {
  EarliestEnhancedSet set;
  PatchGrid grid;
  SsimMap ssim;
  CandidateSet candidates;                // SSIM-gated
  std::vector<Candidate> accepted;        // gated and rising
  std::vector<Candidate> motion_rejected; // gated but not rising
  std::vector<int> cluster_labels;        // per accepted non-wall candidate
};

/// Smoothing window used for sub-patch TICs of length `length`.
int sub_patch_window(int length, const DetectOptions& options);

/// Sub-patch TTS on an F-frame TIC. Returns the curve length when nothing
/// crosses the threshold.
int sub_patch_tts(std::span<const double> tic, const DetectOptions& options);

DetectResult earliest_enhanced_tics(const BimodalVideo& sampled, const DetectOptions& options = {},
                                    const WallMask* wall_mask = nullptr, const PatchEmbedder* embedder = nullptr);

}  // namespace tasl::detect
