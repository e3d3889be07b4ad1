#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tasl/image.hpp"

namespace tasl::synth {

enum class Tissue { wall, lesion, parenchyma };

std::string to_string(Tissue t);
Tissue tissue_from_string(const std::string& s);

/// Peak-normalized gamma-variate wash-in curve parameters (frame units).
struct GammaVariateParams {
  int onset = 0;           // t0
  double amplitude = 0.0;  // A, added intensity at the peak
  double shape = 1.0;      // alpha
  double rate = 1.0;       // beta; time to peak after onset is alpha / beta
  double baseline = 0.0;   // b

  double time_to_peak() const { return shape / rate; }
  bool operator==(const GammaVariateParams&) const = default;
};

enum class ShapeKind { rectangle, ellipse };

/// Region mask: a rectangle, or the ellipse inscribed in it. A pixel belongs
/// to the mask when its center lies inside.
struct RegionShape {
  ShapeKind kind = ShapeKind::rectangle;
  PixelRect box;

  bool contains(int y, int x) const;
  bool operator==(const RegionShape& o) const {
    return kind == o.kind && box.top == o.box.top && box.left == o.box.left &&
           box.height == o.box.height && box.width == o.box.width;
  }
};

struct RegionSpec {
  Tissue tissue = Tissue::lesion;
  RegionShape shape;
  GammaVariateParams tic;

  bool operator==(const RegionSpec&) const = default;
};

struct SynthSpec {
  int frame_count = 192;
  int frame_height = 896;
  int frame_width = 704;
  std::vector<RegionSpec> regions;
  double noise_sigma = 0.0;       // additive Gaussian pixel noise, 8-bit units
  double motion_amplitude = 0.0;  // vertical respiratory drift, pixels
  double motion_period = 16.0;    // frames per breathing cycle
  /// Contrast speckle: per-pixel, frame-decorrelated +/- deviation equal to
  /// speckle_gain times the region's current wash-in rate (intensity/frame).
  double speckle_gain = 6.0;
  int class_label = 0;
  std::uint64_t seed = 0;
  std::vector<double> clinical;
};

struct GroundTruth {
  std::vector<RegionSpec> regions;  // per-region onset lives in tic.onset
  int tts = -1;
  int ttp = -1;
  double grad_threshold = 0.2;
  int class_label = -1;
  std::uint64_t seed = 0;
  std::vector<double> clinical;
  std::vector<double> mean_tic;  // analytic frame-mean intensity curve

  bool operator==(const GroundTruth&) const = default;
};

/// One case on disk or in memory. `truth` is fully populated for synthetic
/// cases; for other data only class_label / clinical may be set.
struct Case {
  BimodalVideo video;
  GroundTruth truth;

  bool operator==(const Case&) const = default;
};

/// Gamma-variate TIC of `length` frames, clipped to [0, 255].
/// Throws ParameterError for negative amplitude or non-positive shape/rate.
std::vector<double> gamma_variate_tic(const GammaVariateParams& params, int length);

/// Throws ParameterError / GeometryError when the spec is inconsistent.
/// With `require_all_tissues`, each tissue tag must appear at least once.
void validate_spec(const SynthSpec& spec, bool require_all_tissues = false);

/// Number of pixels covered by each region's mask.
std::vector<std::int64_t> region_areas(const SynthSpec& spec);

/// Area-weighted sum of the regions' analytic TICs (background is 0).
std::vector<double> analytic_mean_tic(const SynthSpec& spec);

/// Start (first forward difference > threshold) and first peak at or after it.
/// Returns {-1, -1} when the curve never rises faster than the threshold.
std::pair<int, int> analytic_tts_ttp(const std::vector<double>& curve, double threshold);

Case generate_case(const SynthSpec& spec);

/// File name of frame `i` inside gsus/ and ceus/.
std::string frame_name(std::size_t i);

void write_case(const std::filesystem::path& dir, const Case& c);
Case read_case(const std::filesystem::path& dir);

/// Geometry and noise knobs shared by every case of a generated dataset.
struct DatasetOptions {
  int frame_count = 192;
  int frame_height = 896;
  int frame_width = 704;
  double noise_sigma = 3.0;
  double motion_amplitude = 0.0;
  double motion_period = 16.0;
  double speckle_gain = 6.0;
};

/// Randomized lung-like layout (wall band, hypoechoic lesion, parenchyma)
/// whose lesion perfusion depends on the class: malignant (1) lesions enhance
/// earlier and faster than the parenchyma, benign (0) ones later and slower.
SynthSpec make_case_spec(std::uint64_t seed, int class_label, const DatasetOptions& options = {});

/// `n` case specs with exactly floor/ceil(n * balance) malignant cases.
std::vector<SynthSpec> make_dataset_specs(int n, double balance, std::uint64_t seed,
                                          const DatasetOptions& options = {});

}  // namespace tasl::synth
