#include "tasl/ticselect.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "tasl/error.hpp"

namespace tasl::tic {

TimeIntensityCurve compute_mean_tic(std::span<const Frame> ceus) {
  if (ceus.empty()) throw DataError("cannot compute a TIC of an empty video");
  TimeIntensityCurve tic;
  tic.values.reserve(ceus.size());
  for (const auto& frame : ceus) tic.values.push_back(mean_intensity(frame));
  return tic;
}

std::vector<double> sg_weights(int window, int order, int offset) {
  if (window < 1 || window % 2 == 0) throw ParameterError("Savitzky-Golay window must be odd, got " + std::to_string(window));
  if (order < 0 || order >= window) throw ParameterError("Savitzky-Golay order must satisfy 0 <= order < window");
  const int half = (window - 1) / 2;
  if (offset < -half || offset > half) throw ParameterError("Savitzky-Golay offset outside the window");

  // Abscissae scaled to [-1, 1] for conditioning.
  const double scale = half > 0 ? static_cast<double>(half) : 1.0;
  Eigen::MatrixXd v(window, order + 1);
  for (int j = 0; j < window; ++j) {
    const double t = (j - half) / scale;
    double p = 1.0;
    for (int k = 0; k <= order; ++k) {
      v(j, k) = p;
      p *= t;
    }
  }
  // Rows of pinv(V) give polynomial coefficients as linear maps of the samples.
  const Eigen::MatrixXd pinv = v.completeOrthogonalDecomposition().pseudoInverse();
  Eigen::RowVectorXd phi(order + 1);
  double p = 1.0;
  for (int k = 0; k <= order; ++k) {
    phi(k) = p;
    p *= offset / scale;
  }
  const Eigen::RowVectorXd w = phi * pinv;
  return {w.data(), w.data() + w.size()};
}

std::vector<double> sg_smooth(std::span<const double> curve, int window, int order) {
  if (window < 1 || window % 2 == 0) throw ParameterError("Savitzky-Golay window must be odd, got " + std::to_string(window));
  if (order < 0 || order >= window) throw ParameterError("Savitzky-Golay order must satisfy 0 <= order < window");
  const int n = static_cast<int>(curve.size());
  if (n < window) {
    throw ParameterError("curve of length " + std::to_string(n) + " is shorter than the window " + std::to_string(window));
  }
  const int half = (window - 1) / 2;
  std::vector<std::vector<double>> weights;
  weights.reserve(window);
  for (int off = -half; off <= half; ++off) weights.push_back(sg_weights(window, order, off));

  std::vector<double> out(curve.size());
  for (int i = 0; i < n; ++i) {
    const int center = std::clamp(i, half, n - 1 - half);
    const auto& w = weights[static_cast<std::size_t>(i - center + half)];
    double acc = 0.0;
    for (int j = 0; j < window; ++j) acc += w[j] * curve[center - half + j];
    out[i] = acc;
  }
  return out;
}

TimeIntensityCurve sg_smooth(const TimeIntensityCurve& curve, int window, int order) {
  return {sg_smooth(curve.values, window, order), curve.origin};
}

std::pair<int, int> find_tts_ttp(std::span<const double> curve, double threshold) {
  if (!(threshold > 0.0)) throw ParameterError("gradient threshold must be positive");
  const int n = static_cast<int>(curve.size());
  int tts = -1;
  for (int f = 0; f + 1 < n; ++f) {
    if (curve[f + 1] - curve[f] > threshold) {
      tts = f;
      break;
    }
  }
  if (tts < 0) throw NoEnhancementError("no frame rises faster than the gradient threshold");
  int ttp = tts;
  for (int f = tts + 1; f < n; ++f) {
    if (curve[f] > curve[ttp]) ttp = f;
  }
  return {tts, ttp};
}

ClipSelection plan_selection(int tts, int ttp, int frames, int raw_length) {
  if (frames < 1) throw ParameterError("frame count F must be >= 1");
  if (raw_length < 1) throw ParameterError("raw video is empty");
  if (tts < 0 || tts > ttp || ttp >= raw_length) {
    throw ParameterError("selection needs 0 <= t_TTS <= t_TTP < raw length");
  }
  const int span = ttp - tts;
  const int quo = span / frames;
  const int rem = span % frames;
  ClipSelection sel;
  sel.tts = tts;
  sel.ttp = ttp;
  sel.step = quo + 1;
  sel.extended_end = ttp + (frames - rem);
  sel.indices.reserve(frames);
  for (int i = 0; i < frames; ++i) sel.indices.push_back(std::min(tts + i * sel.step, raw_length - 1));
  return sel;
}

ClipSelection uniform_selection(int raw_length, int frames) {
  if (frames < 1) throw ParameterError("frame count F must be >= 1");
  if (raw_length < 1) throw ParameterError("raw video is empty");
  ClipSelection sel;
  sel.fallback = true;
  sel.tts = 0;
  sel.ttp = raw_length - 1;
  sel.step = std::max(1, raw_length / frames);
  sel.extended_end = raw_length - 1;
  for (int i = 0; i < frames; ++i) {
    const double pos = frames == 1 ? 0.0 : static_cast<double>(i) * (raw_length - 1) / (frames - 1);
    sel.indices.push_back(static_cast<int>(std::floor(pos)));
  }
  return sel;
}

BimodalVideo gather_frames(const BimodalVideo& video, std::span<const int> indices) {
  BimodalVideo out;
  out.gsus.reserve(indices.size());
  out.ceus.reserve(indices.size());
  for (int i : indices) {
    out.gsus.push_back(video.gsus.at(static_cast<std::size_t>(i)));
    out.ceus.push_back(video.ceus.at(static_cast<std::size_t>(i)));
  }
  return out;
}

std::pair<BimodalVideo, ClipSelection> select_frames(const BimodalVideo& video, int tts, int ttp, int frames) {
  if (video.gsus.size() != video.ceus.size()) throw GeometryError("GSUS and CEUS frame counts differ");
  auto sel = plan_selection(tts, ttp, frames, static_cast<int>(video.frame_count()));
  auto clip = gather_frames(video, sel.indices);
  return {std::move(clip), std::move(sel)};
}

SelectResult select_clip(const BimodalVideo& video, const SelectOptions& options) {
  SelectResult result;
  result.raw_tic = compute_mean_tic(video.ceus);
  result.smoothed_tic = sg_smooth(result.raw_tic, options.window, options.order);
  try {
    const auto [tts, ttp] = find_tts_ttp(result.smoothed_tic.values, options.grad_threshold);
    std::tie(result.video, result.selection) = select_frames(video, tts, ttp, options.frames);
  } catch (const NoEnhancementError&) {
    result.selection = uniform_selection(static_cast<int>(video.frame_count()), options.frames);
    result.video = gather_frames(video, result.selection.indices);
  }
  return result;
}

}  // namespace tasl::tic
