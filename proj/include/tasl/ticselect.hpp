#pragma once

#include <span>
#include <vector>

#include "tasl/image.hpp"

namespace tasl::tic {

/// Mean intensity per frame; `origin` is the raw-video index of values[0].
struct TimeIntensityCurve {
  std::vector<double> values;
  int origin = 0;

  std::size_t size() const { return values.size(); }
};

struct ClipSelection {
  int tts = 0;
  int ttp = 0;
  int step = 1;              // Delta = quotient + 1
  int extended_end = 0;      // t_TTP + (F - remainder)
  std::vector<int> indices;  // raw-video frame indices, clamped to the video
  bool fallback = false;     // true when no enhancement was found
};

struct SelectOptions {
  int window = 31;
  int order = 2;
  double grad_threshold = 0.2;
  int frames = 32;
};

TimeIntensityCurve compute_mean_tic(std::span<const Frame> ceus);

/// Savitzky-Golay smoothing: each sample is the value, at its position, of the
/// order-`order` least-squares polynomial over a `window`-point window. The
/// first/last (window-1)/2 samples use the first/last full window's fit.
std::vector<double> sg_smooth(std::span<const double> curve, int window, int order);
TimeIntensityCurve sg_smooth(const TimeIntensityCurve& curve, int window, int order);

/// Savitzky-Golay weights that evaluate the window fit at `offset` samples
/// from the window center (-(window-1)/2 ... (window-1)/2).
std::vector<double> sg_weights(int window, int order, int offset);

/// t_TTS: first frame whose forward difference exceeds `threshold`;
/// t_TTP: first maximum at or after t_TTS. Throws NoEnhancementError.
std::pair<int, int> find_tts_ttp(std::span<const double> curve, double threshold);

/// Sampling plan for `frames` frames from [tts, ttp] of a `raw_length` video.
ClipSelection plan_selection(int tts, int ttp, int frames, int raw_length);

/// Uniform sampling over the whole video, flagged as a fallback.
ClipSelection uniform_selection(int raw_length, int frames);

BimodalVideo gather_frames(const BimodalVideo& video, std::span<const int> indices);

std::pair<BimodalVideo, ClipSelection> select_frames(const BimodalVideo& video, int tts, int ttp, int frames);

struct SelectResult {
  BimodalVideo video;
  ClipSelection selection;
  TimeIntensityCurve raw_tic;
  TimeIntensityCurve smoothed_tic;
};

/// Whole TIC-based clip selection: TIC, smoothing, start/peak detection and
/// sampling, falling back to uniform sampling when nothing enhances.
SelectResult select_clip(const BimodalVideo& video, const SelectOptions& options = {});

}  // namespace tasl::tic
