#include "tasl/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tasl/error.hpp"

namespace tasl {

double mean_intensity(const Frame& frame) {
  if (frame.pixels.empty()) return 0.0;
  std::uint64_t sum = 0;
  for (auto p : frame.pixels) sum += p;
  return static_cast<double>(sum) / static_cast<double>(frame.pixels.size());
}

double mean_intensity(const Frame& frame, const PixelRect& rect) {
  std::uint64_t sum = 0;
  for (int y = rect.top; y < rect.top + rect.height; ++y) {
    const auto* row = frame.pixels.data() + static_cast<std::size_t>(y) * frame.width;
    for (int x = rect.left; x < rect.left + rect.width; ++x) sum += row[x];
  }
  return static_cast<double>(sum) / (static_cast<double>(rect.height) * rect.width);
}

std::vector<double> extract_patch(const Frame& frame, const PixelRect& rect) {
  if (rect.top < 0 || rect.left < 0 || rect.top + rect.height > frame.height ||
      rect.left + rect.width > frame.width) {
    throw GeometryError("patch rectangle outside frame");
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rect.height) * rect.width);
  for (int y = rect.top; y < rect.top + rect.height; ++y) {
    for (int x = rect.left; x < rect.left + rect.width; ++x) out.push_back(frame.at(y, x));
  }
  return out;
}

namespace {

// Per output index: list of (source index, weight) covering [o*scale, (o+1)*scale).
struct AxisWeights {
  std::vector<int> begin;
  std::vector<std::vector<double>> weights;
};

AxisWeights area_weights(int in, int out) {
  AxisWeights aw;
  aw.begin.resize(out);
  aw.weights.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double lo = o * scale;
    const double hi = (o + 1) * scale;
    const int first = static_cast<int>(std::floor(lo));
    const int last = std::min(in - 1, static_cast<int>(std::ceil(hi)) - 1);
    aw.begin[o] = first;
    for (int i = first; i <= last; ++i) {
      const double overlap = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
      aw.weights[o].push_back(std::max(0.0, overlap) / scale);
    }
  }
  return aw;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

std::vector<double> resize_area(const Frame& frame, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw GeometryError("resize target must be positive");
  const auto wy = area_weights(frame.height, out_h);
  const auto wx = area_weights(frame.width, out_w);

  // Horizontal pass then vertical pass.
  std::vector<double> tmp(static_cast<std::size_t>(frame.height) * out_w, 0.0);
  for (int y = 0; y < frame.height; ++y) {
    for (int ox = 0; ox < out_w; ++ox) {
      double acc = 0.0;
      const auto& w = wx.weights[ox];
      for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * frame.at(y, wx.begin[ox] + static_cast<int>(k));
      tmp[static_cast<std::size_t>(y) * out_w + ox] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(out_h) * out_w, 0.0);
  for (int oy = 0; oy < out_h; ++oy) {
    const auto& w = wy.weights[oy];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const int y = wy.begin[oy] + static_cast<int>(k);
      for (int ox = 0; ox < out_w; ++ox) {
        out[static_cast<std::size_t>(oy) * out_w + ox] += w[k] * tmp[static_cast<std::size_t>(y) * out_w + ox];
      }
    }
  }
  return out;
}

Frame reflect_pad(const Frame& frame, int multiple) {
  const int h = (frame.height + multiple - 1) / multiple * multiple;
  const int w = (frame.width + multiple - 1) / multiple * multiple;
  if (h == frame.height && w == frame.width) return frame;
  Frame out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = reflect_index(y, frame.height);
    for (int x = 0; x < w; ++x) out.at(y, x) = frame.at(sy, reflect_index(x, frame.width));
  }
  return out;
}

void check_uniform_geometry(std::span<const Frame> frames) {
  if (frames.empty()) return;
  const int h = frames.front().height;
  const int w = frames.front().width;
  for (const auto& f : frames) {
    if (f.height != h || f.width != w) {
      throw GeometryError("frames differ in geometry: " + std::to_string(h) + "x" + std::to_string(w) +
                          " vs " + std::to_string(f.height) + "x" + std::to_string(f.width));
    }
  }
}

}  // namespace tasl
