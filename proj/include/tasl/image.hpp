#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tasl {

/// 8-bit grayscale frame, row-major.
struct Frame {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Frame() = default;
  Frame(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const Frame&) const = default;
};

using Video = std::vector<Frame>;

/// Temporally synchronized, co-registered gray-scale and contrast-enhanced
/// frame sequences of one case.
struct BimodalVideo {
  Video gsus;
  Video ceus;

  std::size_t frame_count() const { return ceus.size(); }
  bool operator==(const BimodalVideo&) const = default;
};

/// Rectangular window into a frame.
struct PixelRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

double mean_intensity(const Frame& frame);
double mean_intensity(const Frame& frame, const PixelRect& rect);

/// Copies `rect` out of `frame` as doubles (row-major).
std::vector<double> extract_patch(const Frame& frame, const PixelRect& rect);

/// Area-averaging resample to (out_h, out_w). Pixel values stay real-valued.
std::vector<double> resize_area(const Frame& frame, int out_h, int out_w);

/// Reflection-pads a frame so both dimensions become multiples of `multiple`.
Frame reflect_pad(const Frame& frame, int multiple);

/// Throws GeometryError unless all frames share one geometry.
void check_uniform_geometry(std::span<const Frame> frames);

}  // namespace tasl
