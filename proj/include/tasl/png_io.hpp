#pragma once

#include <filesystem>

#include "tasl/image.hpp"

namespace tasl {

/// Writes an 8-bit grayscale PNG. Throws IoError.
void write_png(const std::filesystem::path& path, const Frame& frame);

/// Reads any PNG and converts it to 8-bit grayscale. Throws FormatError on a
/// missing, truncated or otherwise undecodable file.
Frame read_png(const std::filesystem::path& path);

}  // namespace tasl
