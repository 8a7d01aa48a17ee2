// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hiergan {

struct Rgb8Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

void write_png_rgb(const std::filesystem::path& path, const Rgb8Image& image);
void write_png_gray(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& pixels);

/// Reads 8-bit RGB; gray and RGBA inputs are converted. Throws IoError naming the file.
Rgb8Image read_png_rgb(const std::filesystem::path& path);

}  // namespace hiergan
