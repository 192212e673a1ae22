#pragma once

#include <filesystem>
#include <utility>

#include "lesionlab/image.hpp"

namespace lesionlab {

enum class ResizeFilter { bilinear, nearest, area };

Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);

// Mask PNGs are single-channel, foreground 255 / background 0 on disk;
// any stored value >= 128 is read back as foreground.
Mask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Mask& mask);

Image resize_image(const Image& image, int out_height, int out_width,
                   ResizeFilter filter = ResizeFilter::bilinear);

// (height, width) from the PNG header without decoding the pixel data.
std::pair<int, int> png_dimensions(const std::filesystem::path& path);

}  // namespace lesionlab
