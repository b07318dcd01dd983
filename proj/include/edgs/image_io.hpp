#pragma once

#include <cstdint>
#include <string>

#include "edgs/geometry.hpp"

namespace edgs {

/// [0,1] -> 8-bit channel value: round(v*255) half-to-even, clamped.
std::uint8_t quantize_channel(double v);

/// PPM P6, header "P6\n{W} {H}\n255\n", rows top to bottom.
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

/// 8-bit RGB PNG via libpng.
void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

/// Dispatch on extension (.ppm or .png).
void write_image(const Image& img, const std::string& path);
Image read_image(const std::string& path);

}  // namespace edgs
