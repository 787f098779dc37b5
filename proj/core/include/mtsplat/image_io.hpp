#pragma once

#include <string>

#include "mtsplat/image.hpp"

namespace mtsplat {

// 8-bit RGB PNG; values quantized with quantize_u8 on write, mapped back to
// v/255 on read.
void write_png_rgb8(const std::string& path, const Image<float>& img);
Image<float> read_png_rgb8(const std::string& path);

// 8-bit grayscale PNG (masks: 0 = excluded).
void write_png_gray8(const std::string& path, const Image<std::uint8_t>& img);
Image<std::uint8_t> read_png_gray8(const std::string& path);

// 16-bit grayscale PNG storing depth in millimeters (clamped to 65.535 m).
void write_png_depth16(const std::string& path, const Image<float>& depth_m);

// PFM, little-endian, 3-channel (normals) or 1-channel.
void write_pfm(const std::string& path, const Image<float>& img);

// Raw float32 map with a small header; used for pseudo-depth so oracle
// exactness survives the round trip. Little-endian.
void write_float_map(const std::string& path, const Image<float>& img);
Image<float> read_float_map(const std::string& path);

}  // namespace mtsplat
