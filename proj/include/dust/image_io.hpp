#pragma once

// Image file formats: binary PPM (P6, maxval 255) for viewing, a raw
// float32 dump for lossless metric computation, and P5 masks.
// Float dump layout: uint32 width, uint32 height (little endian), then
// width*height*3 little-endian float32 RGB samples, row-major.

#include <string>

#include "dust/render.hpp"

namespace dust {

void save_ppm(const ImageBuffer& img, const std::string& path);

void save_float_image(const ImageBuffer& img, const std::string& path);
ImageBuffer load_float_image(const std::string& path);

void save_mask_pgm(const std::vector<uint8_t>& mask, int width, int height,
                   const std::string& path);
std::vector<uint8_t> load_mask_pgm(const std::string& path, int& width, int& height);

}  // namespace dust
