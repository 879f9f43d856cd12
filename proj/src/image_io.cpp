#include "dust/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace dust {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  return f;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  return f;
}

}  // namespace

void save_ppm(const ImageBuffer& img, const std::string& path) {
  auto f = open_out(path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

void save_float_image(const ImageBuffer& img, const std::string& path) {
  auto f = open_out(path);
  const uint32_t w = static_cast<uint32_t>(img.width), h = static_cast<uint32_t>(img.height);
  f.write(reinterpret_cast<const char*>(&w), 4);
  f.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> data(img.rgb.size());
  for (size_t i = 0; i < img.rgb.size(); ++i) data[i] = static_cast<float>(img.rgb[i]);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
}

ImageBuffer load_float_image(const std::string& path) {
  auto f = open_in(path);
  uint32_t w = 0, h = 0;
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  if (!f || w == 0 || h == 0) throw std::runtime_error("malformed float image header: " + path);
  ImageBuffer img(static_cast<int>(w), static_cast<int>(h));
  std::vector<float> data(img.rgb.size());
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("truncated float image: " + path);
  for (size_t i = 0; i < data.size(); ++i) img.rgb[i] = data[i];
  return img;
}

void save_mask_pgm(const std::vector<uint8_t>& mask, int width, int height,
                   const std::string& path) {
  if (mask.size() != static_cast<size_t>(width) * height)
    throw std::invalid_argument("mask size does not match dimensions");
  auto f = open_out(path);
  f << "P5\n" << width << " " << height << "\n255\n";
  std::vector<uint8_t> bytes(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<uint8_t> load_mask_pgm(const std::string& path, int& width, int& height) {
  auto f = open_in(path);
  std::string magic;
  int maxval = 0;
  f >> magic >> width >> height >> maxval;
  if (magic != "P5" || width <= 0 || height <= 0)
    throw std::runtime_error("malformed PGM header: " + path);
  f.get();  // single whitespace after header
  std::vector<uint8_t> bytes(static_cast<size_t>(width) * height);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("truncated PGM: " + path);
  for (auto& b : bytes) b = b ? 1 : 0;
  return bytes;
}

}  // namespace dust
