#include "edgs/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace edgs {

std::uint8_t quantize_channel(double v) {
  if (!(v > 0.0)) return 0;
  if (v > 1.0) v = 1.0;
  // lrint under the default FE_TONEAREST mode rounds half to even.
  return static_cast<std::uint8_t>(std::lrint(v * 255.0));
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + c] = quantize_channel(img.at(y, x, c));
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) throw std::runtime_error("short write: " + path);
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw std::runtime_error("truncated ppm header");
  return tok;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  if (ppm_token(in) != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  const std::size_t w = std::stoul(ppm_token(in));
  const std::size_t h = std::stoul(ppm_token(in));
  const std::string maxval = ppm_token(in);
  if (maxval != "255")
    throw std::runtime_error("unsupported ppm maxval " + maxval + ": " + path);
  // Exactly one whitespace byte separates the header from the pixel data;
  // ppm_token already consumed it.
  Image img(w, h);
  std::vector<std::uint8_t> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw std::runtime_error("truncated ppm pixel data: " + path);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = bytes[i] / 255.0;
  return img;
}

void write_png(const Image& img, const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write image: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + c] = quantize_channel(img.at(y, x, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != w * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("unexpected png layout: " + path);
  }
  Image img(w, h);
  std::vector<std::uint8_t> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t i = 0; i < row.size(); ++i) img.px[y * w * 3 + i] = row[i] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

namespace {

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(),
                                                suffix) == 0;
}

}  // namespace

void write_image(const Image& img, const std::string& path) {
  if (has_suffix(path, ".ppm"))
    write_ppm(img, path);
  else if (has_suffix(path, ".png"))
    write_png(img, path);
  else
    throw std::runtime_error("unsupported image extension (want .ppm or .png): " + path);
}

Image read_image(const std::string& path) {
  if (has_suffix(path, ".ppm")) return read_ppm(path);
  if (has_suffix(path, ".png")) return read_png(path);
  throw std::runtime_error("unsupported image extension (want .ppm or .png): " + path);
}

}  // namespace edgs
