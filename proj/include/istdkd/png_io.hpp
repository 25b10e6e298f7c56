#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/mask.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::pngio {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) {
  throw IoError(std::string("libpng: ") + (msg ? msg : "unknown error"));
}

inline void png_warn(png_structp, png_const_charp) {}

// color_type: PNG_COLOR_TYPE_GRAY or PNG_COLOR_TYPE_RGB. rows hold
// big-endian samples for 16-bit depth.
inline void write_raw(const std::string& path, int h, int w, int bit_depth, int color_type,
                      const std::vector<std::vector<std::uint8_t>>& rows) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < h; ++r)
      png_write_row(png, const_cast<png_bytep>(rows[static_cast<std::size_t>(r)].data()));
    png_write_end(png, info);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

struct RawImage {
  int h = 0;
  int w = 0;
  int bit_depth = 0;
  int channels = 0;
  std::vector<std::vector<std::uint8_t>> rows;
};

inline RawImage read_raw(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  RawImage img;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    img.w = static_cast<int>(png_get_image_width(png, info));
    img.h = static_cast<int>(png_get_image_height(png, info));
    img.bit_depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) {
      png_set_palette_to_rgb(png);
      color = PNG_COLOR_TYPE_RGB;
    }
    if (img.bit_depth < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
      img.bit_depth = 8;
    }
    png_read_update_info(png, info);
    img.channels = png_get_channels(png, info);
    std::size_t rowbytes = png_get_rowbytes(png, info);
    img.rows.assign(static_cast<std::size_t>(img.h), std::vector<std::uint8_t>(rowbytes));
    for (int r = 0; r < img.h; ++r) png_read_row(png, img.rows[static_cast<std::size_t>(r)].data(), nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace detail

// Image values in [0,1] quantised to 16-bit grayscale.
inline void write_gray16(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError("write_gray16: rank-2 tensor required");
  int h = img.dim(0), w = img.dim(1);
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(h),
                                              std::vector<std::uint8_t>(static_cast<std::size_t>(w) * 2));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double v = img.at(r, c);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c) * 2] = static_cast<std::uint8_t>(q >> 8);
      rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c) * 2 + 1] = static_cast<std::uint8_t>(q & 0xff);
    }
  detail::write_raw(path, h, w, 16, PNG_COLOR_TYPE_GRAY, rows);
}

inline Tensor read_gray16(const std::string& path) {
  detail::RawImage img = detail::read_raw(path);
  if (img.channels != 1) throw DataError(path + ": expected grayscale PNG");
  Tensor out({img.h, img.w});
  for (int r = 0; r < img.h; ++r) {
    const std::uint8_t* row = img.rows[static_cast<std::size_t>(r)].data();
    for (int c = 0; c < img.w; ++c) {
      if (img.bit_depth == 16) {
        std::uint16_t q = static_cast<std::uint16_t>((row[c * 2] << 8) | row[c * 2 + 1]);
        out.at(r, c) = q / 65535.0;
      } else {
        out.at(r, c) = row[c] / 255.0;
      }
    }
  }
  return out;
}

// Binary mask as 8-bit grayscale, 0 / 255.
inline void write_mask(const std::string& path, const BinaryMask& m) {
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(m.h),
                                              std::vector<std::uint8_t>(static_cast<std::size_t>(m.w)));
  for (int r = 0; r < m.h; ++r)
    for (int c = 0; c < m.w; ++c) rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = m.at(r, c) ? 255 : 0;
  detail::write_raw(path, m.h, m.w, 8, PNG_COLOR_TYPE_GRAY, rows);
}

inline BinaryMask read_mask(const std::string& path) {
  detail::RawImage img = detail::read_raw(path);
  if (img.channels != 1) throw DataError(path + ": expected grayscale mask PNG");
  BinaryMask m(img.h, img.w);
  for (int r = 0; r < img.h; ++r) {
    const std::uint8_t* row = img.rows[static_cast<std::size_t>(r)].data();
    for (int c = 0; c < img.w; ++c) {
      std::uint32_t v = img.bit_depth == 16 ? ((row[c * 2] << 8) | row[c * 2 + 1]) : row[c];
      m.at(r, c) = v ? 1 : 0;
    }
  }
  return m;
}

// 8-bit grayscale from raw bytes (analysis panels).
inline void write_gray8(const std::string& path, const std::vector<std::uint8_t>& pix, int h, int w) {
  if (pix.size() != static_cast<std::size_t>(h) * w) throw ShapeError("write_gray8: size mismatch");
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r)
    rows[static_cast<std::size_t>(r)].assign(pix.begin() + static_cast<std::ptrdiff_t>(r) * w,
                                             pix.begin() + static_cast<std::ptrdiff_t>(r + 1) * w);
  detail::write_raw(path, h, w, 8, PNG_COLOR_TYPE_GRAY, rows);
}

// 8-bit RGB from interleaved bytes (plots).
inline void write_rgb8(const std::string& path, const std::vector<std::uint8_t>& pix, int h, int w) {
  if (pix.size() != static_cast<std::size_t>(h) * w * 3) throw ShapeError("write_rgb8: size mismatch");
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r)
    rows[static_cast<std::size_t>(r)].assign(pix.begin() + static_cast<std::ptrdiff_t>(r) * w * 3,
                                             pix.begin() + static_cast<std::ptrdiff_t>(r + 1) * w * 3);
  detail::write_raw(path, h, w, 8, PNG_COLOR_TYPE_RGB, rows);
}

}  // namespace istdkd::pngio
