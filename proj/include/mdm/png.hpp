// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/binio.hpp"
#include "mdm/core.hpp"

namespace mdm {

namespace png_detail {

inline std::uint8_t to_byte(float v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

[[noreturn]] inline void on_error(png_structp, png_const_charp msg) { throw std::runtime_error(std::string("png: ") + msg); }
inline void on_warning(png_structp, png_const_charp) {}

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

}  // namespace png_detail

/// 8-bit RGB PNG bytes. No timestamps or text chunks, so output is reproducible.
inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  if (img.empty()) throw std::invalid_argument("encode_png: empty image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::on_error, png_detail::on_warning);
  if (!png) throw std::runtime_error("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width()) * 3);
  try {
    if (!info) throw std::runtime_error("png: cannot create info struct");
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t n) {
          auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
          v->insert(v->end(), data, data + n);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        const Rgb& p = img(y, x);
        row[static_cast<std::size_t>(x) * 3 + 0] = png_detail::to_byte(p.r);
        row[static_cast<std::size_t>(x) * 3 + 1] = png_detail::to_byte(p.g);
        row[static_cast<std::size_t>(x) * 3 + 2] = png_detail::to_byte(p.b);
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes any 8/16-bit PNG to RGB in [0,1]; alpha is dropped and gray is expanded.
inline RgbImage decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw std::runtime_error("png: not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::on_error, png_detail::on_warning);
  if (!png) throw std::runtime_error("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  png_detail::ReadCursor cur{&bytes, 0};
  RgbImage img;
  try {
    if (!info) throw std::runtime_error("png: cannot create info struct");
    png_set_read_fn(png, &cur, [](png_structp p, png_bytep data, png_size_t n) {
      auto* c = static_cast<png_detail::ReadCursor*>(png_get_io_ptr(p));
      if (c->pos + n > c->bytes->size()) png_error(p, "truncated data");
      std::memcpy(data, c->bytes->data() + c->pos, n);
      c->pos += n;
    });
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_channels(png, info) != 3) throw std::runtime_error("png: unsupported channel layout");
    img = RgbImage(h, w);
    std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
    for (int y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (int x = 0; x < w; ++x)
        img(y, x) = {row[static_cast<std::size_t>(x) * 3] / 255.f, row[static_cast<std::size_t>(x) * 3 + 1] / 255.f,
                     row[static_cast<std::size_t>(x) * 3 + 2] / 255.f};
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  bin::write_file_atomic(path, encode_png(img));
}

inline RgbImage read_png(const std::filesystem::path& path) { return decode_png(bin::read_file(path)); }

}  // namespace mdm
