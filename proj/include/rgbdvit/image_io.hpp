#pragma once

// PNG encode/decode through libpng, plus conversions to the planar 8-bit
// image and metric depth-map types. 16-bit depth files hold millimeters with
// 0 marking holes.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <vector>

#include "rgbdvit/depthrep.hpp"
#include "rgbdvit/error.hpp"
#include "rgbdvit/util.hpp"

namespace rgbdvit::io {

// Interleaved samples, one uint16 per channel value regardless of bit depth.
struct PngRaster {
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

namespace detail {

struct MemReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void read_fn(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->size) png_error(png, "truncated PNG stream");
  std::memcpy(out, r->data + r->pos, n);
  r->pos += n;
}

inline void write_fn(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void flush_fn(png_structp) {}

inline void silent_warning(png_structp, png_const_charp) {}

}  // namespace detail

inline PngRaster decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw PayloadError("not a PNG image");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::silent_warning);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  detail::MemReader reader{bytes.data(), bytes.size(), 0};
  PngRaster out;
  std::vector<std::uint8_t> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PayloadError("corrupt PNG image");
  }
  png_set_read_fn(png, &reader, detail::read_fn);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = out.width * out.height * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) std::memcpy(&out.samples[i], buffer.data() + 2 * i, 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
  }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const PngRaster& r) {
  if (r.channels != 1 && r.channels != 3) throw InvalidArgument("encode_png supports 1 or 3 channels");
  if (r.bit_depth != 8 && r.bit_depth != 16) throw InvalidArgument("encode_png supports 8 or 16 bits");
  std::vector<std::uint8_t> out;
  const std::size_t bps = r.bit_depth / 8, rowbytes = r.width * r.channels * bps;
  std::vector<std::uint8_t> buffer(rowbytes * r.height);
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    if (bps == 2) std::memcpy(buffer.data() + 2 * i, &r.samples[i], 2);
    else buffer[i] = static_cast<std::uint8_t>(r.samples[i]);
  }
  std::vector<png_bytep> rows(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = buffer.data() + y * rowbytes;

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::silent_warning);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, detail::write_fn, detail::flush_fn);
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), r.bit_depth,
               r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (r.bit_depth == 16) png_set_swap(png);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

// 8-bit grayscale or RGB PNG -> planar image. 16-bit color is reduced to 8 bits.
inline depth::EncodedImage image_from_png(std::span<const std::uint8_t> bytes) {
  PngRaster r = decode_png(bytes);
  depth::EncodedImage img(r.width, r.height);
  const std::size_t plane = r.width * r.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      std::uint16_t s = r.samples[i * r.channels + (r.channels == 1 ? 0 : c)];
      img.values[c * plane + i] = static_cast<std::uint8_t>(r.bit_depth == 16 ? s >> 8 : s);
    }
  return img;
}

inline std::vector<std::uint8_t> png_from_image(const depth::EncodedImage& img) {
  PngRaster r{img.width, img.height, 3, 8, {}};
  const std::size_t plane = img.width * img.height;
  r.samples.resize(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) r.samples[3 * i + c] = img.values[c * plane + i];
  return encode_png(r);
}

inline bool is_depth16(const PngRaster& r) { return r.channels == 1 && r.bit_depth == 16; }

inline depth::DepthMap depth_from_raster(const PngRaster& r) {
  if (!is_depth16(r)) throw PayloadError("depth PNG must be single-channel 16-bit (millimeters)");
  depth::DepthMap d(r.width, r.height);
  for (std::size_t i = 0; i < d.size(); ++i)
    if (r.samples[i] != 0) {
      d.values[i] = static_cast<float>(r.samples[i]) / 1000.0f;
      d.valid[i] = 1;
    }
  return d;
}

inline depth::DepthMap depth_from_png(std::span<const std::uint8_t> bytes) { return depth_from_raster(decode_png(bytes)); }

inline std::vector<std::uint8_t> png_from_depth(const depth::DepthMap& d) {
  PngRaster r{d.width, d.height, 1, 16, std::vector<std::uint16_t>(d.size(), 0)};
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.valid[i]) r.samples[i] = static_cast<std::uint16_t>(std::clamp(std::floor(d.values[i] * 1000.0 + 0.5), 1.0, 65535.0));
  return encode_png(r);
}

}  // namespace rgbdvit::io
