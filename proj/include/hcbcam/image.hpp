#pragma once

// RGB raster container plus the small amount of codec glue the pipeline needs:
// 8-bit PNG read/write (libpng), baseline JPEG read (libjpeg) and header-only
// dimension probing for both.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "hcbcam/common.hpp"

namespace hcbcam {

/// Interleaved H x W x 3 raster. `unit()` maps stored samples onto [0, 1]:
/// floating-point samples are taken as-is, 8-bit samples are divided by 255.
template <class T>
class basic_image {
public:
  using value_type = T;
  static constexpr int channels = 3;

  basic_image() = default;
  basic_image(int height, int width, T fill = T{})
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * channels, fill) {
    if (height < 0 || width < 0) throw std::invalid_argument("basic_image: negative extent");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return data_.empty(); }

  T& at(int row, int col, int ch) { return data_[index(row, col, ch)]; }
  const T& at(int row, int col, int ch) const { return data_[index(row, col, ch)]; }

  double unit(int row, int col, int ch) const {
    if constexpr (std::is_floating_point_v<T>) {
      return static_cast<double>(at(row, col, ch));
    } else {
      return static_cast<double>(at(row, col, ch)) / 255.0;
    }
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

private:
  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(col)) *
               channels +
           static_cast<std::size_t>(ch);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using Image = basic_image<float>;
using Image8 = basic_image<std::uint8_t>;

/// Quantize unit-scale samples to 8 bits (round to nearest, clamped).
inline Image8 to_image8(const Image& img) {
  Image8 out(img.height(), img.width());
  const auto& src = img.data();
  auto& dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = std::clamp(static_cast<double>(src[i]), 0.0, 1.0);
    dst[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline Image to_unit_image(const Image8& img) {
  Image out(img.height(), img.width());
  for (std::size_t i = 0; i < img.data().size(); ++i) out.data()[i] = static_cast<float>(img.data()[i] / 255.0);
  return out;
}

struct ImageSize {
  int width = 0;
  int height = 0;
};

namespace detail {

inline std::vector<unsigned char> read_prefix(const std::filesystem::path& path, std::size_t max_bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path.string());
  std::vector<unsigned char> buf(max_bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(max_bytes));
  buf.resize(static_cast<std::size_t>(in.gcount()));
  return buf;
}

inline bool is_png_signature(const std::vector<unsigned char>& b) {
  static constexpr unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

inline bool is_jpeg_signature(const std::vector<unsigned char>& b) {
  return b.size() >= 3 && b[0] == 0xff && b[1] == 0xd8 && b[2] == 0xff;
}

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// Walks JPEG markers up to the first start-of-frame segment.
inline std::optional<ImageSize> jpeg_dimensions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  auto get = [&]() -> int { return in.get(); };
  if (get() != 0xff || get() != 0xd8) return std::nullopt;
  while (in) {
    int c = get();
    if (c != 0xff) return std::nullopt;
    int marker = get();
    while (marker == 0xff) marker = get();
    if (marker < 0) return std::nullopt;
    if (marker == 0xd8 || marker == 0x01 || (marker >= 0xd0 && marker <= 0xd7)) continue;
    if (marker == 0xd9 || marker == 0xda) return std::nullopt;
    const int hi = get(), lo = get();
    if (hi < 0 || lo < 0) return std::nullopt;
    const int len = (hi << 8) | lo;
    if (len < 2) return std::nullopt;
    const bool sof = marker >= 0xc0 && marker <= 0xcf && marker != 0xc4 && marker != 0xc8 && marker != 0xcc;
    if (sof) {
      unsigned char seg[5];
      in.read(reinterpret_cast<char*>(seg), 5);
      if (in.gcount() != 5) return std::nullopt;
      ImageSize s;
      s.height = (seg[1] << 8) | seg[2];
      s.width = (seg[3] << 8) | seg[4];
      if (s.width == 0 || s.height == 0) return std::nullopt;
      return s;
    }
    in.seekg(len - 2, std::ios::cur);
  }
  return std::nullopt;
}

}  // namespace detail

/// Reads width/height from the file header without decoding pixels.
/// Throws DataError for unreadable files and unsupported or corrupt headers.
inline ImageSize probe_image(const std::filesystem::path& path) {
  const auto head = detail::read_prefix(path, 32);
  if (detail::is_png_signature(head)) {
    if (head.size() < 24 || !std::equal(head.begin() + 12, head.begin() + 16, "IHDR"))
      throw DataError("corrupt PNG header: " + path.string());
    ImageSize s{static_cast<int>(detail::be32(&head[16])), static_cast<int>(detail::be32(&head[20]))};
    if (s.width <= 0 || s.height <= 0) throw DataError("corrupt PNG header: " + path.string());
    return s;
  }
  if (detail::is_jpeg_signature(head)) {
    if (auto s = detail::jpeg_dimensions(path)) return *s;
    throw DataError("corrupt JPEG header: " + path.string());
  }
  throw DataError("unrecognized image format: " + path.string());
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

inline Image8 read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng init failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img = Image8(static_cast<int>(height), static_cast<int>(width));
  rows.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = img.data().data() + static_cast<std::size_t>(r) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

inline Image8 read_jpeg(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = [](j_common_ptr c) { std::longjmp(reinterpret_cast<JpegErrorMgr*>(c->err)->jump, 1); };
  err.base.output_message = [](j_common_ptr) {};
  Image8 img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("corrupt JPEG: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img = Image8(static_cast<int>(cinfo.output_height), static_cast<int>(cinfo.output_width));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.data().data() + static_cast<std::size_t>(cinfo.output_scanline) * cinfo.output_width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

}  // namespace detail

/// Decodes a PNG or JPEG file into 8-bit RGB.
inline Image8 read_image(const std::filesystem::path& path) {
  const auto head = detail::read_prefix(path, 8);
  if (detail::is_png_signature(head)) return detail::read_png(path);
  if (detail::is_jpeg_signature(head)) return detail::read_jpeg(path);
  throw DataError("unrecognized image format: " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  auto file = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng init failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG write failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < img.height(); ++r)
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(img.data().data() + static_cast<std::size_t>(r) * img.width() * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace hcbcam
