#pragma once

// RGB rasters: decoding (PNG, JPEG, binary PPM), PNG encoding, and the
// resampling helpers shared by preprocessing and heatmap upsampling.

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "legrad/tensor.hpp"

namespace legrad {

class ImageError : public Error {
 public:
  using Error::Error;
};

/// Interleaved (HWC) raster with values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 3, float fill = 0.f)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Bilinear resampling with half-pixel centers and edge clamping (the
/// align_corners=false convention). `src` is HWC with `channels` planes
/// interleaved.
template <typename T>
std::vector<T> resize_bilinear(std::span<const T> src, std::size_t w, std::size_t h,
                               std::size_t channels, std::size_t out_w, std::size_t out_h) {
  std::vector<T> out(out_w * out_h * channels);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const T wy = static_cast<T>(fy - static_cast<double>(y0));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const T wx = static_cast<T>(fx - static_cast<double>(x0));
      for (std::size_t c = 0; c < channels; ++c) {
        const T a = src[(y0 * w + x0) * channels + c];
        const T b = src[(y0 * w + x1) * channels + c];
        const T d = src[(y1 * w + x0) * channels + c];
        const T e = src[(y1 * w + x1) * channels + c];
        const T top = a + (b - a) * wx;
        const T bot = d + (e - d) * wx;
        out[(oy * out_w + ox) * channels + c] = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

/// Nearest-neighbour resampling (source index = floor(dst * in / out)).
template <typename T>
std::vector<T> resize_nearest(std::span<const T> src, std::size_t w, std::size_t h,
                              std::size_t out_w, std::size_t out_h) {
  std::vector<T> out(out_w * out_h);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const std::size_t sy = std::min(h - 1, oy * h / out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const std::size_t sx = std::min(w - 1, ox * w / out_w);
      out[oy * out_w + ox] = src[sy * w + sx];
    }
  }
  return out;
}

/// Shorter side resized to `size`, then a centered size x size crop.
struct CropGeometry {
  std::size_t src_w = 0, src_h = 0;
  std::size_t resized_w = 0, resized_h = 0;
  std::size_t crop_x = 0, crop_y = 0;
  std::size_t size = 0;

  /// Maps a source pixel coordinate into the cropped frame; nullopt when the
  /// point falls outside the crop.
  std::optional<std::pair<std::size_t, std::size_t>> map_point(double x, double y) const {
    const double rx = std::floor((x + 0.5) * static_cast<double>(resized_w) / static_cast<double>(src_w));
    const double ry = std::floor((y + 0.5) * static_cast<double>(resized_h) / static_cast<double>(src_h));
    const double cx = rx - static_cast<double>(crop_x);
    const double cy = ry - static_cast<double>(crop_y);
    if (cx < 0 || cy < 0 || cx >= static_cast<double>(size) || cy >= static_cast<double>(size))
      return std::nullopt;
    return std::pair{static_cast<std::size_t>(cx), static_cast<std::size_t>(cy)};
  }
};

inline CropGeometry crop_geometry(std::size_t w, std::size_t h, std::size_t size) {
  if (w == 0 || h == 0) throw ImageError("image must have at least one pixel per side");
  CropGeometry g;
  g.src_w = w;
  g.src_h = h;
  g.size = size;
  if (w <= h) {
    g.resized_w = size;
    g.resized_h = std::max<std::size_t>(size, h * size / w);
  } else {
    g.resized_h = size;
    g.resized_w = std::max<std::size_t>(size, w * size / h);
  }
  g.crop_x = (g.resized_w - size) / 2;
  g.crop_y = (g.resized_h - size) / 2;
  return g;
}

/// Resize-then-center-crop of an RGB image. Skips resampling when the
/// shorter side already equals `size`.
inline Image resize_and_crop(const Image& img, const CropGeometry& g) {
  std::vector<float> resized;
  std::span<const float> src = img.pixels;
  if (g.resized_w != img.width || g.resized_h != img.height) {
    resized = resize_bilinear<float>(img.pixels, img.width, img.height, img.channels, g.resized_w,
                                     g.resized_h);
    src = resized;
  }
  Image out(g.size, g.size, img.channels);
  for (std::size_t y = 0; y < g.size; ++y)
    std::copy_n(src.data() + ((y + g.crop_y) * g.resized_w + g.crop_x) * img.channels,
                g.size * img.channels, out.pixels.data() + y * g.size * img.channels);
  return out;
}

/// Same geometry applied to a single-channel label mask, nearest-neighbour.
inline std::vector<std::uint8_t> resize_and_crop_mask(std::span<const std::uint8_t> mask,
                                                      const CropGeometry& g) {
  auto resized = resize_nearest<std::uint8_t>(mask, g.src_w, g.src_h, g.resized_w, g.resized_h);
  std::vector<std::uint8_t> out(g.size * g.size);
  for (std::size_t y = 0; y < g.size; ++y)
    std::copy_n(resized.data() + (y + g.crop_y) * g.resized_w + g.crop_x, g.size,
                out.data() + y * g.size);
  return out;
}

namespace detail {

inline Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw ImageError(std::string("png decode: ") + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageError(std::string("png decode: ") + png.message);
  }
  Image img(png.width, png.height, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]) / 255.f;
  return img;
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buf;
  std::size_t w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageError(std::string("jpeg decode: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = cinfo.output_width;
  h = cinfo.output_height;
  buf.resize(w * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Image img(w, h, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]) / 255.f;
  return img;
}

// Binary PPM (P6) / PGM (P5), maxval <= 255.
inline Image decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw ImageError("pnm decode: malformed header");
    return v;
  };
  const bool gray = bytes[1] == '5';
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  ++pos;
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw ImageError("pnm decode: bad header");
  const std::size_t ch = gray ? 1 : 3;
  if (bytes.size() < pos + w * h * ch) throw ImageError("pnm decode: truncated raster");
  Image img(w, h, 3);
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] =
          static_cast<float>(bytes[pos + i * ch + (gray ? 0 : c)]) / static_cast<float>(maxval);
  return img;
}

}  // namespace detail

/// Decodes PNG, JPEG or binary PNM by sniffing the leading bytes.
inline Image decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G')
    return detail::decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
    return detail::decode_jpeg(bytes);
  if (bytes.size() >= 3 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '5'))
    return detail::decode_pnm(bytes);
  throw ImageError("undecodable raster: unrecognized format");
}

/// Single-channel 8-bit mask from an image file; any nonzero gray is 1.
inline std::vector<std::uint8_t> decode_mask(std::span<const std::uint8_t> bytes, std::size_t& w,
                                             std::size_t& h) {
  const Image img = decode_image(bytes);
  w = img.width;
  h = img.height;
  std::vector<std::uint8_t> m(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const float v = img.pixels[i * 3] + img.pixels[i * 3 + 1] + img.pixels[i * 3 + 2];
    m[i] = v > 0.f ? 1 : 0;
  }
  return m;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Encodes 8-bit pixels (1 = gray, 3 = RGB) as PNG.
inline std::vector<std::uint8_t> encode_png(std::span<const std::uint8_t> pixels, std::size_t w,
                                            std::size_t h, std::size_t channels) {
  if (pixels.size() != w * h * channels) throw ImageError("png encode: buffer size mismatch");
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw ImageError(std::string("png encode: ") + png.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw ImageError(std::string("png encode: ") + png.message);
  out.resize(size);
  return out;
}

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  std::vector<std::uint8_t> px(img.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(img.pixels[i]);
  return encode_png(px, img.width, img.height, img.channels);
}

}  // namespace legrad
