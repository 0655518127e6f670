#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "legrad/image.hpp"

namespace legrad {

/// Spread below which min-max normalization yields an all-zero map.
inline constexpr double kDegenerateSpread = 1e-12;

/// Relevance map over the preprocessed image, values in [0, 1], row-major.
struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;
  std::size_t grid = 0;
  std::vector<double> patch_grid;  // grid x grid, min-max normalized, before upsampling
  std::vector<std::size_t> layers;
  std::string method;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }

  friend bool operator==(const Heatmap&, const Heatmap&) = default;
};

inline void normalize_minmax(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, spread = *hi - *lo;
  if (!(spread >= kDegenerateSpread)) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  for (double& x : v) x = (x - mn) / spread;
}

inline std::size_t exact_sqrt(std::size_t n) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (r * r != n) throw ShapeError("patch count " + std::to_string(n) + " is not a perfect square");
  return r;
}

/// Reshapes per-patch relevance (row-major) to a grid, upsamples bilinearly
/// to size x size, then min-max normalizes.
inline Heatmap make_heatmap(const std::vector<double>& patch_values, std::size_t size, std::string method,
                            std::vector<std::size_t> layers) {
  if (patch_values.empty()) throw ShapeError("heatmap needs at least one patch");
  for (double v : patch_values)
    if (!std::isfinite(v)) throw NumericError("non-finite patch relevance");
  Heatmap h;
  h.grid = exact_sqrt(patch_values.size());
  h.width = h.height = size;
  h.values = resize_bilinear<double>(patch_values, h.grid, h.grid, 1, size, size);
  normalize_minmax(h.values);
  h.patch_grid = patch_values;
  normalize_minmax(h.patch_grid);
  h.method = std::move(method);
  h.layers = std::move(layers);
  return h;
}

/// Zeroes every pixel where the reference map strictly exceeds `threshold`.
/// The result is not re-normalized.
inline Heatmap background_suppress(const Heatmap& target, const Heatmap& empty, double threshold = 0.8) {
  if (target.width != empty.width || target.height != empty.height)
    throw ShapeError("background_suppress: heatmap sizes differ");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("background_suppress: threshold must be in (0, 1]");
  Heatmap out = target;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (empty.values[i] > threshold) out.values[i] = 0.0;
  return out;
}

inline std::vector<std::uint8_t> heatmap_png(const Heatmap& h) {
  std::vector<std::uint8_t> px(h.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(h.values[i]);
  return encode_png(px, h.width, h.height, 1);
}

/// Jet-style colormap, v in [0, 1].
inline std::array<double, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ramp = [](double x) { return std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0); };
  return {ramp(v - 0.75), ramp(v - 0.5), ramp(v - 0.25)};
}

/// Alpha-blends the colored heatmap over an RGB image of the same size.
inline Image overlay(const Image& base, const Heatmap& h, double alpha = 0.5) {
  if (base.width != h.width || base.height != h.height || base.channels != 3)
    throw ShapeError("overlay: image and heatmap sizes differ");
  Image out = base;
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x) {
      const auto c = jet(h.at(x, y));
      for (std::size_t k = 0; k < 3; ++k)
        out.at(x, y, k) = static_cast<float>((1.0 - alpha) * base.at(x, y, k) + alpha * c[k]);
    }
  return out;
}

inline nlohmann::json heatmap_json(const Heatmap& h) {
  return {{"method", h.method},
          {"layer_range", h.layers},
          {"W", h.width},
          {"H", h.height},
          {"grid", h.grid},
          {"patch_grid", h.patch_grid},
          {"values", h.values}};
}

}  // namespace legrad
