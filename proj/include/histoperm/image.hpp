#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "histoperm/errors.hpp"

namespace histoperm {

/// H x W x 3 intensities in [0, 1], stored row-major with interleaved channels.
struct Image {
  static constexpr std::size_t kChannels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w * kChannels, fill) {}
  Image(std::size_t h, std::size_t w, std::vector<float> values) : height(h), width(w), pixels(std::move(values)) {
    if (pixels.size() != h * w * kChannels) throw DimensionError("Image: pixel count does not match dimensions");
  }

  std::size_t size() const { return pixels.size(); }
  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * kChannels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * kChannels + c]; }

  void clamp() {
    for (auto& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool operator==(const Image&) const = default;
};

/// Copies images into one [N x H*W*3] row-major block, the encoder input layout.
inline std::vector<float> flatten_images(std::span<const Image> images) {
  std::vector<float> out;
  if (images.empty()) return out;
  out.reserve(images.size() * images.front().size());
  for (const auto& img : images) {
    if (img.size() != images.front().size()) throw DimensionError("flatten_images: images differ in size");
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  }
  return out;
}

/// Fixed affine map from [0, 1] intensities to the encoder's input scale.
inline constexpr float kInputCenter = 0.5f;
inline constexpr float kInputScale = 4.0f;

/// flatten_images() followed by (v - kInputCenter) * kInputScale.
inline std::vector<float> encoder_input(std::span<const Image> images) {
  std::vector<float> out = flatten_images(images);
  for (auto& v : out) v = (v - kInputCenter) * kInputScale;
  return out;
}

}  // namespace histoperm
