#pragma once

// Stochastic view transforms: crop, flip, color jitter, grayscale, Gaussian
// blur and solarization, plus the named transform-set presets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "histoperm/errors.hpp"
#include "histoperm/image.hpp"
#include "histoperm/random.hpp"

namespace histoperm {

struct CropConfig {
  double p = 1.0;
  double scale_lo = 0.08;
  double scale_hi = 1.0;
  double ratio_lo = 3.0 / 4.0;
  double ratio_hi = 4.0 / 3.0;
  std::size_t out_size = 32;
};

struct FlipConfig {
  double p_h = 0.5;
  double p_v = 0.5;
};

struct JitterConfig {
  double p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double hue = 0.1;
  double saturation = 0.2;
};

struct GrayscaleConfig {
  double p = 0.2;
};

struct BlurConfig {
  double p = 1.0;
  std::size_t kernel = 23;
  double sigma_lo = 0.1;
  double sigma_hi = 2.0;
};

struct SolarizeConfig {
  double p = 0.0;
  double threshold = 128.0 / 255.0;
};

struct TransformConfig {
  CropConfig crop;
  FlipConfig flip;
  JitterConfig jitter;
  GrayscaleConfig grayscale;
  BlurConfig blur;
  SolarizeConfig solarize;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " probability must be in [0, 1]");
    };
    prob(crop.p, "crop");
    prob(flip.p_h, "horizontal flip");
    prob(flip.p_v, "vertical flip");
    prob(jitter.p, "color jitter");
    prob(grayscale.p, "grayscale");
    prob(blur.p, "blur");
    prob(solarize.p, "solarize");
    if (!(crop.scale_lo > 0.0 && crop.scale_lo <= crop.scale_hi && crop.scale_hi <= 1.0)) {
      throw ConfigError("crop scale range must lie in (0, 1] with lo <= hi");
    }
    if (!(crop.ratio_lo > 0.0 && crop.ratio_lo <= crop.ratio_hi)) {
      throw ConfigError("crop ratio range must be positive with lo <= hi");
    }
    if (crop.out_size < 1) throw ConfigError("crop out_size must be at least 1");
    if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0 || jitter.hue < 0 || jitter.hue > 0.5) {
      throw ConfigError("color jitter factors must be >= 0 and hue <= 0.5");
    }
    if (blur.kernel < 1 || blur.kernel % 2 == 0) throw ConfigError("blur kernel must be odd and >= 1");
    if (!(blur.sigma_lo > 0.0 && blur.sigma_lo <= blur.sigma_hi)) throw ConfigError("blur sigma range must be positive");
    if (!(solarize.threshold >= 0.0 && solarize.threshold <= 1.0)) {
      throw ConfigError("solarize threshold must be in [0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Deterministic primitives

/// Axis-aligned region in pixel coordinates.
struct CropBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Bilinear resample of `box` to out_h x out_w with half-pixel sample centers.
inline Image resize_bilinear(const Image& img, const CropBox& box, std::size_t out_h, std::size_t out_w) {
  Image out(out_h, out_w);
  const double sy = static_cast<double>(box.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(box.width) / static_cast<double>(out_w);
  const double y_max = static_cast<double>(box.height - 1);
  const double x_max = static_cast<double>(box.width - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, y_max);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, box.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, x_max);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, box.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        const double v00 = img.at(box.top + y0, box.left + x0, c);
        const double v01 = img.at(box.top + y0, box.left + x1, c);
        const double v10 = img.at(box.top + y1, box.left + x0, c);
        const double v11 = img.at(box.top + y1, box.left + x1, c);
        const double top = v00 * (1.0 - wx) + v01 * wx;
        const double bottom = v10 * (1.0 - wx) + v11 * wx;
        out.at(y, x, c) = static_cast<float>(top * (1.0 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  return resize_bilinear(img, CropBox{0, 0, img.height, img.width}, out_h, out_w);
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < Image::kChannels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

inline Image flip_vertical(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < Image::kChannels; ++c) out.at(img.height - 1 - y, x, c) = img.at(y, x, c);
  return out;
}

/// Quarter-turn counter-clockwise rotation, `turns` times. Non-square images
/// swap height and width on odd turns.
inline Image rotate90(const Image& img, int turns) {
  turns = ((turns % 4) + 4) % 4;
  Image cur = img;
  for (int t = 0; t < turns; ++t) {
    Image next(cur.width, cur.height);
    for (std::size_t y = 0; y < cur.height; ++y)
      for (std::size_t x = 0; x < cur.width; ++x)
        for (std::size_t c = 0; c < Image::kChannels; ++c) next.at(cur.width - 1 - x, y, c) = cur.at(y, x, c);
    cur = std::move(next);
  }
  return cur;
}

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

inline float luma(const Image& img, std::size_t y, std::size_t x) {
  return static_cast<float>(kLumaWeights[0] * img.at(y, x, 0) + kLumaWeights[1] * img.at(y, x, 1) +
                            kLumaWeights[2] * img.at(y, x, 2));
}

inline Image to_grayscale(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const float g = luma(img, y, x);
      for (std::size_t c = 0; c < Image::kChannels; ++c) out.at(y, x, c) = g;
    }
  out.clamp();
  return out;
}

inline Image solarize(const Image& img, double threshold) {
  Image out = img;
  for (auto& v : out.pixels) {
    if (v > threshold) v = 1.0f - v;
  }
  return out;
}

inline Image adjust_brightness(const Image& img, double factor) {
  Image out = img;
  for (auto& v : out.pixels) v = static_cast<float>(v * factor);
  out.clamp();
  return out;
}

/// Blend toward the mean grayscale intensity of the image.
inline Image adjust_contrast(const Image& img, double factor) {
  double mean = 0.0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) mean += luma(img, y, x);
  mean /= static_cast<double>(img.height * img.width);
  Image out = img;
  for (auto& v : out.pixels) v = static_cast<float>(factor * v + (1.0 - factor) * mean);
  out.clamp();
  return out;
}

/// Blend toward each pixel's own grayscale value.
inline Image adjust_saturation(const Image& img, double factor) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double g = luma(img, y, x);
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        out.at(y, x, c) = static_cast<float>(factor * img.at(y, x, c) + (1.0 - factor) * g);
      }
    }
  out.clamp();
  return out;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / delta;
    if (h < 0.0) h += 6.0;
  } else if (mx == g) {
    h = (b - r) / delta + 2.0;
  } else {
    h = (r - g) / delta + 4.0;
  }
  h /= 6.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

/// Rotates hue by `shift` turns (a full turn is 1.0) through HSV.
inline Image adjust_hue(const Image& img, double shift) {
  Image out = img;
  if (shift == 0.0) return out;
  for (std::size_t i = 0; i < img.pixels.size(); i += Image::kChannels) {
    double h, s, v, r, g, b;
    detail::rgb_to_hsv(img.pixels[i], img.pixels[i + 1], img.pixels[i + 2], h, s, v);
    detail::hsv_to_rgb(h + shift, s, v, r, g, b);
    out.pixels[i] = static_cast<float>(r);
    out.pixels[i + 1] = static_cast<float>(g);
    out.pixels[i + 2] = static_cast<float>(b);
  }
  out.clamp();
  return out;
}

/// Largest admissible kernel: the requested size, shrunk to the largest odd
/// value not exceeding min(H, W).
inline std::size_t effective_kernel_size(std::size_t requested, std::size_t height, std::size_t width) {
  std::size_t limit = std::min(height, width);
  if (limit % 2 == 0) --limit;
  return std::max<std::size_t>(1, std::min(requested, limit));
}

/// Normalized 1-D Gaussian weights.
inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double center = static_cast<double>(size / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - center;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (auto& w : k) w /= total;
  return k;
}

namespace detail {

/// Source index for every tap position -radius .. n-1+radius under reflect
/// padding (edge pixel not repeated).
inline std::vector<std::size_t> reflect_indices(std::size_t n, std::size_t radius) {
  std::vector<std::size_t> idx(n + 2 * radius);
  const auto sn = static_cast<std::ptrdiff_t>(n);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::ptrdiff_t i = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(radius);
    if (sn == 1) {
      i = 0;
    } else {
      while (i < 0 || i >= sn) i = i < 0 ? -i : 2 * (sn - 1) - i;
    }
    idx[k] = static_cast<std::size_t>(i);
  }
  return idx;
}

/// dst[j] = sum_t weights[t] * src[j + t * stride] for j < n, taps summed in
/// ascending order.
inline void convolve_line(const double* src, double* dst, std::size_t n, const std::vector<double>& weights,
                          std::size_t stride) {
  std::fill(dst, dst + n, 0.0);
  for (std::size_t t = 0; t < weights.size(); ++t) {
    const double wt = weights[t];
    const double* s = src + t * stride;
    for (std::size_t j = 0; j < n; ++j) dst[j] += wt * s[j];
  }
}

}  // namespace detail

/// Separable Gaussian convolution with reflect padding (edge pixel not
/// repeated), accumulated in double.
inline Image gaussian_blur(const Image& img, double sigma, std::size_t kernel) {
  if (!(sigma > 0.0)) throw ContractError("gaussian_blur: sigma must be positive");
  if (kernel % 2 == 0) throw ContractError("gaussian_blur: kernel size must be odd");
  const std::size_t size = effective_kernel_size(kernel, img.height, img.width);
  const auto weights = gaussian_kernel(size, sigma);
  const std::size_t radius = size / 2, h = img.height, w = img.width, ch = Image::kChannels;
  const auto xs = detail::reflect_indices(w, radius);
  const auto ys = detail::reflect_indices(h, radius);

  std::vector<double> line((std::max(w, h) + 2 * radius) * ch);
  std::vector<double> tmp(img.pixels.size()), col(h * ch);
  for (std::size_t y = 0; y < h; ++y) {
    const float* row = img.pixels.data() + y * w * ch;
    for (std::size_t k = 0; k < xs.size(); ++k)
      for (std::size_t c = 0; c < ch; ++c) line[k * ch + c] = row[xs[k] * ch + c];
    double* dst = tmp.data() + y * w * ch;
    detail::convolve_line(line.data(), dst, w * ch, weights, ch);
  }
  Image out(h, w);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t k = 0; k < ys.size(); ++k)
      for (std::size_t c = 0; c < ch; ++c) line[k * ch + c] = tmp[(ys[k] * w + x) * ch + c];
    detail::convolve_line(line.data(), col.data(), h * ch, weights, ch);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t c = 0; c < ch; ++c) out.at(y, x, c) = static_cast<float>(col[y * ch + c]);
  }
  out.clamp();
  return out;
}

// ---------------------------------------------------------------------------
// Random transforms

/// Samples a crop box: area fraction in [scale_lo, scale_hi], aspect ratio
/// log-uniform in the ratio range, up to 10 tries, then a center crop.
inline CropBox sample_crop_box(std::size_t height, std::size_t width, const CropConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(cfg.ratio_lo);
  const double log_hi = std::log(cfg.ratio_hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (w >= 1 && h >= 1 && w <= width && h <= height) {
      const auto top = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(height - h)));
      const auto left = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(width - w)));
      return {top, left, h, w};
    }
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (in_ratio < cfg.ratio_lo) {
    h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(w) / cfg.ratio_lo)), 1, height);
  } else if (in_ratio > cfg.ratio_hi) {
    w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(h) * cfg.ratio_hi)), 1, width);
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

inline Image random_resized_crop(const Image& img, const CropConfig& cfg, Rng& rng) {
  return resize_bilinear(img, sample_crop_box(img.height, img.width, cfg, rng), cfg.out_size, cfg.out_size);
}

inline Image random_flip(const Image& img, double p_h, double p_v, Rng& rng) {
  Image out = img;
  if (rng.bernoulli(p_h)) out = flip_horizontal(out);
  if (rng.bernoulli(p_v)) out = flip_vertical(out);
  return out;
}

/// Brightness, contrast, saturation and hue adjustments in a random order,
/// each with a factor drawn from its configured range.
inline Image color_jitter(const Image& img, const JitterConfig& cfg, Rng& rng) {
  const double brightness = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
  const double contrast = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
  const double saturation = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
  const double hue = rng.uniform(-cfg.hue, cfg.hue);
  std::vector<int> order{0, 1, 2, 3};
  rng.shuffle(order);
  Image out = img;
  for (int op : order) {
    switch (op) {
      case 0: out = adjust_brightness(out, brightness); break;
      case 1: out = adjust_contrast(out, contrast); break;
      case 2: out = adjust_saturation(out, saturation); break;
      default: out = adjust_hue(out, hue); break;
    }
  }
  return out;
}

inline Image random_gaussian_blur(const Image& img, const BlurConfig& cfg, Rng& rng) {
  return gaussian_blur(img, rng.uniform(cfg.sigma_lo, cfg.sigma_hi), cfg.kernel);
}

/// One view: crop -> flip -> jitter -> grayscale -> blur -> solarize, each
/// firing with its probability. Output is always out_size x out_size; when
/// cropping does not fire the whole image is resized.
inline Image apply_view_transform(const Image& img, const TransformConfig& cfg, Rng& rng) {
  Image out = rng.bernoulli(cfg.crop.p) ? random_resized_crop(img, cfg.crop, rng)
                                        : resize_bilinear(img, cfg.crop.out_size, cfg.crop.out_size);
  out = random_flip(out, cfg.flip.p_h, cfg.flip.p_v, rng);
  if (rng.bernoulli(cfg.jitter.p)) out = color_jitter(out, cfg.jitter, rng);
  if (rng.bernoulli(cfg.grayscale.p)) out = to_grayscale(out);
  if (rng.bernoulli(cfg.blur.p)) out = random_gaussian_blur(out, cfg.blur, rng);
  if (rng.bernoulli(cfg.solarize.p)) out = solarize(out, cfg.solarize.threshold);
  return out;
}

// ---------------------------------------------------------------------------
// Presets

inline constexpr std::array<std::string_view, 6> kPresetNames{"Base",         "RemoveGrayscale", "RemoveColor",
                                                              "CropBlurFlip", "CropFlip",        "BlurFlip"};

/// Full table parameterization; only blur and solarize probabilities differ
/// between the first and second view.
inline std::pair<TransformConfig, TransformConfig> base_transforms() {
  TransformConfig t1, t2;
  t1.blur.p = 1.0;
  t1.solarize.p = 0.0;
  t2.blur.p = 0.1;
  t2.solarize.p = 0.2;
  return {t1, t2};
}

inline std::pair<TransformConfig, TransformConfig> make_preset(std::string_view name, std::size_t out_size = 32) {
  auto [t1, t2] = base_transforms();
  auto disable = [&](auto member) {
    (t1.*member).p = 0.0;
    (t2.*member).p = 0.0;
  };
  if (name == "Base") {
    // every transform as tabulated
  } else if (name == "RemoveGrayscale") {
    disable(&TransformConfig::grayscale);
  } else if (name == "RemoveColor") {
    disable(&TransformConfig::grayscale);
    disable(&TransformConfig::jitter);
    disable(&TransformConfig::solarize);
  } else if (name == "CropBlurFlip") {
    disable(&TransformConfig::grayscale);
    disable(&TransformConfig::jitter);
    disable(&TransformConfig::solarize);
  } else if (name == "CropFlip") {
    disable(&TransformConfig::grayscale);
    disable(&TransformConfig::jitter);
    disable(&TransformConfig::solarize);
    disable(&TransformConfig::blur);
  } else if (name == "BlurFlip") {
    disable(&TransformConfig::grayscale);
    disable(&TransformConfig::jitter);
    disable(&TransformConfig::solarize);
    disable(&TransformConfig::crop);
  } else {
    std::string valid;
    for (auto n : kPresetNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
    throw ConfigError("unknown transform preset '" + std::string(name) + "'; valid presets: " + valid);
  }
  t1.crop.out_size = out_size;
  t2.crop.out_size = out_size;
  return {t1, t2};
}

}  // namespace histoperm
