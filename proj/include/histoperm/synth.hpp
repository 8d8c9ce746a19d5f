#pragma once

// Synthetic weakly-labeled slides. A slide is a bag of patches that all carry
// the slide's label, but only a fraction rho of them show the class pattern
// (an oriented grating at a class-specific spatial frequency). The rest show a
// background texture drawn from one distribution shared by every class.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "histoperm/errors.hpp"
#include "histoperm/image.hpp"
#include "histoperm/random.hpp"

namespace histoperm {

struct GenConfig {
  std::size_t n_classes = 3;
  std::size_t train_slides = 20;  // per class
  std::size_t dev_slides = 6;
  std::size_t test_slides = 6;
  std::size_t patches_per_slide = 64;
  double rho = 0.25;  // class-positive fraction per slide
  std::size_t image_size = 32;
  double noise = 0.05;
  double background_mean = 0.55;
  double background_amplitude = 0.02;
  double signal_amplitude = 0.3;
  double base_frequency = 2.0;     // cycles per patch for class 0
  double frequency_spacing = 3.0;  // added per class index
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 1) throw ConfigError("generator: n_classes must be at least 1");
    if (patches_per_slide < 1) throw ConfigError("generator: patches_per_slide must be at least 1");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("generator: rho must be in (0, 1], got " + std::to_string(rho));
    if (image_size < 8) throw ConfigError("generator: image_size must be at least 8");
    if (noise < 0.0) throw ConfigError("generator: noise must be nonnegative");
    if (train_slides + dev_slides + test_slides == 0) throw ConfigError("generator: no slides requested");
  }

  double class_frequency(std::size_t class_id) const {
    return base_frequency + frequency_spacing * static_cast<double>(class_id);
  }
};

struct SlideRecord {
  std::string slide_id;
  int label = 0;
  std::vector<Image> patches;
  std::vector<std::uint8_t> positive_mask;  // generator ground truth; never used for training

  bool operator==(const SlideRecord&) const = default;
};

enum class Split { train, dev, test };

inline constexpr std::array<Split, 3> kSplits{Split::train, Split::dev, Split::test};

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

struct Dataset {
  GenConfig gen;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::vector<std::string> class_names;
  std::vector<SlideRecord> train, dev, test;

  std::vector<SlideRecord>& split(Split s) { return s == Split::train ? train : s == Split::dev ? dev : test; }
  const std::vector<SlideRecord>& split(Split s) const {
    return s == Split::train ? train : s == Split::dev ? dev : test;
  }
  std::size_t n_classes() const { return class_names.size(); }

  bool operator==(const Dataset& other) const {
    return image_height == other.image_height && image_width == other.image_width &&
           class_names == other.class_names && train == other.train && dev == other.dev && test == other.test;
  }
};

/// One patch. Background: a sum of three low-frequency oriented waves around
/// background_mean with a zero-mean color tint. Positives add a grating at
/// the class frequency with random orientation and phase. Gaussian pixel
/// noise is added last and the result clamped.
inline Image patch_texture(std::size_t class_id, bool positive, std::size_t size, double noise, Rng& rng,
                           const GenConfig& cfg = {}) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  constexpr std::array<double, 3> tint{0.04, -0.06, 0.02};
  struct Wave {
    double fx, fy, phase, amplitude;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    const double f = rng.uniform(0.5, 1.5);
    const double theta = rng.uniform(0.0, two_pi);
    waves.push_back({f * std::cos(theta), f * std::sin(theta), rng.uniform(0.0, two_pi), cfg.background_amplitude});
  }
  if (positive) {
    const double f = cfg.class_frequency(class_id);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    waves.push_back({f * std::cos(theta), f * std::sin(theta), rng.uniform(0.0, two_pi), cfg.signal_amplitude});
  }
  Image img(size, size);
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double v = cfg.background_mean;
      for (const auto& w : waves) {
        v += w.amplitude * std::sin(two_pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) * inv +
                                    w.phase);
      }
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        const double n = noise > 0.0 ? rng.normal(0.0, noise) : 0.0;
        img.at(y, x, c) = static_cast<float>(v + tint[c] + n);
      }
    }
  img.clamp();
  return img;
}

/// ceil(rho * n) positives, at least one and at most n.
inline std::size_t positive_count(std::size_t n_patches, double rho) {
  const auto want = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n_patches) - 1e-9));
  return std::clamp<std::size_t>(want, 1, n_patches);
}

inline SlideRecord generate_slide(std::size_t class_id, std::size_t n_patches, double rho, const GenConfig& cfg,
                                  Rng& rng) {
  if (n_patches < 1) throw ContractError("generate_slide: a slide needs at least one patch");
  const std::size_t n_pos = positive_count(n_patches, rho);
  std::vector<std::uint8_t> mask(n_patches, 0);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  rng.shuffle(mask);
  SlideRecord slide;
  slide.label = static_cast<int>(class_id);
  slide.positive_mask = mask;
  for (auto m : mask) slide.patches.push_back(patch_texture(class_id, m != 0, cfg.image_size, cfg.noise, rng, cfg));
  return slide;
}

/// Slides are generated independently from seeds derived from (seed, split,
/// class, index), so the result does not depend on `workers`.
inline Dataset generate_dataset(const GenConfig& cfg, unsigned workers = 1) {
  cfg.validate();
  Dataset ds;
  ds.gen = cfg;
  ds.image_height = ds.image_width = cfg.image_size;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));

  struct Job {
    Split split;
    std::size_t class_id, index;
  };
  std::vector<Job> jobs;
  for (Split s : kSplits) {
    const std::size_t per_class = s == Split::train ? cfg.train_slides : s == Split::dev ? cfg.dev_slides : cfg.test_slides;
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < cfg.n_classes; ++c) jobs.push_back({s, c, i});
  }
  std::vector<SlideRecord> slides(jobs.size());
  const std::uint64_t data_seed = derive_seed(cfg.seed, "data");
  auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t j = begin; j < jobs.size(); j += stride) {
      const auto& job = jobs[j];
      Rng rng(derive_seed(data_seed, static_cast<std::uint64_t>(job.split), job.class_id, job.index));
      slides[j] = generate_slide(job.class_id, cfg.patches_per_slide, cfg.rho, cfg, rng);
      char id[64];
      std::snprintf(id, sizeof id, "%s-c%zu-s%03zu", split_name(job.split).c_str(), job.class_id, job.index);
      slides[j].slide_id = id;
    }
  };
  workers = std::max(1u, workers);
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back([&run, w, workers] { run(w, workers); });
    for (auto& t : pool) t.join();
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) ds.split(jobs[j].split).push_back(std::move(slides[j]));
  return ds;
}

/// Flat patch view over a split, in slide order.
struct PatchIndex {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::vector<std::uint32_t> slide_of;  // index into the split's slide list
};

inline PatchIndex index_patches(const std::vector<SlideRecord>& slides) {
  PatchIndex idx;
  for (std::size_t s = 0; s < slides.size(); ++s)
    for (const auto& p : slides[s].patches) {
      idx.images.push_back(&p);
      idx.labels.push_back(slides[s].label);
      idx.slide_of.push_back(static_cast<std::uint32_t>(s));
    }
  return idx;
}

}  // namespace histoperm
