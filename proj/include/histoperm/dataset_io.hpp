#pragma once

// On-disk dataset layout:
//
//   <dir>/manifest.json           splits, slide entries, image dims, generator
//   <dir>/{train,dev,test}.f32    little-endian float32, H x W x 3 per patch,
//                                 patches in manifest order
//
// Every slide entry records its byte offset and length within its split's
// blob; read_dataset() checks them against the blob size before decoding
// anything.

#include <bit>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "histoperm/errors.hpp"
#include "histoperm/synth.hpp"

namespace histoperm {

inline constexpr const char* kDatasetFormat = "histoperm-dataset";
inline constexpr int kDatasetVersion = 1;

inline nlohmann::json gen_config_to_json(const GenConfig& g) {
  return {{"n_classes", g.n_classes},
          {"slides_per_class", {{"train", g.train_slides}, {"dev", g.dev_slides}, {"test", g.test_slides}}},
          {"patches_per_slide", g.patches_per_slide},
          {"rho", g.rho},
          {"image_size", g.image_size},
          {"noise", g.noise},
          {"background_mean", g.background_mean},
          {"background_amplitude", g.background_amplitude},
          {"signal_amplitude", g.signal_amplitude},
          {"base_frequency", g.base_frequency},
          {"frequency_spacing", g.frequency_spacing},
          {"seed", g.seed}};
}

/// Reads a count or seed. nlohmann converts -1 to a huge unsigned value
/// without complaint, so the sign is checked first.
template <class U>
U json_unsigned(const nlohmann::json& j) {
  static_assert(std::is_unsigned_v<U>);
  if (!j.is_number_unsigned()) throw ConfigError("expected a non-negative integer, got " + j.dump());
  const auto v = j.get<std::uint64_t>();
  if (v > std::numeric_limits<U>::max()) throw ConfigError("integer " + j.dump() + " is out of range");
  return static_cast<U>(v);
}

/// Missing keys keep their defaults; present keys must have the right type.
inline GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig g = {}) {
  auto get = [&](const char* key, auto& out) {
    using V = std::decay_t<decltype(out)>;
    if (!j.contains(key)) return;
    if constexpr (std::is_unsigned_v<V>) {
      out = json_unsigned<V>(j.at(key));
    } else {
      out = j.at(key).get<V>();
    }
  };
  get("n_classes", g.n_classes);
  if (j.contains("slides_per_class")) {
    const auto& s = j.at("slides_per_class");
    if (s.contains("train")) g.train_slides = json_unsigned<std::size_t>(s.at("train"));
    if (s.contains("dev")) g.dev_slides = json_unsigned<std::size_t>(s.at("dev"));
    if (s.contains("test")) g.test_slides = json_unsigned<std::size_t>(s.at("test"));
  }
  get("patches_per_slide", g.patches_per_slide);
  get("rho", g.rho);
  get("image_size", g.image_size);
  get("noise", g.noise);
  get("background_mean", g.background_mean);
  get("background_amplitude", g.background_amplitude);
  get("signal_amplitude", g.signal_amplitude);
  get("base_frequency", g.base_frequency);
  get("frequency_spacing", g.frequency_spacing);
  get("seed", g.seed);
  return g;
}

namespace detail {

inline void append_floats(std::string& out, const std::vector<float>& values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values.data(), values.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  }
}

inline std::vector<float> decode_floats(const char* data, std::size_t count) {
  std::vector<float> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), data, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[4 * i + b])) << (8 * b);
      out[i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

/// Looks up `key` in `j`, throwing an IoError naming `where.key`.
inline const nlohmann::json& field(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw IoError("manifest: missing field '" + where + key + "'");
  return j.at(key);
}

template <class V>
V field_as(const nlohmann::json& j, const std::string& key, const std::string& where) {
  try {
    return field(j, key, where).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw IoError("manifest: field '" + where + key + "' has the wrong type");
  }
}

}  // namespace detail

inline std::size_t patch_bytes(std::size_t height, std::size_t width) {
  return height * width * Image::kChannels * sizeof(float);
}

/// FNV-1a 64 of a blob as 16 hex digits.
inline std::string blob_checksum(const std::string& blob) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(blob)));
  return buf;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir.string() + "': " + ec.message());

  nlohmann::json manifest;
  manifest["format"] = kDatasetFormat;
  manifest["version"] = kDatasetVersion;
  manifest["image"] = {{"height", ds.image_height}, {"width", ds.image_width}, {"channels", Image::kChannels}};
  manifest["class_names"] = ds.class_names;
  manifest["generator"] = gen_config_to_json(ds.gen);
  const std::size_t per_patch = patch_bytes(ds.image_height, ds.image_width);
  for (Split s : kSplits) {
    std::string blob;
    nlohmann::json slides = nlohmann::json::array();
    for (const auto& slide : ds.split(s)) {
      const std::size_t offset = blob.size();
      for (const auto& p : slide.patches) {
        if (p.height != ds.image_height || p.width != ds.image_width) {
          throw ContractError("write_dataset: slide " + slide.slide_id + " has a patch of the wrong size");
        }
        detail::append_floats(blob, p.pixels);
      }
      slides.push_back({{"slide_id", slide.slide_id},
                        {"label", slide.label},
                        {"patch_count", slide.patches.size()},
                        {"offset", offset},
                        {"bytes", slide.patches.size() * per_patch},
                        {"positive_mask", slide.positive_mask}});
    }
    const std::string blob_name = split_name(s) + ".f32";
    detail::write_file(dir / blob_name, blob);
    manifest["splits"][split_name(s)] = {{"blob", blob_name},
                                         {"blob_bytes", blob.size()},
                                         {"blob_fnv1a64", blob_checksum(blob)},
                                         {"slides", slides}};
  }
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads and validates a dataset directory. Nothing is returned unless every
/// split's blob matches its manifest exactly.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("manifest: not valid JSON (" + std::string(e.what()) + ")");
  }
  if (detail::field_as<std::string>(manifest, "format", "") != kDatasetFormat) {
    throw IoError("manifest: field 'format' is not '" + std::string(kDatasetFormat) + "'");
  }
  if (detail::field_as<int>(manifest, "version", "") != kDatasetVersion) {
    throw IoError("manifest: unsupported 'version'");
  }
  Dataset ds;
  const auto& image = detail::field(manifest, "image", "");
  ds.image_height = detail::field_as<std::size_t>(image, "height", "image.");
  ds.image_width = detail::field_as<std::size_t>(image, "width", "image.");
  if (detail::field_as<std::size_t>(image, "channels", "image.") != Image::kChannels) {
    throw IoError("manifest: field 'image.channels' must be 3");
  }
  ds.class_names = detail::field_as<std::vector<std::string>>(manifest, "class_names", "");
  if (manifest.contains("generator")) ds.gen = gen_config_from_json(manifest.at("generator"));

  const std::size_t per_patch = patch_bytes(ds.image_height, ds.image_width);
  const auto& splits = detail::field(manifest, "splits", "");
  std::vector<std::string> seen_ids;
  for (Split s : kSplits) {
    const std::string where = "splits." + split_name(s) + ".";
    const auto& entry = detail::field(splits, split_name(s), "splits.");
    const auto blob_name = detail::field_as<std::string>(entry, "blob", where);
    const auto blob_bytes = detail::field_as<std::size_t>(entry, "blob_bytes", where);
    const std::string blob = detail::read_file(dir / blob_name);
    if (blob.size() != blob_bytes) {
      throw IntegrityError("blob '" + blob_name + "' holds " + std::to_string(blob.size()) + " bytes, manifest says " +
                           std::to_string(blob_bytes));
    }
    if (blob_checksum(blob) != detail::field_as<std::string>(entry, "blob_fnv1a64", where)) {
      throw IntegrityError("blob '" + blob_name + "' does not match its manifest checksum");
    }
    const auto& slides = detail::field(entry, "slides", where);
    if (!slides.is_array()) throw IoError("manifest: field '" + where + "slides' must be an array");
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < slides.size(); ++i) {
      const std::string sw = where + "slides[" + std::to_string(i) + "].";
      const auto& js = slides[i];
      SlideRecord slide;
      slide.slide_id = detail::field_as<std::string>(js, "slide_id", sw);
      slide.label = detail::field_as<int>(js, "label", sw);
      const auto count = detail::field_as<std::size_t>(js, "patch_count", sw);
      const auto offset = detail::field_as<std::size_t>(js, "offset", sw);
      const auto bytes = detail::field_as<std::size_t>(js, "bytes", sw);
      slide.positive_mask = detail::field_as<std::vector<std::uint8_t>>(js, "positive_mask", sw);
      if (slide.label < 0 || static_cast<std::size_t>(slide.label) >= ds.class_names.size()) {
        throw IoError("manifest: field '" + sw + "label' is outside the class list");
      }
      if (bytes != count * per_patch) {
        throw IntegrityError("slide " + slide.slide_id + ": " + std::to_string(count) + " patches need " +
                             std::to_string(count * per_patch) + " bytes, manifest says " + std::to_string(bytes));
      }
      if (offset != expected_offset || offset + bytes > blob.size()) {
        throw IntegrityError("slide " + slide.slide_id + ": byte range [" + std::to_string(offset) + ", " +
                             std::to_string(offset + bytes) + ") does not tile blob '" + blob_name + "'");
      }
      if (slide.positive_mask.size() != count) {
        throw IoError("manifest: field '" + sw + "positive_mask' length differs from patch_count");
      }
      for (const auto& id : seen_ids) {
        if (id == slide.slide_id) throw IntegrityError("slide id '" + slide.slide_id + "' appears twice");
      }
      seen_ids.push_back(slide.slide_id);
      const std::size_t floats_per_patch = per_patch / sizeof(float);
      for (std::size_t p = 0; p < count; ++p) {
        slide.patches.emplace_back(ds.image_height, ds.image_width,
                                   detail::decode_floats(blob.data() + offset + p * per_patch, floats_per_patch));
        for (float v : slide.patches.back().pixels) {
          if (!(v >= 0.0f && v <= 1.0f)) {
            throw IntegrityError("slide " + slide.slide_id + " patch " + std::to_string(p) +
                                 " has an intensity outside [0, 1]");
          }
        }
      }
      expected_offset = offset + bytes;
      ds.split(s).push_back(std::move(slide));
    }
    if (expected_offset != blob.size()) {
      throw IntegrityError("blob '" + blob_name + "' has " + std::to_string(blob.size() - expected_offset) +
                           " bytes not covered by any slide");
    }
  }
  return ds;
}

}  // namespace histoperm
