#pragma once

// Run configuration: a JSON document whose defaults are compiled in. Parsing
// starts from the defaults and overlays the user's file; unknown keys are
// rejected so typos surface as usage errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histoperm/augment.hpp"
#include "histoperm/dataset_io.hpp"
#include "histoperm/errors.hpp"
#include "histoperm/methods.hpp"
#include "histoperm/probe.hpp"
#include "histoperm/synth.hpp"

namespace histoperm {

struct HeadDims {
  std::size_t hidden = 4096;
  std::size_t output = 256;
};

struct PretrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  double lr = 0.45;
  double warmup_epochs = 5.0;
  LarsConfig lars;
};

struct SweepConfig {
  std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t seeds = 3;
};

struct RunConfig {
  std::string dataset;  // empty: generate from `generator`
  GenConfig generator;
  Method method = Method::byol;
  bool histoperm_enabled = true;
  double alpha = 0.75;
  std::string preset = "CropBlurFlip";
  std::vector<std::size_t> encoder_hidden{256};
  std::size_t feature_dim = 64;
  HeadDims byol_heads{4096, 256};
  HeadDims simclr_heads{4096, 256};
  HeadDims vicreg_heads{2048, 2048};
  double byol_tau = 0.97;
  double simclr_temperature = 1.0;
  VicregWeights vicreg;
  PretrainConfig pretrain;
  ProbeConfig linear;
  SupervisedConfig supervised;
  SweepConfig sweep;
  std::uint64_t seed = 0;
  unsigned workers = 1;

  /// Disabled HistoPerm means alpha = 0 regardless of the configured value.
  double effective_alpha() const { return histoperm_enabled ? alpha : 0.0; }

  MethodConfig method_config(std::size_t image_size) const {
    MethodConfig m;
    m.method = method;
    m.input_dim = image_size * image_size * Image::kChannels;
    m.encoder_hidden = encoder_hidden;
    m.feature_dim = feature_dim;
    const HeadDims& h = method == Method::byol ? byol_heads : method == Method::simclr ? simclr_heads : vicreg_heads;
    m.head_hidden = h.hidden;
    m.head_output = h.output;
    m.byol_tau = byol_tau;
    m.simclr_temperature = simclr_temperature;
    m.vicreg = vicreg;
    m.lars = pretrain.lars;
    return m;
  }

  LrSchedule pretrain_schedule() const {
    return {ScheduleKind::cosine_warmup, pretrain.lr, pretrain.warmup_epochs, static_cast<double>(pretrain.epochs)};
  }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("histoperm.alpha must be in [0, 1]");
    make_preset(preset);
    if (pretrain.epochs < 1) throw ConfigError("pretrain.epochs must be at least 1");
    if (pretrain.batch_size < 2) throw ConfigError("pretrain.batch_size must be at least 2");
    pretrain_schedule().validate();
    method_config(generator.image_size).validate();
    linear.validate();
    supervised.validate();
    if (sweep.alphas.empty()) throw ConfigError("sweep.alphas must not be empty");
    for (double a : sweep.alphas) {
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("sweep.alphas entries must be in [0, 1]");
    }
    if (sweep.seeds < 1) throw ConfigError("sweep.seeds must be at least 1");
    if (dataset.empty()) generator.validate();
  }
};

namespace detail {

inline nlohmann::json heads_json(const HeadDims& h) { return {{"hidden", h.hidden}, {"output", h.output}}; }

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  const auto& p = c.linear;
  return {
      {"dataset", c.dataset},
      {"generator", gen_config_to_json(c.generator)},
      {"method", method_name(c.method)},
      {"histoperm", {{"enabled", c.histoperm_enabled}, {"alpha", c.alpha}}},
      {"preset", c.preset},
      {"model",
       {{"encoder_hidden", c.encoder_hidden},
        {"feature_dim", c.feature_dim},
        {"byol_heads", detail::heads_json(c.byol_heads)},
        {"simclr_heads", detail::heads_json(c.simclr_heads)},
        {"vicreg_heads", detail::heads_json(c.vicreg_heads)}}},
      {"byol", {{"tau", c.byol_tau}}},
      {"simclr", {{"temperature", c.simclr_temperature}}},
      {"vicreg",
       {{"lambda", c.vicreg.lambda_s},
        {"mu", c.vicreg.mu_v},
        {"nu", c.vicreg.nu_c},
        {"gamma", c.vicreg.gamma},
        {"epsilon", c.vicreg.epsilon}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"warmup_epochs", c.pretrain.warmup_epochs},
        {"momentum", c.pretrain.lars.momentum},
        {"weight_decay", c.pretrain.lars.weight_decay},
        {"trust_coefficient", c.pretrain.lars.trust_coefficient}}},
      {"linear",
       {{"epochs", p.epochs},
        {"batch_size", p.batch_size},
        {"lr", p.lr},
        {"warmup_epochs", p.warmup_epochs},
        {"momentum", p.momentum},
        {"weight_decay", p.weight_decay},
        {"augment", p.augment}}},
      {"supervised",
       {{"epochs", c.supervised.epochs},
        {"batch_size", c.supervised.batch_size},
        {"lr", c.supervised.lr},
        {"decay_factor", c.supervised.decay_factor},
        {"weight_decay", c.supervised.weight_decay}}},
      {"sweep", {{"alphas", c.sweep.alphas}, {"seeds", c.sweep.seeds}}},
      {"seed", c.seed},
      {"workers", c.workers},
  };
}

namespace detail {

/// Walks `user` against `schema` (the defaults document) and reports the
/// first key that the schema does not know.
inline void reject_unknown_keys(const nlohmann::json& user, const nlohmann::json& schema, const std::string& path) {
  if (!user.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    if (path == "generator." && key == "slides_per_class") {
      reject_unknown_keys(value, schema.at(key), path + key + ".");
      continue;
    }
    if (!schema.contains(key)) throw ConfigError("config: unknown key '" + path + key + "'");
    if (schema.at(key).is_object()) reject_unknown_keys(value, schema.at(key), path + key + ".");
  }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown_keys(j, config_to_json(c), "");
  // Apply the user document on top of the defaults, then read every field.
  nlohmann::json merged = config_to_json(c);
  merged.merge_patch(j);
  std::string at;
  try {
    at = "dataset";
    c.dataset = merged.at("dataset").get<std::string>();
    at = "generator";
    c.generator = gen_config_from_json(merged.at("generator"));
    at = "method";
    c.method = parse_method(merged.at("method").get<std::string>());
    at = "histoperm";
    c.histoperm_enabled = merged.at("histoperm").at("enabled").get<bool>();
    c.alpha = merged.at("histoperm").at("alpha").get<double>();
    at = "preset";
    c.preset = merged.at("preset").get<std::string>();
    at = "model";
    const auto& m = merged.at("model");
    if (!m.at("encoder_hidden").is_array()) throw ConfigError("encoder_hidden must be an array");
    c.encoder_hidden.clear();
    for (const auto& w : m.at("encoder_hidden")) c.encoder_hidden.push_back(json_unsigned<std::size_t>(w));
    c.feature_dim = json_unsigned<std::size_t>(m.at("feature_dim"));
    auto heads = [&](const char* key) {
      return HeadDims{json_unsigned<std::size_t>(m.at(key).at("hidden")), json_unsigned<std::size_t>(m.at(key).at("output"))};
    };
    c.byol_heads = heads("byol_heads");
    c.simclr_heads = heads("simclr_heads");
    c.vicreg_heads = heads("vicreg_heads");
    at = "byol";
    c.byol_tau = merged.at("byol").at("tau").get<double>();
    at = "simclr";
    c.simclr_temperature = merged.at("simclr").at("temperature").get<double>();
    at = "vicreg";
    const auto& v = merged.at("vicreg");
    c.vicreg = {v.at("lambda").get<double>(), v.at("mu").get<double>(), v.at("nu").get<double>(),
                v.at("gamma").get<double>(), v.at("epsilon").get<double>()};
    at = "pretrain";
    const auto& pt = merged.at("pretrain");
    c.pretrain.epochs = json_unsigned<std::size_t>(pt.at("epochs"));
    c.pretrain.batch_size = json_unsigned<std::size_t>(pt.at("batch_size"));
    c.pretrain.lr = pt.at("lr").get<double>();
    c.pretrain.warmup_epochs = pt.at("warmup_epochs").get<double>();
    c.pretrain.lars = {pt.at("momentum").get<double>(), pt.at("weight_decay").get<double>(),
                       pt.at("trust_coefficient").get<double>()};
    at = "linear";
    const auto& l = merged.at("linear");
    c.linear.epochs = json_unsigned<std::size_t>(l.at("epochs"));
    c.linear.batch_size = json_unsigned<std::size_t>(l.at("batch_size"));
    c.linear.lr = l.at("lr").get<double>();
    c.linear.warmup_epochs = l.at("warmup_epochs").get<double>();
    c.linear.momentum = l.at("momentum").get<double>();
    c.linear.weight_decay = l.at("weight_decay").get<double>();
    c.linear.augment = l.at("augment").get<bool>();
    at = "supervised";
    const auto& s = merged.at("supervised");
    c.supervised.epochs = json_unsigned<std::size_t>(s.at("epochs"));
    c.supervised.batch_size = json_unsigned<std::size_t>(s.at("batch_size"));
    c.supervised.lr = s.at("lr").get<double>();
    c.supervised.decay_factor = s.at("decay_factor").get<double>();
    c.supervised.weight_decay = s.at("weight_decay").get<double>();
    at = "sweep";
    c.sweep.alphas = merged.at("sweep").at("alphas").get<std::vector<double>>();
    c.sweep.seeds = json_unsigned<std::size_t>(merged.at("sweep").at("seeds"));
    at = "seed";
    c.seed = json_unsigned<std::uint64_t>(merged.at("seed"));
    at = "workers";
    c.workers = json_unsigned<unsigned>(merged.at("workers"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value under '" + at + "' (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw ConfigError("config: bad value under '" + at + "' (" + e.what() + ")");
  }
  c.linear.transform = affine_transform(c.generator.image_size);
  c.supervised.out_size = c.generator.image_size;
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline std::string default_config_text() { return config_to_json(RunConfig{}).dump(2) + "\n"; }

}  // namespace histoperm
