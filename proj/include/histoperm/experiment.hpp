#pragma once

// End-to-end runs: pretraining with per-epoch label designation, linear
// evaluation at patch and slide level, the supervised baseline, and the
// alpha sweep with resumable per-run results.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "histoperm/config.hpp"
#include "histoperm/dataset_io.hpp"
#include "histoperm/errors.hpp"
#include "histoperm/methods.hpp"
#include "histoperm/metrics.hpp"
#include "histoperm/probe.hpp"
#include "histoperm/random.hpp"
#include "histoperm/synth.hpp"
#include "histoperm/views.hpp"

namespace histoperm {

/// Named sub-streams of one run seed. Each consumer draws only from its own
/// stream, so changing alpha leaves initialization and augmentation alone.
struct RunStreams {
  std::uint64_t augment, permute, init, shuffle, probe;

  explicit RunStreams(std::uint64_t seed)
      : augment(derive_seed(seed, "augment")),
        permute(derive_seed(seed, "permute")),
        init(derive_seed(seed, "init")),
        shuffle(derive_seed(seed, "shuffle")),
        probe(derive_seed(seed, "probe")) {}
};

// ---------------------------------------------------------------------------
// Batch sampling

struct PatchRef {
  std::uint32_t slide;
  std::uint32_t patch;
};

/// Cycles through a pool of patches, reshuffling at every pass.
class PatchPool {
 public:
  PatchPool(std::vector<PatchRef> items, std::uint64_t seed) : items_(std::move(items)), rng_(seed) { reshuffle(); }

  bool empty() const { return items_.empty(); }
  std::size_t size() const { return items_.size(); }

  PatchRef next() {
    if (cursor_ == items_.size()) reshuffle();
    return items_[cursor_++];
  }

 private:
  void reshuffle() {
    rng_.shuffle(items_);
    cursor_ = 0;
  }

  std::vector<PatchRef> items_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

struct EpochPlan {
  std::vector<PatchBatch> batches;
  std::vector<std::uint32_t> labeled_slides;  // slides whose labels are visible this epoch
  std::size_t batch_size = 0;
};

inline std::size_t total_patches(const std::vector<SlideRecord>& slides) {
  std::size_t n = 0;
  for (const auto& s : slides) n += s.patches.size();
  return n;
}

/// One epoch of batches. A fraction alpha of the slides (rounded up) is
/// designated label-visible; every batch takes floor(alpha * N) patches from
/// the label-visible pool and the rest from the other slides, ordered
/// [unlabeled; labeled]. The epoch has floor(n_patches / N) steps.
inline EpochPlan plan_epoch(const std::vector<SlideRecord>& slides, double alpha, std::size_t batch_size,
                            std::size_t epoch, std::uint64_t shuffle_seed) {
  const std::size_t n_total = total_patches(slides);
  if (n_total < 2) throw ContractError("pretraining needs at least two training patches");
  EpochPlan plan;
  plan.batch_size = std::min(batch_size, n_total);
  const std::size_t n_l = labeled_count(plan.batch_size, alpha);
  const std::size_t n_u = plan.batch_size - n_l;
  const std::size_t steps = n_total / plan.batch_size;

  std::vector<std::uint8_t> visible(slides.size(), 0);
  if (n_l > 0) {
    std::vector<std::uint32_t> order(slides.size());
    for (std::uint32_t s = 0; s < order.size(); ++s) order[s] = s;
    Rng designate(derive_seed(shuffle_seed, epoch, 0));
    designate.shuffle(order);
    const auto n_vis = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(slides.size()) - 1e-9)), 1, slides.size());
    for (std::size_t k = 0; k < n_vis; ++k) visible[order[k]] = 1;
    plan.labeled_slides.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_vis));
    std::sort(plan.labeled_slides.begin(), plan.labeled_slides.end());
  }
  std::vector<PatchRef> lab_items, unl_items, all_items;
  for (std::uint32_t s = 0; s < slides.size(); ++s)
    for (std::uint32_t p = 0; p < slides[s].patches.size(); ++p) {
      (visible[s] ? lab_items : unl_items).push_back({s, p});
      all_items.push_back({s, p});
    }
  // With every slide label-visible, unlabeled slots draw from all patches.
  PatchPool unlabeled(unl_items.empty() ? all_items : unl_items, derive_seed(shuffle_seed, epoch, 1));
  PatchPool labeled(lab_items, derive_seed(shuffle_seed, epoch, 2));

  for (std::size_t step = 0; step < steps; ++step) {
    PatchBatch b;
    auto push = [&](PatchRef r, bool with_label) {
      b.images.push_back(slides[r.slide].patches[r.patch]);
      b.labels.push_back(with_label ? std::optional<int>(slides[r.slide].label) : std::nullopt);
      b.slide_ids.push_back(r.slide);
    };
    for (std::size_t i = 0; i < n_u; ++i) push(unlabeled.next(), false);
    for (std::size_t i = 0; i < n_l; ++i) push(labeled.next(), true);
    plan.batches.push_back(std::move(b));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Pretraining

struct StepLog {
  std::size_t step = 0;
  double epoch = 0.0;  // fractional
  double lr = 0.0;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> terms;
  std::vector<std::size_t> permutation;  // labeled-block mapping
};

struct PretrainOutput {
  MethodState<float> state;
  MethodConfig method;
  std::vector<StepLog> steps;
  std::vector<std::pair<std::size_t, double>> epoch_loss;  // (epoch, mean step loss)
  std::vector<std::string> warnings;
};

/// `use_histoperm = false` runs the plain two-view pipeline on the same
/// batches (the reference path for alpha = 0).
inline PretrainOutput pretrain(const Dataset& ds, const RunConfig& cfg, bool use_histoperm = true) {
  cfg.validate();
  if (ds.train.empty()) throw ContractError("pretrain: the training split is empty");
  const RunStreams streams(cfg.seed);
  PretrainOutput out;
  out.method = cfg.method_config(ds.image_height);
  if (ds.image_height * ds.image_width * Image::kChannels != out.method.input_dim) {
    throw DimensionError("pretrain: dataset patches do not match the encoder input");
  }
  Rng init(streams.init);
  out.state = init_method_state<float>(out.method, init);
  const auto [t1, t2] = make_preset(cfg.preset, ds.image_height);
  const LrSchedule schedule = cfg.pretrain_schedule();
  const double alpha = use_histoperm ? cfg.effective_alpha() : 0.0;
  if (cfg.pretrain.batch_size > total_patches(ds.train)) {
    out.warnings.push_back("batch size " + std::to_string(cfg.pretrain.batch_size) + " clamped to the " +
                           std::to_string(total_patches(ds.train)) + " training patches");
  }

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    const EpochPlan plan = plan_epoch(ds.train, alpha, cfg.pretrain.batch_size, epoch, streams.shuffle);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < plan.batches.size(); ++s) {
      const ViewStreams vs{derive_seed(streams.augment, epoch, s), derive_seed(streams.permute, epoch, s)};
      const ComposedBatch composed = use_histoperm ? generate_views(plan.batches[s], alpha, t1, t2, vs)
                                                   : generate_default_views(plan.batches[s], t1, t2, vs);
      const double frac = static_cast<double>(epoch) + static_cast<double>(s) / static_cast<double>(plan.batches.size());
      const double lr = lr_at(schedule, frac);
      const auto r = pretrain_step(out.state, out.method, composed, lr);
      StepLog log{global_step++, frac, lr, static_cast<double>(r.loss), {}, composed.pi.mapping};
      for (const auto& [name, v] : r.terms) log.terms.emplace_back(name, static_cast<double>(v));
      loss_sum += log.loss;
      out.steps.push_back(std::move(log));
    }
    out.epoch_loss.emplace_back(epoch, loss_sum / static_cast<double>(std::max<std::size_t>(1, plan.batches.size())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SplitEvaluation {
  MetricsReport patch;
  MetricsReport slide;
  ProbMatrix slide_probs;
  std::vector<int> slide_labels;
};

template <class T>
SplitEvaluation evaluate_split(const Mlp<T>& encoder, const LinearProbe<T>& probe,
                               const std::vector<SlideRecord>& slides) {
  if (slides.empty()) throw ContractError("evaluate_split: no slides");
  const PatchIndex idx = index_patches(slides);
  const ProbMatrix probs = patch_predict(encoder, probe, idx.images);
  SplitEvaluation ev;
  ev.patch = compute_metrics(probs, idx.labels);
  ev.slide_probs = slide_aggregate(probs, idx.slide_of, slides.size());
  for (const auto& s : slides) ev.slide_labels.push_back(s.label);
  ev.slide = compute_metrics(ev.slide_probs, ev.slide_labels);
  return ev;
}

struct LinearEvalOutput {
  std::vector<EpochLog> log;
  SplitEvaluation dev, test;
};

template <class T>
LinearEvalOutput linear_eval(const Dataset& ds, const Mlp<T>& encoder, const RunConfig& cfg) {
  if (encoder.spec().input_dim != ds.image_height * ds.image_width * Image::kChannels) {
    throw DimensionError("linear-eval: encoder expects " + std::to_string(encoder.spec().input_dim) +
                         " inputs but dataset patches have " +
                         std::to_string(ds.image_height * ds.image_width * Image::kChannels));
  }
  const RunStreams streams(cfg.seed);
  ProbeConfig pc = cfg.linear;
  pc.transform = affine_transform(ds.image_height);
  auto probe = train_linear_probe(encoder, index_patches(ds.train), ds.n_classes(), pc, streams.probe);
  LinearEvalOutput out;
  out.log = std::move(probe.log);
  out.dev = evaluate_split(encoder, probe.probe, ds.dev);
  out.test = evaluate_split(encoder, probe.probe, ds.test);
  return out;
}

struct SupervisedOutput {
  std::vector<EpochLog> log;
  SplitEvaluation dev, test;
};

inline SupervisedOutput supervised_run(const Dataset& ds, const RunConfig& cfg) {
  cfg.validate();
  const MethodConfig m = cfg.method_config(ds.image_height);
  SupervisedConfig sc = cfg.supervised;
  sc.out_size = ds.image_height;
  auto r = train_supervised_baseline<float>(m.encoder_spec(), index_patches(ds.train), ds.n_classes(), sc, cfg.seed);
  SupervisedOutput out;
  out.log = std::move(r.log);
  out.dev = evaluate_split(r.model.encoder, r.model.head, ds.dev);
  out.test = evaluate_split(r.model.encoder, r.model.head, ds.test);
  return out;
}

inline nlohmann::json split_eval_json(const SplitEvaluation& ev, const std::vector<SlideRecord>& slides) {
  nlohmann::json per_slide = nlohmann::json::array();
  for (std::size_t s = 0; s < slides.size(); ++s) {
    per_slide.push_back({{"slide_id", slides[s].slide_id},
                         {"label", slides[s].label},
                         {"predicted", argmax_row(ev.slide_probs[s])},
                         {"probs", ev.slide_probs[s]}});
  }
  nlohmann::json slide = metrics_to_json(ev.slide);
  slide["slides"] = per_slide;
  return {{"patch", metrics_to_json(ev.patch)}, {"slide", slide}};
}

// ---------------------------------------------------------------------------
// State files

inline constexpr char kStateMagic[8] = {'H', 'P', 'S', 'T', 'A', 'T', 'E', '1'};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) bytes_.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes_ += s;
  }
  void floats(std::span<const float> v) {
    std::vector<float> tmp(v.begin(), v.end());
    append_floats(bytes_, tmp);
  }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IntegrityError("state file is truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + b])) << (8 * b);
    pos_ += 8;
    return v;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    need(n * 4);
    auto v = decode_floats(b_.data() + pos_, n);
    pos_ += n * 4;
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a64_bytes(std::string_view bytes) { return fnv1a64(bytes); }

}  // namespace detail

/// Named networks of a pretrained state, in a fixed order.
inline std::vector<std::pair<std::string, const Mlp<float>*>> state_networks(const MethodState<float>& s) {
  std::vector<std::pair<std::string, const Mlp<float>*>> out{{"encoder", &s.encoder}, {"head", &s.head}};
  if (s.has_target()) {
    out.emplace_back("predictor", &s.predictor);
    out.emplace_back("target_encoder", &s.target_encoder);
    out.emplace_back("target_head", &s.target_head);
  }
  return out;
}

/// Binary layout: magic, method name, network count, then per network its
/// name, widths and little-endian float32 parameters (W0, b0, W1, ...);
/// an FNV-1a checksum of everything before it closes the file.
inline std::string serialize_state(const MethodState<float>& s) {
  detail::ByteWriter w;
  w.raw(kStateMagic, sizeof kStateMagic);
  w.str(method_name(s.method));
  const auto nets = state_networks(s);
  w.u64(nets.size());
  for (const auto& [name, mlp] : nets) {
    w.str(name);
    const auto widths = mlp->spec().widths();
    w.u64(widths.size());
    for (auto d : widths) w.u64(d);
    for (const auto& p : mlp->parameters()) w.floats(p.values());
  }
  const auto sum = detail::fnv1a64_bytes(w.bytes());
  w.u64(sum);
  return w.bytes();
}

struct LoadedState {
  Method method = Method::byol;
  std::vector<std::pair<std::string, Mlp<float>>> networks;

  const Mlp<float>& network(const std::string& name) const {
    for (const auto& [n, m] : networks) {
      if (n == name) return m;
    }
    throw ContractError("state has no network named '" + name + "'");
  }
};

inline LoadedState deserialize_state(const std::string& bytes) {
  constexpr std::size_t magic = sizeof kStateMagic;
  if (bytes.size() < magic + 8 || std::memcmp(bytes.data(), kStateMagic, magic) != 0) {
    throw IoError("not a state file (bad magic)");
  }
  const std::string_view all(bytes);
  std::uint64_t stored = 0;
  for (int b = 0; b < 8; ++b) {
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[bytes.size() - 8 + b])) << (8 * b);
  }
  if (stored != detail::fnv1a64_bytes(all.substr(0, bytes.size() - 8))) {
    throw IntegrityError("state file checksum mismatch");
  }
  const std::string body = bytes.substr(magic, bytes.size() - magic - 8);
  detail::ByteReader r(body);
  LoadedState out;
  out.method = parse_method(r.str());
  const auto count = r.u64();
  if (count > 16) throw IntegrityError("state file declares too many networks");
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.str();
    const auto n_widths = r.u64();
    if (n_widths < 2 || n_widths > 64) throw IntegrityError("state file network '" + name + "' has bad widths");
    std::vector<std::size_t> widths(n_widths);
    for (auto& w : widths) w = r.u64();
    MlpSpec spec{widths.front(), std::vector<std::size_t>(widths.begin() + 1, widths.end() - 1), widths.back()};
    MlpParams<float> params;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      params.weights.emplace_back(Shape{widths[l], widths[l + 1]}, r.floats(widths[l] * widths[l + 1]), false);
      params.biases.emplace_back(Shape{widths[l + 1]}, r.floats(widths[l + 1]), false);
    }
    out.networks.emplace_back(name, Mlp<float>(spec, std::move(params)));
  }
  if (r.pos() != body.size()) throw IntegrityError("state file has trailing bytes");
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  detail::write_file(path, text);
}

/// Writes to a temporary sibling then renames, so readers never see half a file.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  write_text(tmp, text);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path.string() + "': " + ec.message());
}

inline std::string read_text(const std::filesystem::path& path) { return detail::read_file(path); }

inline std::string checksum_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

/// Loads the configured dataset directory, or generates one in memory.
inline Dataset resolve_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) {
    if (!std::filesystem::exists(std::filesystem::path(cfg.dataset) / "manifest.json")) {
      throw IoError("dataset '" + cfg.dataset + "' has no manifest.json");
    }
    return read_dataset(cfg.dataset);
  }
  return generate_dataset(cfg.generator, cfg.workers);
}

inline std::string format_fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Shortest text that parses back to the same double.
inline std::string format_shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

inline std::string epoch_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,split,loss,accuracy\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + e.split + "," + format_fixed(e.loss) + "," + format_fixed(e.accuracy) + "\n";
  }
  return out;
}

inline std::string pretrain_csv(const PretrainOutput& p) {
  std::string out = "step,epoch,lr,loss\n";
  for (const auto& s : p.steps) {
    out += std::to_string(s.step) + "," + format_fixed(s.epoch) + "," + format_fixed(s.lr) + "," +
           format_fixed(s.loss) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alpha sweep

struct SweepRow {
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double dev_patch_accuracy = 0, dev_patch_f1 = 0;
  std::optional<double> dev_patch_auc;
  double test_patch_accuracy = 0, test_patch_f1 = 0;
  std::optional<double> test_patch_auc;
  double test_slide_accuracy = 0;
};

inline nlohmann::json sweep_row_json(const SweepRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"alpha", r.alpha},
          {"seed", r.seed},
          {"dev_patch_accuracy", r.dev_patch_accuracy},
          {"dev_patch_f1_macro", r.dev_patch_f1},
          {"dev_patch_auc_ovr_macro", opt(r.dev_patch_auc)},
          {"test_patch_accuracy", r.test_patch_accuracy},
          {"test_patch_f1_macro", r.test_patch_f1},
          {"test_patch_auc_ovr_macro", opt(r.test_patch_auc)},
          {"test_slide_accuracy", r.test_slide_accuracy}};
}

inline SweepRow sweep_row_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) {
    return j.at(k).is_null() ? std::optional<double>() : std::optional<double>(j.at(k).get<double>());
  };
  SweepRow r;
  r.alpha = j.at("alpha").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.dev_patch_accuracy = j.at("dev_patch_accuracy").get<double>();
  r.dev_patch_f1 = j.at("dev_patch_f1_macro").get<double>();
  r.dev_patch_auc = opt("dev_patch_auc_ovr_macro");
  r.test_patch_accuracy = j.at("test_patch_accuracy").get<double>();
  r.test_patch_f1 = j.at("test_patch_f1_macro").get<double>();
  r.test_patch_auc = opt("test_patch_auc_ovr_macro");
  r.test_slide_accuracy = j.at("test_slide_accuracy").get<double>();
  return r;
}

/// Pretrain + linear-eval for one (alpha, seed).
inline SweepRow run_alpha(const Dataset& ds, RunConfig cfg, double alpha, std::uint64_t seed) {
  cfg.histoperm_enabled = true;
  cfg.alpha = alpha;
  cfg.seed = seed;
  const auto pre = pretrain(ds, cfg);
  const auto ev = linear_eval(ds, pre.state.encoder, cfg);
  return {alpha,
          seed,
          ev.dev.patch.accuracy,
          ev.dev.patch.f1_macro,
          ev.dev.patch.auc_ovr_macro,
          ev.test.patch.accuracy,
          ev.test.patch.f1_macro,
          ev.test.patch.auc_ovr_macro,
          ev.test.slide.accuracy};
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, const std::vector<double>& alphas) {
  auto opt = [](const std::optional<double>& v) { return v ? format_fixed(*v) : std::string(); };
  std::string out =
      "alpha,seed,dev_patch_accuracy,dev_patch_f1_macro,dev_patch_auc_ovr_macro,test_patch_accuracy,"
      "test_patch_f1_macro,test_patch_auc_ovr_macro,test_slide_accuracy\n";
  for (const auto& r : rows) {
    out += format_shortest(r.alpha) + "," + std::to_string(r.seed) + "," + format_fixed(r.dev_patch_accuracy) + "," +
           format_fixed(r.dev_patch_f1) + "," + opt(r.dev_patch_auc) + "," + format_fixed(r.test_patch_accuracy) +
           "," + format_fixed(r.test_patch_f1) + "," + opt(r.test_patch_auc) + "," +
           format_fixed(r.test_slide_accuracy) + "\n";
  }
  for (double a : alphas) {
    std::vector<const SweepRow*> group;
    for (const auto& r : rows) {
      if (r.alpha == a) group.push_back(&r);
    }
    auto mean = [&](auto field) {
      double s = 0.0;
      for (auto* r : group) s += field(*r);
      return s / static_cast<double>(group.size());
    };
    auto mean_opt = [&](auto field) -> std::optional<double> {
      double s = 0.0;
      for (auto* r : group) {
        const std::optional<double> v = field(*r);
        if (!v) return std::nullopt;
        s += *v;
      }
      return s / static_cast<double>(group.size());
    };
    out += format_shortest(a) + ",mean," + format_fixed(mean([](const SweepRow& r) { return r.dev_patch_accuracy; })) +
           "," + format_fixed(mean([](const SweepRow& r) { return r.dev_patch_f1; })) + "," +
           opt(mean_opt([](const SweepRow& r) { return r.dev_patch_auc; })) + "," +
           format_fixed(mean([](const SweepRow& r) { return r.test_patch_accuracy; })) + "," +
           format_fixed(mean([](const SweepRow& r) { return r.test_patch_f1; })) + "," +
           opt(mean_opt([](const SweepRow& r) { return r.test_patch_auc; })) + "," +
           format_fixed(mean([](const SweepRow& r) { return r.test_slide_accuracy; })) + "\n";
  }
  return out;
}

struct SweepOptions {
  unsigned workers = 1;
  /// Stop after computing this many new runs (0: no limit). Used to emulate
  /// an interrupted sweep.
  std::size_t stop_after = 0;
};

struct SweepOutcome {
  bool complete = false;
  std::size_t computed = 0;  // runs computed in this call
  std::size_t reused = 0;    // runs loaded from earlier results
  std::string csv;           // set when complete
};

inline std::string run_dir_name(double alpha, std::uint64_t seed) {
  return "a" + format_shortest(alpha) + "_s" + std::to_string(seed);
}

/// Runs every configured (alpha, seed) pair, reusing finished runs found
/// under `out_dir/runs`. Seeds are cfg.seed, cfg.seed + 1, ... Rows come out
/// in (alpha, seed) order whatever the worker count. While runs are missing,
/// `out_dir/sweep.resume` marks the sweep as incomplete.
inline SweepOutcome run_sweep(const Dataset& ds, const RunConfig& cfg, const std::filesystem::path& out_dir,
                              const SweepOptions& opts = {}) {
  cfg.validate();
  struct Job {
    double alpha;
    std::uint64_t seed;
    std::filesystem::path dir;
  };
  std::vector<Job> jobs;
  for (double a : cfg.sweep.alphas)
    for (std::size_t k = 0; k < cfg.sweep.seeds; ++k) {
      const std::uint64_t seed = cfg.seed + k;
      jobs.push_back({a, seed, out_dir / "runs" / run_dir_name(a, seed)});
    }
  // A finished run is reused only if it was produced by the same settings.
  auto fingerprint = [&](const Job& j) {
    RunConfig c = cfg;
    c.alpha = j.alpha;
    c.seed = j.seed;
    c.histoperm_enabled = true;
    c.workers = 1;
    c.sweep = {};
    return checksum_hex(config_to_json(c).dump());
  };

  std::vector<std::optional<SweepRow>> rows(jobs.size());
  std::vector<std::size_t> pending;
  SweepOutcome outcome;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto path = jobs[i].dir / "result.json";
    if (std::filesystem::exists(path)) {
      try {
        const auto j = nlohmann::json::parse(read_text(path));
        if (j.at("fingerprint").get<std::string>() == fingerprint(jobs[i])) {
          rows[i] = sweep_row_from_json(j.at("row"));
          ++outcome.reused;
          continue;
        }
      } catch (const nlohmann::json::exception&) {
        // unreadable result: recompute
      }
    }
    pending.push_back(i);
  }
  if (opts.stop_after > 0 && pending.size() > opts.stop_after) pending.resize(opts.stop_after);
  write_text(out_dir / "sweep.resume", "incomplete\n");

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= pending.size()) return;
      const std::size_t i = pending[k];
      try {
        const SweepRow row = run_alpha(ds, cfg, jobs[i].alpha, jobs[i].seed);
        const nlohmann::json j = {{"fingerprint", fingerprint(jobs[i])}, {"row", sweep_row_json(row)}};
        write_text_atomic(jobs[i].dir / "result.json", j.dump(2) + "\n");
        rows[i] = row;
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next = pending.size();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(pending.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  outcome.computed = pending.size();

  std::vector<SweepRow> done;
  for (const auto& r : rows) {
    if (r) done.push_back(*r);
  }
  if (done.size() < jobs.size()) return outcome;
  outcome.complete = true;
  outcome.csv = sweep_csv(done, cfg.sweep.alphas);
  write_text(out_dir / "sweep.csv", outcome.csv);
  std::filesystem::remove(out_dir / "sweep.resume");
  return outcome;
}

}  // namespace histoperm
