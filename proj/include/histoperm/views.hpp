#pragma once

// Permutation-based view generation.
//
// A mini-batch of N patches is split into an unlabeled part and a labeled
// part of floor(alpha * N) items. Both parts get two augmented views; the
// second labeled view is then reindexed by a class-preserving permutation so
// each labeled positive pair comes from two different patches of one class.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "histoperm/augment.hpp"
#include "histoperm/errors.hpp"
#include "histoperm/image.hpp"
#include "histoperm/random.hpp"

namespace histoperm {

struct PatchBatch {
  std::vector<Image> images;
  std::vector<std::optional<int>> labels;  // set only for items drawn from the labeled pool
  std::vector<std::uint32_t> slide_ids;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (labels.size() != images.size() || slide_ids.size() != images.size()) {
      throw ContractError("PatchBatch: images, labels and slide_ids differ in length");
    }
    for (const auto& img : images) {
      if (img.height != images.front().height || img.width != images.front().width) {
        throw ContractError("PatchBatch: images differ in dimensions");
      }
    }
  }
};

struct BatchSplit {
  std::vector<std::size_t> unlabeled;  // batch indices, original order
  std::vector<std::size_t> labeled;
};

inline std::size_t labeled_count(std::size_t batch_size, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1], got " + std::to_string(alpha));
  return static_cast<std::size_t>(std::floor(alpha * static_cast<double>(batch_size)));
}

/// The first floor(alpha * N) labeled items form the labeled part; every other
/// item, including surplus labeled ones, is treated as unlabeled.
inline BatchSplit split_batch(const PatchBatch& batch, double alpha) {
  const std::size_t want = labeled_count(batch.size(), alpha);
  std::size_t available = 0;
  for (const auto& l : batch.labels) available += l.has_value();
  if (available < want) {
    throw ConfigError("split_batch: alpha=" + std::to_string(alpha) + " needs " + std::to_string(want) +
                      " labeled items but the batch has " + std::to_string(available));
  }
  BatchSplit split;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.labels[i].has_value() && split.labeled.size() < want) {
      split.labeled.push_back(i);
    } else {
      split.unlabeled.push_back(i);
    }
  }
  return split;
}

struct Permutation {
  std::vector<std::size_t> mapping;

  std::size_t size() const { return mapping.size(); }

  static Permutation identity(std::size_t n) {
    Permutation p;
    p.mapping.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.mapping[i] = i;
    return p;
  }

  Permutation inverse() const {
    Permutation inv;
    inv.mapping.resize(mapping.size());
    for (std::size_t i = 0; i < mapping.size(); ++i) inv.mapping[mapping[i]] = i;
    return inv;
  }

  bool is_bijective() const {
    std::vector<bool> hit(mapping.size(), false);
    for (auto m : mapping) {
      if (m >= mapping.size() || hit[m]) return false;
      hit[m] = true;
    }
    return true;
  }

  bool operator==(const Permutation&) const = default;
};

/// Uniformly random class-preserving permutation. Within each label group of
/// two or more members no index maps to itself (rejection sampling over
/// uniform shuffles of the group); singleton groups map to themselves.
inline Permutation sample_class_permutation(std::span<const int> labels, Rng& rng) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);

  Permutation pi = Permutation::identity(labels.size());
  std::vector<std::size_t> order;
  for (const auto& [label, members] : groups) {
    if (members.size() < 2) continue;
    order.resize(members.size());
    bool deranged = false;
    while (!deranged) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      deranged = true;
      for (std::size_t i = 0; i < order.size() && deranged; ++i) deranged = order[i] != i;
    }
    for (std::size_t i = 0; i < members.size(); ++i) pi.mapping[members[i]] = members[order[i]];
  }
  return pi;
}

/// output[i] = views[pi.mapping[i]].
template <class Item>
std::vector<Item> permute_view(const std::vector<Item>& views, const Permutation& pi) {
  if (views.size() != pi.size()) {
    throw ContractError("permute_view: " + std::to_string(views.size()) + " views but permutation of size " +
                        std::to_string(pi.size()));
  }
  std::vector<Item> out;
  out.reserve(views.size());
  for (auto m : pi.mapping) out.push_back(views[m]);
  return out;
}

/// Root seeds for one batch. Item i's view v uses derive_seed(augment, i, v),
/// so view randomness does not depend on how the batch is split.
struct ViewStreams {
  std::uint64_t augment = 0;
  std::uint64_t permute = 0;
};

inline Image make_view(const Image& source, const TransformConfig& cfg, const ViewStreams& streams,
                       std::size_t batch_index, std::uint64_t view) {
  Rng rng(derive_seed(streams.augment, batch_index, view));
  return apply_view_transform(source, cfg, rng);
}

/// The second labeled view is always the permuted one.
struct ComposedBatch {
  std::vector<Image> v_u1, v_u2;
  std::vector<Image> v_l1, v_l2_tilde;
  std::vector<int> labels_l;
  Permutation pi;
  double alpha = 0.0;
  std::vector<std::size_t> unlabeled_source;  // batch index of each unlabeled row
  std::vector<std::size_t> labeled_source;    // batch index of each labeled row (view 1)

  std::size_t unlabeled_size() const { return v_u1.size(); }
  std::size_t labeled_size() const { return v_l1.size(); }
  std::size_t size() const { return unlabeled_size() + labeled_size(); }

  /// Rows fed to one branch: unlabeled first, then labeled.
  std::vector<Image> view1() const {
    std::vector<Image> out = v_u1;
    out.insert(out.end(), v_l1.begin(), v_l1.end());
    return out;
  }
  std::vector<Image> view2() const {
    std::vector<Image> out = v_u2;
    out.insert(out.end(), v_l2_tilde.begin(), v_l2_tilde.end());
    return out;
  }
};

inline ComposedBatch generate_views(const PatchBatch& batch, double alpha, const TransformConfig& t1,
                                    const TransformConfig& t2, const ViewStreams& streams) {
  batch.validate();
  t1.validate();
  t2.validate();
  const BatchSplit split = split_batch(batch, alpha);

  ComposedBatch out;
  out.alpha = alpha;
  out.unlabeled_source = split.unlabeled;
  out.labeled_source = split.labeled;
  for (auto i : split.unlabeled) {
    out.v_u1.push_back(make_view(batch.images[i], t1, streams, i, 1));
    out.v_u2.push_back(make_view(batch.images[i], t2, streams, i, 2));
  }
  std::vector<Image> v_l2;
  for (auto i : split.labeled) {
    out.v_l1.push_back(make_view(batch.images[i], t1, streams, i, 1));
    v_l2.push_back(make_view(batch.images[i], t2, streams, i, 2));
    out.labels_l.push_back(*batch.labels[i]);
  }
  Rng perm_rng(streams.permute);
  out.pi = sample_class_permutation(out.labels_l, perm_rng);
  out.v_l2_tilde = permute_view(v_l2, out.pi);
  return out;
}

/// Standard two-view generation without any split or permutation: every
/// item is unlabeled.
inline ComposedBatch generate_default_views(const PatchBatch& batch, const TransformConfig& t1,
                                            const TransformConfig& t2, const ViewStreams& streams) {
  batch.validate();
  ComposedBatch out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.v_u1.push_back(make_view(batch.images[i], t1, streams, i, 1));
    out.v_u2.push_back(make_view(batch.images[i], t2, streams, i, 2));
    out.unlabeled_source.push_back(i);
  }
  return out;
}

}  // namespace histoperm
