#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/distance.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/types.hpp"

namespace vstream {

inline constexpr std::uint32_t kNoAnchor = std::numeric_limits<std::uint32_t>::max();

struct DamEntry {
  std::uint64_t frame_index = 0;
  std::uint32_t anchor_cluster = kNoAnchor;
  std::uint32_t anchor_rank = 0;
  double distance_to_anchor = 0.0;
  FeatureMap feature;  // high-res
};

// Detail Augmentation Memory: key frames in anchor-rank order.
struct DamState {
  std::vector<DamEntry> entries;
  std::uint64_t frames_seen = 0;

  std::vector<std::uint64_t> frame_indices() const {
    std::vector<std::uint64_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.frame_index);
    return out;
  }
};

struct RetrievalOptions {
  RetrievalPolicy retrieval = RetrievalPolicy::FeatureCentric;
  SelectionPolicy selection = SelectionPolicy::TopKLargest;
  std::uint32_t n_dam = 30;

  static RetrievalOptions from(const MemoryConfig& c) { return {c.retrieval_policy, c.selection_policy, c.n_dam}; }
};

// Cluster indices by weight, largest first; equal weights keep index order.
inline std::vector<std::uint32_t> rank_clusters(const ClusterState& state) {
  std::vector<std::uint32_t> idx(state.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return state.weight(a) > state.weight(b); });
  return idx;
}

// Anchors for `selection`, at most min(k, clusters) of them.
inline std::vector<std::uint32_t> select_anchors(const ClusterState& state, SelectionPolicy selection, std::uint32_t k) {
  auto ranked = rank_clusters(state);
  const std::size_t m = ranked.size();
  const std::size_t take = std::min<std::size_t>(k, m);
  std::vector<std::uint32_t> out;
  out.reserve(take);
  switch (selection) {
    case SelectionPolicy::TopKLargest:
      out.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take));
      break;
    case SelectionPolicy::TopKSmallest: {
      std::vector<std::uint32_t> asc(m);
      std::iota(asc.begin(), asc.end(), 0u);
      std::stable_sort(asc.begin(), asc.end(),
                       [&](std::uint32_t a, std::uint32_t b) { return state.weight(a) < state.weight(b); });
      out.assign(asc.begin(), asc.begin() + static_cast<std::ptrdiff_t>(take));
      break;
    }
    case SelectionPolicy::UniformK:
      // evenly spaced through the size ranking
      for (std::size_t j = 0; j < take; ++j) out.push_back(ranked[j * m / take]);
      break;
  }
  return out;
}

// (score, frame) candidates, best first; ties order by frame index.
using Candidates = std::vector<std::pair<double, std::uint64_t>>;

// Best candidate frames per anchor centroid. An entry holds the `depth` best
// frames, enough to survive exclusions by every earlier anchor. It is reused
// only for the exact centroid buffer it was computed against, so a moved
// centroid always triggers a full rescan; otherwise only frames appended
// since the last scan are examined.
class RetrievalCache {
 public:
  struct Entry {
    CentroidPtr anchor;
    RetrievalPolicy policy = RetrievalPolicy::FeatureCentric;
    std::size_t depth = 0;
    std::uint64_t scanned = 0;
    Candidates top;
  };

  Entry* find(const CentroidPtr& anchor, RetrievalPolicy policy, std::size_t depth, std::uint64_t limit) {
    auto it = entries_.find(anchor.get());
    if (it == entries_.end() || it->second.policy != policy || it->second.depth != depth || it->second.scanned > limit) {
      return nullptr;
    }
    return &it->second;
  }

  Entry& put(const CentroidPtr& anchor, RetrievalPolicy policy, std::size_t depth) {
    auto& e = entries_[anchor.get()];
    e = Entry{anchor, policy, depth, 0, {}};
    return e;
  }

  // Drops entries whose centroids are not in `state`.
  void retain(const ClusterState& state) {
    std::unordered_set<const std::vector<double>*> live;
    for (const auto& c : state.clusters()) live.insert(c.centroid.get());
    std::erase_if(entries_, [&](const auto& kv) { return !live.contains(kv.first); });
    std::erase_if(rendered_, [&](const auto& kv) { return !live.contains(kv.first.first); });
  }

  // f32 rendering of centroid k, as centroid_feature(state, k, k).
  FeatureMap centroid_map(const ClusterState& state, std::size_t k) {
    const auto& ptr = state.cluster(k).centroid;
    auto [it, fresh] = rendered_.try_emplace({ptr.get(), k});
    if (fresh) it->second = {ptr, centroid_feature(state, k, k)};
    return it->second.second;
  }

  std::size_t size() const { return entries_.size(); }
  std::uint64_t full_scans = 0;
  std::uint64_t incremental_scans = 0;

  // High-res maps of the last selection, kept so repeated queries skip the
  // bank (and the disk, for spilled frames).
  const FeatureMap* detail_map(std::uint64_t frame) const {
    auto it = detail_maps_.find(frame);
    return it == detail_maps_.end() ? nullptr : &it->second;
  }

  void keep_detail_maps(const std::vector<DamEntry>& entries) {
    detail_maps_.clear();
    for (const auto& e : entries) detail_maps_.emplace(e.frame_index, e.feature);
  }

 private:
  std::unordered_map<const std::vector<double>*, Entry> entries_;
  std::unordered_map<std::uint64_t, FeatureMap> detail_maps_;
  std::map<std::pair<const std::vector<double>*, std::size_t>, std::pair<CentroidPtr, FeatureMap>> rendered_;
};

namespace detail {

// Lower is better; ties resolve to the lower frame index by scan order.
inline double feature_score(RetrievalPolicy policy, std::span<const float> frame, std::span<const double> anchor) {
  if (policy == RetrievalPolicy::CosineSimilarity) return -cosine_similarity(frame, anchor);
  return squared_distance(frame, anchor);
}

inline double reported_distance(RetrievalPolicy policy, double score) {
  if (policy == RetrievalPolicy::CosineSimilarity) return 1.0 + score;  // 1 - cos
  return std::sqrt(score);
}

// Merges frames [begin, end) into `top`, keeping the `depth` best.
inline void scan_frames(const FeatureBank& low_bank, RetrievalPolicy policy, std::span<const double> anchor,
                        std::uint64_t begin, std::uint64_t end, std::size_t depth, Candidates& top) {
  for (std::uint64_t i = begin; i < end; ++i) {
    auto values = low_bank.values(i);
    const std::pair<double, std::uint64_t> c{feature_score(policy, std::span<const float>(*values), anchor), i};
    if (top.size() >= depth && !(c < top.back())) continue;
    top.insert(std::upper_bound(top.begin(), top.end(), c), c);
    if (top.size() > depth) top.pop_back();
  }
}

// Frame nearest to a fractional position; ties to the lower index.
inline std::uint64_t nearest_free_frame(double position, std::uint64_t limit,
                                        const std::unordered_set<std::uint64_t>& taken, double& distance) {
  auto clamp = [&](double p) {
    return static_cast<std::int64_t>(std::clamp(p, 0.0, static_cast<double>(limit - 1)));
  };
  std::int64_t lo = clamp(std::floor(position));
  std::int64_t hi = lo + 1;
  const auto last = static_cast<std::int64_t>(limit) - 1;
  while (lo >= 0 || hi <= last) {
    double dlo = lo >= 0 ? std::abs(position - static_cast<double>(lo)) : std::numeric_limits<double>::infinity();
    double dhi = hi <= last ? std::abs(static_cast<double>(hi) - position) : std::numeric_limits<double>::infinity();
    if (dlo <= dhi) {
      if (!taken.contains(static_cast<std::uint64_t>(lo))) {
        distance = dlo;
        return static_cast<std::uint64_t>(lo);
      }
      --lo;
    } else {
      if (!taken.contains(static_cast<std::uint64_t>(hi))) {
        distance = dhi;
        return static_cast<std::uint64_t>(hi);
      }
      ++hi;
    }
  }
  throw Error(ErrorKind::InvalidState, "no free frame for temporal anchor");
}

}  // namespace detail

// Selects key frames for the anchors chosen by `opts.selection` over the
// first state.frames_seen() frames of the banks and loads their high-res
// maps. Anchors are processed in selection order; a frame already taken by
// an earlier anchor is excluded and the later anchor takes its next-best
// frame. `cache` may be null.
inline DamState retrieve_key_frames(const ClusterState& state, const FeatureBank& low_bank,
                                    const FeatureBank& high_bank, const RetrievalOptions& opts,
                                    RetrievalCache* cache = nullptr) {
  DamState dam;
  const std::uint64_t t = state.frames_seen();
  dam.frames_seen = t;
  if (state.empty() || opts.n_dam == 0) return dam;
  if (low_bank.count() < t) {
    throw Error(ErrorKind::BankIntegrity, "low-res bank holds " + std::to_string(low_bank.count()) + " of " +
                                              std::to_string(t) + " frames");
  }
  if (high_bank.count() < t) {
    throw Error(ErrorKind::BankIntegrity, "high-res bank holds " + std::to_string(high_bank.count()) + " of " +
                                              std::to_string(t) + " frames");
  }

  auto anchors = select_anchors(state, opts.selection, opts.n_dam);
  std::unordered_set<std::uint64_t> taken;

  auto add = [&](std::uint64_t frame, std::uint32_t cluster, std::uint32_t rank, double distance) {
    taken.insert(frame);
    const FeatureMap* kept = cache ? cache->detail_map(frame) : nullptr;
    dam.entries.push_back(DamEntry{frame, cluster, rank, distance, kept ? *kept : high_bank.read(frame)});
  };

  if (opts.retrieval == RetrievalPolicy::UniformSample) {
    const std::uint64_t k = anchors.size();
    for (std::uint64_t j = 0; j < k; ++j) add(j * t / k, kNoAnchor, static_cast<std::uint32_t>(j), 0.0);
    if (cache) cache->keep_detail_maps(dam.entries);
    return dam;
  }

  for (std::uint32_t rank = 0; rank < anchors.size(); ++rank) {
    const std::uint32_t k = anchors[rank];
    if (opts.retrieval == RetrievalPolicy::TemporalCentric) {
      double d = 0.0;
      auto frame = detail::nearest_free_frame(state.position(k), t, taken, d);
      add(frame, k, rank, d);
      continue;
    }

    const auto& anchor_ptr = state.cluster(k).centroid;
    std::span<const double> anchor(*anchor_ptr);
    const std::size_t depth = anchors.size();
    RetrievalCache::Entry* entry = cache ? cache->find(anchor_ptr, opts.retrieval, depth, t) : nullptr;
    Candidates local;
    Candidates* top = &local;
    std::uint64_t from = 0;
    if (entry) {
      top = &entry->top;
      from = entry->scanned;
      ++cache->incremental_scans;
    } else if (cache) {
      entry = &cache->put(anchor_ptr, opts.retrieval, depth);
      top = &entry->top;
      ++cache->full_scans;
    }
    detail::scan_frames(low_bank, opts.retrieval, anchor, from, t, depth, *top);
    if (entry) entry->scanned = t;
    // at most rank < depth frames are taken, so a free candidate exists
    auto pick = std::find_if(top->begin(), top->end(), [&](const auto& c) { return !taken.contains(c.second); });
    add(pick->second, k, rank, detail::reported_distance(opts.retrieval, pick->first));
  }
  if (cache) {
    cache->retain(state);
    cache->keep_detail_maps(dam.entries);
  }
  return dam;
}

}  // namespace vstream
