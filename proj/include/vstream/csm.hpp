#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vstream/config.hpp"
#include "vstream/distance.hpp"
#include "vstream/errors.hpp"
#include "vstream/types.hpp"

namespace vstream {

using CentroidPtr = std::shared_ptr<const std::vector<double>>;

struct Cluster {
  CentroidPtr centroid;
  std::uint64_t weight = 0;        // number of frames represented
  std::uint64_t position_sum = 0;  // sum of member frame indices
};

// Context Synopsis Memory: weighted cluster centroids over the low-res
// stream. Centroids are held in double; unchanged centroids share storage
// between successive states, so copying a state is O(n_csm).
//
// The optional pairwise-distance cache holds squared distances between all
// centroids (row-major, size() x size()). It is derived data and does not
// take part in equality or serialization.
class ClusterState {
 public:
  ClusterState() = default;

  explicit ClusterState(GridShape shape) : shape_(shape) {}

  ClusterState(GridShape shape, std::vector<Cluster> clusters, std::uint64_t frames_seen,
               std::shared_ptr<const std::vector<double>> pair_cache = {})
      : shape_(shape), clusters_(std::move(clusters)), frames_seen_(frames_seen), pair_cache_(std::move(pair_cache)) {
    for (const auto& c : clusters_) {
      if (!c.centroid || c.centroid->size() != shape_.elements()) {
        throw Error(ErrorKind::InvalidState, "centroid size does not match cluster grid");
      }
      if (c.weight == 0) throw Error(ErrorKind::InvalidState, "cluster with zero weight");
    }
    if (pair_cache_ && pair_cache_->size() != clusters_.size() * clusters_.size()) pair_cache_.reset();
  }

  const GridShape& shape() const { return shape_; }
  std::size_t size() const { return clusters_.size(); }
  bool empty() const { return clusters_.empty(); }
  std::uint64_t frames_seen() const { return frames_seen_; }

  const Cluster& cluster(std::size_t k) const { return clusters_.at(k); }
  const std::vector<Cluster>& clusters() const { return clusters_; }
  std::span<const double> centroid(std::size_t k) const { return *clusters_.at(k).centroid; }
  std::uint64_t weight(std::size_t k) const { return clusters_.at(k).weight; }
  std::uint64_t position_sum(std::size_t k) const { return clusters_.at(k).position_sum; }

  // Mean member frame index of cluster k.
  double position(std::size_t k) const {
    const auto& c = clusters_.at(k);
    return static_cast<double>(c.position_sum) / static_cast<double>(c.weight);
  }

  std::uint64_t total_weight() const {
    std::uint64_t s = 0;
    for (const auto& c : clusters_) s += c.weight;
    return s;
  }

  const std::shared_ptr<const std::vector<double>>& pair_cache() const { return pair_cache_; }

  // Builds the pairwise cache when missing. O(n^2 d).
  const std::vector<double>& ensure_pair_cache() const {
    if (!pair_cache_) {
      const std::size_t n = clusters_.size();
      auto cache = std::make_shared<std::vector<double>>(n * n, 0.0);
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
          double d = squared_distance(centroid(a), centroid(b));
          (*cache)[a * n + b] = d;
          (*cache)[b * n + a] = d;
        }
      }
      pair_cache_ = std::move(cache);
    }
    return *pair_cache_;
  }

  friend bool operator==(const ClusterState& a, const ClusterState& b) {
    if (!(a.shape_ == b.shape_) || a.frames_seen_ != b.frames_seen_ || a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const auto& x = a.clusters_[k];
      const auto& y = b.clusters_[k];
      if (x.weight != y.weight || x.position_sum != y.position_sum) return false;
      if (x.centroid != y.centroid &&
          std::memcmp(x.centroid->data(), y.centroid->data(), x.centroid->size() * sizeof(double)) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  GridShape shape_{};
  std::vector<Cluster> clusters_;
  std::uint64_t frames_seen_ = 0;
  mutable std::shared_ptr<const std::vector<double>> pair_cache_;
};

inline CentroidPtr to_centroid(const FeatureMap& f) {
  auto v = f.values();
  return std::make_shared<const std::vector<double>>(v.begin(), v.end());
}

// Centroid as a low-res feature map (rounded to f32 storage precision).
inline FeatureMap centroid_feature(const ClusterState& s, std::size_t k, std::uint64_t frame_index) {
  auto c = s.centroid(k);
  std::vector<float> values(c.begin(), c.end());
  return FeatureMap(frame_index, Tier::Low, s.shape(), std::move(values));
}

namespace detail {
inline void check_next_low(const ClusterState& state, const FeatureMap& f) {
  if (f.tier() != Tier::Low) {
    throw Error(ErrorKind::TierMismatch, "CSM consumes low-res maps, frame " + std::to_string(f.frame_index()) + " is high");
  }
  if (!(f.shape() == state.shape())) throw Error(ErrorKind::InvalidState, "frame grid does not match CSM grid");
  if (f.frame_index() != state.frames_seen()) {
    throw Error(ErrorKind::Sequencing, "CSM expected frame " + std::to_string(state.frames_seen()) + ", got " +
                                           std::to_string(f.frame_index()));
  }
}
}  // namespace detail

// Adds `f` as a singleton cluster (warm-up). Extends the pair cache if one
// is present.
inline ClusterState csm_append(const ClusterState& state, const FeatureMap& f) {
  detail::check_next_low(state, f);
  auto clusters = state.clusters();
  clusters.push_back(Cluster{to_centroid(f), 1, f.frame_index()});
  std::shared_ptr<const std::vector<double>> cache;
  if (const auto& old = state.pair_cache()) {
    const std::size_t n = state.size();
    auto grown = std::make_shared<std::vector<double>>((n + 1) * (n + 1), 0.0);
    for (std::size_t a = 0; a < n; ++a) {
      std::copy_n(old->begin() + static_cast<std::ptrdiff_t>(a * n), n,
                  grown->begin() + static_cast<std::ptrdiff_t>(a * (n + 1)));
    }
    for (std::size_t a = 0; a < n; ++a) {
      double d = squared_distance(state.centroid(a), std::span<const double>(*clusters.back().centroid));
      (*grown)[a * (n + 1) + n] = d;
      (*grown)[n * (n + 1) + a] = d;
    }
    cache = std::move(grown);
  }
  return ClusterState(state.shape(), std::move(clusters), state.frames_seen() + 1, std::move(cache));
}

// One singleton cluster per frame, in order.
inline ClusterState csm_init(std::span<const FeatureMap> frames, const MemoryConfig& config) {
  if (frames.size() > config.n_csm) {
    throw Error(ErrorKind::InvalidState, "csm_init given " + std::to_string(frames.size()) + " frames for capacity " +
                                             std::to_string(config.n_csm));
  }
  ClusterState state(grid_shape(config, Tier::Low));
  for (const auto& f : frames) state = csm_append(state, f);
  return state;
}

struct CsmUpdateResult {
  ClusterState state;
  // Cluster of each input point: entries 0..n-1 are the previous centroids,
  // entry n is the new frame.
  std::vector<std::uint32_t> assignment;
  std::uint32_t iterations = 0;
  std::uint32_t repairs = 0;
};

// Weighted Lloyd iteration over {previous centroids, new frame} into the same
// number of clusters.
//
//  * Centroids start at the previous centroids (warm start).
//  * Each pass assigns every point to its nearest centroid by squared
//    Euclidean distance; ties go to the lowest cluster index.
//  * A cluster left empty is reseeded with the point farthest from its
//    assigned centroid, taken from a cluster with more than one point (ties
//    to the lowest point index). Empty clusters are repaired in ascending
//    order.
//  * Centroids become the weighted mean of their members, summed in point
//    order; a cluster with a single member takes that point exactly.
//  * Stops after max_iters passes, or early when a pass reproduces the
//    previous assignment.
//
// Weights and position sums of merged points add, so P = position_sum /
// weight stays the exact mean member frame index.
inline CsmUpdateResult csm_update(const ClusterState& state, const FeatureMap& f, std::uint32_t max_iters) {
  detail::check_next_low(state, f);
  if (state.empty()) throw Error(ErrorKind::InvalidState, "csm_update on an empty state");
  if (max_iters == 0) throw Error(ErrorKind::InvalidConfig, "kmeans_max_iters must be at least 1");

  const std::size_t n = state.size();
  const std::size_t np = n + 1;
  const std::size_t len = state.shape().elements();

  std::vector<CentroidPtr> points(np);
  std::vector<std::uint64_t> pw(np), pp(np);
  for (std::size_t i = 0; i < n; ++i) {
    points[i] = state.cluster(i).centroid;
    pw[i] = state.weight(i);
    pp[i] = state.position_sum(i);
  }
  points[n] = to_centroid(f);
  pw[n] = 1;
  pp[n] = f.frame_index();

  const auto& pair = state.ensure_pair_cache();
  auto point_span = [&](std::size_t i) { return std::span<const double>(*points[i]); };

  // dist[i * n + j]: squared distance from point i to current centroid j.
  std::vector<double> dist(np * n);
  std::copy(pair.begin(), pair.end(), dist.begin());
  for (std::size_t j = 0; j < n; ++j) dist[n * n + j] = squared_distance(point_span(n), point_span(j));

  std::vector<CentroidPtr> cent(points.begin(), points.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::ptrdiff_t> src(n);  // point a centroid coincides with, or -1
  for (std::size_t j = 0; j < n; ++j) src[j] = static_cast<std::ptrdiff_t>(j);

  std::vector<std::uint32_t> assign(np), prev;
  std::vector<std::uint32_t> counts(n);
  CsmUpdateResult result;

  for (std::uint32_t it = 0; it < max_iters; ++it) {
    std::fill(counts.begin(), counts.end(), 0u);
    for (std::size_t i = 0; i < np; ++i) {
      const double* row = dist.data() + i * n;
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j) {
        if (row[j] < row[best]) best = j;
      }
      assign[i] = static_cast<std::uint32_t>(best);
      ++counts[best];
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (counts[j] != 0) continue;
      std::ptrdiff_t far = -1;
      double far_d = -1.0;
      for (std::size_t i = 0; i < np; ++i) {
        if (counts[assign[i]] < 2) continue;
        double d = dist[i * n + assign[i]];
        if (d > far_d) {
          far_d = d;
          far = static_cast<std::ptrdiff_t>(i);
        }
      }
      // n + 1 points over n clusters: some cluster always has two members
      --counts[assign[static_cast<std::size_t>(far)]];
      assign[static_cast<std::size_t>(far)] = static_cast<std::uint32_t>(j);
      counts[j] = 1;
      ++result.repairs;
    }
    result.iterations = it + 1;
    if (it > 0 && assign == prev) break;

    for (std::size_t j = 0; j < n; ++j) {
      std::ptrdiff_t only = -1;
      std::uint64_t wsum = 0;
      for (std::size_t i = 0; i < np; ++i) {
        if (assign[i] != j) continue;
        only = static_cast<std::ptrdiff_t>(i);
        wsum += pw[i];
      }
      CentroidPtr next;
      std::ptrdiff_t next_src = -1;
      if (counts[j] == 1) {
        next = points[static_cast<std::size_t>(only)];
        next_src = only;
      } else {
        std::vector<double> acc(len, 0.0);
        for (std::size_t i = 0; i < np; ++i) {
          if (assign[i] != j) continue;
          const double w = static_cast<double>(pw[i]);
          const auto& x = *points[i];
          for (std::size_t e = 0; e < len; ++e) acc[e] += w * x[e];
        }
        const double total = static_cast<double>(wsum);
        for (auto& v : acc) v /= total;
        next = std::make_shared<const std::vector<double>>(std::move(acc));
      }
      if (next == cent[j]) continue;
      cent[j] = std::move(next);
      src[j] = next_src;
      for (std::size_t i = 0; i < np; ++i) {
        if (next_src >= 0 && static_cast<std::size_t>(next_src) < n && i < n) {
          dist[i * n + j] = pair[i * n + static_cast<std::size_t>(next_src)];
        } else {
          dist[i * n + j] = squared_distance(point_span(i), std::span<const double>(*cent[j]));
        }
      }
    }
    prev = assign;
  }

  std::vector<Cluster> clusters(n);
  for (std::size_t j = 0; j < n; ++j) clusters[j].centroid = cent[j];
  for (std::size_t i = 0; i < np; ++i) {
    clusters[assign[i]].weight += pw[i];
    clusters[assign[i]].position_sum += pp[i];
  }

  auto cache = std::make_shared<std::vector<double>>(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double d;
      if (src[a] >= 0) d = dist[static_cast<std::size_t>(src[a]) * n + b];
      else if (src[b] >= 0) d = dist[static_cast<std::size_t>(src[b]) * n + a];
      else d = squared_distance(std::span<const double>(*cent[a]), std::span<const double>(*cent[b]));
      (*cache)[a * n + b] = d;
      (*cache)[b * n + a] = d;
    }
  }

  result.state = ClusterState(state.shape(), std::move(clusters), state.frames_seen() + 1, std::move(cache));
  result.assignment = std::move(assign);
  return result;
}

// Warm-up append below capacity, weighted K-means update at capacity.
inline ClusterState csm_consolidate(const ClusterState& state, const FeatureMap& f, const MemoryConfig& config) {
  if (state.size() < config.n_csm) return csm_append(state, f);
  return csm_update(state, f, config.kmeans_max_iters).state;
}

inline std::vector<double> csm_positions(const ClusterState& state) {
  std::vector<double> out(state.size());
  for (std::size_t k = 0; k < state.size(); ++k) out[k] = state.position(k);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint encoding. Little-endian:
//   "VSCS" | u16 version | u16 h | u16 w | u16 dim | u32 clusters |
//   u64 frames_seen | per cluster: u64 weight, u64 position_sum, f64 x len
// ---------------------------------------------------------------------------

namespace detail {
inline void append_le(std::string& out, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}
inline std::uint64_t read_le(std::string_view in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) {
    throw Error(ErrorKind::Parse, "cluster checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= std::uint64_t{static_cast<unsigned char>(in[pos + static_cast<std::size_t>(b)])} << (8 * b);
  pos += static_cast<std::size_t>(bytes);
  return v;
}
}  // namespace detail

inline std::string serialize_state(const ClusterState& s) {
  std::string out = "VSCS";
  detail::append_le(out, 1, 2);
  detail::append_le(out, s.shape().h, 2);
  detail::append_le(out, s.shape().w, 2);
  detail::append_le(out, s.shape().dim, 2);
  detail::append_le(out, s.size(), 4);
  detail::append_le(out, s.frames_seen(), 8);
  for (const auto& c : s.clusters()) {
    detail::append_le(out, c.weight, 8);
    detail::append_le(out, c.position_sum, 8);
    for (double v : *c.centroid) detail::append_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline ClusterState deserialize_state(std::string_view in) {
  if (in.substr(0, 4) != "VSCS") throw Error(ErrorKind::Parse, "cluster checkpoint: bad magic");
  std::size_t pos = 4;
  if (detail::read_le(in, pos, 2) != 1) throw Error(ErrorKind::Parse, "cluster checkpoint: unsupported version");
  GridShape shape;
  shape.h = static_cast<std::uint16_t>(detail::read_le(in, pos, 2));
  shape.w = static_cast<std::uint16_t>(detail::read_le(in, pos, 2));
  shape.dim = static_cast<std::uint16_t>(detail::read_le(in, pos, 2));
  auto n = detail::read_le(in, pos, 4);
  auto frames_seen = detail::read_le(in, pos, 8);
  std::vector<Cluster> clusters(n);
  for (auto& c : clusters) {
    c.weight = detail::read_le(in, pos, 8);
    c.position_sum = detail::read_le(in, pos, 8);
    std::vector<double> v(shape.elements());
    for (auto& x : v) x = std::bit_cast<double>(detail::read_le(in, pos, 8));
    c.centroid = std::make_shared<const std::vector<double>>(std::move(v));
  }
  if (pos != in.size()) throw Error(ErrorKind::Parse, "cluster checkpoint: trailing bytes at " + std::to_string(pos));
  return ClusterState(shape, std::move(clusters), frames_seen);
}

}  // namespace vstream
