#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/dam.hpp"
#include "vstream/distance.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/log.hpp"
#include "vstream/rng.hpp"
#include "vstream/synth.hpp"

namespace vstream {

// Folds one low-res frame into a bounded memory of at most n_csm items.
// Policies may keep private state across calls (strides, thresholds), so an
// instance serves one stream.
class Consolidator {
 public:
  virtual ~Consolidator() = default;
  virtual ClusteringPolicy policy() const = 0;
  // False when items can be discarded, so total weight lags the frame count.
  virtual bool conserves_weight() const { return true; }
  virtual ClusterState consolidate(const ClusterState& state, const FeatureMap& low) = 0;
  std::uint64_t fallbacks() const { return fallbacks_; }

 protected:
  std::uint64_t fallbacks_ = 0;
};

namespace detail {

inline ClusterState skip_frame(const ClusterState& state, const FeatureMap& f) {
  check_next_low(state, f);
  return ClusterState(state.shape(), state.clusters(), state.frames_seen() + 1);
}

// Weighted mean of `members` drawn from `points`; a single member is copied.
inline CentroidPtr weighted_mean(const std::vector<CentroidPtr>& points, const std::vector<std::uint64_t>& weights,
                                 const std::vector<std::size_t>& members) {
  if (members.size() == 1) return points[members.front()];
  const std::size_t len = points[members.front()]->size();
  std::vector<double> acc(len, 0.0);
  std::uint64_t total = 0;
  for (auto i : members) {
    const double w = static_cast<double>(weights[i]);
    const auto& x = *points[i];
    for (std::size_t e = 0; e < len; ++e) acc[e] += w * x[e];
    total += weights[i];
  }
  for (auto& v : acc) v /= static_cast<double>(total);
  return std::make_shared<const std::vector<double>>(std::move(acc));
}

struct PointSet {
  std::vector<CentroidPtr> points;
  std::vector<std::uint64_t> weights;
  std::vector<std::uint64_t> positions;
};

// Previous items followed by the new frame.
inline PointSet gather_points(const ClusterState& state, const FeatureMap& f) {
  PointSet p;
  for (const auto& c : state.clusters()) {
    p.points.push_back(c.centroid);
    p.weights.push_back(c.weight);
    p.positions.push_back(c.position_sum);
  }
  p.points.push_back(to_centroid(f));
  p.weights.push_back(1);
  p.positions.push_back(f.frame_index());
  return p;
}

inline ClusterState build_state(const ClusterState& prev, const PointSet& p,
                                const std::vector<std::vector<std::size_t>>& groups) {
  std::vector<Cluster> clusters;
  clusters.reserve(groups.size());
  for (const auto& g : groups) {
    if (g.empty()) continue;
    Cluster c;
    c.centroid = weighted_mean(p.points, p.weights, g);
    for (auto i : g) {
      c.weight += p.weights[i];
      c.position_sum += p.positions[i];
    }
    clusters.push_back(std::move(c));
  }
  return ClusterState(prev.shape(), std::move(clusters), prev.frames_seen() + 1);
}

// Adjacent pair (i, i + 1) with the smallest squared distance; ties to the
// lowest i.
inline std::size_t closest_adjacent(const PointSet& p) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < p.points.size(); ++i) {
    double d = squared_distance(std::span<const double>(*p.points[i]), std::span<const double>(*p.points[i + 1]));
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace detail

class KMeansConsolidator final : public Consolidator {
 public:
  explicit KMeansConsolidator(const MemoryConfig& c) : config_(c) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::KMeans; }
  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    return csm_consolidate(state, low, config_);
  }

 private:
  MemoryConfig config_;
};

// Keeps frames whose index is a multiple of a stride that doubles whenever
// the memory would overflow. After 2n frames with capacity n it holds every
// second frame.
class UniformSampleConsolidator final : public Consolidator {
 public:
  explicit UniformSampleConsolidator(const MemoryConfig& c) : capacity_(c.n_csm) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::UniformSample; }
  bool conserves_weight() const override { return false; }
  std::uint64_t stride() const { return stride_; }

  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    const std::uint64_t t = low.frame_index();
    if (capacity_ == 0 || t % stride_ != 0) return detail::skip_frame(state, low);
    if (state.size() < capacity_) return csm_append(state, low);
    stride_ *= 2;
    std::vector<Cluster> kept;
    for (const auto& c : state.clusters()) {
      if (c.position_sum % stride_ == 0) kept.push_back(c);
    }
    ClusterState thinned(state.shape(), std::move(kept), state.frames_seen());
    if (t % stride_ == 0) return csm_append(thinned, low);
    return detail::skip_frame(thinned, low);
  }

 private:
  std::uint32_t capacity_;
  std::uint64_t stride_ = 1;
};

// Appends the frame, then merges the two most similar temporally adjacent
// items into their weighted mean.
class NeighborMergeConsolidator final : public Consolidator {
 public:
  explicit NeighborMergeConsolidator(const MemoryConfig& c) : capacity_(c.n_csm) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::NeighborMerge; }

  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    if (state.size() < capacity_) return csm_append(state, low);
    detail::check_next_low(state, low);
    auto p = detail::gather_points(state, low);
    const std::size_t m = detail::closest_adjacent(p);
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < p.points.size(); ++i) {
      if (i == m + 1) continue;
      groups.push_back(i == m ? std::vector<std::size_t>{m, m + 1} : std::vector<std::size_t>{i});
    }
    return detail::build_state(state, p, groups);
  }

 private:
  std::uint32_t capacity_;
};

// Like NeighborMerge, but keeps one of the two items at random and discards
// the other.
class NeighborDropConsolidator final : public Consolidator {
 public:
  explicit NeighborDropConsolidator(const MemoryConfig& c)
      : capacity_(c.n_csm), key_(CounterRng::derive_key(c.seed, 0x4e44)) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::NeighborDrop; }
  bool conserves_weight() const override { return false; }

  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    if (state.size() < capacity_) return csm_append(state, low);
    detail::check_next_low(state, low);
    auto p = detail::gather_points(state, low);
    const std::size_t m = detail::closest_adjacent(p);
    const std::size_t drop = (CounterRng::at(key_, low.frame_index()) & 1) ? m : m + 1;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < p.points.size(); ++i) {
      if (i != drop) groups.push_back({i});
    }
    return detail::build_state(state, p, groups);
  }

 private:
  std::uint32_t capacity_;
  std::uint64_t key_;
};

// DBSCAN over {items, new frame} with eps = 0.5 x median pairwise distance of
// the warm-up window and minPts = 2. Noise points become singletons; if more
// than n_csm groups remain, the lightest group is merged into the group with
// the nearest centroid until the capacity holds.
class DbscanConsolidator final : public Consolidator {
 public:
  explicit DbscanConsolidator(const MemoryConfig& c) : capacity_(c.n_csm) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::DBScan; }
  double eps() const { return eps_; }

  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    if (state.size() < capacity_) return csm_append(state, low);
    detail::check_next_low(state, low);
    if (eps_ < 0.0) eps_ = 0.5 * median_pairwise_distance(state);
    auto p = detail::gather_points(state, low);
    const std::size_t n = p.points.size();
    const double eps2 = eps_ * eps_;

    std::vector<double> d2(n * n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        double d = squared_distance(std::span<const double>(*p.points[a]), std::span<const double>(*p.points[b]));
        d2[a * n + b] = d2[b * n + a] = d;
      }
    }
    auto neighbors = [&](std::size_t i) {
      std::vector<std::size_t> out;
      for (std::size_t j = 0; j < n; ++j) {
        if (d2[i * n + j] <= eps2) out.push_back(j);
      }
      return out;
    };

    constexpr std::ptrdiff_t kUnset = -1;
    std::vector<std::ptrdiff_t> label(n, kUnset);
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) {
      if (label[i] != kUnset) continue;
      auto nb = neighbors(i);
      if (nb.size() < kMinPts) continue;  // noise unless reached as a border point
      const auto g = static_cast<std::ptrdiff_t>(groups.size());
      groups.emplace_back();
      std::vector<std::size_t> frontier{i};
      label[i] = g;
      while (!frontier.empty()) {
        auto q = frontier.back();
        frontier.pop_back();
        groups[static_cast<std::size_t>(g)].push_back(q);
        auto qn = neighbors(q);
        if (qn.size() < kMinPts) continue;
        for (auto r : qn) {
          if (label[r] == kUnset) {
            label[r] = g;
            frontier.push_back(r);
          }
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (label[i] == kUnset) groups.push_back({i});
    }
    for (auto& g : groups) std::sort(g.begin(), g.end());
    std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });

    while (groups.size() > capacity_) {
      std::vector<CentroidPtr> means;
      std::vector<std::uint64_t> mass;
      for (const auto& g : groups) {
        means.push_back(detail::weighted_mean(p.points, p.weights, g));
        std::uint64_t w = 0;
        for (auto i : g) w += p.weights[i];
        mass.push_back(w);
      }
      std::size_t light = 0;
      for (std::size_t g = 1; g < groups.size(); ++g) {
        if (mass[g] < mass[light]) light = g;
      }
      std::size_t target = light == 0 ? 1 : 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < groups.size(); ++g) {
        if (g == light) continue;
        double d = squared_distance(std::span<const double>(*means[light]), std::span<const double>(*means[g]));
        if (d < best) {
          best = d;
          target = g;
        }
      }
      groups[target].insert(groups[target].end(), groups[light].begin(), groups[light].end());
      std::sort(groups[target].begin(), groups[target].end());
      groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(light));
    }
    return detail::build_state(state, p, groups);
  }

 private:
  static constexpr std::size_t kMinPts = 2;

  static double median_pairwise_distance(const ClusterState& s) {
    std::vector<double> d;
    for (std::size_t a = 0; a < s.size(); ++a) {
      for (std::size_t b = a + 1; b < s.size(); ++b) d.push_back(std::sqrt(squared_distance(s.centroid(a), s.centroid(b))));
    }
    if (d.empty()) return 0.0;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
  }

  std::uint32_t capacity_;
  double eps_ = -1.0;
};

// Diagonal-covariance Gaussian mixture with K = n_csm, fitted by weighted EM
// (20 iterations) starting from the K-means update of the same points. Points
// are then hard-assigned to their most responsible component. A numerically
// failed fit keeps the previous memory and counts a fallback.
class GmmConsolidator final : public Consolidator {
 public:
  explicit GmmConsolidator(const MemoryConfig& c) : config_(c) {}
  ClusteringPolicy policy() const override { return ClusteringPolicy::GMM; }
  static constexpr int kIterations = 20;

  ClusterState consolidate(const ClusterState& state, const FeatureMap& low) override {
    if (state.size() < config_.n_csm) return csm_append(state, low);
    auto init = csm_update(state, low, config_.kmeans_max_iters);
    auto p = detail::gather_points(state, low);
    const std::size_t n = p.points.size();
    const std::size_t k = init.state.size();
    const std::size_t len = state.shape().elements();

    double total_w = 0.0;
    for (auto w : p.weights) total_w += static_cast<double>(w);
    std::vector<double> global_mean(len, 0.0), global_var(len, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t e = 0; e < len; ++e) global_mean[e] += static_cast<double>(p.weights[i]) * (*p.points[i])[e];
    }
    for (auto& v : global_mean) v /= total_w;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t e = 0; e < len; ++e) {
        double d = (*p.points[i])[e] - global_mean[e];
        global_var[e] += static_cast<double>(p.weights[i]) * d * d;
      }
    }
    double mean_var = 0.0;
    for (auto& v : global_var) {
      v /= total_w;
      mean_var += v;
    }
    mean_var /= static_cast<double>(len);
    const double floor = 1e-3 * mean_var + 1e-9;

    std::vector<double> mu(k * len), var(k * len), pi(k);
    for (std::size_t c = 0; c < k; ++c) {
      auto centroid = init.state.centroid(c);
      std::copy(centroid.begin(), centroid.end(), mu.begin() + static_cast<std::ptrdiff_t>(c * len));
      for (std::size_t e = 0; e < len; ++e) var[c * len + e] = global_var[e] + floor;
      pi[c] = static_cast<double>(init.state.weight(c)) / total_w;
    }

    std::vector<double> resp(n * k);
    bool ok = true;
    for (int it = 0; it < kIterations && ok; ++it) {
      // E step
      std::vector<double> inv_var(k * len), log_norm(k);
      for (std::size_t c = 0; c < k; ++c) {
        double ln = 0.0;
        for (std::size_t e = 0; e < len; ++e) {
          inv_var[c * len + e] = 1.0 / var[c * len + e];
          ln += std::log(2.0 * std::numbers::pi * var[c * len + e]);
        }
        log_norm[c] = ln;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto& x = *p.points[i];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double* m = mu.data() + c * len;
          const double* iv = inv_var.data() + c * len;
          double q = 0.0;
          for (std::size_t e = 0; e < len; ++e) {
            double d = x[e] - m[e];
            q += d * d * iv[e];
          }
          double lp = pi[c] > 0.0 ? std::log(pi[c]) - 0.5 * (log_norm[c] + q) : -std::numeric_limits<double>::infinity();
          resp[i * k + c] = lp;
          mx = std::max(mx, lp);
        }
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += (resp[i * k + c] = std::exp(resp[i * k + c] - mx));
        for (std::size_t c = 0; c < k; ++c) resp[i * k + c] /= s;
      }
      // M step
      for (std::size_t c = 0; c < k; ++c) {
        double nk = 0.0;
        for (std::size_t i = 0; i < n; ++i) nk += static_cast<double>(p.weights[i]) * resp[i * k + c];
        if (nk < 1e-12) continue;
        pi[c] = nk / total_w;
        double* m = mu.data() + c * len;
        double* v = var.data() + c * len;
        std::fill(m, m + len, 0.0);
        std::fill(v, v + len, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double r = static_cast<double>(p.weights[i]) * resp[i * k + c];
          if (r == 0.0) continue;
          const auto& x = *p.points[i];
          for (std::size_t e = 0; e < len; ++e) m[e] += r * x[e];
        }
        for (std::size_t e = 0; e < len; ++e) m[e] /= nk;
        for (std::size_t i = 0; i < n; ++i) {
          const double r = static_cast<double>(p.weights[i]) * resp[i * k + c];
          if (r == 0.0) continue;
          const auto& x = *p.points[i];
          for (std::size_t e = 0; e < len; ++e) {
            double d = x[e] - m[e];
            v[e] += r * d * d;
          }
        }
        for (std::size_t e = 0; e < len; ++e) v[e] = v[e] / nk + floor;
      }
      ok = std::all_of(resp.begin(), resp.end(), [](double r) { return std::isfinite(r); }) &&
           std::all_of(mu.begin(), mu.end(), [](double m) { return std::isfinite(m); });
    }
    if (!ok) {
      ++fallbacks_;
      log::warn("gmm: EM diverged at frame {}, keeping previous memory", low.frame_index());
      return detail::skip_frame(state, low);
    }

    std::vector<std::vector<std::size_t>> groups(k);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (resp[i * k + c] > resp[i * k + best]) best = c;
      }
      groups[best].push_back(i);
    }
    return detail::build_state(state, p, groups);
  }

 private:
  MemoryConfig config_;
};

inline std::unique_ptr<Consolidator> make_consolidator(ClusteringPolicy policy, const MemoryConfig& config) {
  switch (policy) {
    case ClusteringPolicy::KMeans: return std::make_unique<KMeansConsolidator>(config);
    case ClusteringPolicy::DBScan: return std::make_unique<DbscanConsolidator>(config);
    case ClusteringPolicy::GMM: return std::make_unique<GmmConsolidator>(config);
    case ClusteringPolicy::NeighborMerge: return std::make_unique<NeighborMergeConsolidator>(config);
    case ClusteringPolicy::NeighborDrop: return std::make_unique<NeighborDropConsolidator>(config);
    case ClusteringPolicy::UniformSample: return std::make_unique<UniformSampleConsolidator>(config);
  }
  throw Error(ErrorKind::InvalidConfig, "unknown clustering policy");
}

// ---------------------------------------------------------------------------
// Capacity allocation grid
// ---------------------------------------------------------------------------

// One (R_CSM, R_pool) cell under a fixed LLM-token total. Sizes are derived
// at Table-1 token granularity: low maps carry `low_tokens` LLM tokens, high
// maps `low_tokens * r_pool`.
struct CapacityCell {
  double r_csm = 0.0;
  std::uint32_t r_pool = 1;
  std::uint32_t n_csm = 0;
  std::uint32_t n_dam = 0;
  std::uint64_t tokens = 0;
  bool valid = false;
  std::string reason;
};

inline CapacityCell capacity_cell(double r_csm, std::uint32_t r_pool, std::uint64_t total_tokens = 11520,
                                  std::uint64_t low_tokens = 64, std::uint64_t budget_limit = 12000) {
  CapacityCell cell;
  cell.r_csm = r_csm;
  cell.r_pool = r_pool;
  const auto csm_frames = static_cast<std::uint64_t>(std::llround(r_csm * static_cast<double>(total_tokens) /
                                                                  static_cast<double>(low_tokens)));
  const std::uint64_t csm_tokens = csm_frames * low_tokens;
  const std::uint64_t high_tokens = low_tokens * r_pool;
  const std::uint64_t dam_frames = csm_tokens > total_tokens || r_pool == 0 ? 0 : (total_tokens - csm_tokens) / high_tokens;
  cell.n_csm = static_cast<std::uint32_t>(csm_frames);
  cell.n_dam = static_cast<std::uint32_t>(dam_frames);
  cell.tokens = csm_tokens + dam_frames * high_tokens;
  if (r_pool == 0) cell.reason = "pool ratio must be positive";
  else if (csm_frames == 0) cell.reason = "no CSM capacity";
  else if (dam_frames > csm_frames) cell.reason = "n_dam exceeds n_csm";
  else if (cell.tokens > budget_limit) cell.reason = "token budget exceeded";
  cell.valid = cell.reason.empty();
  return cell;
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

struct PolicyCase {
  ClusteringPolicy clustering = ClusteringPolicy::KMeans;
  RetrievalPolicy retrieval = RetrievalPolicy::FeatureCentric;
  SelectionPolicy selection = SelectionPolicy::TopKLargest;
};

struct PolicyMetrics {
  PolicyCase policy;
  double r_csm = 0.0;
  std::uint32_t r_pool = 0;
  std::uint32_t n_csm = 0;
  std::uint32_t n_dam = 0;
  std::uint64_t tokens = 0;
  bool valid = true;
  std::string note;
  std::uint64_t steps = 0;
  double mean_update_ns = 0.0;
  double median_update_ns = 0.0;
  // Mean over all frames of the squared distance to the nearest memory item.
  double within_cluster_variance = 0.0;
  std::size_t memory_items = 0;
  std::uint64_t total_weight = 0;
  bool weight_conserved = true;
  std::uint64_t fallbacks = 0;
  // Jaccard overlap of DAM frame selections with the default pipeline.
  double selection_overlap = 1.0;
};

// Mean squared distance of every banked low-res frame to its nearest item.
inline double memory_distortion(const ClusterState& state, const FeatureBank& low_bank, std::uint64_t frames) {
  if (state.empty() || frames == 0) return 0.0;
  double total = 0.0;
  for (std::uint64_t i = 0; i < frames; ++i) {
    auto v = low_bank.values(i);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < state.size(); ++k) {
      best = std::min(best, squared_distance(std::span<const float>(*v), state.centroid(k)));
    }
    total += best;
  }
  return total / static_cast<double>(frames);
}

inline double jaccard(std::vector<std::uint64_t> a, std::vector<std::uint64_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::uint64_t> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  const double uni = static_cast<double>(a.size() + b.size() - common.size());
  return static_cast<double>(common.size()) / uni;
}

struct PolicyRun {
  ClusterState state;
  std::vector<double> update_ns;  // per step
  std::uint64_t fallbacks = 0;
  bool conserves_weight = true;
};

// Streams `frames` through a fresh consolidator, timing every update.
inline PolicyRun run_policy(ClusteringPolicy policy, const MemoryConfig& config, const std::vector<FramePair>& frames) {
  auto consolidator = make_consolidator(policy, config);
  PolicyRun run;
  run.state = ClusterState(grid_shape(config, Tier::Low));
  run.update_ns.reserve(frames.size());
  for (const auto& f : frames) {
    auto t0 = std::chrono::steady_clock::now();
    run.state = consolidator->consolidate(run.state, f.low);
    auto t1 = std::chrono::steady_clock::now();
    run.update_ns.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  run.fallbacks = consolidator->fallbacks();
  run.conserves_weight = consolidator->conserves_weight();
  return run;
}

namespace detail {
inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}
}  // namespace detail

// Runs every case against one generated stream at one memory configuration.
// The stream shapes follow `config`.
inline std::vector<PolicyMetrics> bench_policies(const StreamSpec& spec, const std::vector<PolicyCase>& cases,
                                                 const MemoryConfig& config) {
  validate(config);
  auto stream_spec = spec;
  stream_spec.low_side = static_cast<std::uint16_t>(grid_side(config, Tier::Low));
  stream_spec.pool_side = static_cast<std::uint16_t>(grid_side(config, Tier::High) / stream_spec.low_side);
  stream_spec.dim = static_cast<std::uint16_t>(config.dim);
  const auto frames = generate(stream_spec);

  FeatureBank low_bank(Tier::Low, stream_spec.low_shape());
  FeatureBank high_bank(Tier::High, stream_spec.high_shape());
  for (const auto& f : frames) {
    low_bank.append(f.low);
    high_bank.append(f.high);
  }

  auto reference = run_policy(ClusteringPolicy::KMeans, config, frames);
  auto reference_frames =
      retrieve_key_frames(reference.state, low_bank, high_bank, RetrievalOptions{.n_dam = config.n_dam}).frame_indices();

  std::vector<PolicyMetrics> rows;
  for (const auto& pc : cases) {
    auto run = pc.clustering == ClusteringPolicy::KMeans ? reference : run_policy(pc.clustering, config, frames);
    PolicyMetrics m;
    m.policy = pc;
    m.r_csm = csm_token_fraction(config);
    m.r_pool = config.pool_ratio;
    m.n_csm = config.n_csm;
    m.n_dam = config.n_dam;
    m.tokens = token_budget(config);
    m.steps = frames.size();
    double sum = 0.0;
    for (auto v : run.update_ns) sum += v;
    m.mean_update_ns = run.update_ns.empty() ? 0.0 : sum / static_cast<double>(run.update_ns.size());
    m.median_update_ns = detail::median_of(run.update_ns);
    m.within_cluster_variance = memory_distortion(run.state, low_bank, frames.size());
    m.memory_items = run.state.size();
    m.total_weight = run.state.total_weight();
    m.weight_conserved = run.state.total_weight() == frames.size();
    if (!run.conserves_weight) m.note = "policy discards frames; weight not conserved";
    m.fallbacks = run.fallbacks;
    auto dam = retrieve_key_frames(run.state, low_bank, high_bank, RetrievalOptions{pc.retrieval, pc.selection, config.n_dam});
    m.selection_overlap = jaccard(dam.frame_indices(), reference_frames);
    rows.push_back(std::move(m));
  }
  return rows;
}

// Grid search over (R_CSM, R_pool) under a fixed token total. Memory sizes
// come from Table-1 token accounting; the stream runs at `base` feature
// dimensions with the high grid scaled by sqrt(R_pool). Invalid cells yield a
// row flagged invalid with no metrics.
inline std::vector<PolicyMetrics> bench_capacity_grid(const StreamSpec& spec, const std::vector<PolicyCase>& cases,
                                                      const MemoryConfig& base, const std::vector<double>& r_csm,
                                                      const std::vector<std::uint32_t>& r_pool,
                                                      std::uint64_t total_tokens = 11520) {
  std::vector<PolicyMetrics> rows;
  for (double rc : r_csm) {
    for (std::uint32_t rp : r_pool) {
      auto cell = capacity_cell(rc, rp, total_tokens);
      MemoryConfig c = base;
      c.n_csm = cell.n_csm;
      c.n_dam = cell.n_dam;
      c.pool_ratio = rp;
      c.spatial_size_high = base.spatial_size_low * rp;
      c.budget_limit = kUnlimited;
      bool shape_ok = detail::exact_sqrt(rp) != 0;
      if (!cell.valid || !shape_ok) {
        for (const auto& pc : cases) {
          PolicyMetrics m;
          m.policy = pc;
          m.r_csm = rc;
          m.r_pool = rp;
          m.n_csm = cell.n_csm;
          m.n_dam = cell.n_dam;
          m.tokens = cell.tokens;
          m.valid = false;
          m.note = cell.valid ? "pool ratio is not a perfect square" : cell.reason;
          rows.push_back(std::move(m));
        }
        continue;
      }
      for (auto& m : bench_policies(spec, cases, c)) {
        m.r_csm = rc;
        m.tokens = cell.tokens;
        rows.push_back(std::move(m));
      }
    }
  }
  return rows;
}

}  // namespace vstream
