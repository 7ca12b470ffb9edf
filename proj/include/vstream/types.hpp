#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vstream/errors.hpp"

namespace vstream {

enum class Tier : std::uint8_t { Low = 0, High = 1 };

inline std::string_view to_string(Tier tier) { return tier == Tier::Low ? "low" : "high"; }

// Token grid of one feature map. Values are laid out row-major as
// ((y * w) + x) * dim + channel.
struct GridShape {
  std::uint16_t h = 0;
  std::uint16_t w = 0;
  std::uint16_t dim = 0;

  std::size_t spatial() const { return std::size_t{h} * w; }
  std::size_t elements() const { return spatial() * dim; }

  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// One frame's embedding grid. Immutable once constructed; copies share the
// underlying buffer.
class FeatureMap {
 public:
  FeatureMap() = default;

  FeatureMap(std::uint64_t frame_index, Tier tier, GridShape shape, std::vector<float> values)
      : FeatureMap(frame_index, tier, shape,
                   std::make_shared<const std::vector<float>>(std::move(values))) {}

  FeatureMap(std::uint64_t frame_index, Tier tier, GridShape shape,
             std::shared_ptr<const std::vector<float>> values)
      : frame_index_(frame_index), tier_(tier), shape_(shape), values_(std::move(values)) {
    if (!values_) throw Error(ErrorKind::InvalidState, "feature map without storage");
    if (values_->size() != shape_.elements()) {
      throw Error(ErrorKind::InvalidState,
                  "feature map has " + std::to_string(values_->size()) + " values, grid needs " +
                      std::to_string(shape_.elements()));
    }
    if (!std::all_of(values_->begin(), values_->end(), [](float v) { return std::isfinite(v); })) {
      throw Error(ErrorKind::NonFinite, "feature map " + std::to_string(frame_index_) +
                                            " contains NaN or Inf");
    }
  }

  std::uint64_t frame_index() const { return frame_index_; }
  Tier tier() const { return tier_; }
  const GridShape& shape() const { return shape_; }
  std::span<const float> values() const {
    return values_ ? std::span<const float>(*values_) : std::span<const float>();
  }
  const std::shared_ptr<const std::vector<float>>& storage() const { return values_; }
  bool empty() const { return !values_ || values_->empty(); }

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    if (a.frame_index_ != b.frame_index_ || a.tier_ != b.tier_ || !(a.shape_ == b.shape_)) {
      return false;
    }
    auto av = a.values();
    auto bv = b.values();
    // bitwise, so that -0.0f and 0.0f differ like they do on disk
    return av.size() == bv.size() &&
           std::equal(av.begin(), av.end(), bv.begin(), [](float x, float y) {
             return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
           });
  }

 private:
  std::uint64_t frame_index_ = 0;
  Tier tier_ = Tier::Low;
  GridShape shape_{};
  std::shared_ptr<const std::vector<float>> values_;
};

// AM-RoPE position of one LLM token.
struct PositionTriplet {
  double n_t = 0.0;
  std::uint32_t n_h = 0;
  std::uint32_t n_w = 0;

  friend bool operator==(const PositionTriplet&, const PositionTriplet&) = default;
};

enum class ClusteringPolicy { KMeans, DBScan, GMM, NeighborMerge, NeighborDrop, UniformSample };
enum class RetrievalPolicy { FeatureCentric, CosineSimilarity, TemporalCentric, UniformSample };
enum class SelectionPolicy { TopKLargest, TopKSmallest, UniformK };
enum class RopeScaleTarget { Dam, Csm };

inline std::string_view to_string(ClusteringPolicy p) {
  switch (p) {
    case ClusteringPolicy::KMeans: return "kmeans";
    case ClusteringPolicy::DBScan: return "dbscan";
    case ClusteringPolicy::GMM: return "gmm";
    case ClusteringPolicy::NeighborMerge: return "neighbor-merge";
    case ClusteringPolicy::NeighborDrop: return "neighbor-drop";
    case ClusteringPolicy::UniformSample: return "uniform";
  }
  return "?";
}

inline std::string_view to_string(RetrievalPolicy p) {
  switch (p) {
    case RetrievalPolicy::FeatureCentric: return "feature-centric";
    case RetrievalPolicy::CosineSimilarity: return "cosine";
    case RetrievalPolicy::TemporalCentric: return "temporal-centric";
    case RetrievalPolicy::UniformSample: return "uniform";
  }
  return "?";
}

inline std::string_view to_string(SelectionPolicy p) {
  switch (p) {
    case SelectionPolicy::TopKLargest: return "top-k-largest";
    case SelectionPolicy::TopKSmallest: return "top-k-smallest";
    case SelectionPolicy::UniformK: return "uniform-k";
  }
  return "?";
}

inline std::string_view to_string(RopeScaleTarget t) { return t == RopeScaleTarget::Dam ? "dam" : "csm"; }

namespace detail {
template <typename E, std::size_t N>
E parse_enum(std::string_view text, const E (&all)[N], std::string_view what) {
  for (E e : all) {
    if (to_string(e) == text) return e;
  }
  throw Error(ErrorKind::InvalidConfig, "unknown " + std::string(what) + " '" + std::string(text) + "'");
}
}  // namespace detail

inline ClusteringPolicy parse_clustering_policy(std::string_view s) {
  static constexpr ClusteringPolicy all[] = {
      ClusteringPolicy::KMeans,        ClusteringPolicy::DBScan,       ClusteringPolicy::GMM,
      ClusteringPolicy::NeighborMerge, ClusteringPolicy::NeighborDrop, ClusteringPolicy::UniformSample};
  return detail::parse_enum(s, all, "clustering policy");
}

inline RetrievalPolicy parse_retrieval_policy(std::string_view s) {
  static constexpr RetrievalPolicy all[] = {RetrievalPolicy::FeatureCentric, RetrievalPolicy::CosineSimilarity,
                                            RetrievalPolicy::TemporalCentric, RetrievalPolicy::UniformSample};
  return detail::parse_enum(s, all, "retrieval policy");
}

inline SelectionPolicy parse_selection_policy(std::string_view s) {
  static constexpr SelectionPolicy all[] = {SelectionPolicy::TopKLargest, SelectionPolicy::TopKSmallest,
                                            SelectionPolicy::UniformK};
  return detail::parse_enum(s, all, "selection policy");
}

inline RopeScaleTarget parse_rope_scale_target(std::string_view s) {
  static constexpr RopeScaleTarget all[] = {RopeScaleTarget::Dam, RopeScaleTarget::Csm};
  return detail::parse_enum(s, all, "rope scale target");
}

}  // namespace vstream
