#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "oracles/oracles.hpp"
#include "vstream/vstream.hpp"

namespace testing_support {

// 2x2 LLM grid over a 4x4 low grid, 8x8 high grid, small channel count.
inline vstream::MemoryConfig small_config(std::uint32_t n_csm = 8, std::uint32_t n_dam = 4, std::uint32_t dim = 4) {
  auto c = vstream::MemoryConfig::scaled();
  c.n_csm = n_csm;
  c.n_dam = n_dam;
  c.dim = dim;
  return c;
}

inline vstream::StreamSpec stream(const vstream::MemoryConfig& c, std::uint64_t seed, std::uint64_t steps) {
  return vstream::StreamSpec::for_config(c, seed, steps);
}

inline vstream::FeatureMap constant_map(std::uint64_t index, vstream::Tier tier, vstream::GridShape shape, float v) {
  return vstream::FeatureMap(index, tier, shape, std::vector<float>(shape.elements(), v));
}

// A memory at capacity plus one new frame, both in engine form and as oracle
// points (previous centroids first, frame last). Lattice instances draw
// coordinates from {0..3} so that distance ties are common.
struct LloydInstance {
  vstream::ClusterState state;
  vstream::FeatureMap frame;
  std::vector<oracle::Vec> points;
  std::vector<std::uint64_t> weights;
};

inline LloydInstance random_lloyd_instance(std::uint64_t seed, std::uint64_t max_points = 64, std::uint64_t max_dim = 8) {
  vstream::CounterRng rng(vstream::CounterRng::derive_key(seed, 77));
  const auto n = static_cast<std::size_t>(rng.next_in(2, max_points - 1));
  const auto d = static_cast<std::uint16_t>(rng.next_in(1, max_dim));
  const bool lattice = rng.next_in(0, 2) == 0;
  vstream::GridShape shape{1, 1, d};
  auto coord = [&] { return lattice ? static_cast<double>(rng.next_in(0, 3)) : rng.next_gaussian(); };
  LloydInstance in;
  std::vector<vstream::Cluster> clusters;
  std::uint64_t frames = 0;
  for (std::size_t k = 0; k < n; ++k) {
    oracle::Vec c(d);
    for (auto& v : c) v = coord();
    auto w = rng.next_in(1, 20);
    frames += w;
    clusters.push_back(vstream::Cluster{std::make_shared<const std::vector<double>>(c), w, w * k});
    in.points.push_back(c);
    in.weights.push_back(w);
  }
  in.state = vstream::ClusterState(shape, clusters, frames);
  std::vector<float> e(d);
  for (auto& v : e) v = static_cast<float>(coord());
  in.frame = vstream::FeatureMap(frames, vstream::Tier::Low, shape, e);
  in.points.emplace_back(e.begin(), e.end());
  in.weights.push_back(1);
  return in;
}

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vstream-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
