#include <gtest/gtest.h>

#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace vstream;

namespace {

// Hand-worked instances for the oracle itself.
TEST(LloydOracle, FrozenNearestMerge) {
  // 10.5 is equidistant from 10 and 11; the tie goes to cluster 1.
  auto r = oracle::weighted_lloyd({{0.0}, {10.0}, {11.0}, {10.5}}, {1, 3, 1, 1}, 10);
  EXPECT_EQ(r.assignment, (std::vector<std::uint32_t>{0, 1, 2, 1}));
  EXPECT_EQ(r.weights, (std::vector<std::uint64_t>{1, 4, 1}));
  EXPECT_EQ(r.centroids[1][0], 10.125);
  EXPECT_EQ(r.iterations, 2);
}

TEST(LloydOracle, FrozenEmptyClusterRepair) {
  auto r = oracle::weighted_lloyd({{0.0}, {0.0}, {5.0}, {5.0}}, {2, 1, 1, 1}, 10);
  EXPECT_EQ(r.assignment, (std::vector<std::uint32_t>{1, 0, 2, 2}));
  EXPECT_EQ(r.weights, (std::vector<std::uint64_t>{1, 2, 2}));
  EXPECT_EQ(r.centroids[0][0], 0.0);
  EXPECT_EQ(r.centroids[2][0], 5.0);
}

TEST(RetrievalOracle, FrozenDedupAndTies) {
  std::vector<std::vector<float>> frames{{0.f}, {1.f}, {2.f}, {3.f}};
  std::vector<oracle::Vec> cents{{1.0}, {1.0}, {2.5}};
  std::vector<std::uint64_t> w{5, 5, 1};
  std::vector<double> pos{1.5, 0.0, 3.0};
  // both heavy anchors want frame 1; the second takes the next best, frame 0
  EXPECT_EQ(oracle::select_key_frames(frames, cents, w, pos, oracle::Score::Euclidean, oracle::Anchors::Largest, 3),
            (std::vector<std::uint64_t>{1, 0, 2}));
  // position 1.5 is equidistant from frames 1 and 2: lower wins
  EXPECT_EQ(oracle::select_key_frames(frames, cents, w, pos, oracle::Score::Temporal, oracle::Anchors::Largest, 2),
            (std::vector<std::uint64_t>{1, 0}));
}

void expect_matches(const CsmUpdateResult& got, const oracle::LloydResult& want, double tol) {
  ASSERT_EQ(got.assignment, want.assignment);
  ASSERT_EQ(got.state.size(), want.centroids.size());
  for (std::size_t k = 0; k < want.centroids.size(); ++k) {
    EXPECT_EQ(got.state.weight(k), want.weights[k]);
    auto c = got.state.centroid(k);
    for (std::size_t e = 0; e < c.size(); ++e) EXPECT_NEAR(c[e], want.centroids[k][e], tol);
  }
}

TEST(LloydOracle, SingleIterationMatchesUpdate) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    SCOPED_TRACE(seed);
    auto in = testing_support::random_lloyd_instance(seed);
    expect_matches(csm_update(in.state, in.frame, 1), oracle::weighted_lloyd(in.points, in.weights, 1), 1e-12);
  }
}

TEST(LloydOracle, FullIterationsMatchUpdate) {
  for (std::uint64_t seed = 1000; seed < 1300; ++seed) {
    SCOPED_TRACE(seed);
    auto in = testing_support::random_lloyd_instance(seed);
    auto got = csm_update(in.state, in.frame, 10);
    auto want = oracle::weighted_lloyd(in.points, in.weights, 10);
    EXPECT_EQ(got.iterations, static_cast<std::uint32_t>(want.iterations));
    expect_matches(got, want, 1e-12);
  }
}

struct StreamFixture {
  MemoryConfig config;
  std::vector<FramePair> frames;
  FeatureBank low;
  FeatureBank high;
  ClusterState state;

  StreamFixture(MemoryConfig c, std::uint64_t seed, std::uint64_t steps)
      : config(c),
        frames(generate(testing_support::stream(c, seed, steps))),
        low(Tier::Low, grid_shape(c, Tier::Low)),
        high(Tier::High, grid_shape(c, Tier::High)),
        state(grid_shape(c, Tier::Low)) {
    for (const auto& f : frames) {
      low.append(f.low);
      high.append(f.high);
      state = csm_consolidate(state, f.low, c);
    }
  }

  std::vector<std::uint64_t> oracle_frames(oracle::Score score, oracle::Anchors rule) const {
    std::vector<std::vector<float>> fs;
    for (const auto& f : frames) fs.emplace_back(f.low.values().begin(), f.low.values().end());
    std::vector<oracle::Vec> cents;
    std::vector<std::uint64_t> w;
    std::vector<double> pos;
    for (std::size_t k = 0; k < state.size(); ++k) {
      cents.emplace_back(state.centroid(k).begin(), state.centroid(k).end());
      w.push_back(state.weight(k));
      pos.push_back(static_cast<double>(state.position_sum(k)) / static_cast<double>(state.weight(k)));
    }
    return oracle::select_key_frames(fs, cents, w, pos, score, rule, config.n_dam);
  }
};

TEST(RetrievalOracle, MatchesEveryPolicyAndSelection) {
  const std::pair<RetrievalPolicy, oracle::Score> policies[] = {
      {RetrievalPolicy::FeatureCentric, oracle::Score::Euclidean},
      {RetrievalPolicy::CosineSimilarity, oracle::Score::Cosine},
      {RetrievalPolicy::TemporalCentric, oracle::Score::Temporal}};
  const std::pair<SelectionPolicy, oracle::Anchors> selections[] = {{SelectionPolicy::TopKLargest, oracle::Anchors::Largest},
                                                                    {SelectionPolicy::TopKSmallest, oracle::Anchors::Smallest},
                                                                    {SelectionPolicy::UniformK, oracle::Anchors::Uniform}};
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    StreamFixture fx(testing_support::small_config(12, 6), seed, 40 + 25 * seed);
    for (auto [rp, score] : policies) {
      for (auto [sp, rule] : selections) {
        SCOPED_TRACE(testing::Message() << "seed " << seed << " " << to_string(rp) << " " << to_string(sp));
        auto dam = retrieve_key_frames(fx.state, fx.low, fx.high, {rp, sp, fx.config.n_dam});
        EXPECT_EQ(dam.frame_indices(), fx.oracle_frames(score, rule));
      }
    }
  }
}

TEST(RetrievalOracle, CachedRetrievalMatchesAcrossGrowth) {
  auto c = testing_support::small_config(10, 5);
  auto frames = generate(testing_support::stream(c, 9, 400));
  FeatureBank low(Tier::Low, grid_shape(c, Tier::Low));
  FeatureBank high(Tier::High, grid_shape(c, Tier::High));
  ClusterState state(grid_shape(c, Tier::Low));
  RetrievalCache caches[2];
  for (const auto& f : frames) {
    low.append(f.low);
    high.append(f.high);
    state = csm_consolidate(state, f.low, c);
    if (f.low.frame_index() % 7 != 0) continue;
    for (int p = 0; p < 2; ++p) {
      RetrievalOptions o{p == 0 ? RetrievalPolicy::FeatureCentric : RetrievalPolicy::CosineSimilarity,
                         SelectionPolicy::TopKLargest, c.n_dam};
      auto warm = retrieve_key_frames(state, low, high, o, &caches[p]);
      auto cold = retrieve_key_frames(state, low, high, o);
      ASSERT_EQ(warm.frame_indices(), cold.frame_indices()) << "t=" << state.frames_seen();
    }
  }
  EXPECT_GT(caches[0].incremental_scans, 0u);
  EXPECT_GT(caches[1].incremental_scans, 0u);
}

}  // namespace
