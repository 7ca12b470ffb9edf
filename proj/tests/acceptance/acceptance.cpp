// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace vstream;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string snapshot_bytes(const FlashMemorySnapshot& s) {
  std::ostringstream out;
  write_snapshot(out, s);
  return out.str();
}

// AC1: default layout fits the token budget, checked in under a millisecond.
Outcome token_budget_check() {
  const auto t0 = Clock::now();
  MemoryConfig c;
  validate(c);
  const auto tokens = token_budget(c);
  const double us = seconds_since(t0) * 1e6;
  return {tokens == 11520 && tokens <= 12000 && us < 1000.0, fmt("%llu tokens <= 12000, computed in %.1f us",
                                                                 static_cast<unsigned long long>(tokens), us)};
}

// AC2: full-size memory holds n_csm clusters with weight t; a long desk-scale
// stream finishes in time.
Outcome capacity_and_throughput() {
  auto c = MemoryConfig::paper_shapes();
  ClusterState s(grid_shape(c, Tier::Low));
  bool ok = true;
  std::string bad;
  for (const auto& f : generate(testing_support::stream(c, 1, 150))) {
    s = csm_consolidate(s, f.low, c);
    const auto t = s.frames_seen();
    if (t >= c.n_csm && (s.size() != c.n_csm || s.total_weight() != t)) {
      ok = false;
      bad = fmt(" (t=%llu: %zu clusters)", static_cast<unsigned long long>(t), s.size());
    }
  }
  auto scaled = MemoryConfig::scaled();
  scaled.low_bank_watermark = scaled.high_bank_watermark = 1000;
  const auto t0 = Clock::now();
  Engine e(scaled);
  e.start();
  SyntheticStream stream(testing_support::stream(scaled, 2, 10000));
  while (auto f = stream.next()) e.ingest_frame(std::move(f->low), std::move(f->high));
  e.wait_idle();
  auto q = e.query();
  e.stop();
  const double secs = seconds_since(t0);
  ok = ok && q.published->csm.size() == 60 && q.published->csm.total_weight() == 10000 && secs < 60.0;
  return {ok, fmt("60 clusters, weight = t up to t=150 at full size%s; 1e4 frames in %.1f s", bad.c_str(), secs)};
}

// AC3: one-iteration updates agree with brute-force weighted Lloyd.
Outcome lloyd_equivalence() {
  int mismatches = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto in = testing_support::random_lloyd_instance(seed + 5000);
    auto got = csm_update(in.state, in.frame, 1);
    auto want = oracle::weighted_lloyd(in.points, in.weights, 1);
    if (got.assignment != want.assignment) {
      ++mismatches;
      continue;
    }
    for (std::size_t k = 0; k < want.centroids.size(); ++k) {
      if (got.state.weight(k) != want.weights[k]) ++mismatches;
      auto cent = got.state.centroid(k);
      for (std::size_t e = 0; e < cent.size(); ++e) worst = std::max(worst, std::abs(cent[e] - want.centroids[k][e]));
    }
  }
  return {mismatches == 0 && worst <= 1e-12, fmt("200 instances, %d mismatches, max centroid error %.3g", mismatches, worst)};
}

// AC4: key-frame retrieval agrees with an exhaustive scan.
Outcome retrieval_equivalence() {
  const std::pair<RetrievalPolicy, oracle::Score> policies[] = {
      {RetrievalPolicy::FeatureCentric, oracle::Score::Euclidean},
      {RetrievalPolicy::CosineSimilarity, oracle::Score::Cosine},
      {RetrievalPolicy::TemporalCentric, oracle::Score::Temporal}};
  auto c = testing_support::small_config(12, 6);
  int mismatches = 0;
  std::uint64_t longest = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::uint64_t steps = seed == 0 ? 10000 : 20 + (seed * 97) % 1500;
    longest = std::max(longest, steps);
    auto frames = generate(testing_support::stream(c, seed, steps));
    FeatureBank low(Tier::Low, grid_shape(c, Tier::Low)), high(Tier::High, grid_shape(c, Tier::High));
    ClusterState s(grid_shape(c, Tier::Low));
    std::vector<std::vector<float>> raw;
    for (const auto& f : frames) {
      low.append(f.low);
      high.append(f.high);
      s = csm_consolidate(s, f.low, c);
      raw.emplace_back(f.low.values().begin(), f.low.values().end());
    }
    std::vector<oracle::Vec> cents;
    std::vector<double> pos;
    std::vector<std::uint64_t> w;
    for (std::size_t k = 0; k < s.size(); ++k) {
      cents.emplace_back(s.centroid(k).begin(), s.centroid(k).end());
      pos.push_back(s.position(k));
      w.push_back(s.weight(k));
    }
    for (auto [rp, score] : policies) {
      auto got = retrieve_key_frames(s, low, high, {rp, SelectionPolicy::TopKLargest, c.n_dam}).frame_indices();
      if (got != oracle::select_key_frames(raw, cents, w, pos, score, oracle::Anchors::Largest, c.n_dam)) ++mismatches;
    }
  }
  return {mismatches == 0, fmt("100 streams (up to %llu frames) x 3 policies, %d mismatches",
                               static_cast<unsigned long long>(longest), mismatches)};
}

// AC5: every centroid stays the mean of the frames it represents.
Outcome centroid_consistency() {
  auto c = testing_support::small_config(16, 8);
  const std::size_t len = grid_shape(c, Tier::Low).elements();
  ClusterState s(grid_shape(c, Tier::Low));
  std::vector<std::vector<double>> sums;  // member frame sums per cluster
  std::vector<std::uint64_t> counts;
  double worst = 0.0;
  std::uint64_t updates = 0;
  SyntheticStream stream(testing_support::stream(c, 9, 10000 + c.n_csm));
  while (auto f = stream.next()) {
    std::vector<double> x(f->low.values().begin(), f->low.values().end());
    if (s.size() < c.n_csm) {
      s = csm_append(s, f->low);
      sums.push_back(x);
      counts.push_back(1);
      continue;
    }
    auto r = csm_update(s, f->low, c.kmeans_max_iters);
    ++updates;
    std::vector<std::vector<double>> next(s.size(), std::vector<double>(len, 0.0));
    std::vector<std::uint64_t> next_counts(s.size(), 0);
    for (std::size_t i = 0; i <= s.size(); ++i) {
      const auto& add = i < s.size() ? sums[i] : x;
      const auto j = r.assignment[i];
      for (std::size_t e = 0; e < len; ++e) next[j][e] += add[e];
      next_counts[j] += i < s.size() ? counts[i] : 1;
    }
    s = r.state;
    sums = std::move(next);
    counts = std::move(next_counts);
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (counts[k] != s.weight(k)) return {false, fmt("weight mismatch at update %llu", static_cast<unsigned long long>(updates))};
      double diff = 0.0, norm = 0.0;
      for (std::size_t e = 0; e < len; ++e) {
        const double mean = sums[k][e] / static_cast<double>(counts[k]);
        diff += (s.centroid(k)[e] - mean) * (s.centroid(k)[e] - mean);
        norm += mean * mean;
      }
      worst = std::max(worst, std::sqrt(diff) / std::max(1.0, std::sqrt(norm)));
    }
  }
  return {updates == 10000 && worst <= 1e-5,
          fmt("%llu updates, max relative centroid error %.3g", static_cast<unsigned long long>(updates), worst)};
}

std::int64_t median_of(std::vector<std::int64_t> v) {
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

void ingest_stream(Engine& e, const StreamSpec& spec) {
  SyntheticStream stream(spec);
  while (auto f = stream.next()) e.ingest_frame(std::move(f->low), std::move(f->high));
  e.wait_idle();
}

// AC6: query latency does not grow with stream length. Queries alternate
// between the two engines so both lengths see the same machine load.
Outcome bounded_latency() {
  auto c = MemoryConfig::scaled();
  c.low_bank_watermark = c.high_bank_watermark = 1000;
  Engine small(c), large(c);
  small.start();
  large.start();
  ingest_stream(small, testing_support::stream(c, 1, 1000));
  ingest_stream(large, testing_support::stream(c, 1, 100000));
  std::vector<std::int64_t> qa, qb;
  for (int i = 0; i < 50; ++i) {
    qa.push_back(small.query().latency.total_ns);
    qb.push_back(large.query().latency.total_ns);
  }
  small.stop();
  large.stop();
  const double a = static_cast<double>(median_of(qa));
  const double b = static_cast<double>(median_of(qb));
  return {b / a < 1.5, fmt("median query %.0f us at t=1e3, %.0f us at t=1e5, ratio %.2f < 1.5", a / 1e3, b / 1e3, b / a)};
}

// AC7: queries racing the frame handler see exactly the replayed memory.
Outcome concurrent_consistency() {
  auto c = testing_support::small_config(8, 4);
  c.ingest_queue_capacity = 8;
  std::uint64_t queries = 0;
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    c.seed = seed;
    auto frames = generate(testing_support::stream(c, seed, 250));
    MemoryPipeline replay(c);
    std::vector<ClusterState> states{replay.state()};
    for (const auto& f : frames) {
      replay.push(f.low, f.high);
      states.push_back(replay.state());
    }
    Engine e(c);
    e.start();
    std::atomic<bool> done{false};
    std::vector<QueryResult> seen;
    std::thread reader([&] {
      while (!done.load()) seen.push_back(e.query());
    });
    for (const auto& f : frames) e.ingest_frame(f.low, f.high);
    e.wait_idle();
    done = true;
    reader.join();
    seen.push_back(e.query());
    e.stop();
    for (const auto& q : seen) {
      const auto t = q.published->frame_count;
      const auto& want = states[t];
      auto want_snap = assemble(want, replay.retrieve(want), c);
      if (!(q.published->csm == want) || snapshot_bytes(q.snapshot) != snapshot_bytes(want_snap)) ++mismatches;
    }
    queries += seen.size();
  }
  return {mismatches == 0, fmt("20 seeds, %llu concurrent queries, %d mismatches", static_cast<unsigned long long>(queries),
                               mismatches)};
}

// AC8: the spill watermark never changes answers, and banks read back exactly.
Outcome watermark_invariance() {
  auto base = testing_support::small_config(10, 5);
  auto frames = generate(testing_support::stream(base, 4, 400));
  std::vector<std::string> snaps[3];
  const std::uint64_t marks[] = {0, 10, kUnlimited};
  bool exact = true;
  for (int m = 0; m < 3; ++m) {
    auto c = base;
    c.low_bank_watermark = c.high_bank_watermark = marks[m];
    MemoryPipeline p(c);
    RetrievalCache cache;
    for (const auto& f : frames) {
      p.push(f.low, f.high);
      if (f.low.frame_index() % 25 == 24) snaps[m].push_back(snapshot_bytes(p.snapshot(&cache)));
    }
    for (const auto& f : frames) {
      exact = exact && p.low_bank().read(f.low.frame_index()) == f.low && p.high_bank().read(f.high.frame_index()) == f.high;
    }
  }
  const bool same = snaps[0] == snaps[2] && snaps[1] == snaps[2];
  return {same && exact, fmt("watermarks {0, 10, inf}: %zu snapshots each %s, bank read-back %s", snaps[2].size(),
                             same ? "identical" : "DIFFER", exact ? "bit-exact" : "CORRUPT")};
}

// AC9: assembly order, tie rule, permutation invariance and position triplets.
Outcome assembly_rules() {
  auto c = testing_support::small_config(12, 6);
  CounterRng rng(99);
  int failures = 0;
  std::size_t items = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto shape = grid_shape(c, Tier::Low);
    std::vector<Cluster> cs;
    std::uint64_t frames = 0;
    const auto n = rng.next_in(1, c.n_csm);
    for (std::uint64_t k = 0; k < n; ++k) {
      const auto w = rng.next_in(1, 4);
      // small position sums make CSM/DAM position ties common
      cs.push_back({std::make_shared<const std::vector<double>>(shape.elements(), rng.next_gaussian()), w, w * rng.next_in(0, 8)});
      frames += w;
    }
    ClusterState csm(shape, cs, frames);
    DamState dam;
    dam.frames_seen = frames;
    std::vector<std::uint64_t> pool(std::min<std::uint64_t>(frames, 11));
    std::iota(pool.begin(), pool.end(), std::uint64_t{0});
    const auto m = rng.next_in(0, std::min<std::uint64_t>(c.n_dam, pool.size()));
    for (std::uint64_t j = 0; j < m; ++j) {
      std::swap(pool[j], pool[rng.next_in(j, pool.size() - 1)]);
      const auto f = pool[j];
      dam.entries.push_back({f, 0, static_cast<std::uint32_t>(j), 0.0,
                             testing_support::constant_map(f, Tier::High, grid_shape(c, Tier::High), static_cast<float>(j))});
    }
    auto snap = assemble(csm, dam, c);
    items += snap.items.size();
    for (std::size_t i = 1; i < snap.items.size(); ++i) {
      const auto& a = snap.items[i - 1];
      const auto& b = snap.items[i];
      const bool ordered = a.temporal_position < b.temporal_position ||
                           (a.temporal_position == b.temporal_position &&
                            (a.source < b.source || (a.source == b.source && a.index <= b.index)));
      if (!ordered) ++failures;
    }
    auto shuffled = dam;
    std::reverse(shuffled.entries.begin(), shuffled.entries.end());
    if (snapshot_bytes(assemble(csm, shuffled, c)) != snapshot_bytes(snap)) ++failures;
    // triplets by direct enumeration over each item's LLM-token grid
    std::vector<PositionTriplet> expect;
    for (const auto& it : snap.items) {
      const bool is_dam = it.source == MemorySource::Dam;
      const std::uint32_t side = is_dam ? 4 : 2;
      const std::uint32_t stride = is_dam ? 2 : 1;
      const double nt = is_dam ? static_cast<double>(it.index) : csm.position(it.index);
      for (std::uint32_t y = 0; y < side; ++y) {
        for (std::uint32_t x = 0; x < side; ++x) expect.push_back({nt, stride * y, stride * x});
      }
    }
    if (expect != snap.token_positions || snap.token_count != expect.size()) ++failures;
  }
  return {failures == 0, fmt("200 random memories (%zu items), %d rule violations", items, failures)};
}

struct Fit {
  double slope = 0.0;
  double half_width = 0.0;  // 95% confidence half-width
  double relative_change = 0.0;
};

Fit ols(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sxx += (x[i] - mx) * (x[i] - mx), sxy += (x[i] - mx) * (y[i] - my);
  Fit f;
  f.slope = sxy / sxx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (my + f.slope * (x[i] - mx));
    rss += r * r;
  }
  const double t_crit = 2.306;  // Student t, 8 degrees of freedom, two-sided 95%
  f.half_width = t_crit * std::sqrt(rss / (n - 2) / sxx);
  f.relative_change = std::abs(f.slope * (x.back() - x.front())) / my;
  return f;
}

// AC10: K-means beats uniform sampling on mixture streams, and no policy's
// per-step cost trends with stream length.
Outcome policy_quality_and_cost() {
  auto c = MemoryConfig::scaled();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto spec = testing_support::stream(c, seed, 600);
    spec.scene_len_min = spec.scene_len_max = 1;
    auto rows = bench_policies(spec, {PolicyCase{ClusteringPolicy::KMeans}, PolicyCase{ClusteringPolicy::UniformSample}}, c);
    if (rows[0].within_cluster_variance <= rows[1].within_cluster_variance) ++wins;
  }

  auto small = testing_support::small_config(16, 8, 4);
  const std::uint64_t steps = 2000;
  const std::size_t windows = 10;
  auto frames = generate(testing_support::stream(small, 3, steps));
  const ClusteringPolicy policies[] = {ClusteringPolicy::KMeans,        ClusteringPolicy::DBScan,
                                       ClusteringPolicy::GMM,           ClusteringPolicy::NeighborMerge,
                                       ClusteringPolicy::NeighborDrop,  ClusteringPolicy::UniformSample};
  const std::size_t w = steps / windows;
  // repeats interleaved across policies; each window keeps its fastest repeat,
  // since outside load only ever adds time
  std::vector<std::vector<std::vector<double>>> samples(std::size(policies), std::vector<std::vector<double>>(windows));
  for (int rep = 0; rep < 7; ++rep) {
    for (std::size_t pi = 0; pi < std::size(policies); ++pi) {
      auto run = run_policy(policies[pi], small, frames);
      for (std::size_t i = 0; i < windows; ++i) {
        std::vector<double> win(run.update_ns.begin() + static_cast<std::ptrdiff_t>(i * w),
                                run.update_ns.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
        samples[pi][i].push_back(detail::median_of(win));
      }
    }
  }
  std::string slopes;
  bool flat = true;
  for (std::size_t pi = 0; pi < std::size(policies); ++pi) {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < windows; ++i) {
      x.push_back(static_cast<double>(i * w + w / 2));
      y.push_back(*std::min_element(samples[pi][i].begin(), samples[pi][i].end()));
    }
    auto f = ols(x, y);
    const bool ok = std::abs(f.slope) <= f.half_width || f.relative_change < 0.2;
    flat = flat && ok;
    slopes += fmt(" %s%s %+.1f%%", ok ? "" : "!", std::string(to_string(policies[pi])).c_str(),
                  100.0 * std::copysign(f.relative_change, f.slope));
  }
  return {wins >= 9 && flat, fmt("k-means <= uniform distortion on %d/10 mixture seeds; cost trend over run:%s", wins,
                                 slopes.c_str())};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"AC1 token budget", token_budget_check},
      {"AC2 capacity and throughput", capacity_and_throughput},
      {"AC3 k-means update vs brute-force Lloyd", lloyd_equivalence},
      {"AC4 retrieval vs exhaustive scan", retrieval_equivalence},
      {"AC5 centroid equals member mean", centroid_consistency},
      {"AC6 bounded query latency", bounded_latency},
      {"AC7 concurrent queries match replay", concurrent_consistency},
      {"AC8 spill watermark invariance", watermark_invariance},
      {"AC9 assembly order and positions", assembly_rules},
      {"AC10 policy quality and per-step cost", policy_quality_and_cost},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s  %-40s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
