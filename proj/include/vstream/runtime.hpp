#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "vstream/assembly.hpp"
#include "vstream/bounded_queue.hpp"
#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/dam.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/log.hpp"
#include "vstream/policies.hpp"
#include "vstream/synth.hpp"

namespace vstream {

namespace detail {
inline FeatureBank::Options bank_options(std::uint64_t watermark, const std::filesystem::path& dir, Tier tier) {
  FeatureBank::Options o;
  o.watermark = watermark;
  if (!dir.empty()) {
    static std::atomic<std::uint64_t> counter{0};
    o.spill_path = dir / ("vstream-" + std::string(to_string(tier)) + "-" + std::to_string(::getpid()) + "-" +
                          std::to_string(counter.fetch_add(1)) + ".fvsb");
  }
  return o;
}

inline std::int64_t ns_between(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count();
}
}  // namespace detail

// Synchronous core shared by the engine's frame handler and by replays:
// feature banks, consolidation and retrieval, with no threads of its own.
class MemoryPipeline {
 public:
  explicit MemoryPipeline(MemoryConfig config, const std::filesystem::path& spill_dir = {})
      : config_((validate(config), config)),
        low_bank_(Tier::Low, grid_shape(config_, Tier::Low), detail::bank_options(config_.low_bank_watermark, spill_dir, Tier::Low)),
        high_bank_(Tier::High, grid_shape(config_, Tier::High),
                   detail::bank_options(config_.high_bank_watermark, spill_dir, Tier::High)),
        consolidator_(make_consolidator(config_.clustering_policy, config_)),
        state_(grid_shape(config_, Tier::Low)) {}

  const MemoryConfig& config() const { return config_; }
  const ClusterState& state() const { return state_; }
  const FeatureBank& low_bank() const { return low_bank_; }
  const FeatureBank& high_bank() const { return high_bank_; }
  const Consolidator& consolidator() const { return *consolidator_; }

  // Checks a pair without side effects.
  void check_pair(const FeatureMap& low, const FeatureMap& high, std::uint64_t expected) const {
    check_feature(config_, low, Tier::Low);
    check_feature(config_, high, Tier::High);
    if (low.frame_index() != high.frame_index()) {
      throw Error(ErrorKind::Sequencing, "low frame " + std::to_string(low.frame_index()) + " paired with high frame " +
                                             std::to_string(high.frame_index()));
    }
    if (low.frame_index() != expected) {
      throw Error(ErrorKind::Sequencing, "expected frame " + std::to_string(expected) + ", got " +
                                             std::to_string(low.frame_index()));
    }
  }

  void push(const FeatureMap& low, const FeatureMap& high) {
    check_pair(low, high, low_bank_.count());
    low_bank_.append(low);
    high_bank_.append(high);
    state_ = consolidator_->consolidate(state_, low);
  }

  DamState retrieve(const ClusterState& s, RetrievalCache* cache = nullptr) const {
    return retrieve_key_frames(s, low_bank_, high_bank_, RetrievalOptions::from(config_), cache);
  }

  FlashMemorySnapshot snapshot(RetrievalCache* cache = nullptr) const {
    return assemble(state_, retrieve(state_, cache), config_);
  }

 private:
  MemoryConfig config_;
  FeatureBank low_bank_;
  FeatureBank high_bank_;
  std::unique_ptr<Consolidator> consolidator_;
  ClusterState state_;
};

struct LatencyReport {
  std::int64_t snapshot_acquire_ns = 0;
  std::int64_t retrieval_ns = 0;
  std::int64_t assembly_ns = 0;
  std::int64_t total_ns = 0;
};

// Cluster state as published by the frame handler.
struct PublishedState {
  ClusterState csm;
  std::uint64_t frame_count = 0;
};

struct QueryResult {
  std::shared_ptr<const PublishedState> published;
  DamState dam;
  FlashMemorySnapshot snapshot;
  LatencyReport latency;
};

// Frame handler / question handler runtime. ingest_frame() hands frames to a
// background frame handler through a bounded queue; after each frame the
// handler publishes an immutable PublishedState with one atomic pointer swap.
// query() reads the latest published state, so it never waits for ingest
// work, and lazily runs retrieval and assembly on it.
class Engine {
 public:
  struct Options {
    std::filesystem::path spill_dir;
    std::ostream* metrics = nullptr;  // JSON-lines events
  };

  explicit Engine(MemoryConfig config) : Engine(std::move(config), Options{}) {}

  Engine(MemoryConfig config, Options options)
      : options_(std::move(options)),
        pipeline_(std::move(config), options_.spill_dir),
        queue_(pipeline_.config().ingest_queue_capacity) {
    std::atomic_store(&published_, std::make_shared<const PublishedState>(
                                       PublishedState{ClusterState(grid_shape(pipeline_.config(), Tier::Low)), 0}));
  }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  ~Engine() {
    try {
      stop();
    } catch (...) {
    }
  }

  const MemoryConfig& config() const { return pipeline_.config(); }

  void start() {
    std::lock_guard lock(lifecycle_mutex_);
    if (phase_ != Phase::Created) {
      throw Error(ErrorKind::Lifecycle, phase_ == Phase::Running ? "engine already started" : "engine was stopped");
    }
    worker_ = std::thread([this] { frame_handler(); });
    phase_ = Phase::Running;
    log::debug("engine started");
  }

  // Drains queued frames, then joins the frame handler. Idempotent.
  void stop() {
    std::lock_guard lock(lifecycle_mutex_);
    if (phase_ == Phase::Running) {
      queue_.close();
      if (worker_.joinable()) worker_.join();
    }
    phase_ = Phase::Stopped;
  }

  bool running() const {
    std::lock_guard lock(lifecycle_mutex_);
    return phase_ == Phase::Running;
  }

  // Producer side. Blocks while the ingest queue is full.
  void ingest_frame(FeatureMap low, FeatureMap high) {
    std::lock_guard lock(producer_mutex_);
    require_running("ingest");
    rethrow_worker_error();
    pipeline_.check_pair(low, high, submitted_);
    if (!queue_.push(Pair{std::move(low), std::move(high)})) {
      throw Error(ErrorKind::Lifecycle, "engine stopped while ingesting");
    }
    ++submitted_;
  }

  std::uint64_t submitted() const {
    std::lock_guard lock(producer_mutex_);
    return submitted_;
  }

  // Blocks until at least `frames` frames have been published (or the frame
  // handler failed).
  void wait_for(std::uint64_t frames) {
    std::unique_lock lock(progress_mutex_);
    progress_.wait(lock, [&] { return published_count_ >= frames || worker_error_; });
    if (worker_error_) std::rethrow_exception(worker_error_);
  }

  void wait_idle() { wait_for(submitted()); }

  std::shared_ptr<const PublishedState> published() const { return std::atomic_load(&published_); }

  QueryResult query() {
    require_running("query");
    QueryResult r;
    const auto t0 = std::chrono::steady_clock::now();
    r.published = std::atomic_load(&published_);
    const auto t1 = std::chrono::steady_clock::now();
    std::vector<FeatureMap> rendered;
    {
      std::lock_guard lock(cache_mutex_);
      r.dam = pipeline_.retrieve(r.published->csm, &cache_);
      rendered.reserve(r.published->csm.size());
      for (std::size_t k = 0; k < r.published->csm.size(); ++k) rendered.push_back(cache_.centroid_map(r.published->csm, k));
    }
    const auto t2 = std::chrono::steady_clock::now();
    r.snapshot = assemble(r.published->csm, r.dam, pipeline_.config(), rendered);
    const auto t3 = std::chrono::steady_clock::now();
    r.latency = {detail::ns_between(t0, t1), detail::ns_between(t1, t2), detail::ns_between(t2, t3),
                 detail::ns_between(t0, t3)};
    emit("query", r.published->frame_count, r.latency.total_ns, r.snapshot.token_count);
    return r;
  }

  const FeatureBank& low_bank() const { return pipeline_.low_bank(); }
  const FeatureBank& high_bank() const { return pipeline_.high_bank(); }

 private:
  enum class Phase { Created, Running, Stopped };

  struct Pair {
    FeatureMap low;
    FeatureMap high;
  };

  void require_running(const char* what) const {
    std::lock_guard lock(lifecycle_mutex_);
    if (phase_ != Phase::Running) throw Error(ErrorKind::Lifecycle, std::string(what) + " on an engine that is not running");
  }

  void rethrow_worker_error() {
    std::lock_guard lock(progress_mutex_);
    if (worker_error_) std::rethrow_exception(worker_error_);
  }

  void frame_handler() {
    while (auto item = queue_.pop()) {
      try {
        const auto t0 = std::chrono::steady_clock::now();
        pipeline_.push(item->low, item->high);
        auto next = std::make_shared<const PublishedState>(PublishedState{pipeline_.state(), pipeline_.low_bank().count()});
        std::atomic_store(&published_, next);
        if (pipeline_.config().eager_retrieval) {
          std::lock_guard lock(cache_mutex_);
          (void)pipeline_.retrieve(next->csm, &cache_);
        }
        const auto t1 = std::chrono::steady_clock::now();
        {
          std::lock_guard lock(progress_mutex_);
          published_count_ = next->frame_count;
        }
        progress_.notify_all();
        emit("ingest", next->frame_count, detail::ns_between(t0, t1), resident_tokens(next->csm));
      } catch (...) {
        {
          std::lock_guard lock(progress_mutex_);
          worker_error_ = std::current_exception();
        }
        progress_.notify_all();
        queue_.close();
        log::warn("frame handler stopped on error");
        return;
      }
    }
  }

  std::uint64_t resident_tokens(const ClusterState& s) const {
    const auto& c = pipeline_.config();
    const std::uint64_t dam = std::min<std::uint64_t>(c.n_dam, s.size());
    return s.size() * llm_tokens_per_map(c, Tier::Low) + dam * llm_tokens_per_map(c, Tier::High);
  }

  void emit(const char* event, std::uint64_t t, std::int64_t wall_ns, std::uint64_t tokens) {
    if (!options_.metrics) return;
    nlohmann::json line = {{"event", event}, {"t", t}, {"wall_ns", wall_ns}, {"tokens", tokens}};
    std::lock_guard lock(metrics_mutex_);
    *options_.metrics << line.dump() << '\n';
  }

  Options options_;
  MemoryPipeline pipeline_;
  BoundedQueue<Pair> queue_;
  std::thread worker_;

  mutable std::mutex lifecycle_mutex_;
  Phase phase_ = Phase::Created;

  mutable std::mutex producer_mutex_;
  std::uint64_t submitted_ = 0;

  std::mutex progress_mutex_;
  std::condition_variable progress_;
  std::uint64_t published_count_ = 0;
  std::exception_ptr worker_error_;

  std::shared_ptr<const PublishedState> published_;

  std::mutex cache_mutex_;
  RetrievalCache cache_;

  std::mutex metrics_mutex_;
};

struct LatencySample {
  std::uint64_t t = 0;
  std::vector<LatencyReport> queries;
  double ingest_ns_per_frame = 0.0;
  std::uint64_t tokens = 0;
};

// Streams `spec` through a fresh engine, issues one warm-up query, then
// times `queries` more against the same published state.
inline LatencySample measure_query_latency(const MemoryConfig& config, const StreamSpec& spec, std::uint32_t queries) {
  LatencySample out;
  out.t = spec.steps;
  Engine engine(config);
  SyntheticStream stream(spec);
  engine.start();
  const auto t0 = std::chrono::steady_clock::now();
  while (auto f = stream.next()) engine.ingest_frame(std::move(f->low), std::move(f->high));
  engine.wait_idle();
  const auto ingest_ns = detail::ns_between(t0, std::chrono::steady_clock::now());
  out.ingest_ns_per_frame = spec.steps == 0 ? 0.0 : static_cast<double>(ingest_ns) / static_cast<double>(spec.steps);
  out.tokens = engine.query().snapshot.token_count;
  out.queries.reserve(queries);
  for (std::uint32_t i = 0; i < queries; ++i) out.queries.push_back(engine.query().latency);
  engine.stop();
  return out;
}

}  // namespace vstream
