#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>

#include "vstream/errors.hpp"
#include "vstream/types.hpp"

namespace vstream {

inline constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();

struct MemoryConfig {
  std::uint32_t n_csm = 60;
  std::uint32_t n_dam = 30;
  std::uint32_t spatial_size_low = 256;    // ViT tokens per low-res map
  std::uint32_t spatial_size_high = 1024;  // ViT tokens per high-res map
  std::uint32_t dim = 16;
  std::uint32_t merger_ratio = 4;  // ViT tokens per LLM token
  std::uint32_t pool_ratio = 4;
  std::uint32_t kmeans_max_iters = 10;
  ClusteringPolicy clustering_policy = ClusteringPolicy::KMeans;
  RetrievalPolicy retrieval_policy = RetrievalPolicy::FeatureCentric;
  SelectionPolicy selection_policy = SelectionPolicy::TopKLargest;
  std::uint64_t budget_limit = 12000;
  RopeScaleTarget rope_scale_target = RopeScaleTarget::Dam;
  bool eager_retrieval = false;
  std::uint32_t ingest_queue_capacity = 256;
  std::uint64_t low_bank_watermark = kUnlimited;
  std::uint64_t high_bank_watermark = kUnlimited;
  std::uint64_t seed = 0;

  // Table-1 memory layout at a reduced channel count.
  static MemoryConfig paper_shapes() { return MemoryConfig{}; }

  // Desk-scale shapes: 4x4 low grid, 8x8 high grid, d = 64.
  static MemoryConfig scaled() {
    MemoryConfig c;
    c.spatial_size_low = 16;
    c.spatial_size_high = 64;
    c.dim = 64;
    return c;
  }

  friend bool operator==(const MemoryConfig&, const MemoryConfig&) = default;
};

namespace detail {
inline std::uint32_t exact_sqrt(std::uint64_t n) {
  auto r = static_cast<std::uint64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? static_cast<std::uint32_t>(r) : 0;
}
}  // namespace detail

// Side length of the square ViT-token grid for a tier.
inline std::uint32_t grid_side(const MemoryConfig& c, Tier tier) {
  auto side = detail::exact_sqrt(tier == Tier::Low ? c.spatial_size_low : c.spatial_size_high);
  if (side == 0) throw Error(ErrorKind::InvalidConfig, "spatial size must be a non-zero perfect square");
  return side;
}

// Side length of one merger window (2 for the 2x2 merger).
inline std::uint32_t merger_side(const MemoryConfig& c) {
  auto side = detail::exact_sqrt(c.merger_ratio);
  if (side == 0) throw Error(ErrorKind::InvalidConfig, "merger_ratio must be a non-zero perfect square");
  return side;
}

inline GridShape grid_shape(const MemoryConfig& c, Tier tier) {
  auto side = grid_side(c, tier);
  return GridShape{static_cast<std::uint16_t>(side), static_cast<std::uint16_t>(side),
                   static_cast<std::uint16_t>(c.dim)};
}

// Side length of the LLM-token grid of one map after the merger.
inline std::uint32_t llm_grid_side(const MemoryConfig& c, Tier tier) {
  auto side = grid_side(c, tier);
  auto m = merger_side(c);
  if (side % m != 0) throw Error(ErrorKind::InvalidConfig, "grid side not divisible by merger window");
  return side / m;
}

inline std::uint64_t llm_tokens_per_map(const MemoryConfig& c, Tier tier) {
  auto spatial = tier == Tier::Low ? c.spatial_size_low : c.spatial_size_high;
  if (c.merger_ratio == 0 || spatial % c.merger_ratio != 0) {
    throw Error(ErrorKind::InvalidConfig, "spatial size " + std::to_string(spatial) +
                                              " not divisible by merger_ratio " +
                                              std::to_string(c.merger_ratio));
  }
  return spatial / c.merger_ratio;
}

// Total LLM tokens of a full Flash Memory.
inline std::uint64_t token_budget(const MemoryConfig& c) {
  return std::uint64_t{c.n_csm} * llm_tokens_per_map(c, Tier::Low) +
         std::uint64_t{c.n_dam} * llm_tokens_per_map(c, Tier::High);
}

inline double csm_token_fraction(const MemoryConfig& c) {
  auto total = token_budget(c);
  return total == 0 ? 0.0
                    : static_cast<double>(std::uint64_t{c.n_csm} * llm_tokens_per_map(c, Tier::Low)) /
                          static_cast<double>(total);
}

inline void validate(const MemoryConfig& c) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidConfig, m); };
  if (c.dim == 0 || c.dim > 0xFFFF) fail("dim must be in [1, 65535]");
  if (c.spatial_size_high != std::uint64_t{c.pool_ratio} * c.spatial_size_low) {
    fail("spatial_size_high must equal pool_ratio * spatial_size_low");
  }
  (void)llm_grid_side(c, Tier::Low);
  (void)llm_grid_side(c, Tier::High);
  if (grid_side(c, Tier::High) > 0xFFFF) fail("grid too large");
  if (c.n_dam > c.n_csm) fail("n_dam must not exceed n_csm");
  if (c.kmeans_max_iters == 0) fail("kmeans_max_iters must be at least 1");
  if (c.ingest_queue_capacity == 0) fail("ingest_queue_capacity must be at least 1");
  if (token_budget(c) > c.budget_limit) {
    fail("token budget " + std::to_string(token_budget(c)) + " exceeds budget_limit " +
         std::to_string(c.budget_limit));
  }
}

namespace detail {
inline std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw Error(ErrorKind::InvalidConfig, "bad value '" + std::string(v) + "' for " + std::string(key));
  }
  return out;
}

inline std::uint64_t parse_watermark(std::string_view key, std::string_view v) {
  if (v == "inf" || v == "unlimited") return kUnlimited;
  return parse_number<std::uint64_t>(key, v);
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorKind::InvalidConfig, "bad boolean '" + std::string(v) + "' for " + std::string(key));
}
}  // namespace detail

// Applies one `key = value` setting. Unknown keys are rejected.
inline void apply_setting(MemoryConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_number;
  if (key == "n_csm") c.n_csm = parse_number<std::uint32_t>(key, value);
  else if (key == "n_dam") c.n_dam = parse_number<std::uint32_t>(key, value);
  else if (key == "spatial_size_low") c.spatial_size_low = parse_number<std::uint32_t>(key, value);
  else if (key == "spatial_size_high") c.spatial_size_high = parse_number<std::uint32_t>(key, value);
  else if (key == "dim") c.dim = parse_number<std::uint32_t>(key, value);
  else if (key == "merger_ratio") c.merger_ratio = parse_number<std::uint32_t>(key, value);
  else if (key == "pool_ratio") c.pool_ratio = parse_number<std::uint32_t>(key, value);
  else if (key == "kmeans_max_iters") c.kmeans_max_iters = parse_number<std::uint32_t>(key, value);
  else if (key == "clustering_policy") c.clustering_policy = parse_clustering_policy(value);
  else if (key == "retrieval_policy") c.retrieval_policy = parse_retrieval_policy(value);
  else if (key == "selection_policy") c.selection_policy = parse_selection_policy(value);
  else if (key == "budget_limit") c.budget_limit = parse_number<std::uint64_t>(key, value);
  else if (key == "rope_scale_target") c.rope_scale_target = parse_rope_scale_target(value);
  else if (key == "eager_retrieval") c.eager_retrieval = detail::parse_bool(key, value);
  else if (key == "ingest_queue_capacity") c.ingest_queue_capacity = parse_number<std::uint32_t>(key, value);
  else if (key == "low_bank_watermark") c.low_bank_watermark = detail::parse_watermark(key, value);
  else if (key == "high_bank_watermark") c.high_bank_watermark = detail::parse_watermark(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else throw Error(ErrorKind::InvalidConfig, "unknown config key '" + std::string(key) + "'");
}

// Flat `key = value` document; '#' starts a comment. Keys not present keep
// the values of `base`. The result is validated.
inline MemoryConfig parse_config(std::string_view text, MemoryConfig base = MemoryConfig{}) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorKind::InvalidConfig, "line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_setting(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  validate(base);
  return base;
}

inline MemoryConfig load_config(const std::string& path, MemoryConfig base = MemoryConfig{}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), base);
}

inline std::string to_config_text(const MemoryConfig& c) {
  auto wm = [](std::uint64_t v) { return v == kUnlimited ? std::string("inf") : std::to_string(v); };
  std::ostringstream o;
  o << "n_csm = " << c.n_csm << "\n"
    << "n_dam = " << c.n_dam << "\n"
    << "spatial_size_low = " << c.spatial_size_low << "\n"
    << "spatial_size_high = " << c.spatial_size_high << "\n"
    << "dim = " << c.dim << "\n"
    << "merger_ratio = " << c.merger_ratio << "\n"
    << "pool_ratio = " << c.pool_ratio << "\n"
    << "kmeans_max_iters = " << c.kmeans_max_iters << "\n"
    << "clustering_policy = " << to_string(c.clustering_policy) << "\n"
    << "retrieval_policy = " << to_string(c.retrieval_policy) << "\n"
    << "selection_policy = " << to_string(c.selection_policy) << "\n"
    << "budget_limit = " << c.budget_limit << "\n"
    << "rope_scale_target = " << to_string(c.rope_scale_target) << "\n"
    << "eager_retrieval = " << (c.eager_retrieval ? "true" : "false") << "\n"
    << "ingest_queue_capacity = " << c.ingest_queue_capacity << "\n"
    << "low_bank_watermark = " << wm(c.low_bank_watermark) << "\n"
    << "high_bank_watermark = " << wm(c.high_bank_watermark) << "\n"
    << "seed = " << c.seed << "\n";
  return o.str();
}

// Checks a map's tier and grid against the configured shapes.
inline void check_feature(const MemoryConfig& c, const FeatureMap& f, Tier expected) {
  if (f.tier() != expected) {
    throw Error(ErrorKind::TierMismatch, "frame " + std::to_string(f.frame_index()) + " is " +
                                             std::string(to_string(f.tier())) + ", expected " +
                                             std::string(to_string(expected)));
  }
  if (!(f.shape() == grid_shape(c, expected))) {
    throw Error(ErrorKind::InvalidState,
                "frame " + std::to_string(f.frame_index()) + " grid does not match configuration");
  }
}

}  // namespace vstream
