#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vstream/config.hpp"
#include "vstream/errors.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/rng.hpp"
#include "vstream/types.hpp"

namespace vstream {

// Scene-segmented Gaussian mixture stream. Each scene has a centroid map;
// frames in a segment are that centroid plus isotropic noise of stddev
// `spread`. The active scene's centroid random-walks by `drift` per step.
// High-res maps are the low-res map upsampled by `pool_side` in each grid
// direction plus `detail_noise` Gaussian noise, so average-pooling a high map
// recovers its low map when detail_noise == 0.
struct StreamSpec {
  std::uint64_t seed = 0;
  std::uint64_t steps = 200;
  std::uint32_t scenes = 6;
  std::uint32_t scene_len_min = 10;
  std::uint32_t scene_len_max = 40;
  double spread = 0.1;
  double scene_scale = 1.0;
  double drift = 0.0;
  double detail_noise = 0.05;
  std::uint16_t low_side = 4;
  std::uint16_t pool_side = 2;
  std::uint16_t dim = 64;

  GridShape low_shape() const { return {low_side, low_side, dim}; }
  GridShape high_shape() const {
    auto s = static_cast<std::uint16_t>(low_side * pool_side);
    return {s, s, dim};
  }

  // Shapes matching a memory configuration.
  static StreamSpec for_config(const MemoryConfig& c, std::uint64_t seed, std::uint64_t steps) {
    StreamSpec s;
    s.seed = seed;
    s.steps = steps;
    s.low_side = static_cast<std::uint16_t>(grid_side(c, Tier::Low));
    s.pool_side = static_cast<std::uint16_t>(grid_side(c, Tier::High) / grid_side(c, Tier::Low));
    s.dim = static_cast<std::uint16_t>(c.dim);
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidConfig, "stream spec: " + m); };
    if (scenes == 0) fail("scenes must be >= 1");
    if (scene_len_min == 0 || scene_len_min > scene_len_max) fail("need 1 <= scene_len_min <= scene_len_max");
    if (!(spread >= 0.0) || !(drift >= 0.0) || !(detail_noise >= 0.0)) fail("noise scales must be >= 0");
    if (low_side == 0 || pool_side == 0 || dim == 0) fail("grid dimensions must be positive");
  }
};

inline void apply_stream_setting(StreamSpec& s, std::string_view key, std::string_view value) {
  using detail::parse_number;
  auto real = [&](std::string_view v) {
    try {
      std::size_t used = 0;
      std::string str(v);
      double d = std::stod(str, &used);
      if (used != str.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidConfig, "bad value '" + std::string(v) + "' for " + std::string(key));
    }
  };
  if (key == "seed") s.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "steps") s.steps = parse_number<std::uint64_t>(key, value);
  else if (key == "scenes") s.scenes = parse_number<std::uint32_t>(key, value);
  else if (key == "scene_len_min") s.scene_len_min = parse_number<std::uint32_t>(key, value);
  else if (key == "scene_len_max") s.scene_len_max = parse_number<std::uint32_t>(key, value);
  else if (key == "spread") s.spread = real(value);
  else if (key == "scene_scale") s.scene_scale = real(value);
  else if (key == "drift") s.drift = real(value);
  else if (key == "detail_noise") s.detail_noise = real(value);
  else if (key == "low_side") s.low_side = parse_number<std::uint16_t>(key, value);
  else if (key == "pool_side") s.pool_side = parse_number<std::uint16_t>(key, value);
  else if (key == "dim") s.dim = parse_number<std::uint16_t>(key, value);
  else throw Error(ErrorKind::InvalidConfig, "unknown stream key '" + std::string(key) + "'");
}

inline StreamSpec parse_stream_spec(std::string_view text, StreamSpec base = {}) {
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) throw Error(ErrorKind::InvalidConfig, "stream spec: expected key = value");
    apply_stream_setting(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

struct FramePair {
  FeatureMap low;
  FeatureMap high;
  std::uint32_t scene = 0;  // ground-truth label
};

// Deterministic single-threaded iterator over a StreamSpec.
class SyntheticStream {
 public:
  explicit SyntheticStream(StreamSpec spec)
      : spec_(spec),
        segment_rng_(CounterRng::derive_key(spec.seed, 2)),
        noise_key_(CounterRng::derive_key(spec.seed, 3)),
        drift_rng_(CounterRng::derive_key(spec.seed, 4)) {
    spec_.validate();
    CounterRng scene_rng(CounterRng::derive_key(spec.seed, 1));
    const std::size_t len = spec_.low_shape().elements();
    centroids_.assign(spec_.scenes, std::vector<double>(len));
    for (auto& c : centroids_) {
      for (auto& v : c) v = spec_.scene_scale * scene_rng.next_gaussian();
    }
  }

  const StreamSpec& spec() const { return spec_; }
  std::uint64_t position() const { return next_index_; }
  bool done() const { return next_index_ >= spec_.steps; }

  std::optional<FramePair> next() {
    if (done()) return std::nullopt;
    if (remaining_in_segment_ == 0) start_segment();
    --remaining_in_segment_;
    const std::uint64_t index = next_index_++;
    auto& centroid = centroids_[scene_];
    if (spec_.drift > 0.0) {
      for (auto& v : centroid) v += spec_.drift * drift_rng_.next_gaussian();
    }

    CounterRng noise(CounterRng::derive_key(noise_key_, index));
    const auto low_shape = spec_.low_shape();
    std::vector<float> low(low_shape.elements());
    for (std::size_t i = 0; i < low.size(); ++i) {
      low[i] = static_cast<float>(centroid[i] + (spec_.spread > 0.0 ? spec_.spread * noise.next_gaussian() : 0.0));
    }

    const auto high_shape = spec_.high_shape();
    const std::size_t p = spec_.pool_side;
    const std::size_t d = spec_.dim;
    std::vector<float> high(high_shape.elements());
    for (std::size_t y = 0; y < high_shape.h; ++y) {
      for (std::size_t x = 0; x < high_shape.w; ++x) {
        const float* src = low.data() + ((y / p) * low_shape.w + (x / p)) * d;
        float* dst = high.data() + (y * high_shape.w + x) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] = src[c] + (spec_.detail_noise > 0.0 ? static_cast<float>(spec_.detail_noise * noise.next_gaussian()) : 0.0f);
        }
      }
    }
    labels_.push_back(scene_);
    return FramePair{FeatureMap(index, Tier::Low, low_shape, std::move(low)),
                     FeatureMap(index, Tier::High, high_shape, std::move(high)), scene_};
  }

  // Scene labels of all frames produced so far.
  const std::vector<std::uint32_t>& labels() const { return labels_; }

 private:
  void start_segment() {
    scene_ = segment_ < spec_.scenes ? static_cast<std::uint32_t>(segment_)
                                     : static_cast<std::uint32_t>(segment_rng_.next_in(0, spec_.scenes - 1));
    remaining_in_segment_ = segment_rng_.next_in(spec_.scene_len_min, spec_.scene_len_max);
    ++segment_;
  }

  StreamSpec spec_;
  CounterRng segment_rng_;
  std::uint64_t noise_key_;
  CounterRng drift_rng_;
  std::vector<std::vector<double>> centroids_;
  std::vector<std::uint32_t> labels_;
  std::uint64_t next_index_ = 0;
  std::uint64_t segment_ = 0;
  std::uint64_t remaining_in_segment_ = 0;
  std::uint32_t scene_ = 0;
};

inline std::vector<FramePair> generate(const StreamSpec& spec) {
  SyntheticStream s(spec);
  std::vector<FramePair> out;
  out.reserve(spec.steps);
  while (auto f = s.next()) out.push_back(std::move(*f));
  return out;
}

// Average-pools a map by `factor` in each grid direction.
inline FeatureMap average_pool(const FeatureMap& f, std::uint32_t factor, Tier result_tier = Tier::Low) {
  const auto& in = f.shape();
  if (factor == 0 || in.h % factor != 0 || in.w % factor != 0) {
    throw Error(ErrorKind::InvalidState, "grid not divisible by pooling factor");
  }
  GridShape out{static_cast<std::uint16_t>(in.h / factor), static_cast<std::uint16_t>(in.w / factor), in.dim};
  std::vector<double> acc(out.elements(), 0.0);
  auto v = f.values();
  for (std::size_t y = 0; y < in.h; ++y) {
    for (std::size_t x = 0; x < in.w; ++x) {
      const float* src = v.data() + (y * in.w + x) * in.dim;
      double* dst = acc.data() + ((y / factor) * out.w + (x / factor)) * in.dim;
      for (std::size_t c = 0; c < in.dim; ++c) dst[c] += src[c];
    }
  }
  const double n = static_cast<double>(factor) * factor;
  std::vector<float> values(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) values[i] = static_cast<float>(acc[i] / n);
  return FeatureMap(f.frame_index(), result_tier, out, std::move(values));
}

// Writes a stream as a pair of FVSB files.
inline void write_stream_files(const std::vector<FramePair>& frames, const StreamSpec& spec,
                               const std::filesystem::path& low_path, const std::filesystem::path& high_path) {
  FvsbWriter low(low_path, FvsbHeader{Tier::Low, spec.low_shape()});
  FvsbWriter high(high_path, FvsbHeader{Tier::High, spec.high_shape()});
  for (const auto& f : frames) {
    low.write(f.low);
    high.write(f.high);
  }
  low.flush();
  high.flush();
}

// Paired reader over a low-res and a high-res FVSB source.
class FileStream {
 public:
  FileStream(const std::filesystem::path& low_path, const std::filesystem::path& high_path)
      : low_(low_path), high_(high_path) {
    check_headers();
  }

  FileStream(std::istream& low, std::istream& high) : low_(low), high_(high) { check_headers(); }

  const FvsbHeader& low_header() const { return low_.header(); }
  const FvsbHeader& high_header() const { return high_.header(); }

  std::optional<FramePair> next() {
    auto l = low_.next();
    auto h = high_.next();
    if (!l && !h) return std::nullopt;
    if (!l || !h) {
      throw Error(ErrorKind::Parse, "low and high streams differ in length at record " +
                                        std::to_string(l ? l->frame_index() : h->frame_index()));
    }
    return FramePair{std::move(*l), std::move(*h), 0};
  }

 private:
  void check_headers() {
    if (low_.header().tier != Tier::Low) throw Error(ErrorKind::TierMismatch, "low-res file has high tier header");
    if (high_.header().tier != Tier::High) throw Error(ErrorKind::TierMismatch, "high-res file has low tier header");
  }

  FvsbReader low_;
  FvsbReader high_;
};

inline std::vector<FramePair> ingest_file(const std::filesystem::path& low_path, const std::filesystem::path& high_path) {
  FileStream s(low_path, high_path);
  std::vector<FramePair> out;
  while (auto f = s.next()) out.push_back(std::move(*f));
  return out;
}

}  // namespace vstream
