#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vstream/config.hpp"
#include "vstream/csm.hpp"
#include "vstream/dam.hpp"
#include "vstream/feature_bank.hpp"
#include "vstream/types.hpp"

namespace vstream {

enum class MemorySource : std::uint8_t { Csm = 0, Dam = 1 };

inline std::string_view to_string(MemorySource s) { return s == MemorySource::Csm ? "csm" : "dam"; }

struct MemoryItem {
  MemorySource source = MemorySource::Csm;
  double temporal_position = 0.0;
  std::uint64_t index = 0;  // cluster index for CSM, frame index for DAM
  FeatureMap feature;

  friend bool operator==(const MemoryItem&, const MemoryItem&) = default;
};

// Flash Memory: CSM and DAM items interleaved by temporal position, plus one
// AM-RoPE triplet per LLM token in item order.
struct FlashMemorySnapshot {
  std::vector<MemoryItem> items;
  std::vector<PositionTriplet> token_positions;
  std::uint64_t token_count = 0;
  std::uint64_t snapshot_frame_count = 0;

  std::size_t count(MemorySource s) const {
    return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [&](const auto& i) { return i.source == s; }));
  }

  friend bool operator==(const FlashMemorySnapshot&, const FlashMemorySnapshot&) = default;
};

// Triplets for an item's LLM-token grid, row-major over (y, x).
// CSM token (x, y): (P_csm, y, x). DAM token (x, y): (f(k), 2y, 2x).
// RopeScaleTarget::Csm moves the x2 stride to the CSM tokens instead.
inline std::vector<PositionTriplet> am_rope_triplets(const MemoryItem& item, const MemoryConfig& config) {
  const Tier tier = item.source == MemorySource::Csm ? Tier::Low : Tier::High;
  const std::uint32_t side = llm_grid_side(config, tier);
  const bool scaled = (item.source == MemorySource::Dam) == (config.rope_scale_target == RopeScaleTarget::Dam);
  const std::uint32_t stride = scaled ? 2 : 1;
  std::vector<PositionTriplet> out;
  out.reserve(std::size_t{side} * side);
  for (std::uint32_t y = 0; y < side; ++y) {
    for (std::uint32_t x = 0; x < side; ++x) out.push_back({item.temporal_position, y * stride, x * stride});
  }
  return out;
}

// `csm_maps`, when given, holds centroid_feature(csm, k, k) for every k.
inline FlashMemorySnapshot assemble(const ClusterState& csm, const DamState& dam, const MemoryConfig& config,
                                    std::span<const FeatureMap> csm_maps = {}) {
  const auto low = grid_shape(config, Tier::Low);
  const auto high = grid_shape(config, Tier::High);
  if (!csm.empty() && !(csm.shape() == low)) throw Error(ErrorKind::InvalidState, "CSM grid does not match configuration");
  if (csm.size() > config.n_csm) throw Error(ErrorKind::InvalidState, "CSM holds more clusters than n_csm");
  if (dam.entries.size() > config.n_dam) throw Error(ErrorKind::InvalidState, "DAM holds more entries than n_dam");

  if (!csm_maps.empty() && csm_maps.size() != csm.size()) {
    throw Error(ErrorKind::InvalidState, "rendered centroid count does not match CSM");
  }

  FlashMemorySnapshot snap;
  snap.snapshot_frame_count = csm.frames_seen();
  snap.items.reserve(csm.size() + dam.entries.size());
  for (std::size_t k = 0; k < csm.size(); ++k) {
    snap.items.push_back(
        {MemorySource::Csm, csm.position(k), k, csm_maps.empty() ? centroid_feature(csm, k, k) : csm_maps[k]});
  }
  for (const auto& e : dam.entries) {
    if (!(e.feature.shape() == high) || e.feature.tier() != Tier::High) {
      throw Error(ErrorKind::InvalidState, "DAM entry " + std::to_string(e.frame_index) + " is not a high-res map");
    }
    snap.items.push_back({MemorySource::Dam, static_cast<double>(e.frame_index), e.frame_index, e.feature});
  }
  std::stable_sort(snap.items.begin(), snap.items.end(), [](const MemoryItem& a, const MemoryItem& b) {
    if (a.temporal_position != b.temporal_position) return a.temporal_position < b.temporal_position;
    if (a.source != b.source) return a.source < b.source;
    return a.index < b.index;
  });
  for (const auto& item : snap.items) {
    auto t = am_rope_triplets(item, config);
    snap.token_positions.insert(snap.token_positions.end(), t.begin(), t.end());
  }
  snap.token_count = snap.token_positions.size();
  return snap;
}

// ---------------------------------------------------------------------------
// Snapshot binary export ("FVSS", little-endian):
//
//   header (32 bytes): "FVSS" | u16 version=1 | u16 reserved | u32 items |
//                      u64 token_count | u64 snapshot_frame_count | u32 reserved
//   per item:          u8 source | u8 tier | u16 h | u16 w | u16 dim |
//                      u64 index | f64 temporal_position | f32 x (h*w*dim)
//   per token:         f64 n_t | u32 n_h | u32 n_w
// ---------------------------------------------------------------------------

inline void write_snapshot(std::ostream& out, const FlashMemorySnapshot& s) {
  std::string buf = "FVSS";
  detail::append_le(buf, 1, 2);
  detail::append_le(buf, 0, 2);
  detail::append_le(buf, s.items.size(), 4);
  detail::append_le(buf, s.token_count, 8);
  detail::append_le(buf, s.snapshot_frame_count, 8);
  detail::append_le(buf, 0, 4);
  for (const auto& item : s.items) {
    const auto& sh = item.feature.shape();
    detail::append_le(buf, static_cast<std::uint8_t>(item.source), 1);
    detail::append_le(buf, static_cast<std::uint8_t>(item.feature.tier()), 1);
    detail::append_le(buf, sh.h, 2);
    detail::append_le(buf, sh.w, 2);
    detail::append_le(buf, sh.dim, 2);
    detail::append_le(buf, item.index, 8);
    detail::append_le(buf, std::bit_cast<std::uint64_t>(item.temporal_position), 8);
    auto pos = buf.size();
    buf.resize(pos + item.feature.values().size_bytes());
    detail::floats_to_le(item.feature.values(), reinterpret_cast<unsigned char*>(buf.data() + pos));
  }
  for (const auto& t : s.token_positions) {
    detail::append_le(buf, std::bit_cast<std::uint64_t>(t.n_t), 8);
    detail::append_le(buf, t.n_h, 4);
    detail::append_le(buf, t.n_w, 4);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorKind::Storage, "snapshot write failed");
}

inline FlashMemorySnapshot read_snapshot(std::istream& in) {
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::string_view v(data);
  if (v.size() < 32 || v.substr(0, 4) != "FVSS") throw Error(ErrorKind::Parse, "snapshot: bad header");
  std::size_t pos = 4;
  if (detail::read_le(v, pos, 2) != 1) throw Error(ErrorKind::Parse, "snapshot: unsupported version");
  detail::read_le(v, pos, 2);
  const auto n_items = detail::read_le(v, pos, 4);
  FlashMemorySnapshot s;
  s.token_count = detail::read_le(v, pos, 8);
  s.snapshot_frame_count = detail::read_le(v, pos, 8);
  detail::read_le(v, pos, 4);
  for (std::uint64_t i = 0; i < n_items; ++i) {
    MemoryItem item;
    auto source = detail::read_le(v, pos, 1);
    auto tier = detail::read_le(v, pos, 1);
    if (source > 1 || tier > 1) throw Error(ErrorKind::Parse, "snapshot: bad item tag at byte " + std::to_string(pos));
    item.source = static_cast<MemorySource>(source);
    GridShape sh;
    sh.h = static_cast<std::uint16_t>(detail::read_le(v, pos, 2));
    sh.w = static_cast<std::uint16_t>(detail::read_le(v, pos, 2));
    sh.dim = static_cast<std::uint16_t>(detail::read_le(v, pos, 2));
    item.index = detail::read_le(v, pos, 8);
    item.temporal_position = std::bit_cast<double>(detail::read_le(v, pos, 8));
    const std::size_t bytes = sh.elements() * sizeof(float);
    if (pos + bytes > v.size()) throw Error(ErrorKind::Parse, "snapshot: truncated item " + std::to_string(i));
    std::vector<float> values(sh.elements());
    detail::le_to_floats(reinterpret_cast<const unsigned char*>(v.data() + pos), values);
    pos += bytes;
    item.feature = FeatureMap(item.index, static_cast<Tier>(tier), sh,
                              std::move(values));
    s.items.push_back(std::move(item));
  }
  s.token_positions.reserve(s.token_count);
  for (std::uint64_t i = 0; i < s.token_count; ++i) {
    PositionTriplet t;
    t.n_t = std::bit_cast<double>(detail::read_le(v, pos, 8));
    t.n_h = static_cast<std::uint32_t>(detail::read_le(v, pos, 4));
    t.n_w = static_cast<std::uint32_t>(detail::read_le(v, pos, 4));
    s.token_positions.push_back(t);
  }
  if (pos != v.size()) throw Error(ErrorKind::Parse, "snapshot: trailing bytes at " + std::to_string(pos));
  return s;
}

// Metadata document accompanying a binary snapshot.
inline nlohmann::json snapshot_metadata(const FlashMemorySnapshot& s) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : s.items) {
    items.push_back({{"source", to_string(item.source)},
                     {"index", item.index},
                     {"temporal_position", item.temporal_position},
                     {"tier", to_string(item.feature.tier())}});
  }
  return {{"format", "vstream-snapshot"},
          {"version", 1},
          {"snapshot_frame_count", s.snapshot_frame_count},
          {"token_count", s.token_count},
          {"csm_items", s.count(MemorySource::Csm)},
          {"dam_items", s.count(MemorySource::Dam)},
          {"items", std::move(items)}};
}

}  // namespace vstream
