#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vstream/config.hpp"
#include "vstream/errors.hpp"
#include "vstream/rng.hpp"
#include "vstream/types.hpp"

namespace vstream {

// ---------------------------------------------------------------------------
// FVSB file format
//
//   offset  size  field
//   0       4     magic "FVSB"
//   4       2     version (u16 LE, currently 1)
//   6       1     tier (0 = low, 1 = high)
//   7       2     grid_h (u16 LE)
//   9       2     grid_w (u16 LE)
//   11      2     dim (u16 LE)
//   13      19    reserved, written as zero
//   32      ...   records: grid_h * grid_w * dim f32 LE each, frame i at
//                 32 + i * stride
//
// The frame count is implied by the file length.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kFvsbHeaderSize = 32;
inline constexpr std::uint16_t kFvsbVersion = 1;

struct FvsbHeader {
  Tier tier = Tier::Low;
  GridShape shape{};

  std::size_t stride_bytes() const { return shape.elements() * sizeof(float); }
};

namespace detail {
inline void put_u16(unsigned char* p, std::uint16_t v) {
  p[0] = static_cast<unsigned char>(v & 0xFF);
  p[1] = static_cast<unsigned char>(v >> 8);
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (std::uint16_t{p[1]} << 8));
}

// Converts between host floats and little-endian f32 bytes.
inline void floats_to_le(std::span<const float> in, unsigned char* out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out, in.data(), in.size_bytes());
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(in[i]);
      for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
  }
}
inline void le_to_floats(const unsigned char* in, std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), in, out.size_bytes());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t{in[i * 4 + b]} << (8 * b);
      out[i] = std::bit_cast<float>(bits);
    }
  }
}
}  // namespace detail

inline std::array<unsigned char, kFvsbHeaderSize> encode_fvsb_header(const FvsbHeader& h) {
  std::array<unsigned char, kFvsbHeaderSize> out{};
  std::memcpy(out.data(), "FVSB", 4);
  detail::put_u16(out.data() + 4, kFvsbVersion);
  out[6] = static_cast<unsigned char>(h.tier);
  detail::put_u16(out.data() + 7, h.shape.h);
  detail::put_u16(out.data() + 9, h.shape.w);
  detail::put_u16(out.data() + 11, h.shape.dim);
  return out;
}

inline FvsbHeader decode_fvsb_header(std::span<const unsigned char> bytes) {
  auto fail = [](std::size_t offset, const std::string& what) {
    throw Error(ErrorKind::Parse, "FVSB header at byte " + std::to_string(offset) + ": " + what);
  };
  if (bytes.size() < kFvsbHeaderSize) fail(bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), "FVSB", 4) != 0) fail(0, "bad magic");
  if (detail::get_u16(bytes.data() + 4) != kFvsbVersion) fail(4, "unsupported version");
  if (bytes[6] > 1) fail(6, "bad tier byte");
  FvsbHeader h;
  h.tier = static_cast<Tier>(bytes[6]);
  h.shape = GridShape{detail::get_u16(bytes.data() + 7), detail::get_u16(bytes.data() + 9),
                      detail::get_u16(bytes.data() + 11)};
  if (h.shape.elements() == 0) fail(7, "empty grid");
  return h;
}

// Sequential FVSB writer.
class FvsbWriter {
 public:
  FvsbWriter(std::ostream& out, FvsbHeader header) : out_(&out), header_(header) { write_header(); }

  FvsbWriter(const std::filesystem::path& path, FvsbHeader header)
      : file_(std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc)),
        out_(file_.get()),
        header_(header) {
    if (!*file_) throw Error(ErrorKind::Storage, "cannot create " + path.string());
    write_header();
  }

  void write(const FeatureMap& f) {
    if (f.tier() != header_.tier) throw Error(ErrorKind::TierMismatch, "FVSB writer tier mismatch");
    if (!(f.shape() == header_.shape)) throw Error(ErrorKind::InvalidState, "FVSB writer shape mismatch");
    buffer_.resize(header_.stride_bytes());
    detail::floats_to_le(f.values(), buffer_.data());
    out_->write(reinterpret_cast<const char*>(buffer_.data()), static_cast<std::streamsize>(buffer_.size()));
    if (!*out_) throw Error(ErrorKind::Storage, "FVSB write failed at record " + std::to_string(written_));
    ++written_;
  }

  void flush() { out_->flush(); }
  std::uint64_t written() const { return written_; }

 private:
  void write_header() {
    auto h = encode_fvsb_header(header_);
    out_->write(reinterpret_cast<const char*>(h.data()), h.size());
    if (!*out_) throw Error(ErrorKind::Storage, "FVSB header write failed");
  }

  std::unique_ptr<std::ofstream> file_;
  std::ostream* out_;
  FvsbHeader header_;
  std::vector<unsigned char> buffer_;
  std::uint64_t written_ = 0;
};

// Sequential FVSB reader. Works on any byte stream (regular files, pipes);
// records are assigned frame indices in file order.
class FvsbReader {
 public:
  explicit FvsbReader(std::istream& in) : in_(&in) { read_header(); }

  explicit FvsbReader(const std::filesystem::path& path)
      : file_(std::make_unique<std::ifstream>(path, std::ios::binary)), in_(file_.get()) {
    if (!*file_) throw Error(ErrorKind::Parse, "cannot open " + path.string());
    read_header();
  }

  const FvsbHeader& header() const { return header_; }

  // Next record, or nullopt at a clean end of stream.
  std::optional<FeatureMap> next() {
    std::vector<unsigned char> raw(header_.stride_bytes());
    in_->read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    auto got = static_cast<std::size_t>(in_->gcount());
    if (got == 0) return std::nullopt;
    std::uint64_t offset = kFvsbHeaderSize + index_ * raw.size();
    if (got != raw.size()) {
      throw Error(ErrorKind::Parse, "truncated record " + std::to_string(index_) + " at byte offset " +
                                        std::to_string(offset) + " (" + std::to_string(got) + " of " +
                                        std::to_string(raw.size()) + " bytes)");
    }
    std::vector<float> values(header_.shape.elements());
    detail::le_to_floats(raw.data(), values);
    try {
      return FeatureMap(index_++, header_.tier, header_.shape, std::move(values));
    } catch (const Error& e) {
      throw Error(ErrorKind::Parse, "record " + std::to_string(index_) + " at byte offset " +
                                        std::to_string(offset) + ": " + e.what());
    }
  }

  std::uint64_t records_read() const { return index_; }

 private:
  void read_header() {
    std::array<unsigned char, kFvsbHeaderSize> h{};
    in_->read(reinterpret_cast<char*>(h.data()), h.size());
    header_ = decode_fvsb_header(std::span<const unsigned char>(h.data(), static_cast<std::size_t>(in_->gcount())));
  }

  std::unique_ptr<std::ifstream> file_;
  std::istream* in_;
  FvsbHeader header_{};
  std::uint64_t index_ = 0;
};

// ---------------------------------------------------------------------------
// FeatureBank
// ---------------------------------------------------------------------------

// Append-only per-tier frame store. Up to `watermark` of the newest frames
// stay in memory; older frames spill to an FVSB file. One writer, any number
// of readers: readers never observe a frame index >= count(), and a committed
// frame stays readable across the memory/disk move because it is written to
// disk before its memory slot is released.
class FeatureBank {
 public:
  struct Options {
    std::uint64_t watermark = kUnlimited;
    std::filesystem::path spill_path;  // empty: unique file in the temp directory
    bool keep_spill_file = false;
  };

  FeatureBank(Tier tier, GridShape shape) : FeatureBank(tier, shape, Options{}) {}

  FeatureBank(Tier tier, GridShape shape, Options options)
      : tier_(tier),
        shape_(shape),
        options_(std::move(options)),
        directory_(std::make_unique<std::atomic<Chunk*>[]>(kMaxChunks)) {
    if (shape_.elements() == 0) throw Error(ErrorKind::InvalidConfig, "feature bank with empty grid");
    for (std::size_t i = 0; i < kMaxChunks; ++i) directory_[i].store(nullptr, std::memory_order_relaxed);
  }

  FeatureBank(const FeatureBank&) = delete;
  FeatureBank& operator=(const FeatureBank&) = delete;

  ~FeatureBank() {
    for (std::size_t i = 0; i < kMaxChunks; ++i) delete directory_[i].load(std::memory_order_relaxed);
    if (int fd = fd_.load(); fd >= 0) {
      ::close(fd);
      if (!options_.keep_spill_file) {
        std::error_code ec;
        std::filesystem::remove(spill_path_, ec);
      }
    }
  }

  Tier tier() const { return tier_; }
  const GridShape& shape() const { return shape_; }
  std::size_t stride_bytes() const { return shape_.elements() * sizeof(float); }
  std::uint64_t watermark() const { return options_.watermark; }

  std::uint64_t count() const { return count_.load(std::memory_order_acquire); }
  std::uint64_t spilled_count() const { return spilled_.load(std::memory_order_acquire); }
  std::uint64_t resident_count() const { return count() - spilled_count(); }
  const std::filesystem::path& spill_path() const { return spill_path_; }

  // Writer only. Returns the frame index of the appended map.
  std::uint64_t append(const FeatureMap& f) {
    if (f.tier() != tier_) {
      throw Error(ErrorKind::TierMismatch, "bank is " + std::string(to_string(tier_)) + ", frame " +
                                               std::to_string(f.frame_index()) + " is " +
                                               std::string(to_string(f.tier())));
    }
    if (!(f.shape() == shape_)) throw Error(ErrorKind::InvalidState, "frame grid does not match bank");
    const std::uint64_t index = count_.load(std::memory_order_relaxed);
    if (f.frame_index() != index) {
      throw Error(ErrorKind::Sequencing, "expected frame " + std::to_string(index) + ", got " +
                                             std::to_string(f.frame_index()));
    }
    if (index >= kMaxChunks * kChunkSize) throw Error(ErrorKind::Storage, "feature bank capacity exhausted");

    std::atomic_store(&slot(index, /*create=*/true), f.storage());
    count_.store(index + 1, std::memory_order_release);

    while (count_.load(std::memory_order_relaxed) - spilled_.load(std::memory_order_relaxed) > options_.watermark) {
      spill_oldest();
    }
    return index;
  }

  // Shared view of a frame's values; no copy for resident frames.
  std::shared_ptr<const std::vector<float>> values(std::uint64_t index) const {
    if (index >= count()) {
      throw Error(ErrorKind::NotFound, "frame " + std::to_string(index) + " not in " +
                                           std::string(to_string(tier_)) + " bank of " +
                                           std::to_string(count()));
    }
    if (auto p = std::atomic_load(&slot(index))) return p;
    return read_from_disk(index);
  }

  FeatureMap read(std::uint64_t index) const { return FeatureMap(index, tier_, shape_, values(index)); }

 private:
  static constexpr std::size_t kChunkSize = 4096;
  static constexpr std::size_t kMaxChunks = 1 << 14;

  struct Chunk {
    std::array<std::shared_ptr<const std::vector<float>>, kChunkSize> slots;
  };

  std::shared_ptr<const std::vector<float>>& slot(std::uint64_t index, bool create = false) const {
    auto& entry = directory_[index / kChunkSize];
    Chunk* chunk = entry.load(std::memory_order_acquire);
    if (!chunk) {
      if (!create) throw Error(ErrorKind::InvalidState, "feature bank chunk missing");
      chunk = new Chunk();
      entry.store(chunk, std::memory_order_release);
    }
    return chunk->slots[index % kChunkSize];
  }

  void open_spill_file() {
    spill_path_ = options_.spill_path;
    if (spill_path_.empty()) {
      auto token = CounterRng::mix(reinterpret_cast<std::uintptr_t>(this) ^
                                   static_cast<std::uint64_t>(::getpid()) << 32);
      spill_path_ = std::filesystem::temp_directory_path() /
                    ("vstream-" + std::string(to_string(tier_)) + "-" + std::to_string(token) + ".fvsb");
    }
    int fd = ::open(spill_path_.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw Error(ErrorKind::Storage, "cannot open spill file " + spill_path_.string() + ": " + std::strerror(errno));
    auto header = encode_fvsb_header(FvsbHeader{tier_, shape_});
    write_all(fd, header.data(), header.size(), 0);
    fd_.store(fd, std::memory_order_release);
  }

  static void write_all(int fd, const unsigned char* data, std::size_t size, std::uint64_t offset) {
    while (size > 0) {
      auto n = ::pwrite(fd, data, size, static_cast<off_t>(offset));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorKind::Storage, std::string("spill write failed: ") + std::strerror(errno));
      data += n;
      size -= static_cast<std::size_t>(n);
      offset += static_cast<std::uint64_t>(n);
    }
  }

  void spill_oldest() {
    if (fd_.load(std::memory_order_relaxed) < 0) open_spill_file();
    const std::uint64_t index = spilled_.load(std::memory_order_relaxed);
    auto& s = slot(index);
    auto data = std::atomic_load(&s);
    std::vector<unsigned char> bytes(stride_bytes());
    detail::floats_to_le(*data, bytes.data());
    write_all(fd_.load(std::memory_order_relaxed), bytes.data(), bytes.size(), kFvsbHeaderSize + index * stride_bytes());
    std::atomic_store(&s, std::shared_ptr<const std::vector<float>>());
    spilled_.store(index + 1, std::memory_order_release);
  }

  std::shared_ptr<const std::vector<float>> read_from_disk(std::uint64_t index) const {
    int fd = fd_.load(std::memory_order_acquire);
    if (fd < 0) throw Error(ErrorKind::BankIntegrity, "frame " + std::to_string(index) + " neither resident nor spilled");
    std::vector<unsigned char> bytes(stride_bytes());
    std::size_t done = 0;
    const std::uint64_t offset = kFvsbHeaderSize + index * stride_bytes();
    while (done < bytes.size()) {
      auto n = ::pread(fd, bytes.data() + done, bytes.size() - done, static_cast<off_t>(offset + done));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorKind::BankIntegrity, "short read of spilled frame " + std::to_string(index));
      done += static_cast<std::size_t>(n);
    }
    auto values = std::make_shared<std::vector<float>>(shape_.elements());
    detail::le_to_floats(bytes.data(), *values);
    return values;
  }

  Tier tier_;
  GridShape shape_;
  Options options_;
  std::unique_ptr<std::atomic<Chunk*>[]> directory_;
  std::atomic<std::uint64_t> count_{0};
  std::atomic<std::uint64_t> spilled_{0};
  std::atomic<int> fd_{-1};
  std::filesystem::path spill_path_;
};

}  // namespace vstream
