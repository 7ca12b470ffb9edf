#include <gtest/gtest.h>

#include <atomic>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "support.hpp"

using namespace vstream;
using testing_support::TempDir;

namespace {

GridShape small{2, 2, 3};

FeatureMap frame(std::uint64_t i, Tier tier = Tier::Low, GridShape shape = small) {
  std::vector<float> v(shape.elements());
  for (std::size_t e = 0; e < v.size(); ++e) v[e] = static_cast<float>(i) * 0.5f + static_cast<float>(e) * 1e-3f - 7.25f;
  return FeatureMap(i, tier, shape, std::move(v));
}

std::string encode(const std::vector<FeatureMap>& frames, Tier tier = Tier::Low) {
  std::ostringstream out;
  FvsbWriter w(out, FvsbHeader{tier, small});
  for (const auto& f : frames) w.write(f);
  return out.str();
}

std::string error_of(const auto& fn, ErrorKind expected) {
  try {
    fn();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), expected) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "no error raised";
  return {};
}

TEST(Fvsb, HeaderLayout) {
  auto bytes = encode_fvsb_header(FvsbHeader{Tier::High, GridShape{32, 32, 16}});
  EXPECT_EQ(std::memcmp(bytes.data(), "FVSB", 4), 0);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);
  EXPECT_EQ(bytes[7], 32);
  EXPECT_EQ(bytes[11], 16);
  for (std::size_t i = 13; i < kFvsbHeaderSize; ++i) EXPECT_EQ(bytes[i], 0) << i;
  auto h = decode_fvsb_header(bytes);
  EXPECT_EQ(h.tier, Tier::High);
  EXPECT_EQ(h.shape, (GridShape{32, 32, 16}));
}

TEST(Fvsb, HeaderErrorsNameByteOffset) {
  auto bytes = encode_fvsb_header(FvsbHeader{Tier::Low, small});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of([&] { decode_fvsb_header(bad); }, ErrorKind::Parse).find("byte 0"), std::string::npos);
  bad = bytes;
  bad[4] = 9;
  EXPECT_NE(error_of([&] { decode_fvsb_header(bad); }, ErrorKind::Parse).find("byte 4"), std::string::npos);
  bad = bytes;
  bad[6] = 7;
  EXPECT_NE(error_of([&] { decode_fvsb_header(bad); }, ErrorKind::Parse).find("byte 6"), std::string::npos);
  EXPECT_NE(error_of([&] { decode_fvsb_header(std::span(bytes.data(), 10)); }, ErrorKind::Parse).find("byte 10"),
            std::string::npos);
}

TEST(Fvsb, BitExactRoundTrip) {
  std::vector<FeatureMap> frames;
  for (std::uint64_t i = 0; i < 5; ++i) frames.push_back(frame(i));
  frames.push_back(FeatureMap(5, Tier::Low, small, std::vector<float>{-0.0f, 1e-45f, 3.4e38f, -1.0f, 0.1f, 0.2f, 0.3f, 0.4f,
                                                                      0.5f, 0.6f, 0.7f, 0.8f}));
  std::istringstream in(encode(frames));
  FvsbReader r(in);
  EXPECT_EQ(r.header().shape, small);
  for (const auto& f : frames) {
    auto got = r.next();
    ASSERT_TRUE(got);
    EXPECT_TRUE(*got == f);
  }
  EXPECT_FALSE(r.next());
  EXPECT_EQ(r.records_read(), frames.size());
}

TEST(Fvsb, EmptyStream) {
  std::istringstream in(encode({}));
  FvsbReader r(in);
  EXPECT_FALSE(r.next());
}

TEST(Fvsb, TruncatedRecordIsNamed) {
  auto bytes = encode({frame(0), frame(1), frame(2)});
  bytes.resize(bytes.size() - 5);
  std::istringstream in(bytes);
  FvsbReader r(in);
  ASSERT_TRUE(r.next());
  ASSERT_TRUE(r.next());
  auto msg = error_of([&] { r.next(); }, ErrorKind::Parse);
  EXPECT_NE(msg.find("record 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find(std::to_string(kFvsbHeaderSize + 2 * small.elements() * 4)), std::string::npos) << msg;
}

TEST(Fvsb, NonFiniteRecordRejected) {
  auto bytes = encode({frame(0)});
  float nan = NAN;
  std::memcpy(bytes.data() + kFvsbHeaderSize + 4, &nan, 4);
  std::istringstream in(bytes);
  FvsbReader r(in);
  error_of([&] { r.next(); }, ErrorKind::Parse);
}

TEST(Fvsb, WriterChecksFrames) {
  std::ostringstream out;
  FvsbWriter w(out, FvsbHeader{Tier::Low, small});
  error_of([&] { w.write(frame(0, Tier::High)); }, ErrorKind::TierMismatch);
  error_of([&] { w.write(frame(0, Tier::Low, GridShape{1, 1, 3})); }, ErrorKind::InvalidState);
}

TEST(FeatureBank, AppendAndRead) {
  FeatureBank bank(Tier::Low, small);
  for (std::uint64_t i = 0; i < 10; ++i) EXPECT_EQ(bank.append(frame(i)), i);
  EXPECT_EQ(bank.count(), 10u);
  EXPECT_EQ(bank.spilled_count(), 0u);
  for (std::uint64_t i = 0; i < 10; ++i) EXPECT_TRUE(bank.read(i) == frame(i));
}

TEST(FeatureBank, Errors) {
  FeatureBank bank(Tier::Low, small);
  bank.append(frame(0));
  error_of([&] { bank.read(1); }, ErrorKind::NotFound);
  error_of([&] { bank.append(frame(2)); }, ErrorKind::Sequencing);
  error_of([&] { bank.append(frame(1, Tier::High)); }, ErrorKind::TierMismatch);
  error_of([&] { bank.append(frame(1, Tier::Low, GridShape{1, 1, 3})); }, ErrorKind::InvalidState);
  EXPECT_EQ(bank.count(), 1u);
}

TEST(FeatureBank, SpillsBeyondWatermark) {
  TempDir dir;
  FeatureBank::Options o;
  o.watermark = 3;
  o.spill_path = dir / "low.fvsb";
  o.keep_spill_file = true;
  {
    FeatureBank bank(Tier::Low, small, o);
    for (std::uint64_t i = 0; i < 10; ++i) bank.append(frame(i));
    EXPECT_EQ(bank.resident_count(), 3u);
    EXPECT_EQ(bank.spilled_count(), 7u);
    for (std::uint64_t i = 0; i < 10; ++i) EXPECT_TRUE(bank.read(i) == frame(i)) << i;
  }
  // the spill file is itself a valid FVSB stream of the spilled prefix
  std::ifstream in(dir / "low.fvsb", std::ios::binary);
  FvsbReader r(in);
  for (std::uint64_t i = 0; i < 7; ++i) {
    auto f = r.next();
    ASSERT_TRUE(f);
    EXPECT_TRUE(*f == frame(i));
  }
  EXPECT_FALSE(r.next());
}

TEST(FeatureBank, SpillFileRemovedByDefault) {
  TempDir dir;
  FeatureBank::Options o;
  o.watermark = 0;
  o.spill_path = dir / "x.fvsb";
  {
    FeatureBank bank(Tier::Low, small, o);
    bank.append(frame(0));
    EXPECT_TRUE(std::filesystem::exists(o.spill_path));
    EXPECT_TRUE(bank.read(0) == frame(0));
  }
  EXPECT_FALSE(std::filesystem::exists(o.spill_path));
}

TEST(FeatureBank, WatermarkInvariantReads) {
  for (std::uint64_t wm : {std::uint64_t{0}, std::uint64_t{1}, std::uint64_t{64}, kUnlimited}) {
    FeatureBank::Options o;
    o.watermark = wm;
    FeatureBank bank(Tier::High, small, o);
    for (std::uint64_t i = 0; i < 200; ++i) bank.append(frame(i, Tier::High));
    for (std::uint64_t i = 0; i < 200; ++i) ASSERT_TRUE(bank.read(i) == frame(i, Tier::High)) << wm << " " << i;
  }
}

TEST(FeatureBank, HundredThousandFramesWithSpill) {
  GridShape tiny{1, 1, 2};
  FeatureBank::Options o;
  o.watermark = 1000;
  FeatureBank bank(Tier::Low, tiny, o);
  for (std::uint64_t i = 0; i < 100000; ++i) {
    bank.append(FeatureMap(i, Tier::Low, tiny, std::vector<float>{static_cast<float>(i), -static_cast<float>(i)}));
  }
  EXPECT_EQ(bank.count(), 100000u);
  EXPECT_EQ(bank.resident_count(), 1000u);
  for (std::uint64_t i : {0ull, 1ull, 12345ull, 98999ull, 99000ull, 99999ull}) {
    auto v = bank.values(i);
    EXPECT_EQ((*v)[0], static_cast<float>(i));
    EXPECT_EQ((*v)[1], -static_cast<float>(i));
  }
}

TEST(FeatureBank, ConcurrentReadersDuringSpill) {
  FeatureBank::Options o;
  o.watermark = 8;
  FeatureBank bank(Tier::Low, small, o);
  std::atomic<bool> done{false};
  std::atomic<std::uint64_t> checks{0};
  std::atomic<bool> ok{true};
  std::vector<std::thread> readers;
  for (int r = 0; r < 3; ++r) {
    readers.emplace_back([&, r] {
      std::uint64_t k = static_cast<std::uint64_t>(r);
      while (!done.load()) {
        auto n = bank.count();
        if (n == 0) continue;
        k = (k * 2654435761u + 1) % n;
        if (!(bank.read(k) == frame(k))) ok = false;
        ++checks;
      }
    });
  }
  for (std::uint64_t i = 0; i < 3000; ++i) {
    bank.append(frame(i));
    if (i % 64 == 0) std::this_thread::yield();
  }
  while (checks.load() < 100) std::this_thread::yield();
  done = true;
  for (auto& t : readers) t.join();
  EXPECT_TRUE(ok.load());
  EXPECT_GT(checks.load(), 0u);
}

}  // namespace
