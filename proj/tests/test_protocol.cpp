#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <random>
#include <thread>
#include <vector>

#include "kneelink/protocol.hpp"
#include "kneelink/transport.hpp"
#include "oracles.hpp"

using namespace kneelink;
using namespace kneelink::protocol;

namespace {

std::vector<std::uint8_t> bytes_of(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int b : v) out.push_back(static_cast<std::uint8_t>(b));
  return out;
}

std::vector<std::uint8_t> stream_of(const std::vector<std::uint16_t>& seqs) {
  std::vector<std::uint8_t> s;
  for (auto q : seqs) {
    const auto f = encode_frame(q, {static_cast<float>(q) * 0.5f, q, static_cast<std::uint16_t>(4095 - q % 4096)});
    s.insert(s.end(), f.begin(), f.end());
  }
  return s;
}

}  // namespace

TEST(Codec, FixedByteLayouts) {
  const auto zero = encode_packet({0.0f, 0, 0});
  EXPECT_EQ(std::vector<std::uint8_t>(zero.begin(), zero.end()), bytes_of({0, 0, 0, 0, 0, 0, 0, 0}));

  const auto one = encode_packet({1.0f, 1, 256});
  EXPECT_EQ(std::vector<std::uint8_t>(one.begin(), one.end()),
            bytes_of({0x00, 0x00, 0x80, 0x3F, 0x01, 0x00, 0x00, 0x01}));

  const TelemetryPacket deep{125.5f, 1986, 512};
  const auto rt = decode_packet(encode_packet(deep));
  EXPECT_EQ(rt.packet, deep);
  EXPECT_FALSE(rt.is_suspect());
}

TEST(Codec, FrameMatchesIndependentEncoding) {
  // Expected bytes produced with Python struct + binascii.crc_hqx.
  const auto f1 = encode_frame(1, {1.0f, 1, 256});
  EXPECT_EQ(std::vector<std::uint8_t>(f1.begin(), f1.end()),
            bytes_of({0xAA, 0x55, 0x01, 0x00, 0x00, 0x00, 0x80, 0x3F, 0x01, 0x00, 0x00, 0x01,
                      0xDE, 0x55}));
  const auto f2 = encode_frame(0x1234, {125.5f, 1986, 512});
  EXPECT_EQ(std::vector<std::uint8_t>(f2.begin(), f2.end()),
            bytes_of({0xAA, 0x55, 0x34, 0x12, 0x00, 0x00, 0xFB, 0x42, 0xC2, 0x07, 0x00, 0x02,
                      0xE5, 0x88}));
}

TEST(Codec, DecodeZerosAndSpecials) {
  const std::vector<std::uint8_t> z(8, 0);
  const auto d = decode_packet(z);
  EXPECT_EQ(d.packet, (TelemetryPacket{0.0f, 0, 0}));

  auto inf = bytes_of({0x00, 0x00, 0x80, 0x7F, 0x00, 0x10, 0xFF, 0x0F});
  const auto di = decode_packet(inf);
  EXPECT_TRUE(std::isinf(di.packet.knee_angle_deg));
  EXPECT_TRUE(di.suspect & kSuspectAngle);
  EXPECT_TRUE(di.suspect & kSuspectEmg1);  // 0x1000 = 4096
  EXPECT_FALSE(di.suspect & kSuspectEmg2);  // 0x0FFF = 4095
}

TEST(Codec, Errors) {
  EXPECT_THROW(encode_packet({std::numeric_limits<float>::infinity(), 0, 0}), Error);
  EXPECT_THROW(encode_packet({std::numeric_limits<float>::quiet_NaN(), 0, 0}), Error);
  const std::vector<std::uint8_t> seven(7, 0);
  try {
    decode_packet(seven);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Framing);
  }
}

TEST(Codec, RoundTripIncludingSubnormalsProperty) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::uint32_t> bits;
  std::uniform_int_distribution<int> counts(0, 4095);
  int checked = 0;
  for (int i = 0; i < 200000; ++i) {
    float a = std::bit_cast<float>(bits(rng));
    if (i % 10 == 0) a = std::bit_cast<float>(bits(rng) & 0x807FFFFFu);  // subnormal / zero
    if (!std::isfinite(a)) continue;
    const TelemetryPacket p{a, static_cast<std::uint16_t>(counts(rng)),
                            static_cast<std::uint16_t>(counts(rng))};
    const auto d = decode_packet(encode_packet(p));
    ASSERT_EQ(std::bit_cast<std::uint32_t>(d.packet.knee_angle_deg),
              std::bit_cast<std::uint32_t>(p.knee_angle_deg));
    ASSERT_EQ(d.packet.emg1_counts, p.emg1_counts);
    ASSERT_EQ(d.packet.emg2_counts, p.emg2_counts);
    ASSERT_FALSE(d.is_suspect());
    ++checked;
  }
  EXPECT_GT(checked, 190000);
}

TEST(Crc, CheckValueAndBitwiseOracle) {
  const std::string check = "123456789";
  const std::span<const std::uint8_t> s(reinterpret_cast<const std::uint8_t*>(check.data()),
                                        check.size());
  EXPECT_EQ(crc16_ccitt_false(s), 0x29B1);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
  for (int i = 0; i < 2000; ++i) {
    std::vector<std::uint8_t> v(len(rng));
    for (auto& b : v) b = static_cast<std::uint8_t>(byte(rng));
    ASSERT_EQ(crc16_ccitt_false(v), oracle::crc16_bitwise(v));
  }
}

TEST(Parser, SingleFrame) {
  FrameParser p;
  const auto f = encode_frame(7, {12.5f, 100, 200});
  const auto out = p.feed(f);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].seq, 7);
  EXPECT_EQ(out[0].packet, (TelemetryPacket{12.5f, 100, 200}));
  const auto st = p.take_stats();
  EXPECT_EQ(st.received, 1u);
  EXPECT_EQ(st.dropped, 0u);
}

TEST(Parser, SingleByteCorruptionDetected) {
  for (std::size_t pos = 4; pos < 12; ++pos) {
    FrameParser p;
    auto f = encode_frame(3, {45.0f, 1000, 2000});
    f[pos] ^= 0x5A;
    EXPECT_TRUE(p.feed(f).empty());
    EXPECT_EQ(p.take_stats().crc_failures, 1u) << "byte " << pos;
  }
}

TEST(Parser, SequenceGapsCountedAsDrops) {
  FrameParser p;
  const auto out = p.feed(stream_of({0, 1, 3}));
  EXPECT_EQ(out.size(), 3u);
  const auto st = p.take_stats();
  EXPECT_EQ(st.received, 3u);
  EXPECT_EQ(st.dropped, 1u);
}

TEST(Parser, GapCountingAgreesWithReferenceRule) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> step(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<long> seqs{step(rng) - 1};
    for (int i = 0; i < 50; ++i) seqs.push_back(seqs.back() + step(rng));
    std::vector<std::uint16_t> s16(seqs.begin(), seqs.end());
    FrameParser p;
    p.feed(stream_of(s16));
    EXPECT_EQ(p.totals().dropped, oracle::dropped_from_seqs(seqs));
  }
}

TEST(Parser, SequenceWrapIsNotADrop) {
  FrameParser p;
  p.feed(stream_of({65534, 65535, 0, 1}));
  EXPECT_EQ(p.totals().dropped, 0u);
  EXPECT_EQ(p.totals().received, 4u);
}

TEST(Parser, FalseSyncInsideGarbageDoesNotHideFrame) {
  auto s = bytes_of({0xAA, 0x55, 0x01, 0x02, 0xAA});
  const auto good = stream_of({10, 11});
  s.insert(s.end(), good.begin(), good.end());
  FrameParser p;
  const auto out = p.feed(s);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].seq, 10);
  EXPECT_EQ(out[1].seq, 11);
}

TEST(Parser, PrefixRobustProperty) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 80);
  const auto good = stream_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  FrameParser ref;
  const auto expected = ref.feed(good);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::uint8_t> s(len(rng));
    for (auto& b : s) b = static_cast<std::uint8_t>(byte(rng));
    if (trial % 3 == 0 && s.size() > 2) s[s.size() - 2] = 0xAA, s.back() = 0x55;
    s.insert(s.end(), good.begin(), good.end());
    FrameParser p;
    ASSERT_EQ(p.feed(s), expected) << "trial " << trial;
  }
}

TEST(Parser, ChunkingInvarianceProperty) {
  std::mt19937_64 rng(13);
  auto s = stream_of({0, 1, 2, 4, 5, 6, 9, 10, 11, 12, 13});
  s.insert(s.begin() + 20, {0xAA, 0x55, 0x00});
  FrameParser whole;
  const auto expected = whole.feed(s);
  const auto expected_stats = whole.totals();
  for (int trial = 0; trial < 300; ++trial) {
    FrameParser p;
    std::vector<ParsedFrame> got;
    std::size_t pos = 0;
    while (pos < s.size()) {
      const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 20)(rng);
      const std::size_t take = std::min(n, s.size() - pos);
      for (auto& f : p.feed(std::span(s).subspan(pos, take))) got.push_back(f);
      pos += take;
    }
    ASSERT_EQ(got, expected);
    EXPECT_EQ(p.totals().dropped, expected_stats.dropped);
    EXPECT_EQ(p.totals().crc_failures, expected_stats.crc_failures);
  }
}

TEST(Loopback, LosslessDeliversEverythingInOrder) {
  transport::LoopbackLink link;
  for (int i = 0; i < 667; ++i) link.send(encode_frame(static_cast<std::uint16_t>(i), {}));
  FrameParser p;
  int n = 0;
  while (auto d = link.recv(std::chrono::milliseconds(0))) {
    for (const auto& f : p.feed(*d)) EXPECT_EQ(f.seq, n++);
  }
  EXPECT_EQ(n, 667);
  EXPECT_EQ(link.stats().delivered, 667u);
}

TEST(Loopback, AllDropped) {
  transport::LoopbackLink link({1.0, {}, 3});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(link.send(encode_frame(0, {})), transport::Delivery::Dropped);
  EXPECT_FALSE(link.recv(std::chrono::milliseconds(1)).has_value());
  EXPECT_EQ(link.stats().dropped, 100u);
}

TEST(Loopback, BinomialLoss) {
  transport::LoopbackLink link({0.1, {}, 2024});
  const auto f = encode_frame(0, {});
  for (int i = 0; i < 10000; ++i) link.send(f);
  const double received = static_cast<double>(link.stats().delivered);
  EXPECT_LE(std::abs(received - 9000.0), 3.0 * 30.0);
}

TEST(Loopback, JitterPreservesOrder) {
  transport::LoopbackLink link({0.0, std::chrono::microseconds(3000), 5});
  std::thread producer([&] {
    for (int i = 0; i < 200; ++i) link.send(encode_frame(static_cast<std::uint16_t>(i), {}));
    link.close();
  });
  FrameParser p;
  int expect = 0;
  try {
    while (true) {
      if (auto d = link.recv(std::chrono::milliseconds(50))) {
        for (const auto& f : p.feed(*d)) EXPECT_EQ(f.seq, expect++);
      }
    }
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Shutdown);
  }
  producer.join();
  EXPECT_EQ(expect, 200);
}

TEST(Loopback, ClosedLinkRefusesSend) {
  transport::LoopbackLink link;
  link.close();
  EXPECT_THROW(link.send(encode_frame(0, {})), Error);
  EXPECT_THROW(link.recv(std::chrono::milliseconds(1)), Error);
}

TEST(Loopback, RejectsBadConfig) {
  EXPECT_THROW(transport::LoopbackLink({1.5, {}, 1}), Error);
}

TEST(Udp, FramesCrossARealSocket) {
  transport::UdpSource src({"127.0.0.1", 0});
  transport::UdpSink sink({"127.0.0.1", src.bound_port()});
  for (int i = 0; i < 50; ++i) sink.send(encode_frame(static_cast<std::uint16_t>(i), {1.0f * i, 1, 2}));
  FrameParser p;
  int got = 0;
  for (int tries = 0; tries < 200 && got < 50; ++tries) {
    if (auto d = src.recv(std::chrono::milliseconds(20))) got += static_cast<int>(p.feed(*d).size());
  }
  EXPECT_EQ(got, 50);
  src.close();
  EXPECT_THROW(src.recv(std::chrono::milliseconds(1)), Error);
}

TEST(Endpoint, ParsingAndEnvOverride) {
  const auto a = transport::parse_endpoint("10.0.0.2:5000");
  EXPECT_EQ(a.host, "10.0.0.2");
  EXPECT_EQ(a.port, 5000);
  ::unsetenv(transport::kPortEnvVar);
  EXPECT_EQ(transport::parse_endpoint("localhost").port, transport::kDefaultPort);
  ::setenv(transport::kPortEnvVar, "5151", 1);
  EXPECT_EQ(transport::parse_endpoint("localhost").port, 5151);
  EXPECT_EQ(transport::parse_endpoint(":6000").port, 6000);
  ::unsetenv(transport::kPortEnvVar);
  EXPECT_THROW(transport::parse_endpoint("host:notaport"), Error);
}
