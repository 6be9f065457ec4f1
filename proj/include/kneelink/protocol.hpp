#ifndef KNEELINK_PROTOCOL_HPP
#define KNEELINK_PROTOCOL_HPP

// Wire formats.
//
// Payload (8 bytes, little-endian, packed):
//   [0..4)  float32  knee angle, degrees
//   [4..6)  uint16   EMG channel 1 (vastus lateralis), ADC counts
//   [6..8)  uint16   EMG channel 2 (semitendinosus), ADC counts
//
// Frame (14 bytes): AA 55 | seq u16 LE | payload | crc u16 LE
// crc is CRC-16/CCITT-FALSE over the 10 bytes seq + payload.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kneelink/error.hpp"

namespace kneelink::protocol {

inline constexpr std::size_t kPacketSize = 8;
inline constexpr std::size_t kFrameSize = 14;
inline constexpr std::uint8_t kSync0 = 0xAA;
inline constexpr std::uint8_t kSync1 = 0x55;
inline constexpr std::uint16_t kMaxConformingCounts = 4095;

using PacketBytes = std::array<std::uint8_t, kPacketSize>;
using FrameBytes = std::array<std::uint8_t, kFrameSize>;

struct TelemetryPacket {
  float knee_angle_deg = 0.0f;
  std::uint16_t emg1_counts = 0;
  std::uint16_t emg2_counts = 0;

  friend bool operator==(const TelemetryPacket&, const TelemetryPacket&) = default;
};

inline bool conforming(const TelemetryPacket& p) noexcept {
  return std::isfinite(p.knee_angle_deg) && p.emg1_counts <= kMaxConformingCounts &&
         p.emg2_counts <= kMaxConformingCounts;
}

// Why a decoded packet was flagged; bits may combine.
enum SuspectFlags : std::uint8_t {
  kSuspectNone = 0,
  kSuspectAngle = 1u << 0,
  kSuspectEmg1 = 1u << 1,
  kSuspectEmg2 = 1u << 2,
};

struct DecodedPacket {
  TelemetryPacket packet;
  std::uint8_t suspect = kSuspectNone;

  bool is_suspect() const noexcept { return suspect != kSuspectNone; }
};

namespace detail {

inline void put_u16(std::uint8_t* out, std::uint16_t v) noexcept {
  out[0] = static_cast<std::uint8_t>(v & 0xFF);
  out[1] = static_cast<std::uint8_t>(v >> 8);
}

inline std::uint16_t get_u16(const std::uint8_t* in) noexcept {
  return static_cast<std::uint16_t>(in[0] | (in[1] << 8));
}

inline void put_u32(std::uint8_t* out, std::uint32_t v) noexcept {
  for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint32_t get_u32(const std::uint8_t* in) noexcept {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return v;
}

inline constexpr std::array<std::uint16_t, 256> make_crc_table() {
  std::array<std::uint16_t, 256> table{};
  for (unsigned i = 0; i < 256; ++i) {
    std::uint16_t crc = static_cast<std::uint16_t>(i << 8);
    for (int b = 0; b < 8; ++b) {
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x1021)
                           : static_cast<std::uint16_t>(crc << 1);
    }
    table[i] = crc;
  }
  return table;
}

inline constexpr auto kCrcTable = make_crc_table();

}  // namespace detail

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
inline std::uint16_t crc16_ccitt_false(std::span<const std::uint8_t> data) noexcept {
  std::uint16_t crc = 0xFFFF;
  for (std::uint8_t byte : data) {
    crc = static_cast<std::uint16_t>((crc << 8) ^ detail::kCrcTable[((crc >> 8) ^ byte) & 0xFF]);
  }
  return crc;
}

inline PacketBytes encode_packet(const TelemetryPacket& p) {
  if (!std::isfinite(p.knee_angle_deg)) {
    throw Error(ErrorCode::Conformance, "encode_packet: knee angle is not finite");
  }
  PacketBytes out{};
  detail::put_u32(out.data(), std::bit_cast<std::uint32_t>(p.knee_angle_deg));
  detail::put_u16(out.data() + 4, p.emg1_counts);
  detail::put_u16(out.data() + 6, p.emg2_counts);
  return out;
}

inline DecodedPacket decode_packet(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kPacketSize) {
    throw Error(ErrorCode::Framing, "decode_packet: payload must be exactly 8 bytes");
  }
  DecodedPacket d;
  d.packet.knee_angle_deg = std::bit_cast<float>(detail::get_u32(bytes.data()));
  d.packet.emg1_counts = detail::get_u16(bytes.data() + 4);
  d.packet.emg2_counts = detail::get_u16(bytes.data() + 6);
  if (!std::isfinite(d.packet.knee_angle_deg)) d.suspect |= kSuspectAngle;
  if (d.packet.emg1_counts > kMaxConformingCounts) d.suspect |= kSuspectEmg1;
  if (d.packet.emg2_counts > kMaxConformingCounts) d.suspect |= kSuspectEmg2;
  return d;
}

inline FrameBytes encode_frame(std::uint16_t seq, const TelemetryPacket& p) {
  FrameBytes f{};
  f[0] = kSync0;
  f[1] = kSync1;
  detail::put_u16(f.data() + 2, seq);
  const PacketBytes payload = encode_packet(p);
  std::copy(payload.begin(), payload.end(), f.begin() + 4);
  const std::uint16_t crc = crc16_ccitt_false(std::span<const std::uint8_t>(f.data() + 2, 10));
  detail::put_u16(f.data() + 12, crc);
  return f;
}

struct ParsedFrame {
  std::uint16_t seq = 0;
  TelemetryPacket packet;
  std::uint8_t suspect = kSuspectNone;

  friend bool operator==(const ParsedFrame&, const ParsedFrame&) = default;
};

struct LinkStats {
  std::uint64_t sent = 0;
  std::uint64_t received = 0;
  std::uint64_t dropped = 0;
  std::uint64_t crc_failures = 0;
  double observed_rate_hz = 0.0;

  LinkStats& operator+=(const LinkStats& o) noexcept {
    sent += o.sent;
    received += o.received;
    dropped += o.dropped;
    crc_failures += o.crc_failures;
    return *this;
  }
};

/// Sequence-gap rule: frames missing between consecutive received
/// sequence numbers, modulo 2^16.
inline std::uint64_t missing_between(std::uint16_t prev, std::uint16_t next) noexcept {
  return static_cast<std::uint16_t>(next - prev - 1u);
}

/// Incremental, total parser for a byte stream of frames. Resynchronizes on
/// the sync pattern; a candidate that fails CRC costs one byte of progress so
/// a valid frame hiding behind a false sync is still found.
class FrameParser {
 public:
  /// Consumes a chunk and returns every frame completed by it.
  std::vector<ParsedFrame> feed(std::span<const std::uint8_t> chunk) {
    buf_.insert(buf_.end(), chunk.begin(), chunk.end());
    std::vector<ParsedFrame> out;
    std::size_t pos = 0;
    while (true) {
      while (pos < buf_.size() && buf_[pos] != kSync0) {
        ++pos;
        ++garbage_bytes_;
      }
      if (buf_.size() - pos < 2) break;
      if (buf_[pos + 1] != kSync1) {
        ++pos;
        ++garbage_bytes_;
        continue;
      }
      if (buf_.size() - pos < kFrameSize) break;

      const std::uint8_t* f = buf_.data() + pos;
      const std::uint16_t crc = crc16_ccitt_false(std::span<const std::uint8_t>(f + 2, 10));
      if (crc != detail::get_u16(f + 12)) {
        ++delta_.crc_failures;
        ++pos;
        ++garbage_bytes_;
        continue;
      }
      ParsedFrame pf;
      pf.seq = detail::get_u16(f + 2);
      const DecodedPacket d = decode_packet(std::span<const std::uint8_t>(f + 4, kPacketSize));
      pf.packet = d.packet;
      pf.suspect = d.suspect;
      if (last_seq_) delta_.dropped += missing_between(*last_seq_, pf.seq);
      last_seq_ = pf.seq;
      ++delta_.received;
      out.push_back(pf);
      pos += kFrameSize;
    }
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos));
    return out;
  }

  /// Stats accumulated since the previous call, then reset.
  LinkStats take_stats() noexcept {
    LinkStats d = delta_;
    total_ += delta_;
    delta_ = {};
    return d;
  }

  LinkStats totals() const noexcept {
    LinkStats t = total_;
    t += delta_;
    return t;
  }

  std::uint64_t garbage_bytes() const noexcept { return garbage_bytes_; }
  std::size_t buffered() const noexcept { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
  std::optional<std::uint16_t> last_seq_;
  LinkStats delta_{}, total_{};
  std::uint64_t garbage_bytes_ = 0;
};

}  // namespace kneelink::protocol

#endif  // KNEELINK_PROTOCOL_HPP
