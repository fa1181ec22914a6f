#pragma once

// eCPRI-style fronthaul frames and the direct-capture I/Q source that replaces
// E3 Indication messages on the smart-NIC data path.
//
// Frame layout:
//   byte 0    version (high nibble, = 1) | reserved (3 bits) | concat (low bit, = 0)
//   byte 1    message_type (0 = IQ data)
//   bytes 2-3 payload_size, big-endian, = payload byte length
//   bytes 4-5 pc_id, big-endian
//   bytes 6-7 seq_id, big-endian
//   payload   FixedPointIQ bytes (int16 LE I, int16 LE Q per sample)
//
// On a stream each frame is preceded by its length as uint16 big-endian.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapp/iq.hpp"
#include "dapp/stream.hpp"

namespace dapp::ecpri {

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kIqDataType = 0;
inline constexpr std::size_t kHeaderSize = 8;
inline constexpr std::size_t kMaxPayload = 65535;

struct Frame {
  std::uint8_t version = kVersion;
  bool concat = false;
  std::uint8_t message_type = kIqDataType;
  std::uint16_t pc_id = 0;
  std::uint16_t seq_id = 0;
  std::vector<std::uint8_t> payload;

  std::uint16_t payload_size() const { return static_cast<std::uint16_t>(payload.size()); }
  friend bool operator==(const Frame&, const Frame&) = default;
};

enum class ParseErrc {
  Truncated,
  UnsupportedVersion,
  UnsupportedConcatenation,
  PayloadSizeMismatch,
  NonIQType,
  EmptyPayload,
  PayloadTooLarge,
};

const char* to_string(ParseErrc code);

class FrameError : public std::runtime_error {
 public:
  explicit FrameError(ParseErrc code, const std::string& detail = {});
  ParseErrc code() const noexcept { return code_; }

 private:
  ParseErrc code_;
};

/// Header fields plus a view of the payload inside the parsed bytes.
struct FrameView {
  std::uint16_t pc_id = 0;
  std::uint16_t seq_id = 0;
  std::span<const std::uint8_t> payload;
};

/// Total over arbitrary bytes; throws FrameError. NonIQType is thrown for
/// well-formed non-IQ frames, which callers count as skipped.
FrameView parse_frame_view(std::span<const std::uint8_t> bytes);

/// Owning variant of parse_frame_view.
Frame parse_frame(std::span<const std::uint8_t> bytes);

/// Throws FrameError(PayloadTooLarge) beyond 65535 payload bytes.
std::vector<std::uint8_t> build_frame(std::uint16_t pc_id, std::uint16_t seq_id,
                                      std::span<const FixedIQ> iq);

/// I/Q samples of an IQ-data frame. Throws FrameError(EmptyPayload) for
/// zero-length payloads.
IQBuffer extract_iq(const Frame& frame);

/// Writes one length-prefixed frame.
void write_frame(ByteStream& stream, std::span<const std::uint8_t> frame);

/// Reads one length-prefixed frame. Throws StreamClosed.
std::vector<std::uint8_t> read_frame(ByteStream& stream);

struct CaptureStats {
  std::uint64_t frames_seen = 0;
  std::uint64_t frames_parsed = 0;   // delivered to the consumer
  std::uint64_t frames_skipped = 0;  // non-IQ, foreign flow or malformed
  std::uint64_t seq_gaps = 0;
};

struct CapturedSlot {
  IQBuffer samples;
  std::uint16_t seq_id = 0;
  std::uint64_t arrival_timestamp_ns = 0;
};

/// Inline tap on a fronthaul stream: yields the I/Q buffers of one flow in
/// arrival order. Single consumer.
class CaptureSource {
 public:
  CaptureSource(ByteStream& stream, std::uint16_t pc_id) : stream_(stream), pc_id_(pc_id) {}

  /// Next buffer of the flow, or nullopt once the stream is closed.
  std::optional<CapturedSlot> next();

  /// Blocks until a frame may be read (see ByteStream::wait_readable).
  bool wait(std::chrono::nanoseconds timeout) { return stream_.wait_readable(timeout); }
  /// Arrival time of the next unread frame at the tap, if known.
  std::optional<std::uint64_t> arrival_ns() { return stream_.arrival_ns(); }

  const CaptureStats& stats() const { return stats_; }

 private:
  ByteStream& stream_;
  std::uint16_t pc_id_;
  CaptureStats stats_;
  std::optional<std::uint16_t> last_seq_;
};

}  // namespace dapp::ecpri
