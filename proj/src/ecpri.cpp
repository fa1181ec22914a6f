#include "dapp/ecpri.hpp"

#include <algorithm>

#include "dapp/bytes.hpp"

namespace dapp::ecpri {

const char* to_string(ParseErrc code) {
  switch (code) {
    case ParseErrc::Truncated: return "Truncated";
    case ParseErrc::UnsupportedVersion: return "UnsupportedVersion";
    case ParseErrc::UnsupportedConcatenation: return "UnsupportedConcatenation";
    case ParseErrc::PayloadSizeMismatch: return "PayloadSizeMismatch";
    case ParseErrc::NonIQType: return "NonIQType";
    case ParseErrc::EmptyPayload: return "EmptyPayload";
    case ParseErrc::PayloadTooLarge: return "PayloadTooLarge";
  }
  return "?";
}

FrameError::FrameError(ParseErrc code, const std::string& detail)
    : std::runtime_error(std::string("eCPRI: ") + ecpri::to_string(code) +
                         (detail.empty() ? "" : " (" + detail + ")")),
      code_(code) {}

FrameView parse_frame_view(std::span<const std::uint8_t> data) {
  if (data.size() < 4) throw FrameError(ParseErrc::Truncated, "common header");
  if ((data[0] >> 4) != kVersion) throw FrameError(ParseErrc::UnsupportedVersion);
  if (data[0] & 0x01) throw FrameError(ParseErrc::UnsupportedConcatenation);
  if (data[1] != kIqDataType) throw FrameError(ParseErrc::NonIQType);
  if (data.size() < kHeaderSize) throw FrameError(ParseErrc::Truncated, "IQ header");
  const std::uint16_t payload_size = bytes::get_u16_be(data.data() + 2);
  FrameView v;
  v.pc_id = bytes::get_u16_be(data.data() + 4);
  v.seq_id = bytes::get_u16_be(data.data() + 6);
  v.payload = data.subspan(kHeaderSize);
  if (v.payload.size() < payload_size) throw FrameError(ParseErrc::Truncated, "payload");
  if (v.payload.size() > payload_size || payload_size % kBytesPerFixedSample != 0)
    throw FrameError(ParseErrc::PayloadSizeMismatch);
  return v;
}

Frame parse_frame(std::span<const std::uint8_t> data) {
  const FrameView v = parse_frame_view(data);
  Frame f;
  f.pc_id = v.pc_id;
  f.seq_id = v.seq_id;
  f.payload.assign(v.payload.begin(), v.payload.end());
  return f;
}

std::vector<std::uint8_t> build_frame(std::uint16_t pc_id, std::uint16_t seq_id,
                                      std::span<const FixedIQ> iq) {
  const std::size_t payload_bytes = iq.size() * kBytesPerFixedSample;
  if (payload_bytes > kMaxPayload) throw FrameError(ParseErrc::PayloadTooLarge);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + payload_bytes);
  bytes::put_u8(out, static_cast<std::uint8_t>(kVersion << 4));
  bytes::put_u8(out, kIqDataType);
  bytes::put_u16_be(out, static_cast<std::uint16_t>(payload_bytes));
  bytes::put_u16_be(out, pc_id);
  bytes::put_u16_be(out, seq_id);
  append_fixed_point_bytes(iq, out);
  return out;
}

IQBuffer extract_iq(const Frame& frame) {
  if (frame.payload.empty()) throw FrameError(ParseErrc::EmptyPayload);
  return iq_from_fixed_point_bytes(frame.payload);
}

void write_frame(ByteStream& stream, std::span<const std::uint8_t> frame) {
  if (frame.size() > 0xFFFF) throw FrameError(ParseErrc::PayloadTooLarge, "stream record");
  std::vector<std::uint8_t> record;
  record.reserve(frame.size() + 2);
  bytes::put_u16_be(record, static_cast<std::uint16_t>(frame.size()));
  record.insert(record.end(), frame.begin(), frame.end());
  stream.write(record);
}

std::vector<std::uint8_t> read_frame(ByteStream& stream) {
  std::uint8_t prefix[2];
  stream.read_exact(prefix);
  std::vector<std::uint8_t> frame(bytes::get_u16_be(prefix));
  stream.read_exact(frame);
  return frame;
}

std::optional<CapturedSlot> CaptureSource::next() {
  for (;;) {
    std::vector<std::uint8_t> raw;
    const auto buffered_since = stream_.arrival_ns();
    try {
      raw = read_frame(stream_);
    } catch (const StreamClosed&) {
      return std::nullopt;
    }
    const std::uint64_t arrival = std::min(buffered_since.value_or(UINT64_MAX), monotonic_ns());
    ++stats_.frames_seen;

    CapturedSlot slot;
    try {
      const FrameView view = parse_frame_view(raw);
      if (view.pc_id != pc_id_) {
        ++stats_.frames_skipped;
        continue;
      }
      if (view.payload.empty()) throw FrameError(ParseErrc::EmptyPayload);
      slot.seq_id = view.seq_id;
      slot.samples = iq_from_fixed_point_bytes(view.payload);
    } catch (const FrameError&) {
      ++stats_.frames_skipped;
      continue;
    }

    if (last_seq_ && slot.seq_id != static_cast<std::uint16_t>(*last_seq_ + 1)) ++stats_.seq_gaps;
    last_seq_ = slot.seq_id;
    ++stats_.frames_parsed;
    slot.arrival_timestamp_ns = arrival;
    return slot;
  }
}

}  // namespace dapp::ecpri
