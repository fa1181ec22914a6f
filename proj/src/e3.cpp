#include "dapp/e3.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "dapp/bytes.hpp"

namespace dapp::e3 {
namespace {

constexpr std::uint8_t kTagSetupRequest = 1;
constexpr std::uint8_t kTagSetupResponse = 2;
constexpr std::uint8_t kTagIndication = 3;
constexpr std::uint8_t kTagControl = 4;

constexpr std::size_t kSetupRequestBody = 4 + 16 + 1 + 4 + 8;
constexpr std::size_t kSetupResponseBody = 2;
constexpr std::size_t kIndicationFixedBody = 4 + 8 + 4;
constexpr std::size_t kControlBody = 4 + 1 + 1 + 1 + 8;

void encode_body(const SetupRequest& m, std::vector<std::uint8_t>& out) {
  bytes::put_u32_le(out, m.dapp_id);
  out.insert(out.end(), m.auth_token.begin(), m.auth_token.end());
  bytes::put_u8(out, static_cast<std::uint8_t>(m.subscription.dapp_kind));
  bytes::put_u32_le(out, m.subscription.samples_per_indication);
  bytes::put_f64_le(out, m.subscription.period_ms);
}

void encode_body(const SetupResponse& m, std::vector<std::uint8_t>& out) {
  bytes::put_u8(out, m.accepted ? 1 : 0);
  bytes::put_u8(out, m.reason_code);
}

void encode_body(const IndicationMessage& m, std::vector<std::uint8_t>& out) {
  bytes::put_u32_le(out, m.seq);
  bytes::put_u64_le(out, m.origin_timestamp_ns);
  bytes::put_u32_le(out, static_cast<std::uint32_t>(m.payload.size() * kBytesPerFixedSample));
  append_fixed_point_bytes(m.payload, out);
}

void encode_body(const ControlMessage& m, std::vector<std::uint8_t>& out) {
  bytes::put_u32_le(out, m.seq);
  bytes::put_u8(out, static_cast<std::uint8_t>(m.decision.verdict));
  bytes::put_u8(out, m.decision.channel_change ? 1 : 0);
  bytes::put_u8(out, m.decision.channel_change.value_or(0));
  bytes::put_f64_le(out, m.decision.score);
}

void require_size(std::span<const std::uint8_t> body, std::size_t expected) {
  if (body.size() < expected) throw DecodeError(DecodeErrc::Truncated, "body too short");
  if (body.size() > expected) throw DecodeError(DecodeErrc::TrailingBytes, "body too long");
}

SetupRequest decode_setup_request(std::span<const std::uint8_t> body) {
  require_size(body, kSetupRequestBody);
  const auto* p = body.data();
  SetupRequest m;
  m.dapp_id = bytes::get_u32_le(p);
  std::copy_n(p + 4, 16, m.auth_token.begin());
  const std::uint8_t kind = p[20];
  if (kind > static_cast<std::uint8_t>(DappKind::XceptionLite))
    throw DecodeError(DecodeErrc::InvalidField, "dapp_kind");
  m.subscription.dapp_kind = static_cast<DappKind>(kind);
  m.subscription.samples_per_indication = bytes::get_u32_le(p + 21);
  m.subscription.period_ms = bytes::get_f64_le(p + 25);
  if (m.subscription.samples_per_indication == 0)
    throw DecodeError(DecodeErrc::InvalidField, "samples_per_indication");
  if (!std::isfinite(m.subscription.period_ms) || m.subscription.period_ms <= 0.0)
    throw DecodeError(DecodeErrc::InvalidField, "period_ms");
  return m;
}

SetupResponse decode_setup_response(std::span<const std::uint8_t> body) {
  require_size(body, kSetupResponseBody);
  if (body[0] > 1) throw DecodeError(DecodeErrc::InvalidField, "accepted");
  return {body[0] == 1, body[1]};
}

IndicationMessage decode_indication(std::span<const std::uint8_t> body) {
  if (body.size() < kIndicationFixedBody)
    throw DecodeError(DecodeErrc::Truncated, "indication header");
  const auto* p = body.data();
  IndicationMessage m;
  m.seq = bytes::get_u32_le(p);
  m.origin_timestamp_ns = bytes::get_u64_le(p + 4);
  const std::uint32_t payload_bytes = bytes::get_u32_le(p + 12);
  if (payload_bytes % kBytesPerFixedSample != 0)
    throw DecodeError(DecodeErrc::PayloadLengthMismatch, "I/Q byte count not divisible by 4");
  require_size(body.subspan(kIndicationFixedBody), payload_bytes);
  m.payload = fixed_point_from_bytes(body.subspan(kIndicationFixedBody));
  return m;
}

ControlMessage decode_control(std::span<const std::uint8_t> body) {
  require_size(body, kControlBody);
  const auto* p = body.data();
  ControlMessage m;
  m.seq = bytes::get_u32_le(p);
  const std::uint8_t verdict = p[4];
  const std::uint8_t action = p[5];
  const std::uint8_t target = p[6];
  if (verdict > 1 || action > 1) throw DecodeError(DecodeErrc::InvalidField, "verdict/action");
  if (verdict != action) throw DecodeError(DecodeErrc::InvalidField, "verdict/action coupling");
  if (action == 0 && target != 0) throw DecodeError(DecodeErrc::InvalidField, "target_channel");
  m.decision.verdict = static_cast<Verdict>(verdict);
  if (action == 1) m.decision.channel_change = target;
  m.decision.score = bytes::get_f64_le(p + 7);
  return m;
}

ProtocolViolation violation(const std::string& what) { return ProtocolViolation(what); }

bool sent_by_dapp(const Message& msg) {
  return std::holds_alternative<SetupRequest>(msg) || std::holds_alternative<ControlMessage>(msg);
}

}  // namespace

const char* to_string(DappKind kind) {
  switch (kind) {
    case DappKind::Ebs: return "EBS";
    case DappKind::Fft: return "FFT";
    case DappKind::Fcn: return "FCN";
    case DappKind::XceptionLite: return "XCEPTION_LITE";
  }
  return "?";
}

std::optional<DappKind> parse_dapp_kind(std::string_view name) {
  std::string norm;
  for (char c : name) norm.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(c)));
  if (norm == "EBS") return DappKind::Ebs;
  if (norm == "FFT") return DappKind::Fft;
  if (norm == "FCN") return DappKind::Fcn;
  if (norm == "XCEPTION_LITE" || norm == "XCEPTION") return DappKind::XceptionLite;
  return std::nullopt;
}

const char* to_string(DecodeErrc code) {
  switch (code) {
    case DecodeErrc::BadMagic: return "BadMagic";
    case DecodeErrc::UnknownType: return "UnknownType";
    case DecodeErrc::Truncated: return "Truncated";
    case DecodeErrc::TrailingBytes: return "TrailingBytes";
    case DecodeErrc::PayloadLengthMismatch: return "PayloadLengthMismatch";
    case DecodeErrc::InvalidField: return "InvalidField";
    case DecodeErrc::Oversized: return "Oversized";
  }
  return "?";
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Idle: return "Idle";
    case Phase::SetupSent: return "SetupSent";
    case Phase::Established: return "Established";
    case Phase::Closed: return "Closed";
  }
  return "?";
}

DecodeError::DecodeError(DecodeErrc code, const std::string& detail)
    : std::runtime_error(std::string("E3 decode: ") + e3::to_string(code) +
                         (detail.empty() ? "" : " (" + detail + ")")),
      code_(code) {}

std::uint8_t type_tag(const Message& msg) {
  return static_cast<std::uint8_t>(msg.index() + 1);
}

void encode_into(const Message& msg, std::vector<std::uint8_t>& out) {
  const std::size_t start = out.size();
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  bytes::put_u8(out, type_tag(msg));
  bytes::put_u32_le(out, 0);
  std::visit([&](const auto& m) { encode_body(m, out); }, msg);
  const auto body_length = static_cast<std::uint32_t>(out.size() - start - kHeaderSize);
  for (int k = 0; k < 4; ++k)
    out[start + 5 + k] = static_cast<std::uint8_t>(body_length >> (8 * k));
}

std::vector<std::uint8_t> encode(const Message& msg) {
  std::vector<std::uint8_t> out;
  encode_into(msg, out);
  return out;
}

FrameHeader decode_header(std::span<const std::uint8_t, kHeaderSize> header) {
  if (!std::equal(kMagic.begin(), kMagic.end(), header.begin()))
    throw DecodeError(DecodeErrc::BadMagic);
  FrameHeader h{header[4], bytes::get_u32_le(header.data() + 5)};
  if (h.tag < kTagSetupRequest || h.tag > kTagControl)
    throw DecodeError(DecodeErrc::UnknownType, "tag " + std::to_string(h.tag));
  if (h.body_length > kMaxBodyLength) throw DecodeError(DecodeErrc::Oversized);
  return h;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < kHeaderSize) {
    // A short prefix that already disagrees with the magic is reported as such.
    const std::size_t n = std::min(frame.size(), kMagic.size());
    if (!std::equal(frame.begin(), frame.begin() + static_cast<std::ptrdiff_t>(n), kMagic.begin()))
      throw DecodeError(DecodeErrc::BadMagic);
    throw DecodeError(DecodeErrc::Truncated, "header");
  }
  const FrameHeader h = decode_header(frame.first<kHeaderSize>());
  const auto rest = frame.subspan(kHeaderSize);
  if (h.body_length > rest.size()) throw DecodeError(DecodeErrc::Truncated, "body");
  if (h.body_length < rest.size()) throw DecodeError(DecodeErrc::TrailingBytes);
  const auto body = rest.first(h.body_length);
  switch (h.tag) {
    case kTagSetupRequest: return decode_setup_request(body);
    case kTagSetupResponse: return decode_setup_response(body);
    case kTagIndication: return decode_indication(body);
    case kTagControl: return decode_control(body);
  }
  throw DecodeError(DecodeErrc::UnknownType);
}

std::vector<std::uint8_t> read_frame(ByteStream& stream) {
  std::vector<std::uint8_t> frame(kHeaderSize);
  stream.read_exact(frame);
  const FrameHeader h = decode_header(std::span<const std::uint8_t, kHeaderSize>(frame.data(), kHeaderSize));
  frame.resize(kHeaderSize + h.body_length);
  stream.read_exact(std::span(frame).subspan(kHeaderSize));
  return frame;
}

bool authenticate(const AuthToken& token, const AuthToken& expected) {
  std::uint8_t diff = 0;
  for (std::size_t k = 0; k < token.size(); ++k) diff |= static_cast<std::uint8_t>(token[k] ^ expected[k]);
  // volatile read keeps the loop from being turned into an early-exit compare
  volatile std::uint8_t sink = diff;
  return sink == 0;
}

SessionState advance_session(const SessionState& state, Direction dir, const Message& msg) {
  SessionState next = state;
  const bool from_dapp = sent_by_dapp(msg);
  const bool we_send = dir == Direction::Sent;
  const bool we_are_dapp = state.role == Role::DApp;
  if (from_dapp != (we_send == we_are_dapp))
    throw violation("message sent by the wrong endpoint role");

  switch (state.phase) {
    case Phase::Idle:
      if (const auto* req = std::get_if<SetupRequest>(&msg)) {
        next.phase = Phase::SetupSent;
        next.requested = req->subscription;
        return next;
      }
      throw violation("only SetupRequest is legal in Idle");

    case Phase::SetupSent:
      if (const auto* resp = std::get_if<SetupResponse>(&msg)) {
        if (resp->accepted) {
          next.phase = Phase::Established;
          next.negotiated = next.requested;
        } else {
          next.phase = Phase::Closed;
        }
        return next;
      }
      throw violation("only SetupResponse is legal after SetupRequest");

    case Phase::Established:
      if (const auto* ind = std::get_if<IndicationMessage>(&msg)) {
        if (state.path == IndicationPath::DirectCapture)
          throw violation("Indication on a direct-capture session");
        if (state.awaiting_control) throw violation("Indication while a Control is outstanding");
        if (ind->seq != state.next_indication_seq)
          throw violation("Indication seq " + std::to_string(ind->seq) + ", expected " +
                          std::to_string(state.next_indication_seq));
        if (state.negotiated && ind->payload.size() != state.negotiated->samples_per_indication)
          throw violation("Indication payload size differs from subscription");
        next.next_indication_seq = ind->seq + 1;
        next.awaiting_control = true;
        return next;
      }
      if (const auto* ctl = std::get_if<ControlMessage>(&msg)) {
        if (!ctl->decision.consistent()) throw violation("inconsistent ControlDecision");
        if (state.path == IndicationPath::DirectCapture) {
          if (state.last_control_seq && ctl->seq <= *state.last_control_seq)
            throw violation("Control seq not increasing");
          next.last_control_seq = ctl->seq;
          return next;
        }
        if (!state.abandoned.empty() && ctl->seq == state.abandoned.front()) {
          next.abandoned.pop_front();
          return next;
        }
        if (!state.awaiting_control) throw violation("Control without an outstanding Indication");
        if (ctl->seq + 1 != state.next_indication_seq)
          throw violation("Control seq " + std::to_string(ctl->seq) + " does not answer " +
                          std::to_string(state.next_indication_seq - 1));
        next.awaiting_control = false;
        next.last_control_seq = ctl->seq;
        return next;
      }
      throw violation("setup message after establishment");

    case Phase::Closed:
      throw violation("session closed");
  }
  throw violation("unreachable");
}

SessionState expire_pending_control(const SessionState& state) {
  SessionState next = state;
  if (state.phase == Phase::Established && state.awaiting_control) {
    next.awaiting_control = false;
    next.abandoned.push_back(state.next_indication_seq - 1);
  }
  return next;
}

SessionState skip_indication(const SessionState& state) {
  SessionState next = state;
  if (state.phase == Phase::Established && state.path == IndicationPath::E3 && !state.awaiting_control)
    ++next.next_indication_seq;
  return next;
}

void Session::apply(Direction dir, const Message& msg) {
  try {
    state_ = advance_session(state_, dir, msg);
  } catch (const ProtocolViolation&) {
    state_.phase = Phase::Closed;
    throw;
  }
}

}  // namespace dapp::e3
