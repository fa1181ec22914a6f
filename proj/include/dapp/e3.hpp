#pragma once

// E3 interface: the E3AP setup/authentication exchange plus the E3SM
// Indication (RAN -> dApp) and Control (dApp -> RAN) messages.
//
// Frame layout (all integers little-endian):
//   magic "E3v1" | tag u8 | body length u32 | body
// Bodies:
//   1 SetupRequest   dapp_id u32 | auth_token[16] | kind u8 | samples u32 | period_ms f64
//   2 SetupResponse  accepted u8 | reason_code u8
//   3 Indication     seq u32 | origin_timestamp_ns u64 | payload bytes u32 | payload
//   4 Control        seq u32 | verdict u8 | action u8 | target_channel u8 | score f64

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dapp/control.hpp"
#include "dapp/iq.hpp"
#include "dapp/stream.hpp"

namespace dapp::e3 {

enum class DappKind : std::uint8_t { Ebs = 0, Fft = 1, Fcn = 2, XceptionLite = 3 };

const char* to_string(DappKind kind);
/// Accepts "EBS", "FFT", "FCN", "XCEPTION_LITE" (case-insensitive, '-' or '_').
std::optional<DappKind> parse_dapp_kind(std::string_view name);

using AuthToken = std::array<std::uint8_t, 16>;

struct SubscriptionSpec {
  DappKind dapp_kind = DappKind::Ebs;
  std::uint32_t samples_per_indication = kDefaultSlotSamples;
  double period_ms = 10.0;
  friend bool operator==(const SubscriptionSpec&, const SubscriptionSpec&) = default;
};

struct SetupRequest {
  std::uint32_t dapp_id = 0;
  AuthToken auth_token{};
  SubscriptionSpec subscription;
  friend bool operator==(const SetupRequest&, const SetupRequest&) = default;
};

enum class ReasonCode : std::uint8_t { Ok = 0, AuthFailure = 1, UnsupportedSubscription = 2 };

struct SetupResponse {
  bool accepted = false;
  std::uint8_t reason_code = 0;
  friend bool operator==(const SetupResponse&, const SetupResponse&) = default;
};

struct IndicationMessage {
  std::uint32_t seq = 0;
  std::uint64_t origin_timestamp_ns = 0;
  FixedPointIQ payload;
  friend bool operator==(const IndicationMessage&, const IndicationMessage&) = default;
};

struct ControlMessage {
  std::uint32_t seq = 0;
  ControlDecision decision;
  friend bool operator==(const ControlMessage&, const ControlMessage&) = default;
};

using Message = std::variant<SetupRequest, SetupResponse, IndicationMessage, ControlMessage>;

inline constexpr std::array<std::uint8_t, 4> kMagic{'E', '3', 'v', '1'};
inline constexpr std::size_t kHeaderSize = 9;
/// Upper bound accepted by stream readers; far above a 1536-sample indication.
inline constexpr std::uint32_t kMaxBodyLength = 16u << 20;

enum class DecodeErrc {
  BadMagic,
  UnknownType,
  Truncated,
  TrailingBytes,
  PayloadLengthMismatch,
  InvalidField,
  Oversized,
};

const char* to_string(DecodeErrc code);

class DecodeError : public std::runtime_error {
 public:
  explicit DecodeError(DecodeErrc code, const std::string& detail = {});
  DecodeErrc code() const noexcept { return code_; }

 private:
  DecodeErrc code_;
};

std::uint8_t type_tag(const Message& msg);

std::vector<std::uint8_t> encode(const Message& msg);

/// Appends the encoding of msg to out; lets hot paths reuse a buffer.
void encode_into(const Message& msg, std::vector<std::uint8_t>& out);

/// Total over arbitrary input: returns a message or throws DecodeError.
Message decode(std::span<const std::uint8_t> frame);

struct FrameHeader {
  std::uint8_t tag = 0;
  std::uint32_t body_length = 0;
};

/// Validates magic, tag and the length bound of the first kHeaderSize bytes.
FrameHeader decode_header(std::span<const std::uint8_t, kHeaderSize> header);

/// Reads one complete frame (header + body) from a stream without decoding
/// the body. Throws DecodeError for a bad header and StreamClosed at EOF.
std::vector<std::uint8_t> read_frame(ByteStream& stream);

/// Constant-time comparison of two tokens.
bool authenticate(const AuthToken& token, const AuthToken& expected);

// ---------------------------------------------------------------------------
// Session state machine

enum class Role { DApp, Ran };
enum class Phase { Idle, SetupSent, Established, Closed };
enum class Direction { Sent, Received };

const char* to_string(Phase phase);

/// How indications reach the dApp. With DirectCapture the session carries no
/// Indication messages; samples come from the fronthaul tap and only the
/// Control path uses E3.
enum class IndicationPath { E3, DirectCapture };

struct SessionState {
  Role role = Role::DApp;
  IndicationPath path = IndicationPath::E3;
  Phase phase = Phase::Idle;
  std::optional<SubscriptionSpec> negotiated;
  std::optional<SubscriptionSpec> requested;
  std::uint32_t next_indication_seq = 0;
  bool awaiting_control = false;
  std::optional<std::uint32_t> last_control_seq;
  std::deque<std::uint32_t> abandoned;  // indications whose control timed out
};

class ProtocolViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pure transition function. The accepted language is
///   SetupRequest . SetupResponse(accepted) . (Indication . Control)*
/// with strict +1 sequence numbers starting at 0. In DirectCapture mode the
/// established part is Control* with strictly increasing seq.
/// Throws ProtocolViolation for anything else; a faulty peer closes the session.
SessionState advance_session(const SessionState& state, Direction dir, const Message& msg);

/// Gives up on the outstanding control (timeout). A late Control for an
/// abandoned seq is later accepted and consumed without effect.
SessionState expire_pending_control(const SessionState& state);

/// dApp side: an Indication arrived but could not be decoded. Its seq is
/// treated as consumed so the next Indication is still in sequence.
SessionState skip_indication(const SessionState& state);

/// Owning wrapper: moves to Closed before rethrowing a ProtocolViolation.
class Session {
 public:
  explicit Session(Role role, IndicationPath path = IndicationPath::E3) {
    state_.role = role;
    state_.path = path;
  }

  void sent(const Message& msg) { apply(Direction::Sent, msg); }
  void received(const Message& msg) { apply(Direction::Received, msg); }
  void expire_pending() { state_ = expire_pending_control(state_); }
  void skip_indication() { state_ = e3::skip_indication(state_); }

  const SessionState& state() const { return state_; }
  Phase phase() const { return state_.phase; }

 private:
  void apply(Direction dir, const Message& msg);
  SessionState state_;
};

}  // namespace dapp::e3
