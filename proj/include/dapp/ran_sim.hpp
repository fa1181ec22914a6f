#pragma once

// Simulated DU/RU counterpart of a dApp: generates slots of I/Q with a
// controllable interferer, serves them over E3 or as eCPRI frames, and applies
// the control decisions it receives.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dapp/control.hpp"
#include "dapp/e3.hpp"
#include "dapp/iq.hpp"
#include "dapp/stream.hpp"

namespace dapp::ransim {

struct Interferer {
  std::uint32_t bin = 37;  // cycles per slot, in [0, samples)
  double amplitude = 1.0;
  double phase = 0.0;  // radians
};

struct ChannelState {
  std::uint8_t current_channel = 0;
  std::uint8_t num_channels = 4;
  std::optional<std::uint8_t> interferer_on_channel = 0;
  Interferer interferer;
  double noise_sigma = 0.01;  // per-component std-dev
  std::uint64_t rng_seed = 1;
  std::uint32_t samples = kDefaultSlotSamples;

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
};

struct Slot {
  IQBuffer samples;
  bool occupied = false;
};

/// Complex Gaussian noise from a counter-based generator keyed by
/// (rng_seed, slot_index), plus the interferer tone when the current channel
/// is the interfered one. Pure function of its arguments.
Slot generate_slot(const ChannelState& state, std::uint64_t slot_index);

/// ADC model: saturates each component to [-1, 1] and quantizes.
FixedPointIQ quantize_slot(const IQBuffer& samples);

class InvalidChannel : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// ChannelChange moves to the target channel; NoOp keeps the state.
ChannelState apply_control(const ChannelState& state, const ControlDecision& decision);

struct GroundTruthRecord {
  std::uint64_t slot_index = 0;
  std::uint8_t channel = 0;
  bool occupied = false;
  std::optional<ControlDecision> decision;
  bool control_timed_out = false;
};

/// Append-only per-slot log with strictly increasing slot indices.
class GroundTruthLog {
 public:
  void append(std::uint64_t slot_index, std::uint8_t channel, bool occupied);
  void attach_decision(std::uint64_t slot_index, const ControlDecision& decision);
  void mark_timeout(std::uint64_t slot_index);

  const std::vector<GroundTruthRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  std::uint64_t late_controls = 0;
  std::uint64_t rejected_controls = 0;  // invalid target channel

  /// Columns: slot_index,channel,occupied,verdict,action
  void write_csv(std::ostream& out) const;

 private:
  GroundTruthRecord& find(std::uint64_t slot_index);
  std::vector<GroundTruthRecord> records_;
};

struct ServeOptions {
  e3::AuthToken expected_token{};
  std::uint16_t pc_id = 0;
  /// Called once the session is established; returns the monotonic time of
  /// slot 0. Lets a fleet of simulators share slot boundaries.
  std::function<std::uint64_t()> start_time;
  /// Called when the handshake fails, so fleet barriers are not left waiting.
  std::function<void()> on_setup_failed;
};

/// Traditional E3 path: handshake, then one Indication per period, each
/// answered by a Control applied before the next slot. A missing Control
/// (10 periods, at least 250 ms) is logged and the loop continues. Closes the endpoint when
/// done. Propagates e3::ProtocolViolation and e3::DecodeError.
GroundTruthLog serve_e3(ByteStream& endpoint, ChannelState& state, std::uint32_t slots,
                        const ServeOptions& options = {});

/// Adapted path: slots leave as eCPRI frames (seq_id = slot mod 65536,
/// pc_id from options) on `frames`; the E3 session on `control` carries only
/// the handshake and Control messages.
GroundTruthLog emit_ecpri(ByteStream& frames, ByteStream& control, ChannelState& state,
                          std::uint32_t slots, const ServeOptions& options = {});

}  // namespace dapp::ransim
