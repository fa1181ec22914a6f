#include "dapp/ran_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <string>
#include <thread>

#include "dapp/ecpri.hpp"

namespace dapp::ransim {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Counter-based draw: a keyed hash of (seed, slot, counter), so any sample of
// any slot can be produced independently of generation order.
double uniform_open(std::uint64_t seed, std::uint64_t slot, std::uint64_t counter) {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ slot) ^ counter);
  return static_cast<double>((h >> 11) + 1) * 0x1.0p-53;  // (0, 1]
}

void sleep_until_ns(std::uint64_t t) {
  std::this_thread::sleep_until(std::chrono::steady_clock::time_point(std::chrono::nanoseconds(t)));
}

// A Control is given up after 10 periods, but never sooner than 250 ms, so a
// briefly starved dApp does not change the slot/decision pairing.
std::uint64_t control_timeout_ns(std::uint64_t period) { return std::max<std::uint64_t>(10 * period, 250'000'000); }

std::uint64_t period_ns(const e3::SubscriptionSpec& sub) {
  return static_cast<std::uint64_t>(std::llround(sub.period_ms * 1e6));
}

void send(ByteStream& ep, e3::Session& session, const e3::Message& msg) {
  ep.write(e3::encode(msg));
  session.sent(msg);
}

std::optional<e3::SubscriptionSpec> accept_setup(ByteStream& ep, e3::Session& session,
                                                 const ChannelState& state,
                                                 const ServeOptions& options) {
  const e3::Message msg = e3::decode(e3::read_frame(ep));
  session.received(msg);
  const auto& req = std::get<e3::SetupRequest>(msg);

  e3::SetupResponse resp{true, static_cast<std::uint8_t>(e3::ReasonCode::Ok)};
  if (!e3::authenticate(req.auth_token, options.expected_token))
    resp = {false, static_cast<std::uint8_t>(e3::ReasonCode::AuthFailure)};
  else if (req.subscription.samples_per_indication != state.samples)
    resp = {false, static_cast<std::uint8_t>(e3::ReasonCode::UnsupportedSubscription)};
  send(ep, session, resp);
  if (!resp.accepted) return std::nullopt;
  return req.subscription;
}

// Waits for the Control answering `seq`. Late answers to earlier slots are
// consumed and counted. Returns nullopt on timeout.
std::optional<ControlDecision> await_control(ByteStream& ep, e3::Session& session,
                                             std::uint32_t seq, std::uint64_t deadline,
                                             GroundTruthLog& log) {
  for (;;) {
    const std::uint64_t now = monotonic_ns();
    if (now >= deadline) return std::nullopt;
    if (!ep.wait_readable(std::chrono::nanoseconds(deadline - now))) return std::nullopt;

    const e3::Message msg = e3::decode(e3::read_frame(ep));
    const auto* ctl = std::get_if<e3::ControlMessage>(&msg);
    const bool late = ctl && ctl->seq < seq;
    session.received(msg);
    if (late) {
      ++log.late_controls;
      continue;
    }
    if (ctl->seq != seq) throw e3::ProtocolViolation("Control for a slot not yet sent");
    return ctl->decision;
  }
}

void apply_logged(ChannelState& state, GroundTruthLog& log, std::uint64_t slot,
                  const ControlDecision& decision) {
  log.attach_decision(slot, decision);
  try {
    state = apply_control(state, decision);
  } catch (const InvalidChannel&) {
    ++log.rejected_controls;
  }
}

std::uint64_t start_time(const ServeOptions& options) {
  return options.start_time ? options.start_time() : monotonic_ns();
}

void setup_failed(const ServeOptions& options) {
  if (options.on_setup_failed) options.on_setup_failed();
}

const char* action_text(const ControlDecision& d, std::string& scratch) {
  if (!d.channel_change) return "noop";
  scratch = "channel_change:" + std::to_string(*d.channel_change);
  return scratch.c_str();
}

}  // namespace

void ChannelState::validate() const {
  if (num_channels == 0) throw std::invalid_argument("num_channels must be >= 1");
  if (current_channel >= num_channels) throw std::invalid_argument("current_channel out of range");
  if (interferer_on_channel && *interferer_on_channel >= num_channels)
    throw std::invalid_argument("interferer channel out of range");
  if (!(interferer.amplitude >= 0.0)) throw std::invalid_argument("amplitude must be >= 0");
  if (!(noise_sigma > 0.0)) throw std::invalid_argument("noise_sigma must be > 0");
  if (samples == 0) throw std::invalid_argument("samples must be >= 1");
  if (interferer.bin >= samples) throw std::invalid_argument("interferer bin out of range");
}

Slot generate_slot(const ChannelState& state, std::uint64_t slot_index) {
  Slot slot;
  slot.samples.resize(state.samples);
  for (std::uint32_t n = 0; n < state.samples; ++n) {
    const double u1 = uniform_open(state.rng_seed, slot_index, 2ull * n);
    const double u2 = uniform_open(state.rng_seed, slot_index, 2ull * n + 1);
    const double r = state.noise_sigma * std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    slot.samples[n] = {r * std::cos(theta), r * std::sin(theta)};
  }
  slot.occupied = state.interferer_on_channel == state.current_channel;
  if (slot.occupied) {
    const auto& tone = state.interferer;
    for (std::uint32_t n = 0; n < state.samples; ++n) {
      const double angle = 2.0 * std::numbers::pi * tone.bin * n / state.samples + tone.phase;
      slot.samples[n] += std::polar(tone.amplitude, angle);
    }
  }
  return slot;
}

FixedPointIQ quantize_slot(const IQBuffer& samples) {
  IQBuffer clipped(samples.size());
  std::transform(samples.begin(), samples.end(), clipped.begin(), [](const IQSample& s) {
    return IQSample{std::clamp(s.real(), -1.0, 1.0), std::clamp(s.imag(), -1.0, 1.0)};
  });
  return to_fixed_point(clipped);
}

ChannelState apply_control(const ChannelState& state, const ControlDecision& decision) {
  if (!decision.channel_change) return state;
  if (*decision.channel_change >= state.num_channels)
    throw InvalidChannel("target channel " + std::to_string(*decision.channel_change) +
                         " >= num_channels " + std::to_string(state.num_channels));
  ChannelState next = state;
  next.current_channel = *decision.channel_change;
  return next;
}

void GroundTruthLog::append(std::uint64_t slot_index, std::uint8_t channel, bool occupied) {
  if (!records_.empty() && slot_index <= records_.back().slot_index)
    throw std::logic_error("ground-truth slots must strictly increase");
  records_.push_back({slot_index, channel, occupied, std::nullopt, false});
}

GroundTruthRecord& GroundTruthLog::find(std::uint64_t slot_index) {
  auto it = std::lower_bound(records_.begin(), records_.end(), slot_index,
                             [](const GroundTruthRecord& r, std::uint64_t s) { return r.slot_index < s; });
  if (it == records_.end() || it->slot_index != slot_index)
    throw std::logic_error("unknown slot " + std::to_string(slot_index));
  return *it;
}

void GroundTruthLog::attach_decision(std::uint64_t slot_index, const ControlDecision& decision) {
  find(slot_index).decision = decision;
}

void GroundTruthLog::mark_timeout(std::uint64_t slot_index) { find(slot_index).control_timed_out = true; }

void GroundTruthLog::write_csv(std::ostream& out) const {
  out << "slot_index,channel,occupied,verdict,action\n";
  std::string scratch;
  for (const auto& r : records_) {
    out << r.slot_index << ',' << static_cast<int>(r.channel) << ',' << (r.occupied ? 1 : 0) << ',';
    if (r.decision) out << to_string(r.decision->verdict) << ',' << action_text(*r.decision, scratch);
    else out << ',';
    out << '\n';
  }
}

GroundTruthLog serve_e3(ByteStream& endpoint, ChannelState& state, std::uint32_t slots,
                        const ServeOptions& options) {
  state.validate();
  GroundTruthLog log;
  e3::Session session(e3::Role::Ran);
  const auto sub = accept_setup(endpoint, session, state, options);
  if (!sub) {
    setup_failed(options);
    endpoint.close();
    return log;
  }

  const std::uint64_t period = period_ns(*sub);
  const std::uint64_t t0 = start_time(options);
  for (std::uint32_t k = 0; k < slots; ++k) {
    sleep_until_ns(t0 + k * period);
    const Slot slot = generate_slot(state, k);
    log.append(k, state.current_channel, slot.occupied);

    e3::IndicationMessage ind;
    ind.seq = k;
    ind.payload = quantize_slot(slot.samples);
    ind.origin_timestamp_ns = monotonic_ns();
    send(endpoint, session, ind);

    const auto decision = await_control(endpoint, session, k, ind.origin_timestamp_ns + control_timeout_ns(period), log);
    if (decision) {
      apply_logged(state, log, k, *decision);
    } else {
      log.mark_timeout(k);
      session.expire_pending();
    }
  }
  endpoint.close();
  return log;
}

GroundTruthLog emit_ecpri(ByteStream& frames, ByteStream& control, ChannelState& state,
                          std::uint32_t slots, const ServeOptions& options) {
  state.validate();
  GroundTruthLog log;
  e3::Session session(e3::Role::Ran, e3::IndicationPath::DirectCapture);
  const auto sub = accept_setup(control, session, state, options);
  if (!sub) {
    setup_failed(options);
    frames.close();
    control.close();
    return log;
  }

  const std::uint64_t period = period_ns(*sub);
  const std::uint64_t t0 = start_time(options);
  for (std::uint32_t k = 0; k < slots; ++k) {
    sleep_until_ns(t0 + k * period);
    const Slot slot = generate_slot(state, k);
    log.append(k, state.current_channel, slot.occupied);

    const auto frame = ecpri::build_frame(options.pc_id, static_cast<std::uint16_t>(k & 0xFFFF),
                                          quantize_slot(slot.samples));
    const std::uint64_t sent_at = monotonic_ns();
    ecpri::write_frame(frames, frame);

    const auto decision = await_control(control, session, k, sent_at + control_timeout_ns(period), log);
    if (decision) apply_logged(state, log, k, *decision);
    else log.mark_timeout(k);
  }
  frames.close();
  control.close();
  return log;
}

}  // namespace dapp::ransim
