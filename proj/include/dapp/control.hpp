#pragma once

#include <cstdint>
#include <optional>

namespace dapp {

enum class Verdict : std::uint8_t { Unoccupied = 0, Occupied = 1 };

/// Policy output of a dApp. An occupied verdict always carries a channel
/// change; an unoccupied one is a no-op.
struct ControlDecision {
  Verdict verdict = Verdict::Unoccupied;
  std::optional<std::uint8_t> channel_change;  // empty means NoOp
  double score = 0.0;                          // energy, peak magnitude or logit

  static ControlDecision no_op(double score) { return {Verdict::Unoccupied, std::nullopt, score}; }
  static ControlDecision change_to(std::uint8_t target, double score) {
    return {Verdict::Occupied, target, score};
  }

  bool consistent() const {
    return (verdict == Verdict::Occupied) == channel_change.has_value();
  }

  friend bool operator==(const ControlDecision&, const ControlDecision&) = default;
};

/// The channel a dApp believes the RAN is on. Targets of channel changes are
/// (current + 1) mod count.
struct ChannelContext {
  std::uint8_t current = 0;
  std::uint8_t count = 4;

  std::uint8_t next() const { return static_cast<std::uint8_t>((current + 1) % count); }
};

inline ControlDecision make_decision(Verdict verdict, double score, const ChannelContext& ctx) {
  return verdict == Verdict::Occupied ? ControlDecision::change_to(ctx.next(), score)
                                      : ControlDecision::no_op(score);
}

inline const char* to_string(Verdict v) {
  return v == Verdict::Occupied ? "occupied" : "unoccupied";
}

}  // namespace dapp
