#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dapp {

/// One complex baseband sample: real() is I, imag() is Q.
using IQSample = std::complex<double>;

/// A slot of baseband samples, the unit of dApp input.
using IQBuffer = std::vector<IQSample>;

inline constexpr std::size_t kDefaultSlotSamples = 1536;

/// Signed 16-bit wire sample. Scale is 1/32768.
struct FixedIQ {
  std::int16_t i = 0;
  std::int16_t q = 0;
  friend bool operator==(const FixedIQ&, const FixedIQ&) = default;
};

using FixedPointIQ = std::vector<FixedIQ>;

inline constexpr double kFixedPointScale = 32768.0;
inline constexpr std::size_t kBytesPerFixedSample = 4;

IQBuffer from_fixed_point(std::span<const FixedIQ> raw);

/// Round half away from zero, clamp to the int16 range.
/// Throws std::out_of_range if any component magnitude exceeds 1.
FixedPointIQ to_fixed_point(std::span<const IQSample> buf);

/// Mean power (1/N) * sum(i^2 + q^2). Returns 0 for an empty span.
double energy(std::span<const IQSample> buf);

// Wire layout: per sample, I then Q, each int16 little-endian.
void append_fixed_point_bytes(std::span<const FixedIQ> raw, std::vector<std::uint8_t>& out);

/// Throws std::invalid_argument if the byte count is not a multiple of 4.
FixedPointIQ fixed_point_from_bytes(std::span<const std::uint8_t> bytes);

/// Decodes wire bytes straight to floating point without the intermediate
/// fixed-point copy. Same preconditions as fixed_point_from_bytes.
IQBuffer iq_from_fixed_point_bytes(std::span<const std::uint8_t> bytes);

}  // namespace dapp
