#include "dapp/iq.hpp"

#include <cmath>
#include <stdexcept>

#include "dapp/bytes.hpp"

namespace dapp {
namespace {

std::int16_t quantize(double v) {
  if (!(std::abs(v) <= 1.0)) throw std::out_of_range("I/Q component outside [-1, 1]");
  // std::round is half-away-from-zero.
  const double scaled = std::round(v * kFixedPointScale);
  if (scaled > 32767.0) return 32767;
  if (scaled < -32768.0) return -32768;
  return static_cast<std::int16_t>(scaled);
}

void require_whole_samples(std::size_t n) {
  if (n % kBytesPerFixedSample != 0)
    throw std::invalid_argument("I/Q byte count not divisible by 4");
}

}  // namespace

IQBuffer from_fixed_point(std::span<const FixedIQ> raw) {
  IQBuffer out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.emplace_back(s.i / kFixedPointScale, s.q / kFixedPointScale);
  return out;
}

FixedPointIQ to_fixed_point(std::span<const IQSample> buf) {
  FixedPointIQ out;
  out.reserve(buf.size());
  for (const auto& s : buf) out.push_back({quantize(s.real()), quantize(s.imag())});
  return out;
}

double energy(std::span<const IQSample> buf) {
  if (buf.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : buf) acc += s.real() * s.real() + s.imag() * s.imag();
  return acc / static_cast<double>(buf.size());
}

void append_fixed_point_bytes(std::span<const FixedIQ> raw, std::vector<std::uint8_t>& out) {
  out.reserve(out.size() + raw.size() * kBytesPerFixedSample);
  for (const auto& s : raw) {
    bytes::put_u16_le(out, static_cast<std::uint16_t>(s.i));
    bytes::put_u16_le(out, static_cast<std::uint16_t>(s.q));
  }
}

FixedPointIQ fixed_point_from_bytes(std::span<const std::uint8_t> data) {
  require_whole_samples(data.size());
  FixedPointIQ out(data.size() / kBytesPerFixedSample);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const auto* p = data.data() + n * kBytesPerFixedSample;
    out[n].i = static_cast<std::int16_t>(bytes::get_u16_le(p));
    out[n].q = static_cast<std::int16_t>(bytes::get_u16_le(p + 2));
  }
  return out;
}

IQBuffer iq_from_fixed_point_bytes(std::span<const std::uint8_t> data) {
  require_whole_samples(data.size());
  IQBuffer out(data.size() / kBytesPerFixedSample);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const auto* p = data.data() + n * kBytesPerFixedSample;
    out[n] = {static_cast<std::int16_t>(bytes::get_u16_le(p)) / kFixedPointScale,
              static_cast<std::int16_t>(bytes::get_u16_le(p + 2)) / kFixedPointScale};
  }
  return out;
}

}  // namespace dapp
