#include <doctest.h>

#include <random>

#include "dapp/ecpri.hpp"

using namespace dapp;
using namespace dapp::ecpri;

namespace {

FixedPointIQ random_iq(std::mt19937_64& rng, std::size_t n) {
  FixedPointIQ out(n);
  for (auto& s : out) s = {static_cast<std::int16_t>(rng()), static_cast<std::int16_t>(rng())};
  return out;
}

ParseErrc parse_error(std::span<const std::uint8_t> bytes) {
  try {
    parse_frame(bytes);
  } catch (const FrameError& e) {
    return e.code();
  }
  FAIL("frame accepted");
  return ParseErrc::Truncated;
}

void check_stats(const CaptureStats& s) { CHECK(s.frames_seen == s.frames_parsed + s.frames_skipped); }

}  // namespace

TEST_CASE("build/parse round trip") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto pc = static_cast<std::uint16_t>(rng());
    const auto seq = static_cast<std::uint16_t>(rng());
    const auto iq = random_iq(rng, rng() % 2000);
    const auto bytes = build_frame(pc, seq, iq);
    const Frame f = parse_frame(bytes);
    CHECK(f.pc_id == pc);
    CHECK(f.seq_id == seq);
    CHECK(f.payload_size() == iq.size() * 4);
    CHECK(fixed_point_from_bytes(f.payload) == iq);
    if (!iq.empty()) CHECK(extract_iq(f) == from_fixed_point(iq));
  }
}

TEST_CASE("header layout") {
  const auto bytes = build_frame(0x0102, 0xA0B0, FixedPointIQ(1536));
  REQUIRE(bytes.size() == kHeaderSize + 6144);
  CHECK(bytes[0] == 0x10);
  CHECK(bytes[1] == 0x00);
  CHECK(bytes[2] == 0x18);
  CHECK(bytes[3] == 0x00);
  CHECK(bytes[4] == 0x01);
  CHECK(bytes[5] == 0x02);
  CHECK(bytes[6] == 0xA0);
  CHECK(bytes[7] == 0xB0);
  CHECK_THROWS_AS(build_frame(0, 0, FixedPointIQ(16384)), FrameError);
  CHECK_NOTHROW(build_frame(0, 0, FixedPointIQ(16383)));
}

TEST_CASE("declared parse errors") {
  const auto good = build_frame(1, 2, FixedPointIQ(4));
  CHECK(parse_error(std::span(good).first(3)) == ParseErrc::Truncated);
  CHECK(parse_error(std::span(good).first(6)) == ParseErrc::Truncated);
  CHECK(parse_error(std::span(good).first(good.size() - 4)) == ParseErrc::Truncated);

  auto v2 = good;
  v2[0] = 0x20;
  CHECK(parse_error(v2) == ParseErrc::UnsupportedVersion);

  auto concat = good;
  concat[0] |= 0x01;
  CHECK(parse_error(concat) == ParseErrc::UnsupportedConcatenation);

  auto ctrl = good;
  ctrl[1] = 2;
  CHECK(parse_error(ctrl) == ParseErrc::NonIQType);

  auto longer = good;
  longer.push_back(0);
  CHECK(parse_error(longer) == ParseErrc::PayloadSizeMismatch);

  // payload_size not a whole number of samples
  auto ragged = good;
  ragged[3] = 15;
  ragged.pop_back();
  CHECK(parse_error(ragged) == ParseErrc::PayloadSizeMismatch);

  CHECK_THROWS_AS(extract_iq(parse_frame(build_frame(0, 0, {}))), FrameError);
}

TEST_CASE("parser is total on fuzzed input") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<std::uint8_t> bytes;
    if (trial % 2 == 0) {
      bytes.resize(rng() % 40);
      for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
    } else {
      bytes = build_frame(static_cast<std::uint16_t>(rng()), 0, random_iq(rng, rng() % 16));
      bytes[rng() % bytes.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
      if (rng() % 3 == 0) bytes.resize(rng() % (bytes.size() + 1));
    }
    try {
      const Frame f = parse_frame(bytes);
      auto canonical = bytes;
      canonical[0] = 0x10;  // reserved bits are ignored
      CHECK(build_frame(f.pc_id, f.seq_id, fixed_point_from_bytes(f.payload)) == canonical);
    } catch (const FrameError&) {
    }
  }
}

TEST_CASE("stream framing") {
  auto [a, b] = make_memory_pipe();
  const auto f1 = build_frame(1, 0, FixedPointIQ(3));
  write_frame(*a, f1);
  write_frame(*a, std::vector<std::uint8_t>{});
  a->close();
  CHECK(read_frame(*b) == f1);
  CHECK(read_frame(*b).empty());
  CHECK_THROWS_AS(read_frame(*b), StreamClosed);
}

TEST_CASE("capture counts sequence gaps") {
  for (const auto& [seqs, gaps] : std::vector<std::pair<std::vector<std::uint16_t>, std::uint64_t>>{
           {{0, 1, 2}, 0}, {{0, 2}, 1}, {{65534, 65535, 0, 1}, 0}, {{5, 4}, 1}}) {
    auto [a, b] = make_memory_pipe();
    for (auto s : seqs) write_frame(*a, build_frame(9, s, FixedPointIQ(2)));
    a->close();
    CaptureSource cap(*b, 9);
    std::vector<std::uint16_t> got;
    while (auto slot = cap.next()) got.push_back(slot->seq_id);
    CHECK(got == seqs);
    CHECK(cap.stats().seq_gaps == gaps);
    check_stats(cap.stats());
  }
}

TEST_CASE("capture filters one flow") {
  std::mt19937_64 rng(5);
  struct Sent {
    std::uint16_t pc, seq;
    FixedPointIQ iq;
    bool iq_type;
  };
  std::vector<Sent> sent;
  auto [a, b] = make_memory_pipe();
  std::uint16_t seq[3] = {0, 0, 0};
  for (int k = 0; k < 300; ++k) {
    const auto pc = static_cast<std::uint16_t>(rng() % 3);
    Sent s{pc, seq[pc]++, random_iq(rng, 1 + rng() % 32), rng() % 10 != 0};
    auto bytes = build_frame(s.pc, s.seq, s.iq);
    if (!s.iq_type) bytes[1] = 5;
    write_frame(*a, bytes);
    sent.push_back(std::move(s));
  }
  write_frame(*a, std::vector<std::uint8_t>{0xFF});  // garbage record
  a->close();

  CaptureSource cap(*b, 1);
  std::vector<CapturedSlot> got;
  while (auto slot = cap.next()) got.push_back(std::move(*slot));

  std::vector<const Sent*> oracle;
  for (const auto& s : sent)
    if (s.pc == 1 && s.iq_type) oracle.push_back(&s);
  REQUIRE(got.size() == oracle.size());
  std::uint64_t prev_arrival = 0;
  for (std::size_t k = 0; k < got.size(); ++k) {
    CHECK(got[k].seq_id == oracle[k]->seq);
    CHECK(got[k].samples == from_fixed_point(oracle[k]->iq));
    CHECK(got[k].arrival_timestamp_ns >= prev_arrival);
    prev_arrival = got[k].arrival_timestamp_ns;
  }
  CHECK(cap.stats().frames_seen == 301);
  CHECK(cap.stats().frames_parsed == oracle.size());
  check_stats(cap.stats());
}
