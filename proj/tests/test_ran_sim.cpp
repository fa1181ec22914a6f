#include <doctest.h>

#include <sstream>
#include <thread>

#include "dapp/ecpri.hpp"
#include "dapp/ran_sim.hpp"
#include "dapp/workloads.hpp"

using namespace dapp;
using namespace dapp::ransim;

namespace {

const e3::AuthToken kToken{9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9};

ChannelState base_state() {
  ChannelState s;
  s.rng_seed = 1234;
  return s;
}

e3::SetupRequest request(double period_ms = 1.0, std::uint32_t samples = kDefaultSlotSamples) {
  e3::SetupRequest req;
  req.auth_token = kToken;
  req.subscription = {e3::DappKind::Ebs, samples, period_ms};
  return req;
}

e3::SetupResponse handshake(ByteStream& ep, e3::Session& session, const e3::SetupRequest& req) {
  ep.write(e3::encode(req));
  session.sent(req);
  const auto msg = e3::decode(e3::read_frame(ep));
  session.received(msg);
  return std::get<e3::SetupResponse>(msg);
}

// Minimal dApp: EBS decisions, tracking the channel it moved the RAN to.
struct ScriptedDapp {
  std::vector<e3::IndicationMessage> seen;
  std::vector<ControlDecision> sent;

  void run(ByteStream& ep) {
    e3::Session session(e3::Role::DApp);
    if (!handshake(ep, session, request()).accepted) return;
    ChannelContext ctx;
    for (;;) {
      e3::Message msg;
      try {
        msg = e3::decode(e3::read_frame(ep));
      } catch (const StreamClosed&) {
        return;
      }
      session.received(msg);
      const auto& ind = std::get<e3::IndicationMessage>(msg);
      seen.push_back(ind);
      const auto d = workloads::ebs_decide(from_fixed_point(ind.payload), {0.05}, ctx);
      const e3::ControlMessage ctl{ind.seq, d};
      ep.write(e3::encode(ctl));
      session.sent(ctl);
      if (d.channel_change) ctx.current = *d.channel_change;
      sent.push_back(d);
    }
  }
};

}  // namespace

TEST_CASE("slot generation is a pure function of seed and index") {
  const auto s = base_state();
  const auto a = generate_slot(s, 17);
  CHECK(generate_slot(s, 17).samples == a.samples);
  // order of generation does not matter
  generate_slot(s, 3);
  CHECK(generate_slot(s, 17).samples == a.samples);
  CHECK(generate_slot(s, 18).samples != a.samples);
  auto other = s;
  other.rng_seed = 1235;
  CHECK(generate_slot(other, 17).samples != a.samples);
  for (const auto& x : a.samples) CHECK((std::isfinite(x.real()) && std::isfinite(x.imag())));
}

TEST_CASE("tone is added exactly on the interfered channel") {
  auto on = base_state();
  on.interferer = {37, 0.8, 0.3};
  auto off = on;
  off.current_channel = 2;
  const auto a = generate_slot(on, 5);
  const auto b = generate_slot(off, 5);
  CHECK(a.occupied);
  CHECK_FALSE(b.occupied);
  for (std::size_t n = 0; n < a.samples.size(); ++n) {
    const auto expect = std::polar(0.8, 2.0 * std::numbers::pi * 37.0 * static_cast<double>(n) / 1536.0 + 0.3);
    CHECK(std::abs((a.samples[n] - b.samples[n]) - expect) < 1e-12);
  }
  auto none = on;
  none.interferer_on_channel.reset();
  CHECK_FALSE(generate_slot(none, 5).occupied);
}

TEST_CASE("noise statistics") {
  auto s = base_state();
  s.interferer_on_channel.reset();
  s.noise_sigma = 0.1;
  double sum_i = 0, sum_q = 0, sq_i = 0, sq_q = 0, cross = 0;
  std::size_t n = 0;
  for (std::uint64_t k = 0; k < 100; ++k)
    for (const auto& x : generate_slot(s, k).samples) {
      sum_i += x.real();
      sum_q += x.imag();
      sq_i += x.real() * x.real();
      sq_q += x.imag() * x.imag();
      cross += x.real() * x.imag();
      ++n;
    }
  const double N = static_cast<double>(n);
  CHECK(std::abs(sum_i / N) < 0.002);
  CHECK(std::abs(sum_q / N) < 0.002);
  CHECK(sq_i / N == doctest::Approx(0.01).epsilon(0.03));
  CHECK(sq_q / N == doctest::Approx(0.01).epsilon(0.03));
  CHECK(std::abs(cross / N) < 0.0003);
}

TEST_CASE("state validation") {
  auto s = base_state();
  CHECK_NOTHROW(s.validate());
  auto bad = s;
  bad.noise_sigma = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.interferer.amplitude = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.current_channel = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.interferer_on_channel = 7;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("apply_control") {
  const auto s = base_state();
  CHECK(apply_control(s, ControlDecision::no_op(1.0)).current_channel == 0);
  CHECK(apply_control(s, ControlDecision::change_to(3, 1.0)).current_channel == 3);
  CHECK_THROWS_AS(apply_control(s, ControlDecision::change_to(4, 1.0)), InvalidChannel);
}

TEST_CASE("quantize_slot saturates") {
  const IQBuffer x{{1.7, -0.5}, {-3.0, 0.25}};
  CHECK(quantize_slot(x) == FixedPointIQ{{32767, -16384}, {-32768, 8192}});
}

TEST_CASE("ground-truth log") {
  GroundTruthLog log;
  log.append(0, 0, true);
  log.append(1, 1, false);
  CHECK_THROWS_AS(log.append(1, 1, false), std::logic_error);
  log.attach_decision(0, ControlDecision::change_to(1, 0.5));
  log.attach_decision(1, ControlDecision::no_op(0.0));
  log.append(2, 1, false);
  log.mark_timeout(2);
  CHECK_THROWS_AS(log.mark_timeout(9), std::logic_error);
  std::ostringstream out;
  log.write_csv(out);
  CHECK(out.str() ==
        "slot_index,channel,occupied,verdict,action\n"
        "0,0,1,occupied,channel_change:1\n"
        "1,1,0,unoccupied,noop\n"
        "2,1,0,,\n");
  CHECK(log.records()[2].control_timed_out);
}

TEST_CASE("serve_e3 closes the loop and vacates the interfered channel") {
  auto [ran_end, dapp_end] = make_memory_pipe();
  auto state = base_state();
  ScriptedDapp dapp;
  std::thread peer([&, ep = dapp_end.get()] { dapp.run(*ep); });
  ServeOptions opts;
  opts.expected_token = kToken;
  const auto log = serve_e3(*ran_end, state, 20, opts);
  peer.join();

  REQUIRE(log.size() == 20);
  REQUIRE(dapp.seen.size() == 20);
  CHECK(log.records()[0].occupied);
  CHECK(dapp.sent[0].channel_change == std::uint8_t{1});
  for (std::size_t k = 1; k < 20; ++k) {
    CHECK(log.records()[k].channel == 1);
    CHECK_FALSE(log.records()[k].occupied);
  }
  for (std::uint32_t k = 0; k < 20; ++k) {
    CHECK(dapp.seen[k].seq == k);
    REQUIRE(log.records()[k].decision.has_value());
    CHECK(*log.records()[k].decision == dapp.sent[k]);
  }
  CHECK(state.current_channel == 1);
  CHECK(log.late_controls == 0);
}

TEST_CASE("serve_e3 rejects bad tokens and subscriptions") {
  for (int reason : {1, 2}) {
    auto [ran_end, dapp_end] = make_memory_pipe();
    auto state = base_state();
    bool failed = false;
    ServeOptions opts;
    opts.expected_token = kToken;
    opts.on_setup_failed = [&] { failed = true; };
    std::thread ran([&, ep = ran_end.get()] { serve_e3(*ep, state, 5, opts); });
    auto req = request();
    if (reason == 1) req.auth_token[0] ^= 1;
    else req.subscription.samples_per_indication = 512;
    e3::Session session(e3::Role::DApp);
    const auto resp = handshake(*dapp_end, session, req);
    ran.join();
    CHECK_FALSE(resp.accepted);
    CHECK(resp.reason_code == reason);
    CHECK(session.phase() == e3::Phase::Closed);
    CHECK(failed);
    CHECK_THROWS_AS(e3::read_frame(*dapp_end), StreamClosed);
  }
}

TEST_CASE("missing controls time out and late ones are counted") {
  auto [ran_end, dapp_end] = make_memory_pipe();
  auto state = base_state();
  ServeOptions opts;
  opts.expected_token = kToken;
  GroundTruthLog log;
  std::thread ran([&, ep = ran_end.get()] { log = serve_e3(*ep, state, 3, opts); });

  e3::Session session(e3::Role::DApp);
  REQUIRE(handshake(*dapp_end, session, request()).accepted);
  // slot 0 goes unanswered until slot 1 is already out
  auto m0 = e3::decode(e3::read_frame(*dapp_end));
  session.received(m0);
  auto m1 = e3::decode(e3::read_frame(*dapp_end));
  CHECK(std::get<e3::IndicationMessage>(m1).seq == 1);
  session.expire_pending();
  session.received(m1);
  for (std::uint32_t seq : {0u, 1u}) {
    const e3::ControlMessage ctl{seq, ControlDecision::no_op(0)};
    dapp_end->write(e3::encode(ctl));
    session.sent(ctl);
  }
  auto m2 = e3::decode(e3::read_frame(*dapp_end));
  session.received(m2);
  const e3::ControlMessage ctl{2, ControlDecision::no_op(0)};
  dapp_end->write(e3::encode(ctl));
  ran.join();

  REQUIRE(log.size() == 3);
  CHECK(log.records()[0].control_timed_out);
  CHECK_FALSE(log.records()[0].decision.has_value());
  CHECK(log.records()[1].decision.has_value());
  CHECK(log.late_controls == 1);
}

TEST_CASE("eCPRI frames carry the same samples as E3 indications") {
  const std::uint32_t slots = 40;
  auto e3_state = base_state();
  auto [ran_end, dapp_end] = make_memory_pipe();
  ScriptedDapp dapp;
  std::thread peer([&, ep = dapp_end.get()] { dapp.run(*ep); });
  ServeOptions opts;
  opts.expected_token = kToken;
  opts.pc_id = 7;
  serve_e3(*ran_end, e3_state, slots, opts);
  peer.join();

  auto dc_state = base_state();
  auto [frames_tx, frames_rx] = make_memory_pipe();
  auto [ctl_ran, ctl_dapp] = make_memory_pipe();
  std::vector<std::vector<std::uint8_t>> frames;
  std::thread dc([&] {
    e3::Session session(e3::Role::DApp, e3::IndicationPath::DirectCapture);
    CHECK(handshake(*ctl_dapp, session, request()).accepted);
    ChannelContext ctx;
    for (std::uint32_t k = 0; k < slots; ++k) {
      frames.push_back(ecpri::read_frame(*frames_rx));
      const auto f = ecpri::parse_frame(frames.back());
      const auto d = workloads::ebs_decide(ecpri::extract_iq(f), {0.05}, ctx);
      if (d.channel_change) ctx.current = *d.channel_change;
      const e3::ControlMessage ctl{k, d};
      ctl_dapp->write(e3::encode(ctl));
      session.sent(ctl);
    }
  });
  const auto log = emit_ecpri(*frames_tx, *ctl_ran, dc_state, slots, opts);
  dc.join();

  REQUIRE(frames.size() == slots);
  for (std::uint32_t k = 0; k < slots; ++k) {
    const auto f = ecpri::parse_frame(frames[k]);
    CHECK(f.pc_id == 7);
    CHECK(f.seq_id == k);
    std::vector<std::uint8_t> e3_payload;
    append_fixed_point_bytes(dapp.seen[k].payload, e3_payload);
    CHECK(f.payload == e3_payload);
  }
  CHECK(log.records().back().channel == 1);
}
