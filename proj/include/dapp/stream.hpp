#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace dapp {

/// Thrown by reads once the peer has closed and no buffered bytes remain.
class StreamClosed : public std::runtime_error {
 public:
  StreamClosed() : std::runtime_error("stream closed") {}
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reliable, ordered, bidirectional byte stream endpoint.
class ByteStream {
 public:
  virtual ~ByteStream() = default;

  /// Writes all bytes as one unit; a delayed stream delays the unit once.
  virtual void write(std::span<const std::uint8_t> data) = 0;

  /// Blocks until exactly data.size() bytes are read. Throws StreamClosed.
  virtual void read_exact(std::span<std::uint8_t> data) = 0;

  /// True when a read would not block (data buffered or peer closed).
  virtual bool wait_readable(std::chrono::nanoseconds timeout) = 0;

  /// Half-close: the peer sees StreamClosed after draining.
  virtual void close() = 0;

  /// Monotonic time at which the oldest unread byte reached this endpoint,
  /// when the transport records it. nullopt when nothing is buffered.
  virtual std::optional<std::uint64_t> arrival_ns() { return std::nullopt; }
};

using StreamPair = std::pair<std::unique_ptr<ByteStream>, std::unique_ptr<ByteStream>>;

/// In-process pipe; both ends live in the same address space.
StreamPair make_memory_pipe();

/// Connected TCP endpoints over the loopback interface (TCP_NODELAY).
/// Throws TransportError on socket failures.
StreamPair make_loopback_tcp_pair();

/// Wraps an endpoint so every write reaches the wire `delay` after it was
/// issued, emulating a bridge hop. Reads pass through untouched.
std::unique_ptr<ByteStream> with_write_delay(std::unique_ptr<ByteStream> inner,
                                             std::chrono::nanoseconds delay);

/// Monotonic clock used for every latency measurement.
std::uint64_t monotonic_ns();

}  // namespace dapp
