#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <time.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <string>
#include <thread>

#include "dapp/stream.hpp"

namespace dapp {

std::uint64_t monotonic_ns() {
  using namespace std::chrono;
  return static_cast<std::uint64_t>(
      duration_cast<nanoseconds>(steady_clock::now().time_since_epoch()).count());
}

namespace {

// ---------------------------------------------------------------------------
// In-process pipe

struct Chunk {
  std::vector<std::uint8_t> data;
  std::uint64_t at = 0;  // monotonic write time
};

struct Channel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Chunk> chunks;
  std::size_t front_offset = 0;
  bool closed = false;
};

class MemoryEndpoint final : public ByteStream {
 public:
  MemoryEndpoint(std::shared_ptr<Channel> in, std::shared_ptr<Channel> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~MemoryEndpoint() override { close(); }

  void write(std::span<const std::uint8_t> data) override {
    {
      std::lock_guard lock(out_->mu);
      if (out_->closed) throw StreamClosed();
      out_->chunks.push_back({{data.begin(), data.end()}, monotonic_ns()});
    }
    out_->cv.notify_one();
  }

  void read_exact(std::span<std::uint8_t> data) override {
    std::unique_lock lock(in_->mu);
    std::size_t filled = 0;
    while (filled < data.size()) {
      in_->cv.wait(lock, [&] { return !in_->chunks.empty() || in_->closed; });
      if (in_->chunks.empty()) throw StreamClosed();
      auto& chunk = in_->chunks.front().data;
      const std::size_t n = std::min(chunk.size() - in_->front_offset, data.size() - filled);
      std::memcpy(data.data() + filled, chunk.data() + in_->front_offset, n);
      filled += n;
      in_->front_offset += n;
      if (in_->front_offset == chunk.size()) {
        in_->chunks.pop_front();
        in_->front_offset = 0;
      }
    }
  }

  bool wait_readable(std::chrono::nanoseconds timeout) override {
    std::unique_lock lock(in_->mu);
    return in_->cv.wait_for(lock, timeout, [&] { return !in_->chunks.empty() || in_->closed; });
  }

  void close() override {
    {
      std::lock_guard lock(out_->mu);
      out_->closed = true;
    }
    out_->cv.notify_all();
  }

  std::optional<std::uint64_t> arrival_ns() override {
    std::lock_guard lock(in_->mu);
    if (in_->chunks.empty()) return std::nullopt;
    return in_->chunks.front().at;
  }

 private:
  std::shared_ptr<Channel> in_;
  std::shared_ptr<Channel> out_;
};

// ---------------------------------------------------------------------------
// Loopback TCP

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

class TcpEndpoint final : public ByteStream {
 public:
  explicit TcpEndpoint(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    ::setsockopt(fd_, SOL_SOCKET, SO_TIMESTAMPNS, &one, sizeof(one));
  }
  ~TcpEndpoint() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void write(std::span<const std::uint8_t> data) override {
    std::size_t sent = 0;
    while (sent < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EPIPE || errno == ECONNRESET) throw StreamClosed();
        throw TransportError(errno_text("send"));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  void read_exact(std::span<std::uint8_t> data) override {
    std::size_t got = 0;
    while (got < data.size()) {
      const ssize_t n = ::recv(fd_, data.data() + got, data.size() - got, 0);
      if (n == 0) throw StreamClosed();
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == ECONNRESET) throw StreamClosed();
        throw TransportError(errno_text("recv"));
      }
      got += static_cast<std::size_t>(n);
    }
  }

  bool wait_readable(std::chrono::nanoseconds timeout) override {
    pollfd pfd{fd_, POLLIN, 0};
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    timespec ts{static_cast<time_t>(secs.count()), static_cast<long>((timeout - secs).count())};
    for (;;) {
      const int r = ::ppoll(&pfd, 1, &ts, nullptr);
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw TransportError(errno_text("ppoll"));
      return r > 0;
    }
  }

  // Kernel receive timestamp (CLOCK_REALTIME) of the next unread byte, peeked
  // without consuming it and moved onto the monotonic clock.
  std::optional<std::uint64_t> arrival_ns() override {
    std::uint8_t byte = 0;
    iovec iov{&byte, 1};
    alignas(cmsghdr) char control[CMSG_SPACE(sizeof(timespec))];
    msghdr msg{};
    msg.msg_iov = &iov;
    msg.msg_iovlen = 1;
    msg.msg_control = control;
    msg.msg_controllen = sizeof(control);
    if (::recvmsg(fd_, &msg, MSG_PEEK | MSG_DONTWAIT) <= 0) return std::nullopt;
    for (cmsghdr* c = CMSG_FIRSTHDR(&msg); c; c = CMSG_NXTHDR(&msg, c)) {
      if (c->cmsg_level != SOL_SOCKET || c->cmsg_type != SCM_TIMESTAMPNS) continue;
      timespec stamp{};
      std::memcpy(&stamp, CMSG_DATA(c), sizeof(stamp));
      timespec real{};
      ::clock_gettime(CLOCK_REALTIME, &real);
      const std::uint64_t mono = monotonic_ns();
      const auto ns = [](const timespec& t) {
        return static_cast<std::int64_t>(t.tv_sec) * 1'000'000'000 + t.tv_nsec;
      };
      const std::int64_t age = ns(real) - ns(stamp);
      if (age < 0) return mono;
      return mono - static_cast<std::uint64_t>(age);
    }
    return std::nullopt;
  }

  void close() override {
    if (!shut_) {
      ::shutdown(fd_, SHUT_WR);
      shut_ = true;
    }
  }

 private:
  int fd_;
  bool shut_ = false;
};

// ---------------------------------------------------------------------------
// Delay line

class DelayedEndpoint final : public ByteStream {
 public:
  DelayedEndpoint(std::unique_ptr<ByteStream> inner, std::chrono::nanoseconds delay)
      : inner_(std::move(inner)), delay_(delay), forwarder_([this] { forward(); }) {}

  ~DelayedEndpoint() override {
    close();
    forwarder_.join();
  }

  void write(std::span<const std::uint8_t> data) override {
    {
      std::lock_guard lock(mu_);
      if (closing_) throw StreamClosed();
      if (failed_) throw StreamClosed();
      queue_.push_back({std::chrono::steady_clock::now() + delay_, {data.begin(), data.end()}});
    }
    cv_.notify_one();
  }

  void read_exact(std::span<std::uint8_t> data) override { inner_->read_exact(data); }
  bool wait_readable(std::chrono::nanoseconds timeout) override {
    return inner_->wait_readable(timeout);
  }
  std::optional<std::uint64_t> arrival_ns() override { return inner_->arrival_ns(); }

  void close() override {
    {
      std::lock_guard lock(mu_);
      closing_ = true;
    }
    cv_.notify_one();
  }

 private:
  struct Pending {
    std::chrono::steady_clock::time_point due;
    std::vector<std::uint8_t> data;
  };

  void forward() {
    // Default 50us slack would show up in every delayed hop.
    ::prctl(PR_SET_TIMERSLACK, 1UL);
    std::unique_lock lock(mu_);
    for (;;) {
      cv_.wait(lock, [&] { return !queue_.empty() || closing_; });
      if (queue_.empty()) break;
      Pending item = std::move(queue_.front());
      queue_.pop_front();
      lock.unlock();
      std::this_thread::sleep_until(item.due);
      try {
        inner_->write(item.data);
      } catch (const std::exception&) {
        lock.lock();
        failed_ = true;
        queue_.clear();
        continue;
      }
      lock.lock();
    }
    lock.unlock();
    inner_->close();
  }

  std::unique_ptr<ByteStream> inner_;
  std::chrono::nanoseconds delay_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Pending> queue_;
  bool closing_ = false;
  bool failed_ = false;
  std::thread forwarder_;
};

}  // namespace

StreamPair make_memory_pipe() {
  auto a_to_b = std::make_shared<Channel>();
  auto b_to_a = std::make_shared<Channel>();
  return {std::make_unique<MemoryEndpoint>(b_to_a, a_to_b),
          std::make_unique<MemoryEndpoint>(a_to_b, b_to_a)};
}

StreamPair make_loopback_tcp_pair() {
  const int listener = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listener < 0) throw TransportError(errno_text("socket"));
  struct Closer {
    int fd;
    ~Closer() { ::close(fd); }
  } listener_guard{listener};

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
    throw TransportError(errno_text("bind"));
  if (::listen(listener, 1) < 0) throw TransportError(errno_text("listen"));
  socklen_t len = sizeof(addr);
  if (::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len) < 0)
    throw TransportError(errno_text("getsockname"));

  const int client = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (client < 0) throw TransportError(errno_text("socket"));
  auto client_end = std::make_unique<TcpEndpoint>(client);
  if (::connect(client, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
    throw TransportError(errno_text("connect"));
  const int server = ::accept4(listener, nullptr, nullptr, SOCK_CLOEXEC);
  if (server < 0) throw TransportError(errno_text("accept"));
  return {std::make_unique<TcpEndpoint>(server), std::move(client_end)};
}

std::unique_ptr<ByteStream> with_write_delay(std::unique_ptr<ByteStream> inner,
                                             std::chrono::nanoseconds delay) {
  return std::make_unique<DelayedEndpoint>(std::move(inner), delay);
}

}  // namespace dapp
