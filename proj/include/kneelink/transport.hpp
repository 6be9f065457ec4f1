#ifndef KNEELINK_TRANSPORT_HPP
#define KNEELINK_TRANSPORT_HPP

// Connectionless datagram link standing in for the wearable's radio hop.
// Each datagram is delivered independently with probability 1 - drop_prob,
// optionally delayed by a bounded jitter. Order is always preserved.

#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "kneelink/error.hpp"
#include "kneelink/protocol.hpp"

namespace kneelink::transport {

inline constexpr std::uint16_t kDefaultPort = 4747;
inline constexpr const char* kPortEnvVar = "KNEELINK_PORT";

using Datagram = std::vector<std::uint8_t>;
using Clock = std::chrono::steady_clock;

enum class Delivery { Delivered, Dropped };

struct LinkConfig {
  double drop_prob = 0.0;
  std::chrono::microseconds jitter_bound{0};
  std::uint64_t seed = 1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;

  std::string str() const { return host + ":" + std::to_string(port); }
};

/// Default port, overridden by KNEELINK_PORT when set.
inline std::uint16_t default_port() {
  if (const char* env = std::getenv(kPortEnvVar); env && *env) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0 && v < 65536) return static_cast<std::uint16_t>(v);
    throw Error(ErrorCode::Configuration, std::string("invalid ") + kPortEnvVar + ": " + env);
  }
  return kDefaultPort;
}

/// Parses "host:port", "host" or ":port".
inline Endpoint parse_endpoint(const std::string& text) {
  Endpoint ep;
  ep.port = default_port();
  const auto colon = text.rfind(':');
  const std::string host = colon == std::string::npos ? text : text.substr(0, colon);
  if (!host.empty()) ep.host = host;
  if (colon != std::string::npos) {
    const std::string port = text.substr(colon + 1);
    char* end = nullptr;
    const long v = std::strtol(port.c_str(), &end, 10);
    if (port.empty() || *end != '\0' || v < 0 || v > 65535) {
      throw Error(ErrorCode::Configuration, "bad endpoint port in '" + text + "'");
    }
    ep.port = static_cast<std::uint16_t>(v);
  }
  return ep;
}

/// Seeded Bernoulli loss plus jitter, shared by every sink.
class LossModel {
 public:
  explicit LossModel(const LinkConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    if (!(cfg.drop_prob >= 0.0 && cfg.drop_prob <= 1.0)) {
      throw Error(ErrorCode::Configuration, "drop probability outside [0, 1]");
    }
    if (cfg.jitter_bound.count() < 0) {
      throw Error(ErrorCode::Configuration, "jitter bound must be non-negative");
    }
  }

  bool drop() { return std::bernoulli_distribution(cfg_.drop_prob)(rng_); }

  std::chrono::microseconds jitter() {
    if (cfg_.jitter_bound.count() == 0) return std::chrono::microseconds{0};
    std::uniform_int_distribution<std::int64_t> d(0, cfg_.jitter_bound.count());
    return std::chrono::microseconds{d(rng_)};
  }

 private:
  LinkConfig cfg_;
  std::mt19937_64 rng_;
};

struct SinkStats {
  std::uint64_t sent = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped = 0;
};

class DatagramSink {
 public:
  virtual ~DatagramSink() = default;
  virtual Delivery send(std::span<const std::uint8_t> datagram) = 0;
  virtual void close() = 0;
  virtual SinkStats stats() const = 0;
};

class DatagramSource {
 public:
  virtual ~DatagramSource() = default;
  /// Next datagram, or nullopt on timeout. Throws Shutdown once closed and drained.
  virtual std::optional<Datagram> recv(std::chrono::milliseconds timeout) = 0;
  virtual void close() = 0;
};

/// In-process link: one producer, one consumer.
class LoopbackLink final : public DatagramSink, public DatagramSource {
 public:
  explicit LoopbackLink(LinkConfig cfg = {}) : loss_(cfg) {}

  Delivery send(std::span<const std::uint8_t> datagram) override {
    std::lock_guard lock(mu_);
    if (closed_) throw Error(ErrorCode::Shutdown, "send on closed link");
    ++stats_.sent;
    if (loss_.drop()) {
      ++stats_.dropped;
      return Delivery::Dropped;
    }
    // Jitter delays delivery but never lets a datagram overtake its predecessor.
    const auto due = std::max(last_due_, Clock::now() + loss_.jitter());
    last_due_ = due;
    queue_.push_back(Entry{due, Datagram(datagram.begin(), datagram.end())});
    ++stats_.delivered;
    cv_.notify_one();
    return Delivery::Delivered;
  }

  std::optional<Datagram> recv(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(mu_);
    const auto deadline = Clock::now() + timeout;
    while (true) {
      const auto now = Clock::now();
      if (!queue_.empty() && queue_.front().due <= now) {
        Datagram d = std::move(queue_.front().bytes);
        queue_.pop_front();
        return d;
      }
      if (queue_.empty() && closed_) throw Error(ErrorCode::Shutdown, "recv on closed link");
      if (now >= deadline) return std::nullopt;
      cv_.wait_until(lock, queue_.empty() ? deadline : std::min(deadline, queue_.front().due));
    }
  }

  void close() override {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

  SinkStats stats() const override {
    std::lock_guard lock(mu_);
    return stats_;
  }

 private:
  struct Entry {
    Clock::time_point due;
    Datagram bytes;
  };

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Entry> queue_;
  LossModel loss_;
  SinkStats stats_;
  Clock::time_point last_due_{};
  bool closed_ = false;
};

namespace detail {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const noexcept { return fd_; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline sockaddr_storage resolve(const Endpoint& ep, socklen_t& len) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_DGRAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (const int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw Error(ErrorCode::Configuration,
                "cannot resolve " + ep.str() + ": " + ::gai_strerror(rc));
  }
  sockaddr_storage out{};
  std::memcpy(&out, res->ai_addr, res->ai_addrlen);
  len = static_cast<socklen_t>(res->ai_addrlen);
  ::freeaddrinfo(res);
  return out;
}

}  // namespace detail

/// UDP sender applying the loss model before the socket.
class UdpSink final : public DatagramSink {
 public:
  UdpSink(const Endpoint& dest, LinkConfig cfg = {}) : loss_(cfg) {
    addr_ = detail::resolve(dest, addr_len_);
    sock_ = detail::Socket(::socket(AF_INET, SOCK_DGRAM, 0));
    if (sock_.fd() < 0) throw Error(ErrorCode::Configuration, "socket() failed");
  }

  Delivery send(std::span<const std::uint8_t> datagram) override {
    if (sock_.fd() < 0) throw Error(ErrorCode::Shutdown, "send on closed socket");
    ++stats_.sent;
    if (loss_.drop()) {
      ++stats_.dropped;
      return Delivery::Dropped;
    }
    if (const auto j = loss_.jitter(); j.count() > 0) std::this_thread::sleep_for(j);
    const auto n = ::sendto(sock_.fd(), datagram.data(), datagram.size(), 0,
                            reinterpret_cast<const sockaddr*>(&addr_), addr_len_);
    if (n != static_cast<ssize_t>(datagram.size())) {
      throw Error(ErrorCode::Shutdown, std::string("sendto failed: ") + std::strerror(errno));
    }
    ++stats_.delivered;
    return Delivery::Delivered;
  }

  void close() override { sock_.reset(); }
  SinkStats stats() const override { return stats_; }

 private:
  LossModel loss_;
  detail::Socket sock_;
  sockaddr_storage addr_{};
  socklen_t addr_len_ = 0;
  SinkStats stats_;
};

/// Bound UDP endpoint. Port 0 picks an ephemeral port, see bound_port().
class UdpSource final : public DatagramSource {
 public:
  explicit UdpSource(const Endpoint& listen) {
    socklen_t len = 0;
    const sockaddr_storage addr = detail::resolve(listen, len);
    sock_ = detail::Socket(::socket(AF_INET, SOCK_DGRAM, 0));
    if (sock_.fd() < 0) throw Error(ErrorCode::Configuration, "socket() failed");
    const int one = 1;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    // Bursty replays can outrun the consumer briefly.
    const int rcvbuf = 4 << 20;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_RCVBUF, &rcvbuf, sizeof rcvbuf);
    if (::bind(sock_.fd(), reinterpret_cast<const sockaddr*>(&addr), len) != 0) {
      throw Error(ErrorCode::Configuration,
                  "cannot bind " + listen.str() + ": " + std::strerror(errno));
    }
    sockaddr_in bound{};
    socklen_t blen = sizeof bound;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&bound), &blen);
    port_ = ntohs(bound.sin_port);
  }

  std::uint16_t bound_port() const noexcept { return port_; }

  std::optional<Datagram> recv(std::chrono::milliseconds timeout) override {
    if (closed_.load()) throw Error(ErrorCode::Shutdown, "recv on closed socket");
    pollfd pfd{sock_.fd(), POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (closed_.load()) throw Error(ErrorCode::Shutdown, "recv on closed socket");
    if (rc <= 0) return std::nullopt;
    Datagram buf(1500);
    const auto n = ::recv(sock_.fd(), buf.data(), buf.size(), 0);
    if (n < 0) return std::nullopt;
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }

  // Wakes a blocked recv() within its poll timeout; the fd is released on destruction.
  void close() override { closed_.store(true); }

 private:
  detail::Socket sock_;
  std::uint16_t port_ = 0;
  std::atomic<bool> closed_{false};
};

}  // namespace kneelink::transport

#endif  // KNEELINK_TRANSPORT_HPP
