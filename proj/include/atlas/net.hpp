#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "atlas/protocol.hpp"
#include "atlas/service.hpp"

namespace atlas {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

inline Endpoint parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::invalid_argument, "expected <addr:port>, got '" + s + "'");
  Endpoint e;
  e.host = s.substr(0, colon);
  if (e.host.empty()) e.host = "0.0.0.0";
  const auto port = std::stoul(s.substr(colon + 1));
  if (port > 65535) throw Error(ErrorCode::invalid_argument, "port out of range");
  e.port = static_cast<std::uint16_t>(port);
  return e;
}

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  void shutdown() const {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void write_all(std::string_view bytes) const {
    std::size_t off = 0;
    while (off < bytes.size()) {
      const auto n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::io, std::string("send: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  /// Reads exactly n bytes; false on orderly EOF before the first byte.
  bool read_exact(char* out, std::size_t n) const {
    std::size_t off = 0;
    while (off < n) {
      const auto r = ::recv(fd_, out + off, n - off, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r == 0 && off == 0) return false;
      if (r <= 0) throw Error(ErrorCode::io, "connection closed mid-frame");
      off += static_cast<std::size_t>(r);
    }
    return true;
  }

 private:
  int fd_ = -1;
};

/// Reads one frame (header included). Returns an empty string on EOF.
/// Oversized frames throw before their body is read.
inline std::string read_frame(const Socket& s) {
  char header[frame_header_bytes];
  if (!s.read_exact(header, frame_header_bytes)) return {};
  const std::uint32_t len = read_frame_length({header, frame_header_bytes});
  if (len > max_frame_body) throw Error(ErrorCode::corrupt_stream, "frame exceeds 16 MiB");
  std::string frame(header, frame_header_bytes);
  frame.resize(frame_header_bytes + len);
  if (len && !s.read_exact(frame.data() + frame_header_bytes, len)) throw Error(ErrorCode::io, "connection closed mid-frame");
  return frame;
}

inline Socket connect_to(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(e.host.c_str(), std::to_string(e.port).c_str(), &hints, &res) != 0 || !res)
    throw Error(ErrorCode::io, "cannot resolve " + e.host);
  Socket s(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
  const int rc = s.valid() ? ::connect(s.fd(), res->ai_addr, res->ai_addrlen) : -1;
  ::freeaddrinfo(res);
  if (rc != 0) throw Error(ErrorCode::io, "cannot connect to " + e.host + ":" + std::to_string(e.port));
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

/// Thread-per-connection TCP front end for a Service.
class Server {
 public:
  explicit Server(Service& service) : service_(service) {}
  ~Server() { stop(); }

  /// Binds and starts accepting; returns the bound port (useful with port 0).
  std::uint16_t start(const Endpoint& e) {
    listener_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) throw Error(ErrorCode::io, "socket failed");
    int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(e.port);
    if (::inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1)
      throw Error(ErrorCode::invalid_argument, "listen address must be an IPv4 literal");
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw Error(ErrorCode::io, std::string("bind: ") + std::strerror(errno));
    if (::listen(listener_.fd(), 64) != 0) throw Error(ErrorCode::io, "listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    return ntohs(addr.sin_port);
  }

  void stop() {
    if (!running_.exchange(false)) return;
    listener_.shutdown();
    if (acceptor_.joinable()) acceptor_.join();
    listener_.reset();
    std::list<Connection> conns;
    {
      std::lock_guard lock(mutex_);
      for (auto& c : connections_) c.socket.shutdown();
      conns.swap(connections_);
    }
    for (auto& c : conns) {
      if (c.thread.joinable()) c.thread.join();
    }
  }

 private:
  struct Connection {
    Socket socket;
    std::thread thread;
  };

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mutex_);
      if (!running_) {
        ::close(fd);
        break;
      }
      auto& c = connections_.emplace_back();
      c.socket = Socket(fd);
      const Socket* sock = &c.socket;
      c.thread = std::thread([this, sock] { serve(*sock); });
    }
  }

  void serve(const Socket& s) {
    try {
      while (true) {
        std::string frame;
        try {
          frame = read_frame(s);
        } catch (const Error& e) {
          if (e.code() == ErrorCode::corrupt_stream) {
            s.write_all(encode_frame({MessageKind::error, 0, 0, {{"code", wire_error::too_large}, {"message", e.what()}}}));
          }
          s.shutdown();
          return;
        }
        if (frame.empty()) return;
        s.write_all(service_.process_frame(frame));
      }
    } catch (const std::exception&) {
      // The peer went away; the session stays open until closed or reused.
    }
  }

  Service& service_;
  Socket listener_;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::list<Connection> connections_;
};

/// Blocking client with request/reply correlation.
class Client {
 public:
  explicit Client(const Endpoint& e) : socket_(connect_to(e)) {}

  std::uint64_t token() const { return token_; }

  Message call(MessageKind kind, nlohmann::json payload) {
    Message req{kind, token_, ++seq_, std::move(payload)};
    const std::string frame = encode_frame(req);
    socket_.write_all(frame);
    bytes_up_ += frame.size();
    const std::string reply = read_frame(socket_);
    if (reply.empty()) throw Error(ErrorCode::io, "server closed the connection");
    bytes_down_ += reply.size();
    Message rep = decode_frame(reply);
    if (rep.seq != req.seq) throw Error(ErrorCode::corrupt_stream, "reply does not match request seq");
    return rep;
  }

  Message open(const SelectionPolicy& policy, const std::string& vehicle) {
    Message rep = call(MessageKind::open_session, {{"policy", policy_to_json(policy)}, {"vehicle", vehicle}});
    if (rep.kind == MessageKind::update_ack) token_ = rep.token;
    return rep;
  }

  std::uint64_t bytes_up() const { return bytes_up_; }
  std::uint64_t bytes_down() const { return bytes_down_; }

 private:
  Socket socket_;
  std::uint64_t token_ = 0;
  std::uint64_t seq_ = 0;
  std::uint64_t bytes_up_ = 0;
  std::uint64_t bytes_down_ = 0;
};

}  // namespace atlas
