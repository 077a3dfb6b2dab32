// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/evp.h>
#include <openssl/sha.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <map>

#include "clickseg/common/error.hpp"
#include "clickseg/server/server.hpp"

namespace clickseg {

namespace {

constexpr const char* kGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

enum Opcode : std::uint8_t { kCont = 0x0, kText = 0x1, kBinary = 0x2, kClose = 0x8, kPing = 0x9, kPong = 0xA };

bool write_all(int fd, const void* data, std::size_t n) {
  const auto* p = static_cast<const char*>(data);
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k <= 0) {
      if (k < 0 && errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool read_all(int fd, void* data, std::size_t n) {
  auto* p = static_cast<char*>(data);
  while (n > 0) {
    const ssize_t k = ::recv(fd, p, n, 0);
    if (k <= 0) {
      if (k < 0 && errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool send_frame(int fd, std::uint8_t opcode, const std::string& payload) {
  std::string h;
  h.push_back(static_cast<char>(0x80 | opcode));
  const std::size_t n = payload.size();
  if (n < 126) {
    h.push_back(static_cast<char>(n));
  } else if (n <= 0xFFFF) {
    h.push_back(126);
    h.push_back(static_cast<char>(n >> 8));
    h.push_back(static_cast<char>(n & 0xFF));
  } else {
    h.push_back(127);
    for (int i = 7; i >= 0; --i) h.push_back(static_cast<char>((static_cast<std::uint64_t>(n) >> (8 * i)) & 0xFF));
  }
  return write_all(fd, h.data(), h.size()) && write_all(fd, payload.data(), payload.size());
}

void send_close(int fd, std::uint16_t code) {
  std::string p{static_cast<char>(code >> 8), static_cast<char>(code & 0xFF)};
  send_frame(fd, kClose, p);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Reads the upgrade request; returns false on anything but a valid
// WebSocket handshake.
bool handshake(int fd) {
  std::string req;
  char buf[1024];
  while (req.find("\r\n\r\n") == std::string::npos) {
    if (req.size() > 16384) return false;
    const ssize_t k = ::recv(fd, buf, sizeof buf, 0);
    if (k <= 0) return false;
    req.append(buf, static_cast<std::size_t>(k));
  }
  std::map<std::string, std::string> headers;
  std::size_t pos = req.find("\r\n");
  const std::string request_line = req.substr(0, pos);
  while (true) {
    const std::size_t next = req.find("\r\n", pos + 2);
    if (next == std::string::npos || next == pos + 2) break;
    const std::string line = req.substr(pos + 2, next - pos - 2);
    const auto colon = line.find(':');
    if (colon != std::string::npos) headers[lower(trim(line.substr(0, colon)))] = trim(line.substr(colon + 1));
    pos = next;
  }
  const bool ok = request_line.rfind("GET ", 0) == 0 && lower(headers["upgrade"]) == "websocket" &&
                  lower(headers["connection"]).find("upgrade") != std::string::npos &&
                  headers["sec-websocket-version"] == "13" && !headers["sec-websocket-key"].empty();
  if (!ok) {
    const std::string resp =
        "HTTP/1.1 400 Bad Request\r\nContent-Type: text/plain\r\nContent-Length: 26\r\nConnection: close\r\n\r\n"
        "expected websocket upgrade";
    write_all(fd, resp.data(), resp.size());
    return false;
  }
  const std::string resp = "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                           "Sec-WebSocket-Accept: " +
                           websocket_accept_key(headers["sec-websocket-key"]) + "\r\n\r\n";
  return write_all(fd, resp.data(), resp.size());
}

}  // namespace

std::string websocket_accept_key(const std::string& client_key) {
  const std::string src = client_key + kGuid;
  std::array<unsigned char, SHA_DIGEST_LENGTH> digest{};
  SHA1(reinterpret_cast<const unsigned char*>(src.data()), src.size(), digest.data());
  std::array<unsigned char, 4 * ((SHA_DIGEST_LENGTH + 2) / 3) + 1> out{};
  const int n = EVP_EncodeBlock(out.data(), digest.data(), SHA_DIGEST_LENGTH);
  return std::string(reinterpret_cast<const char*>(out.data()), static_cast<std::size_t>(n));
}

WebSocketServer::WebSocketServer(Handler on_text, std::size_t max_message)
    : on_text_(std::move(on_text)), max_message_(max_message) {}

WebSocketServer::~WebSocketServer() { stop(); }

int WebSocketServer::start(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw IoError("cannot resolve host '" + host + "'");
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw IoError("cannot bind websocket port " + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  stopping_ = false;
  acceptor_ = std::thread([this] { accept_loop(); });
  return port_;
}

void WebSocketServer::accept_loop() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard<std::mutex> lock(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    conns_.insert(fd);
    workers_.emplace_back([this, fd] { serve(fd); });
  }
}

void WebSocketServer::serve(int fd) {
  if (handshake(fd)) {
    std::string message;
    bool in_message = false;
    while (true) {
      std::uint8_t h[2];
      if (!read_all(fd, h, 2)) break;
      const bool fin = h[0] & 0x80;
      const std::uint8_t op = h[0] & 0x0F;
      const bool masked = h[1] & 0x80;
      std::uint64_t len = h[1] & 0x7F;
      if (len == 126) {
        std::uint8_t e[2];
        if (!read_all(fd, e, 2)) break;
        len = (std::uint64_t{e[0]} << 8) | e[1];
      } else if (len == 127) {
        std::uint8_t e[8];
        if (!read_all(fd, e, 8)) break;
        len = 0;
        for (std::uint8_t b : e) len = (len << 8) | b;
      }
      if (!masked || (h[0] & 0x70)) {
        send_close(fd, 1002);
        break;
      }
      if (len > max_message_ || message.size() + len > max_message_) {
        send_close(fd, 1009);
        break;
      }
      std::uint8_t key[4];
      if (!read_all(fd, key, 4)) break;
      std::string payload(static_cast<std::size_t>(len), '\0');
      if (len && !read_all(fd, payload.data(), payload.size())) break;
      for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>(payload[i] ^ key[i % 4]);

      if (op == kClose) {
        send_frame(fd, kClose, payload.substr(0, 2));
        break;
      }
      if (op == kPing) {
        send_frame(fd, kPong, payload);
        continue;
      }
      if (op == kPong) continue;
      if (op == kBinary) {
        send_close(fd, 1003);
        break;
      }
      if ((op == kText) == in_message || (op != kText && op != kCont)) {
        send_close(fd, 1002);
        break;
      }
      message += payload;
      in_message = !fin;
      if (fin) {
        const std::string reply = on_text_(message);
        message.clear();
        if (!send_frame(fd, kText, reply)) break;
      }
    }
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    conns_.erase(fd);
  }
  ::close(fd);
}

void WebSocketServer::stop() {
  if (listen_fd_ < 0) return;
  stopping_ = true;
  if (acceptor_.joinable()) acceptor_.join();
  ::close(listen_fd_);
  listen_fd_ = -1;
  std::vector<std::thread> workers;
  {
    std::lock_guard<std::mutex> lock(mu_);
    // Stop reading new frames; a message being handled still gets its reply.
    for (int fd : conns_) ::shutdown(fd, SHUT_RD);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

}  // namespace clickseg
