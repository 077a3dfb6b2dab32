// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Blocking WebSocket client for tests: masked text frames, one reply each.

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace clickseg::testing {

class WsClient {
 public:
  explicit WsClient(int port, const std::string& key = "dGhlIHNhbXBsZSBub25jZQ==") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0) throw std::runtime_error("connect failed");
    const std::string req = "GET / HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                            "Sec-WebSocket-Key: " + key + "\r\nSec-WebSocket-Version: 13\r\n\r\n";
    send_raw(req);
    while (handshake_.find("\r\n\r\n") == std::string::npos) {
      char c;
      if (::recv(fd_, &c, 1, 0) != 1) throw std::runtime_error("handshake closed");
      handshake_.push_back(c);
    }
  }
  ~WsClient() { ::close(fd_); }

  const std::string& handshake() const { return handshake_; }

  // Sends `text`, split into `fragments` frames.
  void send_text(const std::string& text, int fragments = 1) {
    const std::size_t step = (text.size() + fragments - 1) / std::max(1, fragments);
    std::size_t pos = 0;
    for (int i = 0; i < fragments; ++i) {
      const std::string part = text.substr(pos, i + 1 == fragments ? std::string::npos : step);
      pos += part.size();
      send_frame(i == 0 ? 0x1 : 0x0, part, i + 1 == fragments);
    }
  }

  void send_frame(std::uint8_t opcode, const std::string& payload, bool fin = true) {
    std::string f;
    f.push_back(static_cast<char>((fin ? 0x80 : 0) | opcode));
    const std::size_t n = payload.size();
    if (n < 126) {
      f.push_back(static_cast<char>(0x80 | n));
    } else if (n <= 0xFFFF) {
      f.push_back(static_cast<char>(0x80 | 126));
      f.push_back(static_cast<char>(n >> 8));
      f.push_back(static_cast<char>(n & 0xFF));
    } else {
      f.push_back(static_cast<char>(0x80 | 127));
      for (int i = 7; i >= 0; --i) f.push_back(static_cast<char>((static_cast<std::uint64_t>(n) >> (8 * i)) & 0xFF));
    }
    std::uint8_t key[4];
    for (auto& k : key) k = static_cast<std::uint8_t>(gen_());
    f.append(reinterpret_cast<char*>(key), 4);
    for (std::size_t i = 0; i < n; ++i) f.push_back(static_cast<char>(payload[i] ^ key[i % 4]));
    send_raw(f);
  }

  // Returns (opcode, payload) of the next frame.
  std::pair<int, std::string> recv_frame() {
    std::uint8_t h[2];
    recv_raw(h, 2);
    std::uint64_t len = h[1] & 0x7F;
    if (len == 126) {
      std::uint8_t e[2];
      recv_raw(e, 2);
      len = (std::uint64_t{e[0]} << 8) | e[1];
    } else if (len == 127) {
      std::uint8_t e[8];
      recv_raw(e, 8);
      len = 0;
      for (auto b : e) len = (len << 8) | b;
    }
    std::string p(len, '\0');
    if (len) recv_raw(p.data(), len);
    return {h[0] & 0x0F, p};
  }

  std::string request(const std::string& text) {
    send_text(text);
    return recv_frame().second;
  }

 private:
  void send_raw(const std::string& s) {
    if (::send(fd_, s.data(), s.size(), MSG_NOSIGNAL) != static_cast<ssize_t>(s.size())) {
      throw std::runtime_error("send failed");
    }
  }
  void recv_raw(void* out, std::size_t n) {
    auto* p = static_cast<char*>(out);
    while (n) {
      const ssize_t k = ::recv(fd_, p, n, 0);
      if (k <= 0) throw std::runtime_error("connection closed");
      p += k;
      n -= static_cast<std::size_t>(k);
    }
  }

  int fd_ = -1;
  std::string handshake_;
  std::mt19937 gen_{42};
};

}  // namespace clickseg::testing
