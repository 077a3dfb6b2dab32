// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// HTTP one-shot endpoints plus a WebSocket channel carrying the same JSON
// protocol, and static-asset serving for the annotator frontend.
//
//   POST /api/{open,click,undo,close}  body: request fields (op implied)
//   POST /api/rpc                      body: full request with "op"
//   GET  /api/health
//   GET  /api/image/<image_id>         source image, when an image dir is set
//   GET  /*                            files under static_dir
//   ws://host:ws_port/                 one JSON request per text frame

#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "clickseg/server/protocol.hpp"

namespace clickseg {

// Minimal RFC 6455 server: text frames in, text frames out.
class WebSocketServer {
 public:
  using Handler = std::function<std::string(const std::string&)>;
  explicit WebSocketServer(Handler on_text, std::size_t max_message = 16u << 20);
  ~WebSocketServer();
  WebSocketServer(const WebSocketServer&) = delete;
  WebSocketServer& operator=(const WebSocketServer&) = delete;

  // Binds and starts accepting; port 0 picks a free port. Returns the port.
  int start(const std::string& host, int port);
  // Stops accepting, lets in-flight messages finish, closes connections.
  void stop();
  int port() const { return port_; }

 private:
  void accept_loop();
  void serve(int fd);

  Handler on_text_;
  std::size_t max_message_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::set<int> conns_;
  std::vector<std::thread> workers_;
};

// Sec-WebSocket-Accept for a client key.
std::string websocket_accept_key(const std::string& client_key);

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  // WebSocket port; -1 means port + 1 (or a free port when port is 0).
  int ws_port = -1;
  std::optional<std::filesystem::path> static_dir;
  std::optional<std::filesystem::path> image_dir;
};

class Server {
 public:
  Server(ProtocolHandler& handler, ServerConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds both listeners (IoError on failure) and serves in background threads.
  void start();
  void stop();
  // Blocks until stop() is called from elsewhere.
  void wait();

  int http_port() const { return http_port_; }
  int ws_port() const { return ws_.port(); }

 private:
  struct Impl;
  ProtocolHandler& handler_;
  ServerConfig cfg_;
  std::unique_ptr<Impl> impl_;
  WebSocketServer ws_;
  int http_port_ = 0;
};

}  // namespace clickseg
