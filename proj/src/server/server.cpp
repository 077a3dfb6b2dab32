// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/server/server.hpp"

#include <condition_variable>

#include "clickseg/common/error.hpp"
#include "clickseg/encoder/image.hpp"
#include "httplib.h"

namespace clickseg {

struct Server::Impl {
  httplib::Server http;
  std::thread thread;
  std::mutex mu;
  std::condition_variable cv;
  bool stopped = false;
};

namespace {

void reply(httplib::Response& res, const nlohmann::json& body) {
  res.status = ProtocolHandler::http_status(body);
  res.set_content(body.dump(), "application/json");
}

}  // namespace

Server::Server(ProtocolHandler& handler, ServerConfig cfg)
    : handler_(handler),
      cfg_(std::move(cfg)),
      impl_(std::make_unique<Impl>()),
      ws_([&handler](const std::string& text) { return handler.handle_text(text); }) {}

Server::~Server() { stop(); }

void Server::start() {
  auto& http = impl_->http;
  for (const char* op : {"open", "click", "undo", "close"}) {
    http.Post(std::string("/api/") + op, [this, op](const httplib::Request& req, httplib::Response& res) {
      auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded()) {
        reply(res, nlohmann::json::parse(handler_.handle_text(req.body)));
        return;
      }
      if (body.is_object()) body["op"] = op;
      reply(res, handler_.handle(body));
    });
  }
  http.Post("/api/rpc", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, nlohmann::json::parse(handler_.handle_text(req.body)));
  });
  http.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    reply(res, handler_.handle({{"op", "health"}}));
  });
  if (cfg_.image_dir) {
    http.Get(R"(/api/image/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      try {
        validate_image_id(id);
        for (const char* ext : {".png", ".ppm", ".pnm"}) {
          const auto p = *cfg_.image_dir / (id + ext);
          if (!std::filesystem::exists(p)) continue;
          const auto bytes = read_file(p);
          res.set_content(std::string(bytes.begin(), bytes.end()),
                          std::string(ext) == ".png" ? "image/png" : "image/x-portable-anymap");
          return;
        }
        res.status = 404;
        res.set_content("no image '" + id + "'", "text/plain");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(e.what(), "text/plain");
      }
    });
  }
  if (cfg_.static_dir && !http.set_mount_point("/", cfg_.static_dir->string())) {
    throw NotFound("static directory " + cfg_.static_dir->string() + " does not exist");
  }

  // httplib enables SO_REUSEPORT by default, which would let a second
  // server silently share the port.
  http.set_socket_options([](socket_t sock) {
    const int one = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  });
  if (cfg_.port == 0) {
    http_port_ = http.bind_to_any_port(cfg_.host);
  } else {
    http_port_ = http.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
  }
  if (http_port_ <= 0) throw IoError("cannot bind HTTP port " + std::to_string(cfg_.port) + " on " + cfg_.host);
  const int ws_port = cfg_.ws_port >= 0 ? cfg_.ws_port : (cfg_.port == 0 ? 0 : cfg_.port + 1);
  try {
    ws_.start(cfg_.host, ws_port);
  } catch (...) {
    http.stop();
    throw;
  }
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
}

void Server::stop() {
  if (!impl_) return;
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    if (impl_->stopped) return;
    impl_->stopped = true;
  }
  ws_.stop();
  // httplib's stop joins its worker pool, so in-flight requests finish.
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->cv.notify_all();
}

void Server::wait() {
  std::unique_lock<std::mutex> lock(impl_->mu);
  impl_->cv.wait(lock, [this] { return impl_->stopped; });
}

}  // namespace clickseg
