// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// JSON request/response protocol shared by the HTTP and WebSocket fronts.
//
//   {"op": "open",  "image_id": s}                        -> {session_id, width, height, encoded_on_demand}
//   {"op": "click", "session_id": s, "x": i, "y": i, "positive": b} -> {mask_rle, latency_ms, click_count, ...}
//   {"op": "undo",  "session_id": s}                      -> same as click
//   {"op": "close", "session_id": s}                      -> {closed: true}
//   {"op": "health"}                                      -> {version, config}
//
// Every response carries "ok". Failures are {"ok": false, "error": {code,
// message}}. An optional "request_id" is echoed and makes click/undo
// idempotent within a session.

#pragma once

#include <string>

#include "clickseg/session/session.hpp"
#include "json.hpp"

namespace clickseg {

inline constexpr const char* kVersion = "0.1.0";

class ProtocolHandler {
 public:
  ProtocolHandler(SessionManager& sessions, nlohmann::json config_echo);

  // Never throws for bad input; errors become error responses.
  nlohmann::json handle(const nlohmann::json& request);
  std::string handle_text(const std::string& request);

  // HTTP status matching an error response (200 for success).
  static int http_status(const nlohmann::json& response);

  SessionManager& sessions() { return *sessions_; }

 private:
  SessionManager* sessions_;
  nlohmann::json config_;
};

nlohmann::json click_response_json(const ClickResponse& r);

}  // namespace clickseg
