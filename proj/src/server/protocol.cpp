// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/server/protocol.hpp"

#include "clickseg/common/error.hpp"

namespace clickseg {

namespace {

using nlohmann::json;

json error_json(const std::string& code, const std::string& message) {
  return {{"ok", false}, {"error", {{"code", code}, {"message", message}}}};
}

const json& field(const json& req, const char* name) {
  auto it = req.find(name);
  if (it == req.end()) throw InvalidArgument(std::string("missing field '") + name + "'");
  return *it;
}

std::string string_field(const json& req, const char* name) {
  const auto& v = field(req, name);
  if (!v.is_string()) throw InvalidArgument(std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

std::int64_t int_field(const json& req, const char* name) {
  const auto& v = field(req, name);
  if (!v.is_number_integer()) throw InvalidArgument(std::string("field '") + name + "' must be an integer");
  return v.get<std::int64_t>();
}

bool bool_field(const json& req, const char* name) {
  const auto& v = field(req, name);
  if (!v.is_boolean()) throw InvalidArgument(std::string("field '") + name + "' must be a boolean");
  return v.get<bool>();
}

std::string request_id(const json& req) {
  auto it = req.find("request_id");
  if (it == req.end() || it->is_null()) return {};
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
  throw InvalidArgument("request_id must be a string or integer");
}

}  // namespace

json click_response_json(const ClickResponse& r) {
  return {{"ok", true},
          {"mask_rle", r.mask_rle},
          {"latency_ms", r.latency_ms},
          {"click_count", r.click_count},
          {"width", r.mask.width},
          {"height", r.mask.height},
          {"logits",
           {{"min", r.logits.min}, {"max", r.logits.max}, {"mean", r.logits.mean}, {"fg_fraction", r.logits.fg_fraction}}}};
}

ProtocolHandler::ProtocolHandler(SessionManager& sessions, json config_echo)
    : sessions_(&sessions), config_(std::move(config_echo)) {}

json ProtocolHandler::handle(const json& req) {
  json out;
  std::string rid;
  try {
    if (!req.is_object()) throw InvalidArgument("request must be a JSON object");
    rid = request_id(req);
    const std::string op = string_field(req, "op");
    if (op == "open") {
      const auto r = sessions_->open(string_field(req, "image_id"));
      out = {{"ok", true},
             {"session_id", r.session_id},
             {"width", r.width},
             {"height", r.height},
             {"encoded_on_demand", r.encoded_on_demand}};
    } else if (op == "click") {
      const Click c{int_field(req, "x"), int_field(req, "y"), bool_field(req, "positive")};
      out = click_response_json(sessions_->click(string_field(req, "session_id"), c, rid));
    } else if (op == "undo") {
      out = click_response_json(sessions_->undo(string_field(req, "session_id"), rid));
    } else if (op == "close") {
      sessions_->close(string_field(req, "session_id"));
      out = {{"ok", true}, {"closed", true}};
    } else if (op == "health") {
      out = {{"ok", true}, {"version", kVersion}, {"config", config_}, {"sessions", sessions_->session_count()}};
    } else {
      throw InvalidArgument("unknown op '" + op + "'");
    }
    out["op"] = op;
  } catch (const NotFound& e) {
    out = error_json("not_found", e.what());
  } catch (const OutOfBounds& e) {
    out = error_json("out_of_bounds", e.what());
  } catch (const InvalidArgument& e) {
    out = error_json("invalid_argument", e.what());
  } catch (const FormatError& e) {
    out = error_json("format_error", e.what());
  } catch (const std::exception& e) {
    out = error_json("internal", e.what());
  }
  if (!rid.empty()) out["request_id"] = rid;
  return out;
}

std::string ProtocolHandler::handle_text(const std::string& text) {
  json req;
  try {
    req = json::parse(text);
  } catch (const json::parse_error& e) {
    return error_json("parse_error", e.what()).dump();
  }
  return handle(req).dump();
}

int ProtocolHandler::http_status(const json& response) {
  if (response.value("ok", false)) return 200;
  const std::string code = response["error"].value("code", "internal");
  if (code == "not_found") return 404;
  if (code == "internal" || code == "format_error") return 500;
  return 400;
}

}  // namespace clickseg
