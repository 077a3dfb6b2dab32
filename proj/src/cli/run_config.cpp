// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/cli/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "clickseg/common/error.hpp"

namespace clickseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InvalidArgument(key + ": expected a number, got '" + v + "'");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InvalidArgument(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

template <typename Seq>
std::string join(const Seq& s) {
  std::string out;
  for (const auto& x : s) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>) {
      out += fmt_double(x);
    } else {
      out += std::to_string(x);
    }
  }
  return out;
}

std::array<int, 4> parse_four(const std::string& key, const std::string& v) {
  const auto parts = split(v);
  if (parts.size() != 4) throw InvalidArgument(key + ": expected 4 comma-separated integers");
  std::array<int, 4> out{};
  for (int i = 0; i < 4; ++i) out[i] = static_cast<int>(parse_int(key, parts[i]));
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define CS_INT(expr)                                                                             \
  Field {                                                                                        \
    [](const RunConfig& c) { return std::to_string(c.expr); },                                  \
        [](RunConfig& c, const std::string& k, const std::string& v) {                           \
          c.expr = static_cast<std::decay_t<decltype(c.expr)>>(parse_int(k, v));                 \
        }                                                                                        \
  }
#define CS_DBL(expr)                                                                                        \
  Field {                                                                                                   \
    [](const RunConfig& c) { return fmt_double(c.expr); },                                                 \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_double(k, v); }      \
  }
#define CS_BOOL(expr)                                                                                       \
  Field {                                                                                                   \
    [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); },                              \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); }        \
  }
#define CS_STR(expr)                                                                                        \
  Field {                                                                                                   \
    [](const RunConfig& c) { return c.expr; }, [](RunConfig& c, const std::string&, const std::string& v) { \
      c.expr = v;                                                                                           \
    }                                                                                                       \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = {
      {"preset", Field{[](const RunConfig& c) { return c.preset; },
                       [](RunConfig& c, const std::string&, const std::string& v) {
                         const DecoderConfig p = decoder_preset(v);
                         c.preset = v;
                         if (v != "custom") {
                           c.model.decoder.depths = p.depths;
                           c.model.decoder.zoomin = p.zoomin;
                           c.model.decoder.zoomin_start = p.zoomin_start;
                         }
                       }}},
      {"model.seed", CS_INT(model_seed)},
      {"model.base_channels",
       Field{[](const RunConfig& c) { return std::to_string(c.model.decoder.base_channels); },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               c.model.decoder.base_channels = parse_int(k, v);
               c.model.encoder.base_channels = static_cast<int>(c.model.decoder.base_channels);
             }}},
      {"encoder.patch_size", CS_INT(model.encoder.patch_size)},
      {"encoder.embed_dim", CS_INT(model.encoder.embed_dim)},
      {"encoder.depth", CS_INT(model.encoder.depth)},
      {"encoder.heads", CS_INT(model.encoder.heads)},
      {"encoder.pos_grid", CS_INT(model.encoder.pos_grid)},
      {"encoder.mlp_ratio", CS_INT(model.encoder.mlp_ratio)},
      {"decoder.depths", Field{[](const RunConfig& c) { return join(c.model.decoder.depths); },
                               [](RunConfig& c, const std::string& k, const std::string& v) {
                                 c.model.decoder.depths = parse_four(k, v);
                               }}},
      {"decoder.zoomin_start", Field{[](const RunConfig& c) { return join(c.model.decoder.zoomin_start); },
                                     [](RunConfig& c, const std::string& k, const std::string& v) {
                                       c.model.decoder.zoomin_start = parse_four(k, v);
                                     }}},
      {"decoder.pool_sizes", Field{[](const RunConfig& c) { return join(c.model.decoder.pool_sizes); },
                                   [](RunConfig& c, const std::string& k, const std::string& v) {
                                     std::vector<std::int64_t> p;
                                     for (const auto& s : split(v)) p.push_back(parse_int(k, s));
                                     c.model.decoder.pool_sizes = p;
                                   }}},
      {"decoder.zoomin", CS_BOOL(model.decoder.zoomin)},
      {"decoder.head_channels", CS_INT(model.decoder.head_channels)},
      {"decoder.mlp_ratio", CS_INT(model.decoder.mlp_ratio)},
      {"decoder.roi_expand", CS_DBL(model.decoder.roi_expand)},
      {"train.gamma_sim", CS_DBL(train.gamma_sim)},
      {"train.max_rounds", CS_INT(train.max_rounds)},
      {"train.focal_gamma", CS_DBL(train.focal_gamma)},
      {"train.lr", CS_DBL(train.lr)},
      {"train.weight_decay", CS_DBL(train.weight_decay)},
      {"train.beta1", CS_DBL(train.beta1)},
      {"train.beta2", CS_DBL(train.beta2)},
      {"train.eps", CS_DBL(train.eps)},
      {"train.steps", CS_INT(train.steps)},
      {"train.batch", CS_INT(train.batch)},
      {"train.seed", CS_INT(train.seed)},
      {"train.image_size", CS_INT(train.image_size)},
      {"train.train_encoder", CS_BOOL(train.train_encoder)},
      {"train.log_every", CS_INT(train.log_every)},
      {"train.warmup_steps", CS_INT(train.warmup_steps)},
      {"train.cosine", CS_BOOL(train.cosine)},
      {"train.lr_min_ratio", CS_DBL(train.lr_min_ratio)},
      {"train.clip_norm", CS_DBL(train.clip_norm)},
      {"paths.cache_dir", CS_STR(cache_dir)},
      {"paths.image_dir", CS_STR(image_dir)},
      {"paths.dataset", CS_STR(dataset)},
      {"paths.weights", CS_STR(weights)},
      {"paths.out", CS_STR(out)},
      {"eval.thresholds", Field{[](const RunConfig& c) { return join(c.thresholds); },
                                [](RunConfig& c, const std::string& k, const std::string& v) {
                                  std::vector<double> t;
                                  for (const auto& s : split(v)) t.push_back(parse_double(k, s));
                                  c.thresholds = t;
                                }}},
      {"eval.max_clicks", CS_INT(max_clicks)},
      {"eval.workers", CS_INT(workers)},
      {"serve.host", CS_STR(host)},
      {"serve.port", CS_INT(port)},
      {"serve.static_dir", CS_STR(static_dir)},
      {"bench.size", CS_INT(bench_size)},
      {"bench.clicks", CS_INT(bench_clicks)},
  };
  return f;
}

#undef CS_INT
#undef CS_DBL
#undef CS_BOOL
#undef CS_STR

// Keys whose value the named preset fixes.
void check_preset_conflict(const RunConfig& c, const std::string& key, const std::string& value) {
  if (c.preset == "custom") return;
  const DecoderConfig p = decoder_preset(c.preset);
  RunConfig probe = c;
  fields().at(key).set(probe, key, value);
  const auto& d = probe.model.decoder;
  std::string what;
  if (key == "decoder.depths" && d.depths != p.depths) what = "depths";
  if (c.preset == "light" && key == "decoder.zoomin" && d.zoomin) what = "zoom-in (light has none)";
  if (c.preset == "light" && key == "decoder.zoomin_start" && d.zoomin_start != p.zoomin_start) {
    what = "zoom-in schedule (light has none)";
  }
  if (!what.empty()) {
    throw InvalidArgument(key + " = " + value + " conflicts with preset '" + c.preset + "', which fixes " + what +
                          "; use preset = custom");
  }
}

}  // namespace

DecoderConfig decoder_preset(const std::string& name) {
  if (name == "tiny" || name == "custom") return DecoderConfig::tiny();
  if (name == "light") return DecoderConfig::light();
  throw InvalidArgument("unknown preset '" + name + "' (expected light, tiny or custom)");
}

RunConfig::RunConfig() { set("preset", "tiny"); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : fields()) out.push_back(name);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw InvalidArgument("unknown config key '" + key + "'");
  if (key != "preset") check_preset_conflict(*this, key, value);
  it->second.set(*this, key, value);
}

std::string RunConfig::get(const std::string& key) const {
  auto it = fields().find(key);
  if (it == fields().end()) throw InvalidArgument("unknown config key '" + key + "'");
  return it->second.get(*this);
}

RunConfig RunConfig::parse(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (!seen.insert(key).second) throw InvalidArgument("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    entries.emplace_back(key, value);
  }
  RunConfig c;
  // The preset goes first so later keys override it.
  for (const auto& [k, v] : entries) {
    if (k == "preset") c.set(k, v);
  }
  for (const auto& [k, v] : entries) {
    if (k != "preset") c.set(k, v);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  model.encoder.validate();
  model.decoder.validate();
  train.validate();
  if (model.encoder.base_channels != model.decoder.base_channels) {
    throw InvalidArgument("encoder and decoder base channels differ");
  }
  if (thresholds.empty()) throw InvalidArgument("eval.thresholds must not be empty");
  for (double t : thresholds) {
    if (!(t > 0 && t <= 1)) throw InvalidArgument("eval.thresholds must lie in (0, 1]");
  }
  if (max_clicks < 1 || max_clicks > 20) throw InvalidArgument("eval.max_clicks must be in [1, 20]");
  if (workers < 1) throw InvalidArgument("eval.workers must be >= 1");
  if (port < 0 || port > 65535) throw InvalidArgument("serve.port out of range");
  if (bench_size < 32 || bench_clicks < 1) throw InvalidArgument("bench.size must be >= 32 and bench.clicks >= 1");
}

}  // namespace clickseg
