// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/session/session.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <limits>

#include "clickseg/encoder/image.hpp"
#include "clickseg/io/container.hpp"

namespace clickseg {

namespace {
constexpr std::int64_t kMaxSide = 1 << 16;
constexpr std::int64_t kMaxChannels = 1 << 16;
}  // namespace

std::vector<std::uint8_t> encode_features(const FeatureMapSet& fs) {
  fs.validate();
  io::ByteWriter w;
  w.header(io::Kind::kFeatures);
  w.u32(static_cast<std::uint32_t>(fs.original_h));
  w.u32(static_cast<std::uint32_t>(fs.original_w));
  w.u32(static_cast<std::uint32_t>(fs.padded_h));
  w.u32(static_cast<std::uint32_t>(fs.padded_w));
  w.u32(4);
  for (int i = 0; i < 4; ++i) {
    const Tensor& t = fs.levels[i];
    w.u32(static_cast<std::uint32_t>(i + 1));
    for (int d = 0; d < 3; ++d) w.u32(static_cast<std::uint32_t>(t.dim(d)));
    w.f32s(t.data());
  }
  w.seal();
  return w.take();
}

FeatureMapSet decode_features(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.open() != io::Kind::kFeatures) {
    throw FormatError(FormatError::Kind::kMalformed, 6, "not a feature cache");
  }
  FeatureMapSet fs;
  fs.original_h = r.u32();
  fs.original_w = r.u32();
  fs.padded_h = r.u32();
  fs.padded_w = r.u32();
  const std::size_t dims_at = r.offset();
  if (fs.padded_h < 1 || fs.padded_w < 1 || fs.original_h < 1 || fs.original_w < 1 || fs.original_h > fs.padded_h ||
      fs.original_w > fs.padded_w || fs.padded_h > kMaxSide || fs.padded_w > kMaxSide || fs.padded_h % 32 != 0 ||
      fs.padded_w % 32 != 0) {
    throw FormatError(FormatError::Kind::kShapeLaw, dims_at, "inconsistent image dims");
  }
  const std::uint32_t count = r.u32();
  if (count != 4) throw FormatError(FormatError::Kind::kShapeLaw, r.offset() - 4, "expected 4 levels");
  std::array<Shape, 4> shapes;
  for (int i = 0; i < 4; ++i) {
    const std::size_t at = r.offset();
    if (r.u32() != static_cast<std::uint32_t>(i + 1)) {
      throw FormatError(FormatError::Kind::kMalformed, at, "level ids out of order");
    }
    const std::int64_t h = r.u32(), w = r.u32(), c = r.u32();
    shapes[i] = Shape{h, w, c};
    if (h != fs.padded_h / kLevelStrides[i] || w != fs.padded_w / kLevelStrides[i]) {
      throw FormatError(FormatError::Kind::kShapeLaw, at, "level " + std::to_string(i + 1) + " dims violate the stride law");
    }
    if (c < 1 || c > kMaxChannels || (i > 0 && c != shapes[0][2] << i)) {
      throw FormatError(FormatError::Kind::kShapeLaw, at, "level " + std::to_string(i + 1) + " channel count");
    }
    if (static_cast<std::uint64_t>(h * w * c) * 4 > r.remaining()) {
      throw FormatError(FormatError::Kind::kTruncated, r.offset(), "level payload exceeds file");
    }
    Tensor t(shapes[i]);
    r.f32s(t.data());
    fs.levels[i] = std::move(t);
  }
  r.expect_end();
  if (!feature_shape_law_holds(fs.padded_h, fs.padded_w, shapes)) {
    throw FormatError(FormatError::Kind::kShapeLaw, dims_at, "feature pyramid violates the shape law");
  }
  return fs;
}

void cache_write(const FeatureMapSet& fs, const std::filesystem::path& path) {
  io::atomic_write(path, encode_features(fs));
}

FeatureMapSet cache_read(const std::filesystem::path& path) {
  const auto bytes = io::read_all(path);
  try {
    return decode_features(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), e.offset(), path.string() + ": " + e.detail());
  }
}

std::vector<std::int64_t> rle_encode(const Mask& m) {
  std::vector<std::int64_t> runs;
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (std::uint8_t v : m.data) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      runs.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

Mask rle_decode(std::span<const std::int64_t> runs, std::int64_t h, std::int64_t w) {
  Mask m(h, w);
  std::int64_t pos = 0;
  bool fg = false;
  for (std::int64_t r : runs) {
    if (r < 0) throw InvalidArgument("negative run length");
    if (r > h * w - pos) throw InvalidArgument("run lengths exceed mask size");
    if (fg) std::fill_n(m.data.begin() + pos, r, std::uint8_t{1});
    pos += r;
    fg = !fg;
  }
  if (pos != h * w) {
    throw InvalidArgument("run lengths sum to " + std::to_string(pos) + ", expected " + std::to_string(h * w));
  }
  return m;
}

std::shared_ptr<const FeatureHandle> FeatureHandle::make(std::string id, FeatureMapSet fs, bool on_demand) {
  auto h = std::make_shared<FeatureHandle>();
  h->image_id = std::move(id);
  h->vars = as_constants(fs);
  h->maps = std::move(fs);
  h->encoded_on_demand = on_demand;
  return h;
}

InteractiveSession::InteractiveSession(std::shared_ptr<const InteractiveModel<float>> model,
                                       std::shared_ptr<const FeatureHandle> features)
    : model_(std::move(model)), features_(std::move(features)) {
  if (!model_ || !features_) throw InvalidArgument("session needs a model and features");
  if (features_->maps.base_channels() != model_->config().decoder.base_channels) {
    throw ShapeError("features have " + std::to_string(features_->maps.base_channels()) +
                     " base channels, model expects " + std::to_string(model_->config().decoder.base_channels));
  }
  reset();
}

void InteractiveSession::reset() {
  clicks_.clear();
  ref_ = init_ref_mask(features_->maps.padded_h, features_->maps.padded_w);
  pred_ = Mask(features_->maps.padded_h, features_->maps.padded_w);
  last_logits_ = Tensor();
}

ClickResponse InteractiveSession::step(const Click& c) {
  if (c.x < 0 || c.y < 0 || c.x >= width() || c.y >= height()) {
    throw OutOfBounds("click (" + std::to_string(c.x) + ", " + std::to_string(c.y) + ") outside " +
                      std::to_string(width()) + "x" + std::to_string(height()) + " image");
  }
  const auto t0 = std::chrono::steady_clock::now();
  RefMask next = ref_;
  apply_click(next, c);
  Tensor logits;
  {
    NoGradScope<float> off;
    logits = model_->decode(features_->vars, next, model_->next_roi(pred_, next)).value();
  }
  Mask pred = threshold_logits(logits, height(), width());
  merge_prediction(next, pred);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  ref_ = std::move(next);
  pred_ = std::move(pred);
  last_logits_ = std::move(logits);
  clicks_.push_back(c);
  return respond(ms);
}

ClickResponse InteractiveSession::respond(double latency_ms) const {
  ClickResponse r;
  r.mask = pred_.cropped(height(), width());
  r.mask_rle = rle_encode(r.mask);
  r.latency_ms = latency_ms;
  r.click_count = static_cast<int>(clicks_.size());
  if (!last_logits_.empty()) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0;
    const std::int64_t pw = last_logits_.dim(1);
    for (std::int64_t y = 0; y < height(); ++y) {
      for (std::int64_t x = 0; x < width(); ++x) {
        const double v = last_logits_[y * pw + x];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        sum += v;
      }
    }
    const double n = static_cast<double>(height() * width());
    r.logits = {lo, hi, sum / n, static_cast<double>(r.mask.count()) / n};
  }
  return r;
}

ClickResponse InteractiveSession::click(const Click& c) { return step(c); }

ClickResponse InteractiveSession::undo() {
  if (clicks_.empty()) throw InvalidArgument("undo on a session without clicks");
  std::vector<Click> keep(clicks_.begin(), clicks_.end() - 1);
  const auto t0 = std::chrono::steady_clock::now();
  ClickResponse r = replay(keep);
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

ClickResponse InteractiveSession::replay(const std::vector<Click>& clicks) {
  // Validate first so a bad list leaves the session untouched.
  for (const auto& c : clicks) {
    if (c.x < 0 || c.y < 0 || c.x >= width() || c.y >= height()) throw OutOfBounds("replayed click outside image");
  }
  reset();
  ClickResponse r = respond(0);
  for (const auto& c : clicks) r = step(c);
  return r;
}

void validate_image_id(const std::string& id) {
  if (id.empty() || id.size() > 200) throw InvalidArgument("image id must be 1-200 characters");
  for (char ch : id) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
    if (!ok) throw InvalidArgument("image id has invalid character");
  }
  if (id == "." || id == ".." || id.front() == '.') throw InvalidArgument("image id may not start with '.'");
}

SessionManager::SessionManager(std::shared_ptr<const InteractiveModel<float>> model, SessionManagerConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)) {
  if (!model_) throw InvalidArgument("session manager needs a model");
}

std::shared_ptr<const FeatureHandle> SessionManager::features(const std::string& image_id) {
  validate_image_id(image_id);
  std::lock_guard<std::mutex> load(load_mu_);
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = features_.find(image_id);
    if (it != features_.end()) {
      if (auto h = it->second.lock()) return h;
    }
  }
  std::shared_ptr<const FeatureHandle> handle;
  const auto cache = cfg_.cache_dir / (image_id + ".ifmr");
  if (std::filesystem::exists(cache)) {
    handle = FeatureHandle::make(image_id, cache_read(cache));
  } else if (cfg_.image_dir) {
    std::optional<std::filesystem::path> src;
    for (const char* ext : {".png", ".ppm", ".pnm"}) {
      const auto p = *cfg_.image_dir / (image_id + ext);
      if (std::filesystem::exists(p)) {
        src = p;
        break;
      }
    }
    if (!src) throw NotFound("no cache or image for id '" + image_id + "'");
    FeatureMapSet fs = encode_image(read_image(*src), model_->encoder());
    if (cfg_.write_encoded) cache_write(fs, cache);
    handle = FeatureHandle::make(image_id, std::move(fs), true);
  } else {
    throw NotFound("no feature cache for id '" + image_id + "'");
  }
  std::lock_guard<std::mutex> lock(mu_);
  features_[image_id] = handle;
  return handle;
}

OpenResult SessionManager::open(const std::string& image_id) {
  auto handle = features(image_id);
  auto entry = std::make_shared<Entry>(model_, handle);
  std::lock_guard<std::mutex> lock(mu_);
  OpenResult r;
  r.session_id = "s" + std::to_string(next_id_++);
  r.width = handle->maps.original_w;
  r.height = handle->maps.original_h;
  r.encoded_on_demand = handle->encoded_on_demand;
  sessions_.emplace(r.session_id, std::move(entry));
  return r;
}

std::shared_ptr<SessionManager::Entry> SessionManager::find(const std::string& session_id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFound("unknown session '" + session_id + "'");
  return it->second;
}

template <typename Fn>
ClickResponse SessionManager::run(const std::string& session_id, const std::string& request_id, Fn&& fn) {
  auto entry = find(session_id);
  std::lock_guard<std::mutex> lock(entry->mu);
  if (!request_id.empty() && request_id == entry->last_request) return entry->last_response;
  ClickResponse r = fn(entry->session);
  entry->last_request = request_id;
  entry->last_response = r;
  return r;
}

ClickResponse SessionManager::click(const std::string& session_id, const Click& c, const std::string& request_id) {
  return run(session_id, request_id, [&](InteractiveSession& s) { return s.click(c); });
}

ClickResponse SessionManager::undo(const std::string& session_id, const std::string& request_id) {
  return run(session_id, request_id, [](InteractiveSession& s) { return s.undo(); });
}

void SessionManager::close(const std::string& session_id) {
  std::shared_ptr<Entry> doomed;
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw NotFound("unknown session '" + session_id + "'");
    doomed = std::move(it->second);
    sessions_.erase(it);
  }
  // Wait for an in-flight request on this session to finish.
  std::lock_guard<std::mutex> drain(doomed->mu);
}

std::size_t SessionManager::session_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return sessions_.size();
}

}  // namespace clickseg
