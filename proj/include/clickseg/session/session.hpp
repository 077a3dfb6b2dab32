// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Interactive sessions over cached features: feature cache files, the
// click/undo chain, RLE transport and a thread-safe session registry.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clickseg/clickstate/clickstate.hpp"
#include "clickseg/decoder/decoder.hpp"
#include "clickseg/encoder/encoder.hpp"

namespace clickseg {

// Feature cache container (kind = features):
//   u32 original_h, original_w, padded_h, padded_w | u32 levels
//   per level: u32 id, h, w, c | f32 payload[h*w*c]
std::vector<std::uint8_t> encode_features(const FeatureMapSet& fs);
FeatureMapSet decode_features(std::span<const std::uint8_t> bytes);
void cache_write(const FeatureMapSet& fs, const std::filesystem::path& path);
FeatureMapSet cache_read(const std::filesystem::path& path);

// Alternating run lengths starting with background, row-major.
std::vector<std::int64_t> rle_encode(const Mask& m);
Mask rle_decode(std::span<const std::int64_t> runs, std::int64_t h, std::int64_t w);

// Read-only features shared by every session on one image.
struct FeatureHandle {
  std::string image_id;
  FeatureMapSet maps;
  std::array<Var<float>, 4> vars;
  bool encoded_on_demand = false;

  static std::shared_ptr<const FeatureHandle> make(std::string id, FeatureMapSet fs, bool on_demand = false);
};

struct LogitsSummary {
  double min = 0, max = 0, mean = 0;
  double fg_fraction = 0;  // over original dims
};

struct ClickResponse {
  Mask mask;  // original dims
  std::vector<std::int64_t> mask_rle;
  LogitsSummary logits;
  double latency_ms = 0;
  int click_count = 0;

  bool operator==(const ClickResponse& o) const { return mask == o.mask && click_count == o.click_count; }
};

// One annotation session: ordered clicks, RefMask at padded dims and the
// last prediction. State is a pure function of (weights, features, clicks).
class InteractiveSession {
 public:
  InteractiveSession(std::shared_ptr<const InteractiveModel<float>> model,
                     std::shared_ptr<const FeatureHandle> features);

  // apply_click -> click_feature -> decode -> threshold -> merge. The click
  // must lie within the original image; on error nothing changes.
  ClickResponse click(const Click& c);
  // Drops the last click and replays the rest from scratch.
  ClickResponse undo();
  // Resets and applies `clicks` in order.
  ClickResponse replay(const std::vector<Click>& clicks);

  const std::vector<Click>& clicks() const { return clicks_; }
  const RefMask& ref_mask() const { return ref_; }
  const Mask& prediction() const { return pred_; }  // padded dims
  const FeatureHandle& features() const { return *features_; }
  std::shared_ptr<const FeatureHandle> feature_handle() const { return features_; }
  std::int64_t width() const { return features_->maps.original_w; }
  std::int64_t height() const { return features_->maps.original_h; }

 private:
  void reset();
  ClickResponse step(const Click& c);
  ClickResponse respond(double latency_ms) const;

  std::shared_ptr<const InteractiveModel<float>> model_;
  std::shared_ptr<const FeatureHandle> features_;
  std::vector<Click> clicks_;
  RefMask ref_;
  Mask pred_;
  Tensor last_logits_;
};

struct SessionManagerConfig {
  std::filesystem::path cache_dir;
  // When set, images missing from the cache are encoded from here.
  std::optional<std::filesystem::path> image_dir;
  bool write_encoded = true;  // persist on-demand encodes to the cache
};

struct OpenResult {
  std::string session_id;
  std::int64_t width = 0, height = 0;
  bool encoded_on_demand = false;
};

class SessionManager {
 public:
  SessionManager(std::shared_ptr<const InteractiveModel<float>> model, SessionManagerConfig cfg);

  OpenResult open(const std::string& image_id);
  // A repeated request_id returns the stored response without reapplying.
  ClickResponse click(const std::string& session_id, const Click& c, const std::string& request_id = {});
  ClickResponse undo(const std::string& session_id, const std::string& request_id = {});
  void close(const std::string& session_id);

  std::size_t session_count() const;
  // Shared handle for `image_id` (loading it if needed).
  std::shared_ptr<const FeatureHandle> features(const std::string& image_id);
  const InteractiveModel<float>& model() const { return *model_; }
  const SessionManagerConfig& config() const { return cfg_; }

 private:
  struct Entry {
    std::mutex mu;  // serializes requests within the session
    InteractiveSession session;
    std::string last_request;
    ClickResponse last_response;
    Entry(std::shared_ptr<const InteractiveModel<float>> m, std::shared_ptr<const FeatureHandle> f)
        : session(std::move(m), std::move(f)) {}
  };
  std::shared_ptr<Entry> find(const std::string& session_id) const;
  template <typename Fn>
  ClickResponse run(const std::string& session_id, const std::string& request_id, Fn&& fn);

  std::shared_ptr<const InteractiveModel<float>> model_;
  SessionManagerConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::map<std::string, std::weak_ptr<const FeatureHandle>> features_;
  std::mutex load_mu_;
  std::uint64_t next_id_ = 1;
};

// Rejects ids that could escape the cache directory.
void validate_image_id(const std::string& id);

}  // namespace clickseg
