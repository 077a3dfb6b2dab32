// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/evaluator/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <thread>

#include "clickseg/common/error.hpp"
#include "clickseg/encoder/encoder.hpp"
#include "clickseg/trainer/trainer.hpp"
#include "json.hpp"

namespace clickseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool is_image_file(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

std::map<std::string, std::filesystem::path> list_by_stem(const std::filesystem::path& dir,
                                                          std::vector<std::string>& errors) {
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const auto stem = e.path().stem().string();
    if (!out.emplace(stem, e.path()).second) {
      errors.push_back(e.path().string() + ": duplicate stem '" + stem + "'");
    }
  }
  return out;
}

}  // namespace

ModelSegmenter::ModelSegmenter(std::shared_ptr<const InteractiveModel<float>> model,
                               std::optional<std::filesystem::path> cache_dir)
    : model_(std::move(model)), cache_dir_(std::move(cache_dir)) {
  if (!model_) throw InvalidArgument("segmenter needs a model");
}

double ModelSegmenter::reset(const Image& image, const std::string& image_id) {
  const auto t0 = Clock::now();
  FeatureMapSet fs;
  const auto cached = cache_dir_ ? *cache_dir_ / (image_id + ".ifmr") : std::filesystem::path();
  if (cache_dir_ && std::filesystem::exists(cached)) {
    fs = cache_read(cached);
    if (fs.original_h != image.height || fs.original_w != image.width) {
      throw ShapeError("cached features for '" + image_id + "' do not match the image dims");
    }
  } else {
    fs = encode_image(image, model_->encoder());
  }
  session_ = std::make_unique<InteractiveSession>(model_, FeatureHandle::make(image_id, std::move(fs)));
  return seconds_since(t0);
}

Mask ModelSegmenter::click(const Click& c) {
  if (!session_) throw InvalidArgument("click before reset");
  return session_->click(c).mask;
}

std::int64_t ModelSegmenter::processed_pixels() const {
  if (!session_) return 0;
  const auto& m = session_->features().maps;
  return m.padded_h * m.padded_w;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  const auto images_dir = dir / "images", masks_dir = dir / "masks";
  if (!std::filesystem::is_directory(images_dir) || !std::filesystem::is_directory(masks_dir)) {
    throw NotFound(dir.string() + ": expected images/ and masks/ subdirectories");
  }
  const auto images = list_by_stem(images_dir, ds.errors);
  const auto masks = list_by_stem(masks_dir, ds.errors);
  for (const auto& [stem, path] : masks) {
    if (!images.count(stem)) ds.errors.push_back(path.string() + ": no matching image");
  }
  for (const auto& [stem, path] : images) {
    auto mit = masks.find(stem);
    if (mit == masks.end()) {
      ds.errors.push_back(path.string() + ": no matching mask");
      continue;
    }
    try {
      auto img = std::make_shared<const Image>(read_image(path, 3));
      Image ids;
      try {
        ids = read_image(mit->second, 1);
      } catch (const Error& e) {
        throw Error(mit->second.string() + ": " + e.what());
      }
      if (ids.height != img->height || ids.width != img->width) {
        throw ShapeError(mit->second.string() + ": mask is " + std::to_string(ids.width) + "x" +
                         std::to_string(ids.height) + ", image is " + std::to_string(img->width) + "x" +
                         std::to_string(img->height));
      }
      std::set<int> present(ids.pixels.begin(), ids.pixels.end());
      present.erase(0);
      if (present.empty()) throw InvalidArgument(mit->second.string() + ": mask has no objects");
      for (int id : present) {
        Instance inst;
        inst.id = present.size() == 1 ? stem : stem + "#" + std::to_string(id);
        inst.image = img;
        inst.gt = Mask(ids.height, ids.width);
        for (std::size_t i = 0; i < ids.pixels.size(); ++i) inst.gt.data[i] = ids.pixels[i] == id;
        ds.instances.push_back(std::move(inst));
      }
    } catch (const Error& e) {
      ds.errors.push_back(e.what());
    }
  }
  return ds;
}

EvalRecord evaluate_instance(Segmenter& seg, const Instance& inst, int max_clicks, double target_iou) {
  if (inst.gt.count() == 0) throw InvalidArgument(inst.id + ": empty ground truth");
  if (max_clicks < 1) throw InvalidArgument("max_clicks must be >= 1");
  EvalRecord rec;
  rec.id = inst.id;
  try {
    rec.preprocess_seconds = seg.reset(*inst.image, inst.id);
    rec.pixels = seg.processed_pixels();
    // Our own view of the click disks, so next_click can skip pixels the
    // user already fixed.
    RefMask ref = init_ref_mask(inst.gt.height, inst.gt.width);
    const RefMask blank = ref;
    Mask pred(inst.gt.height, inst.gt.width);
    for (int k = 0; k < max_clicks; ++k) {
      auto c = next_click(pred, inst.gt, ref);
      // Every wrong pixel is already under a disk the segmenter ignored;
      // click on the raw error so the instance still runs to max_clicks.
      if (!c) c = next_click(pred, inst.gt, blank);
      if (!c) break;
      apply_click(ref, *c);
      const auto t0 = Clock::now();
      pred = seg.click(*c);
      rec.times.push_back(std::max(seconds_since(t0), 1e-9));
      if (pred.height != inst.gt.height || pred.width != inst.gt.width) {
        throw ShapeError("segmenter returned a " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                         " mask");
      }
      rec.clicks.push_back(*c);
      rec.ious.push_back(iou(pred, inst.gt));
      if (rec.ious.back() >= target_iou) break;
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  return rec;
}

std::vector<EvalRecord> evaluate_all(const std::function<std::unique_ptr<Segmenter>()>& make_segmenter,
                                     const std::vector<Instance>& instances, const EvalOptions& opt) {
  std::vector<EvalRecord> out(instances.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    auto seg = make_segmenter();
    for (std::size_t i; (i = next.fetch_add(1)) < instances.size();) {
      out[i] = evaluate_instance(*seg, instances[i], opt.max_clicks, opt.target_iou);
    }
  };
  const int workers = std::clamp<int>(opt.workers, 1, std::max<int>(1, static_cast<int>(instances.size())));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return out;
}

double noc(const std::vector<EvalRecord>& records, double threshold) {
  double sum = 0;
  std::int64_t n = 0;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    int k = kMaxClicks;
    for (std::size_t i = 0; i < r.ious.size(); ++i) {
      if (r.ious[i] >= threshold) {
        k = static_cast<int>(i) + 1;
        break;
      }
    }
    sum += k;
    ++n;
  }
  if (n == 0) throw InvalidArgument("noc over no successful records");
  return sum / static_cast<double>(n);
}

double pie(double spc_seconds, double pixels) {
  if (!(pixels > 0)) throw InvalidArgument("pie needs a positive pixel count");
  return spc_seconds / pixels;
}

double MetricReport::mean_iou_at(int clicks) const {
  if (clicks < 1 || clicks > static_cast<int>(mean_iou.size())) throw OutOfBounds("click count out of range");
  return mean_iou[clicks - 1];
}

MetricReport summarize(const std::vector<EvalRecord>& records, const std::vector<double>& thresholds) {
  MetricReport r;
  double time_sum = 0, time_pre_sum = 0, pixel_sum = 0;
  std::int64_t clicks = 0;
  r.mean_iou.assign(kMaxClicks, 0.0);
  for (const auto& rec : records) {
    if (!rec.ok()) {
      ++r.failed;
      continue;
    }
    ++r.instances;
    pixel_sum += static_cast<double>(rec.pixels);
    for (double t : rec.times) time_sum += t;
    time_pre_sum += rec.preprocess_seconds;
    clicks += static_cast<std::int64_t>(rec.times.size());
    double last = 0;
    for (int k = 0; k < kMaxClicks; ++k) {
      if (k < static_cast<int>(rec.ious.size())) last = rec.ious[k];
      r.mean_iou[k] += last;
    }
  }
  if (r.instances == 0) throw InvalidArgument("no successful records to summarize");
  for (auto& v : r.mean_iou) v /= static_cast<double>(r.instances);
  for (double t : thresholds) r.noc.emplace_back(t, noc(records, t));
  r.mean_pixels = pixel_sum / static_cast<double>(r.instances);
  if (clicks > 0) {
    r.spc = time_sum / static_cast<double>(clicks);
    r.spc_with_preprocessing = (time_sum + time_pre_sum) / static_cast<double>(clicks);
  }
  r.pie = pie(r.spc, r.mean_pixels);
  r.pie_with_preprocessing = pie(r.spc_with_preprocessing, r.mean_pixels);
  return r;
}

void write_records_jsonl(const std::vector<EvalRecord>& records, std::ostream& out) {
  for (const auto& rec : records) {
    nlohmann::json j;
    j["id"] = rec.id;
    j["ious"] = rec.ious;
    j["times"] = rec.times;
    auto clicks = nlohmann::json::array();
    for (const auto& c : rec.clicks) clicks.push_back({{"x", c.x}, {"y", c.y}, {"positive", c.positive}});
    j["clicks"] = clicks;
    j["pixels"] = rec.pixels;
    j["preprocess_seconds"] = rec.preprocess_seconds;
    if (!rec.ok()) j["error"] = rec.error;
    out << j.dump() << '\n';
  }
}

void write_report_json(const MetricReport& r, std::ostream& out) {
  nlohmann::json j;
  auto nocs = nlohmann::json::object();
  for (const auto& [t, v] : r.noc) nocs[std::to_string(static_cast<int>(t * 100 + 0.5))] = v;
  j["noc"] = nocs;
  j["spc"] = r.spc;
  j["spc_with_preprocessing"] = r.spc_with_preprocessing;
  j["pie"] = r.pie;
  j["pie_with_preprocessing"] = r.pie_with_preprocessing;
  j["mean_pixels"] = r.mean_pixels;
  j["instances"] = r.instances;
  j["failed"] = r.failed;
  j["mean_iou"] = r.mean_iou;
  out << j.dump(2) << '\n';
}

void write_report_text(const MetricReport& r, std::ostream& out) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "instances  %lld (%lld failed)\n", static_cast<long long>(r.instances),
                static_cast<long long>(r.failed));
  out << buf;
  for (const auto& [t, v] : r.noc) {
    std::snprintf(buf, sizeof buf, "NoC@%-5d  %.2f\n", static_cast<int>(t * 100 + 0.5), v);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "SPC        %.4f s   PIE %.2f x1e-7 s/px\n", r.spc, r.pie * 1e7);
  out << buf;
  std::snprintf(buf, sizeof buf, "SPC+pre    %.4f s   PIE %.2f x1e-7 s/px\n", r.spc_with_preprocessing,
                r.pie_with_preprocessing * 1e7);
  out << buf;
  std::snprintf(buf, sizeof buf, "mIoU@1/3/5 %.3f / %.3f / %.3f\n", r.mean_iou[0], r.mean_iou[2], r.mean_iou[4]);
  out << buf;
}

}  // namespace clickseg
