// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Iterative click evaluation and the NoC / SPC / PIE metrics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "clickseg/clickstate/clickstate.hpp"
#include "clickseg/encoder/image.hpp"
#include "clickseg/session/session.hpp"

namespace clickseg {

inline constexpr int kMaxClicks = 20;

// Anything that turns clicks into masks.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  // Starts a new image; returns preprocessing seconds (0 if none).
  virtual double reset(const Image& image, const std::string& image_id) = 0;
  // Mask at the image's original dims.
  virtual Mask click(const Click& c) = 0;
  // Pixels the engine processes per click (padded area for the model).
  virtual std::int64_t processed_pixels() const = 0;
};

// Runs the model through an InteractiveSession. Features come from
// `cache_dir/<id>.ifmr` when present, otherwise they are encoded (timed).
class ModelSegmenter : public Segmenter {
 public:
  explicit ModelSegmenter(std::shared_ptr<const InteractiveModel<float>> model,
                          std::optional<std::filesystem::path> cache_dir = std::nullopt);
  double reset(const Image& image, const std::string& image_id) override;
  Mask click(const Click& c) override;
  std::int64_t processed_pixels() const override;

 private:
  std::shared_ptr<const InteractiveModel<float>> model_;
  std::optional<std::filesystem::path> cache_dir_;
  std::unique_ptr<InteractiveSession> session_;
};

struct Instance {
  std::string id;     // file stem, or stem#k for object id k of a multi-object mask
  std::shared_ptr<const Image> image;  // shared between objects of one image
  Mask gt;
};

struct Dataset {
  std::vector<Instance> instances;
  std::vector<std::string> errors;  // one per file that failed to load
};

// Pairs images/<stem>.* with masks/<stem>.*; nonzero mask values are object
// ids. Per-file failures are collected instead of thrown.
Dataset load_dataset(const std::filesystem::path& dir);

struct EvalRecord {
  std::string id;
  std::vector<double> ious;   // per click
  std::vector<double> times;  // seconds per click
  std::vector<Click> clicks;
  std::int64_t pixels = 0;
  double preprocess_seconds = 0;
  std::string error;  // nonempty when the segmenter failed

  bool ok() const { return error.empty(); }
};

// Places clicks with next_click on the current error and stops once the IoU
// reaches target_iou or after max_clicks.
EvalRecord evaluate_instance(Segmenter& seg, const Instance& inst, int max_clicks = kMaxClicks,
                             double target_iou = 0.9);

struct EvalOptions {
  int max_clicks = kMaxClicks;
  double target_iou = 0.9;
  int workers = 1;  // keep 1 for timing runs
};

// Evaluates all instances; results are in input order regardless of workers.
std::vector<EvalRecord> evaluate_all(const std::function<std::unique_ptr<Segmenter>()>& make_segmenter,
                                     const std::vector<Instance>& instances, const EvalOptions& opt = {});

// First click index (1-based) reaching `threshold`, else kMaxClicks; mean
// over records. Records with errors are skipped.
double noc(const std::vector<EvalRecord>& records, double threshold);
double pie(double spc_seconds, double pixels);

struct MetricReport {
  std::vector<std::pair<double, double>> noc;  // (threshold, mean clicks)
  double spc = 0;                    // mean seconds per click, preprocessing excluded
  double spc_with_preprocessing = 0; // per-image preprocessing amortized over its clicks
  double mean_pixels = 0;
  double pie = 0;
  double pie_with_preprocessing = 0;
  std::int64_t instances = 0;
  std::int64_t failed = 0;
  double mean_iou_at(int clicks) const;  // filled by summarize for 1..kMaxClicks
  std::vector<double> mean_iou;          // index k-1: mean IoU after k clicks (carried forward)
};

MetricReport summarize(const std::vector<EvalRecord>& records, const std::vector<double>& thresholds);

void write_records_jsonl(const std::vector<EvalRecord>& records, std::ostream& out);
void write_report_json(const MetricReport& r, std::ostream& out);
void write_report_text(const MetricReport& r, std::ostream& out);

}  // namespace clickseg
