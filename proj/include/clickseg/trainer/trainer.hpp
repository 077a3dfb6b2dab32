// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale training: synthetic shapes, click simulation, normalized focal
// loss and a decoupled-weight-decay Adam loop.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "clickseg/clickstate/clickstate.hpp"
#include "clickseg/decoder/decoder.hpp"
#include "clickseg/encoder/image.hpp"
#include "clickseg/numerics/params.hpp"

namespace clickseg {

struct TrainConfig {
  double gamma_sim = 0.6;
  int max_rounds = 20;
  double focal_gamma = 2.0;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int steps = 2000;
  int batch = 4;
  std::uint64_t seed = 0;
  int image_size = 64;  // side of the synthetic training images
  bool train_encoder = true;
  int log_every = 10;
  int warmup_steps = 0;    // linear ramp from 0 to lr
  bool cosine = false;     // cosine decay to lr_min_ratio * lr after warmup
  double lr_min_ratio = 0.0;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables

  void validate() const;
};

// Learning rate for the 0-based optimizer step `step`.
double lr_at(const TrainConfig& cfg, int step);

// P(n) for n = 1..max_rounds, proportional to gamma_sim^(n-1).
std::vector<double> round_probabilities(const TrainConfig& cfg);
int simulate_rounds(Rng& rng, const TrainConfig& cfg);

// Pixels where pred and gt disagree, minus D pixels whose label already
// agrees with gt.
Mask error_mask(const Mask& pred, const Mask& gt, const RefMask& m);

// Click at the interior center of the largest 4-connected false-negative or
// false-positive region (distance to the region boundary, with the image
// border counting as boundary). Ties: larger regions first, then the region
// whose first raster pixel comes first; within a region the smallest (y, x).
// nullopt when nothing is wrong.
std::optional<Click> next_click(const Mask& pred, const Mask& gt, const RefMask& m);

// Squared exact Euclidean distance from each pixel to the nearest pixel with
// `inside` false; pixels outside the grid count as false.
std::vector<std::int64_t> interior_distance_sq(const Mask& inside);

// -sum (1-p)^g log p / sum (1-p)^g with p the probability of the true class.
// The denominator is held constant when differentiating; `normalizer`
// overrides its value (finite-difference checks of the detached form).
template <typename T>
Var<T> nfl_loss(const Var<T>& logits, const Mask& gt, double focal_gamma = 2.0,
                std::optional<double> normalizer = std::nullopt);

struct SynthSample {
  Tensor image;  // (h, w, 3), values in [0, 1]
  Mask gt;
  std::int64_t height() const { return gt.height; }
  std::int64_t width() const { return gt.width; }
};

// Rounds a [0, 1] RGB tensor to an 8-bit image.
Image to_image8(const Tensor& unit_rgb);

// 1-3 filled ellipses or polygons in distinct colors on a textured background.
SynthSample synth_sample(Rng& rng, std::int64_t h, std::int64_t w);

// Decoupled weight decay Adam over every parameter of a store. Decay skips
// rank-1 tensors (biases, norm gains).
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, const TrainConfig& cfg);
  void step();
  std::int64_t steps_taken() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  // Scales gradients so their global L2 norm is at most max_norm; returns
  // the norm before clipping.
  double clip_grad_norm(double max_norm);

 private:
  ParamStore<T>* store_;
  double lr_, b1_, b2_, eps_, wd_;
  std::int64_t t_ = 0;
  std::vector<BasicTensor<T>> m_, v_;
};

struct StepReport {
  double loss = 0;
  int rounds = 0;  // simulated clicks for the last sample of the batch
};

// Rolls out `rounds` clicks on one sample (all but the last decode without
// recording) and returns the recorded loss of the final decode. The caller
// owns the active tape. `features` skips encoding; `trace` receives the clicks.
Var<float> sample_loss(const InteractiveModel<float>& model, const SynthSample& sample, int rounds,
                       const TrainConfig& cfg, const std::array<Var<float>, 4>* features = nullptr,
                       std::vector<Click>* trace = nullptr);

class Trainer {
 public:
  Trainer(InteractiveModel<float>& model, TrainConfig cfg);

  // One optimizer update over a batch of fresh synthetic samples.
  StepReport step();
  // Runs cfg.steps updates; writes one JSON record per logged step.
  void run(std::ostream* log = nullptr, const std::function<void(int, const StepReport&)>& on_step = {});
  // Checkpoint as a named-tensor archive; `meta` is stored verbatim.
  void save(const std::filesystem::path& path, const std::string& meta = {}) const;

  const TrainConfig& config() const { return cfg_; }
  Rng& rng() { return rng_; }

 private:
  InteractiveModel<float>* model_;
  TrainConfig cfg_;
  Rng rng_;
  AdamW<float> opt_;
  int step_ = 0;
};

}  // namespace clickseg
