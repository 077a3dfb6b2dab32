// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/trainer/trainer.hpp"

#include <chrono>
#include <algorithm>
#include <cmath>
#include <cstdio>

#include "clickseg/io/container.hpp"

namespace clickseg {

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& store, const TrainConfig& cfg)
    : store_(&store), lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.eps), wd_(cfg.weight_decay) {
  for (const auto& name : store.names()) {
    m_.emplace_back(store.at(name).shape());
    v_.emplace_back(store.at(name).shape());
  }
}

template <typename T>
void AdamW<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const auto& names = store_->names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    Var<T>& p = store_->at(names[i]);
    const BasicTensor<T>& g = p.node()->grad;
    // Parameters that received no gradient (frozen or unused) stay put.
    if (g.empty()) continue;
    T* w = p.mutable_value().ptr();
    T* m = m_[i].ptr();
    T* v = v_[i].ptr();
    const T* gp = g.ptr();
    const bool decay = p.shape().rank() > 1 && wd_ > 0;
    const std::int64_t n = p.value().numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const double gk = static_cast<double>(gp[k]);
      m[k] = static_cast<T>(b1_ * m[k] + (1 - b1_) * gk);
      v[k] = static_cast<T>(b2_ * v[k] + (1 - b2_) * gk * gk);
      double wk = static_cast<double>(w[k]);
      if (decay) wk -= lr_ * wd_ * wk;
      wk -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      w[k] = static_cast<T>(wk);
    }
  }
}

template <typename T>
double AdamW<T>::clip_grad_norm(double max_norm) {
  double sq = 0;
  for (const auto& name : store_->names()) {
    const auto& g = store_->at(name).node()->grad;
    if (g.empty()) continue;
    const T* gp = g.ptr();
    for (std::int64_t k = 0; k < g.numel(); ++k) sq += static_cast<double>(gp[k]) * gp[k];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& name : store_->names()) {
      auto& g = store_->at(name).node()->grad;
      if (g.empty()) continue;
      T* gp = g.ptr();
      for (std::int64_t k = 0; k < g.numel(); ++k) gp[k] *= s;
    }
  }
  return norm;
}

double lr_at(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup_steps) return cfg.lr * (step + 1) / cfg.warmup_steps;
  if (!cfg.cosine) return cfg.lr;
  const int span = std::max(1, cfg.steps - cfg.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double lo = cfg.lr * cfg.lr_min_ratio;
  return lo + (cfg.lr - lo) * 0.5 * (1 + std::cos(M_PI * t));
}

template class AdamW<float>;
template class AdamW<double>;

Var<float> sample_loss(const InteractiveModel<float>& model, const SynthSample& sample, int rounds,
                       const TrainConfig& cfg, const std::array<Var<float>, 4>* features,
                       std::vector<Click>* trace) {
  if (rounds < 1) throw InvalidArgument("sample_loss needs at least one round");
  Tensor input = normalize_and_pad(to_image8(sample.image));
  const std::int64_t hp = input.dim(0), wp = input.dim(1);
  std::array<Var<float>, 4> feats;
  if (features) {
    feats = *features;
  } else if (cfg.train_encoder) {
    feats = model.encoder().forward(ops::constant(std::move(input)));
  } else {
    NoGradScope<float> off;
    auto f = model.encoder().forward(ops::constant(std::move(input)));
    for (int i = 0; i < 4; ++i) feats[i] = ops::constant(f[i].value());
  }
  const Mask gt = sample.gt.padded(hp, wp);
  RefMask m = init_ref_mask(hp, wp);
  Mask pred(hp, wp);
  for (int k = 1; k <= rounds; ++k) {
    const auto click = next_click(pred, gt, m);
    if (!click) break;
    apply_click(m, *click);
    if (trace) trace->push_back(*click);
    if (k == rounds) break;
    NoGradScope<float> off;
    const auto logits = model.decode(feats, m, model.next_roi(pred, m));
    pred = threshold_logits(logits.value(), sample.height(), sample.width());
    merge_prediction(m, pred);
  }
  const auto logits = model.decode(feats, m, model.next_roi(pred, m));
  return nfl_loss(logits, gt, cfg.focal_gamma);
}

Trainer::Trainer(InteractiveModel<float>& model, TrainConfig cfg)
    : model_(&model), cfg_((cfg.validate(), cfg)), rng_(cfg.seed), opt_(model.params(), cfg_) {}

StepReport Trainer::step() {
  model_->params().zero_grad();
  StepReport report;
  const float inv = 1.0f / static_cast<float>(cfg_.batch);
  for (int b = 0; b < cfg_.batch; ++b) {
    const SynthSample sample = synth_sample(rng_, cfg_.image_size, cfg_.image_size);
    report.rounds = simulate_rounds(rng_, cfg_);
    GradientTape<float> tape;
    TapeScope<float> scope(&tape);
    const auto loss = sample_loss(*model_, sample, report.rounds, cfg_);
    report.loss += static_cast<double>(loss.value()[0]) / cfg_.batch;
    tape.backward(ops::scale(loss, inv));
  }
  if (cfg_.clip_norm > 0) opt_.clip_grad_norm(cfg_.clip_norm);
  opt_.set_lr(lr_at(cfg_, step_));
  opt_.step();
  ++step_;
  return report;
}

void Trainer::run(std::ostream* log, const std::function<void(int, const StepReport&)>& on_step) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < cfg_.steps; ++s) {
    const StepReport r = step();
    if (on_step) on_step(step_, r);
    if (log && (step_ % cfg_.log_every == 0 || s + 1 == cfg_.steps)) {
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char line[160];
      std::snprintf(line, sizeof line, "{\"step\": %d, \"loss\": %.6f, \"rounds\": %d, \"wall_time\": %.3f}\n",
                    step_, r.loss, r.rounds, elapsed);
      *log << line << std::flush;
    }
  }
}

void Trainer::save(const std::filesystem::path& path, const std::string& meta) const {
  io::write_archive(path, io::params_to_archive(model_->params(), meta));
}

}  // namespace clickseg
