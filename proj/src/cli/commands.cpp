// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/cli/commands.hpp"

#include <signal.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "clickseg/common/error.hpp"
#include "clickseg/encoder/image.hpp"
#include "clickseg/evaluator/evaluator.hpp"
#include "clickseg/io/container.hpp"
#include "clickseg/server/server.hpp"
#include "clickseg/session/session.hpp"
#include "clickseg/trainer/trainer.hpp"

namespace clickseg {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

BenchRun time_clicks(const std::shared_ptr<const InteractiveModel<float>>& model,
                     const std::shared_ptr<const FeatureHandle>& feats, const std::vector<Click>& clicks,
                     double preprocess, std::int64_t pixels) {
  {
    // Untimed warm-up so allocator and caches settle.
    InteractiveSession warm(model, feats);
    warm.click(clicks.front());
  }
  InteractiveSession s(model, feats);
  BenchRun r;
  for (const auto& c : clicks) r.decode_seconds.push_back(s.click(c).latency_ms / 1000.0);
  r.preprocess_seconds = preprocess;
  r.median = median(r.decode_seconds);
  r.spc = mean(r.decode_seconds);
  r.spc_with_preprocessing = r.spc + preprocess / static_cast<double>(clicks.size());
  r.pie = pie(r.spc, static_cast<double>(pixels));
  r.pie_with_preprocessing = pie(r.spc_with_preprocessing, static_cast<double>(pixels));
  return r;
}

// Loads the config file if given and applies --set overrides.
RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::load(path);
  std::vector<std::pair<std::string, std::string>> kv;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + o + "'");
    kv.emplace_back(o.substr(0, eq), o.substr(eq + 1));
  }
  // Same order as config files: preset first, then overrides.
  for (const auto& [k, v] : kv) {
    if (k == "preset") cfg.set(k, v);
  }
  for (const auto& [k, v] : kv) {
    if (k != "preset") cfg.set(k, v);
  }
  cfg.validate();
  return cfg;
}

std::shared_ptr<InteractiveModel<float>> model_for(const RunConfig& cfg, const std::string& weights,
                                                   RunConfig* effective) {
  if (!weights.empty()) return load_model(weights, effective);
  if (effective) *effective = cfg;
  return std::make_shared<InteractiveModel<float>>(cfg.model, cfg.model_seed);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pnm")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_preprocess(const RunConfig& cfg, const std::string& weights, const fs::path& img_dir, const fs::path& cache_dir) {
  RunConfig eff;
  auto model = model_for(cfg, weights, &eff);
  if (weights.empty()) std::cerr << "warning: no --weights; encoding with freshly initialized weights\n";
  fs::create_directories(cache_dir);
  int failed = 0, written = 0;
  for (const auto& p : list_images(img_dir)) {
    const std::string id = p.stem().string();
    try {
      validate_image_id(id);
      const auto t0 = Clock::now();
      const FeatureMapSet fs = encode_image(read_image(p), model->encoder());
      cache_write(fs, cache_dir / (id + ".ifmr"));
      const double s = std::chrono::duration<double>(Clock::now() - t0).count();
      std::printf("%s %lldx%lld %.3fs\n", id.c_str(), static_cast<long long>(fs.original_w),
                  static_cast<long long>(fs.original_h), s);
      ++written;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s: %s\n", p.string().c_str(), e.what());
      ++failed;
    }
  }
  std::printf("encoded %d image(s), %d failed\n", written, failed);
  return failed ? 1 : 0;
}

int cmd_serve(const RunConfig& cfg, const std::string& weights) {
  RunConfig eff;
  auto model = model_for(cfg, weights, &eff);
  if (cfg.cache_dir.empty()) throw InvalidArgument("serve needs --cache");
  SessionManagerConfig mc;
  mc.cache_dir = cfg.cache_dir;
  if (!cfg.image_dir.empty()) mc.image_dir = fs::path(cfg.image_dir);
  fs::create_directories(mc.cache_dir);
  SessionManager mgr(model, mc);
  nlohmann::json echo;
  for (const auto& k : RunConfig::keys()) {
    if (k.rfind("train.", 0) != 0) echo[k] = eff.get(k);
  }
  echo["paths.weights"] = weights;
  ProtocolHandler handler(mgr, echo);
  ServerConfig sc;
  sc.host = cfg.host;
  sc.port = cfg.port;
  if (!cfg.static_dir.empty()) sc.static_dir = fs::path(cfg.static_dir);
  if (!cfg.image_dir.empty()) sc.image_dir = fs::path(cfg.image_dir);

  // Handle SIGINT/SIGTERM synchronously in this thread; worker threads
  // inherit the blocked mask.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  Server server(handler, sc);
  server.start();
  std::printf("serving http://%s:%d  ws://%s:%d\n", sc.host.c_str(), server.http_port(), sc.host.c_str(),
              server.ws_port());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  std::printf("shutting down\n");
  server.stop();
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& weights, const std::string& out_dir) {
  if (cfg.dataset.empty()) throw InvalidArgument("eval needs --dataset");
  std::shared_ptr<const InteractiveModel<float>> model = model_for(cfg, weights, nullptr);
  const Dataset ds = load_dataset(cfg.dataset);
  for (const auto& e : ds.errors) std::fprintf(stderr, "warning: %s\n", e.c_str());
  if (ds.instances.empty()) throw NotFound("no loadable instances in " + cfg.dataset);
  std::optional<fs::path> cache;
  if (!cfg.cache_dir.empty()) cache = fs::path(cfg.cache_dir);
  EvalOptions opt;
  opt.max_clicks = cfg.max_clicks;
  opt.target_iou = *std::max_element(cfg.thresholds.begin(), cfg.thresholds.end());
  opt.workers = cfg.workers;
  const auto records =
      evaluate_all([&] { return std::make_unique<ModelSegmenter>(model, cache); }, ds.instances, opt);
  const MetricReport report = summarize(records, cfg.thresholds);
  fs::create_directories(out_dir);
  std::ofstream jl(fs::path(out_dir) / "records.jsonl"), js(fs::path(out_dir) / "report.json"),
      txt(fs::path(out_dir) / "report.txt");
  write_records_jsonl(records, jl);
  write_report_json(report, js);
  write_report_text(report, txt);
  write_report_text(report, std::cout);
  for (const auto& r : records) {
    if (!r.ok()) std::fprintf(stderr, "error: %s: %s\n", r.id.c_str(), r.error.c_str());
  }
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& out) {
  if (out.empty()) throw InvalidArgument("train needs --out");
  InteractiveModel<float> model(cfg.model, cfg.model_seed);
  Trainer trainer(model, cfg.train);
  const fs::path log_path = fs::path(out).string() + ".log.jsonl";
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path.string());
  trainer.run(&log, [&](int step, const StepReport& r) {
    if (step % cfg.train.log_every == 0 || step == cfg.train.steps) {
      std::printf("step %d loss %.5f rounds %d\n", step, r.loss, r.rounds);
      std::fflush(stdout);
    }
  });
  save_model(model, cfg, out);
  std::printf("wrote %s and %s\n", out.c_str(), log_path.string().c_str());
  return 0;
}

int cmd_bench(const RunConfig& cfg, const std::string& weights, const std::string& json_out) {
  RunConfig eff;
  auto model = model_for(cfg, weights, &eff);
  const BenchResult r = run_bench(*model, cfg.bench_size, cfg.bench_clicks, eff.model_seed);
  print_bench(r, std::cout);
  if (!json_out.empty()) {
    auto run = [](const BenchRun& b) {
      return nlohmann::json{{"median", b.median},
                            {"spc", b.spc},
                            {"spc_with_preprocessing", b.spc_with_preprocessing},
                            {"pie", b.pie},
                            {"pie_with_preprocessing", b.pie_with_preprocessing},
                            {"preprocess_seconds", b.preprocess_seconds},
                            {"decode_seconds", b.decode_seconds}};
    };
    std::ofstream(json_out) << nlohmann::json{{"size", r.size}, {"pixels", r.pixels}, {"zoom", run(r.zoom)},
                                              {"no_zoom", run(r.no_zoom)}}
                                   .dump(2)
                            << "\n";
  }
  return 0;
}

}  // namespace

void save_model(const InteractiveModel<float>& model, const RunConfig& cfg, const fs::path& path) {
  io::write_archive(path, io::params_to_archive(model.params(), cfg.dump()));
}

std::shared_ptr<InteractiveModel<float>> load_model(const fs::path& path, RunConfig* cfg_out) {
  const io::Archive a = io::read_archive(path);
  RunConfig cfg;
  try {
    cfg = RunConfig::parse(a.meta);
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Kind::kMalformed, 0, path.string() + ": bad embedded config: " + e.what());
  }
  auto model = std::make_shared<InteractiveModel<float>>(cfg.model, cfg.model_seed);
  io::load_params(model->params(), a);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

std::shared_ptr<InteractiveModel<float>> with_zoomin(const InteractiveModel<float>& model, bool zoomin) {
  ModelConfig mc = model.config();
  mc.decoder.zoomin = zoomin;
  auto out = std::make_shared<InteractiveModel<float>>(mc, 0);
  io::load_params(out->params(), io::params_to_archive(model.params()));
  return out;
}

BenchResult run_bench(const InteractiveModel<float>& model, int size, int clicks, std::uint64_t seed) {
  if (size < 32 || clicks < 1) throw InvalidArgument("bench needs size >= 32 and clicks >= 1");
  Rng rng(seed + 12345);
  const SynthSample sample = synth_sample(rng, size, size);
  const Image image = to_image8(sample.image);
  const auto t0 = Clock::now();
  FeatureMapSet fs = encode_image(image, model.encoder());
  const double preprocess = std::chrono::duration<double>(Clock::now() - t0).count();
  auto feats = FeatureHandle::make("bench", std::move(fs));

  auto zoom = with_zoomin(model, true);
  auto plain = with_zoomin(model, false);
  // Clicks follow the zoom-in model's errors; both runs replay them.
  std::vector<Click> seq;
  {
    InteractiveSession s(zoom, feats);
    RefMask disks = init_ref_mask(size, size);
    Mask pred(size, size);
    for (int k = 0; k < clicks; ++k) {
      auto c = next_click(pred, sample.gt, disks);
      if (!c) c = next_click(pred, sample.gt, init_ref_mask(size, size));
      if (!c) c = Click{size / 2, size / 2, sample.gt.at(size / 2, size / 2)};
      apply_click(disks, *c);
      pred = s.click(*c).mask;
      seq.push_back(*c);
    }
  }
  BenchResult r;
  r.size = size;
  r.pixels = feats->maps.padded_h * feats->maps.padded_w;
  r.zoom = time_clicks(zoom, feats, seq, preprocess, r.pixels);
  r.no_zoom = time_clicks(plain, feats, seq, preprocess, r.pixels);
  return r;
}

void print_bench(const BenchResult& r, std::ostream& out) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "bench size %d (%lld px), %zu clicks, preprocessing %.3f s\n", r.size,
                static_cast<long long>(r.pixels), r.zoom.decode_seconds.size(), r.zoom.preprocess_seconds);
  out << buf;
  for (const auto& [name, b] : {std::pair<const char*, const BenchRun&>{"zoom-in", r.zoom}, {"no zoom", r.no_zoom}}) {
    std::snprintf(buf, sizeof buf,
                  "%-8s median %.4f s  SPC %.4f s  PIE %.2fe-7 s/px | with preprocessing SPC %.4f s  PIE %.2fe-7 s/px\n",
                  name, b.median, b.spc, b.pie * 1e7, b.spc_with_preprocessing, b.pie_with_preprocessing * 1e7);
    out << buf;
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"clickseg: click-based interactive segmentation"};
  app.require_subcommand(1);
  std::string config_path, weights, out_dir = "eval_out", json_out;
  std::vector<std::string> overrides;
  std::string img_dir, cache_dir, dataset, thresholds, host, static_dir, image_dir, ckpt;
  int port = -1, size = -1, clicks = -1, max_clicks = -1, workers = -1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "config override key=value (repeatable)");
  };

  auto* pre = app.add_subcommand("preprocess", "encode images into a feature cache");
  pre->add_option("img_dir", img_dir)->required()->check(CLI::ExistingDirectory);
  pre->add_option("cache_dir", cache_dir)->required();
  pre->add_option("--weights", weights)->check(CLI::ExistingFile);
  common(pre);

  auto* serve = app.add_subcommand("serve", "run the annotation service");
  serve->add_option("--cache", cache_dir)->required();
  serve->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port);
  serve->add_option("--host", host);
  serve->add_option("--images", image_dir, "encode uncached images from here")->check(CLI::ExistingDirectory);
  serve->add_option("--static", static_dir, "annotator frontend assets")->check(CLI::ExistingDirectory);
  common(serve);

  auto* ev = app.add_subcommand("eval", "iterative click evaluation");
  ev->add_option("--dataset", dataset)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  ev->add_option("--thresholds", thresholds, "comma-separated IoU targets");
  ev->add_option("--out", out_dir, "report directory");
  ev->add_option("--cache", cache_dir);
  ev->add_option("--max-clicks", max_clicks);
  ev->add_option("--workers", workers);
  common(ev);

  auto* tr = app.add_subcommand("train", "train on synthetic shapes");
  tr->add_option("--out", ckpt)->required();
  common(tr);

  auto* bench = app.add_subcommand("bench", "per-click latency, zoom-in vs none");
  bench->add_option("--weights", weights)->check(CLI::ExistingFile);
  bench->add_option("--size", size);
  bench->add_option("--clicks", clicks);
  bench->add_option("--json", json_out);
  common(bench);

  auto* dump = app.add_subcommand("config", "print the resolved config");
  common(dump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::vector<std::string> ov = overrides;
    auto add = [&](const char* key, const std::string& v) {
      if (!v.empty()) ov.push_back(std::string(key) + "=" + v);
    };
    auto add_int = [&](const char* key, int v) {
      if (v >= 0) ov.push_back(std::string(key) + "=" + std::to_string(v));
    };
    add("eval.thresholds", thresholds);
    add("serve.host", host);
    add("serve.static_dir", static_dir);
    add("paths.image_dir", image_dir);
    add("paths.dataset", dataset);
    add_int("serve.port", port);
    add_int("bench.size", size);
    add_int("bench.clicks", clicks);
    add_int("eval.max_clicks", max_clicks);
    add_int("eval.workers", workers);
    if (!pre->parsed()) add("paths.cache_dir", cache_dir);
    const RunConfig cfg = resolve_config(config_path, ov);
    const std::string w = weights.empty() ? cfg.weights : weights;

    if (pre->parsed()) return cmd_preprocess(cfg, w, img_dir, cache_dir);
    if (serve->parsed()) return cmd_serve(cfg, w);
    if (ev->parsed()) return cmd_eval(cfg, w, out_dir);
    if (tr->parsed()) return cmd_train(cfg, ckpt);
    if (bench->parsed()) return cmd_bench(cfg, w, json_out);
    if (dump->parsed()) {
      std::cout << cfg.dump();
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace clickseg
