// SPDX-License-Identifier: Apache-2.0
// Command-line front end over the C API.
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "ca3d/ca3d.h"

namespace {

struct Failure {
  int exit_code;
};

void check(ca3d_status s, const std::string& what) {
  if (s == CA3D_OK) return;
  std::fprintf(stderr, "error: %s: %s\n", what.c_str(), ca3d_last_error());
  throw Failure{ca3d_exit_code(s)};
}

struct CString {
  char* p = nullptr;
  ~CString() { ca3d_free(p); }
};

struct Floats {
  float* p = nullptr;
  ~Floats() { ca3d_free(p); }
};

using ConfigPtr = std::unique_ptr<ca3d_config, decltype(&ca3d_config_free)>;
using ModelPtr = std::unique_ptr<ca3d_model, decltype(&ca3d_model_free)>;

ModelPtr load_model(const std::string& path) {
  ca3d_model* m = nullptr;
  check(ca3d_model_load(path.c_str(), &m), "loading checkpoint " + path);
  return ModelPtr(m, ca3d_model_free);
}

// ---- gen-data ----
struct GenArgs {
  std::string out;
  long long count = 500;
  long long size = 32;
  unsigned long long seed = 0;
};

int run_gen(const GenArgs& a) {
  ca3d_split_counts c{};
  check(ca3d_dataset_generate(a.out.c_str(), a.count, a.size, a.seed, &c), "generating dataset");
  std::printf("pairs\t%lld\nsize\t%lld\nseed\t%llu\ntrain\t%lld\nval\t%lld\ntest\t%lld\n", a.count, a.size, a.seed,
              static_cast<long long>(c.train), static_cast<long long>(c.val), static_cast<long long>(c.test));
  return 0;
}

// ---- train ----
struct TrainArgs {
  std::string data, config, out, log;
  long long steps = -1;
  bool no_caca = false, no_im3d = false;
  std::vector<std::string> set;
};

struct LogSink {
  std::ofstream file;
  bool failed = false;
};

void on_log(int64_t step, double loss, double ms, void* user) {
  auto* sink = static_cast<LogSink*>(user);
  char line[96];
  std::snprintf(line, sizeof line, "%lld\t%.6f\t%.1f\n", static_cast<long long>(step), loss, ms);
  sink->file << line;
  sink->file.flush();
  if (!sink->file) sink->failed = true;
  std::fputs(line, stdout);
  std::fflush(stdout);
}

int run_train(const TrainArgs& a) {
  ca3d_config* raw = nullptr;
  if (a.config.empty()) check(ca3d_config_default(&raw), "config");
  else check(ca3d_config_load(a.config.c_str(), &raw), "loading config " + a.config);
  ConfigPtr cfg(raw, ca3d_config_free);
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return 2;
    }
    check(ca3d_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "--set " + kv);
  }
  if (a.no_caca) check(ca3d_config_set(cfg.get(), "use_caca", "false"), "--no-caca");
  if (a.no_im3d) check(ca3d_config_set(cfg.get(), "use_im3d", "false"), "--no-im3d");

  const std::string log_path = a.log.empty() ? a.out + ".log.tsv" : a.log;
  LogSink sink;
  sink.file.open(log_path, std::ios::app | std::ios::binary);
  if (!sink.file) {
    std::fprintf(stderr, "error: cannot open log %s\n", log_path.c_str());
    return 1;
  }
  ca3d_model* m = nullptr;
  check(ca3d_train(a.data.c_str(), cfg.get(), a.steps, on_log, &sink, &m), "training");
  ModelPtr model(m, ca3d_model_free);
  if (sink.failed) {
    std::fprintf(stderr, "error: writing log %s failed\n", log_path.c_str());
    return 1;
  }
  check(ca3d_model_save(model.get(), a.out.c_str()), "writing checkpoint " + a.out);
  std::fprintf(stderr, "checkpoint %s (%lld parameters, %lld steps)\n", a.out.c_str(),
               static_cast<long long>(ca3d_model_parameter_count(model.get())),
               static_cast<long long>(ca3d_model_step(model.get())));
  return 0;
}

// ---- translate ----
struct TranslateArgs {
  std::string ckpt, input, direction = "cc2mlo", out;
  int steps = 50;
  double guidance = 3.0;
  unsigned long long seed = 0;
  bool no_clip = false;
};

std::string output_stem(const std::string& out) {
  const std::filesystem::path p(out);
  const auto ext = p.extension().string();
  if (ext == ".pgm" || ext == ".ca3d") return (p.parent_path() / p.stem()).string();
  return out;
}

int run_translate(const TranslateArgs& a) {
  auto model = load_model(a.ckpt);
  Floats img;
  int64_t h = 0, w = 0;
  check(ca3d_image_read(a.input.c_str(), &img.p, &h, &w), "reading " + a.input);
  const int64_t s = ca3d_model_image_size(model.get());
  if (h != s || w != s) {
    std::fprintf(stderr, "error: input is %lldx%lld but the checkpoint expects %lldx%lld\n", static_cast<long long>(h),
                 static_cast<long long>(w), static_cast<long long>(s), static_cast<long long>(s));
    return 2;
  }
  ca3d_sample_options o = ca3d_sample_options_default();
  o.steps = a.steps;
  o.guidance = a.guidance;
  o.seed = a.seed;
  o.clip_denoised = a.no_clip ? 0 : 1;
  std::vector<float> out(static_cast<std::size_t>(s * s));
  const auto dir = a.direction == "cc2mlo" ? CA3D_CC_TO_MLO : CA3D_MLO_TO_CC;
  check(ca3d_translate(model.get(), img.p, 1, dir, &o, out.data()), "translating");
  const std::string stem = output_stem(a.out);
  check(ca3d_image_write_pgm((stem + ".pgm").c_str(), out.data(), s, s), "writing " + stem + ".pgm");
  check(ca3d_image_write_container((stem + ".ca3d").c_str(), out.data(), s, s), "writing " + stem + ".ca3d");
  std::printf("%s.pgm\n%s.ca3d\n", stem.c_str(), stem.c_str());
  return 0;
}

// ---- eval ----
struct EvalArgs {
  std::string ckpt, data, split = "test", out;
  int steps = 50;
  double guidance = 3.0;
  unsigned long long seed = 0;
  int batch = 16;
  bool self = false, copy = false;
};

int run_eval(const EvalArgs& a) {
  ModelPtr model(nullptr, ca3d_model_free);
  ca3d_eval_mode mode = a.self ? CA3D_EVAL_SELF : (a.copy ? CA3D_EVAL_COPY : CA3D_EVAL_MODEL);
  if (mode == CA3D_EVAL_MODEL) {
    if (a.ckpt.empty()) {
      std::fprintf(stderr, "error: --ckpt is required unless --self or --copy is given\n");
      return 2;
    }
    model = load_model(a.ckpt);
  }
  ca3d_sample_options o = ca3d_sample_options_default();
  o.steps = a.steps;
  o.guidance = a.guidance;
  o.seed = a.seed;
  o.batch = a.batch;
  CString report;
  double psnr[2] = {0, 0}, ssim[2] = {0, 0};
  check(ca3d_evaluate(model.get(), a.data.c_str(), a.split.c_str(), mode, &o, &report.p, psnr, ssim), "evaluating");
  std::ofstream f(a.out, std::ios::binary | std::ios::trunc);
  f << report.p;
  if (!f.flush()) {
    std::fprintf(stderr, "error: cannot write %s\n", a.out.c_str());
    return 1;
  }
  std::printf("cc2mlo\tpsnr %.4f\tssim %.4f\nmlo2cc\tpsnr %.4f\tssim %.4f\n", psnr[0], ssim[0], psnr[1], ssim[1]);
  return 0;
}

// ---- verify-geometry ----
struct VerifyArgs {
  unsigned long long seed = 0;
  double perturb_theta = 0.0;
};

int run_verify(const VerifyArgs& a) {
  CString report;
  int ok = 0;
  check(ca3d_verify_geometry(a.seed, a.perturb_theta, &report.p, &ok), "verify-geometry");
  std::fputs(report.p, stdout);
  return ok ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bidirectional CC/MLO view translation with a conditional diffusion model"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of pairs")->capture_default_str();
  g->add_option("--size", gen.size, "Image edge in pixels")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--config", tr.config, "Config file (key = value)");
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--steps", tr.steps, "Optimisation steps (default: train_steps from the config)");
  t->add_option("--log", tr.log, "Append-only TSV log (default: <out>.log.tsv)");
  t->add_option("--set", tr.set, "Override a config key, key=value");
  t->add_flag("--no-caca", tr.no_caca, "Drop the column bias (plain cross-attention to the reference)");
  t->add_flag("--no-im3d", tr.no_im3d, "Disable the 3D volume branch");

  TranslateArgs tl;
  auto* x = app.add_subcommand("translate", "Translate one view into the other");
  x->add_option("--ckpt", tl.ckpt, "Checkpoint")->required();
  x->add_option("--input", tl.input, "Reference image (PGM or container)")->required();
  x->add_option("--direction", tl.direction, "cc2mlo or mlo2cc")
      ->check(CLI::IsMember({"cc2mlo", "mlo2cc"}))
      ->capture_default_str();
  x->add_option("--steps", tl.steps, "Sampling steps")->capture_default_str();
  x->add_option("--guidance", tl.guidance, "Guidance scale")->capture_default_str();
  x->add_option("--seed", tl.seed, "Sampler seed")->capture_default_str();
  x->add_option("--out", tl.out, "Output path; .pgm and .ca3d files are written")->required();
  x->add_flag("--no-clip", tl.no_clip, "Do not clip predicted x0 to [0, 1]");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score translations on a dataset split");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  e->add_option("--out", ev.out, "Report path")->required();
  e->add_option("--steps", ev.steps, "Sampling steps")->capture_default_str();
  e->add_option("--guidance", ev.guidance, "Guidance scale")->capture_default_str();
  e->add_option("--seed", ev.seed, "Sampler seed")->capture_default_str();
  e->add_option("--batch", ev.batch, "References per sampler call")->capture_default_str();
  auto* self_flag = e->add_flag("--self", ev.self, "Diagnostic: score ground truth against itself");
  e->add_flag("--copy", ev.copy, "Baseline: use the reference view as the prediction")->excludes(self_flag);

  VerifyArgs vf;
  auto* v = app.add_subcommand("verify-geometry", "Run the projection oracle suite");
  v->add_option("--seed", vf.seed, "Seed for random points, images and phantoms")->capture_default_str();
  v->add_option("--perturb-theta", vf.perturb_theta, "Test hook: radians added to the MLO angle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    check(ca3d_configure_threads(), "CA3D_THREADS");
    if (g->parsed()) return run_gen(gen);
    if (t->parsed()) return run_train(tr);
    if (x->parsed()) return run_translate(tl);
    if (e->parsed()) return run_eval(ev);
    if (v->parsed()) return run_verify(vf);
  } catch (const Failure& f) {
    return f.exit_code;
  }
  return 2;
}
