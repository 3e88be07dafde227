// SPDX-License-Identifier: Apache-2.0
#include "ca3d/ca3d.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <sstream>
#include <string>

#include "ca3d/config.hpp"
#include "ca3d/container.hpp"
#include "ca3d/dataset.hpp"
#include "ca3d/error.hpp"
#include "ca3d/metrics.hpp"
#include "ca3d/pipeline.hpp"
#include "ca3d/runtime.hpp"
#include "ca3d/verify.hpp"

struct ca3d_config {
  ca3d::RunConfig value;
};

struct ca3d_model {
  ca3d::RunConfig config;
  std::int64_t step = 0;
  std::unique_ptr<ca3d::unet::UNet> net;
};

namespace {

using ca3d::ErrorCode;
using ca3d::fail;

thread_local std::string g_last_error;

template <typename F>
ca3d_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return CA3D_OK;
  } catch (const ca3d::Error& e) {
    g_last_error = e.what();
    return static_cast<ca3d_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CA3D_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CA3D_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) fail(ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

float* dup_floats(const std::vector<float>& v) {
  auto* out = static_cast<float*>(std::malloc(std::max<std::size_t>(1, v.size()) * sizeof(float)));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, v.data(), v.size() * sizeof(float));
  return out;
}

ca3d::geometry::Image image_from(const float* data, int64_t height, int64_t width) {
  require(data, "image data");
  if (height < 1 || width < 1) fail(ErrorCode::kShape, "image dimensions must be positive");
  ca3d::geometry::Image img(1, height, width);
  std::memcpy(img.data.data(), data, img.data.size() * sizeof(float));
  return img;
}

ca3d::pipeline::TranslateOptions translate_options(const ca3d_sample_options* o, int T) {
  const ca3d_sample_options opts = o ? *o : ca3d_sample_options_default();
  if (opts.steps < 1 || opts.steps > T) {
    fail(ErrorCode::kUsage, "sampling steps " + std::to_string(opts.steps) + " outside [1, " + std::to_string(T) + "]");
  }
  if (!(opts.guidance >= 0.0)) fail(ErrorCode::kUsage, "guidance must be non-negative");
  ca3d::pipeline::TranslateOptions t;
  t.steps = opts.steps;
  t.guidance = opts.guidance;
  t.seed = opts.seed;
  t.clip_denoised = opts.clip_denoised != 0;
  t.batch = opts.batch;
  return t;
}

// Dataset phantoms keep the default proportions at any grid size.
ca3d::geometry::PhantomSpec phantom_for_size(int64_t size) {
  ca3d::geometry::PhantomSpec ps;
  const double scale = static_cast<double>(size) / static_cast<double>(ps.size);
  ps.radius *= scale;
  ps.depth_offset *= scale;
  ps.blob_sigma_min *= scale;
  ps.blob_sigma_max *= scale;
  ps.size = size;
  return ps;
}

}  // namespace

extern "C" {

const char* ca3d_last_error(void) { return g_last_error.c_str(); }

const char* ca3d_status_name(ca3d_status status) {
  switch (status) {
    case CA3D_OK: return "ok";
    case CA3D_ERR_IO: return "io";
    case CA3D_ERR_USAGE: return "usage";
    case CA3D_ERR_NUMERICAL: return "numerical";
    case CA3D_ERR_VERIFICATION: return "verification";
    case CA3D_ERR_SHAPE: return "shape";
    case CA3D_ERR_FORMAT: return "format";
    case CA3D_ERR_BAD_MAGIC: return "bad-magic";
    case CA3D_ERR_TRUNCATED: return "truncated";
    case CA3D_ERR_DUPLICATE_NAME: return "duplicate-name";
    case CA3D_ERR_UNSUPPORTED_VERSION: return "unsupported-version";
    case CA3D_ERR_CHECKSUM: return "checksum";
    case CA3D_ERR_INVALID_ARGUMENT: return "invalid-argument";
    case CA3D_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

int ca3d_exit_code(ca3d_status status) {
  switch (status) {
    case CA3D_OK: return 0;
    case CA3D_ERR_USAGE:
    case CA3D_ERR_INVALID_ARGUMENT: return 2;
    case CA3D_ERR_NUMERICAL: return 3;
    case CA3D_ERR_VERIFICATION: return 4;
    default: return 1;
  }
}

const char* ca3d_version(void) { return "0.1.0"; }

ca3d_status ca3d_configure_threads(void) {
  return guarded([] { ca3d::configure_threads(); });
}

void ca3d_free(void* p) { std::free(p); }

ca3d_status ca3d_config_default(ca3d_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new ca3d_config{};
  });
}

ca3d_status ca3d_config_parse(const char* text, ca3d_config** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    *out = new ca3d_config{ca3d::parse_config(text)};
  });
}

ca3d_status ca3d_config_load(const char* path, ca3d_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new ca3d_config{ca3d::load_config(path)};
  });
}

ca3d_status ca3d_config_set(ca3d_config* config, const char* key, const char* value) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(value, "value");
    // Rewrite the one line in the emitted text so parsing rules stay in one place.
    std::istringstream in(ca3d::emit_config(config->value));
    std::string line, text;
    bool found = false;
    const std::string prefix = std::string(key) + " = ";
    while (std::getline(in, line)) {
      if (line.rfind(prefix, 0) == 0) {
        line = prefix + value;
        found = true;
      }
      text += line + "\n";
    }
    if (!found) fail(ErrorCode::kUsage, std::string("config: unknown key '") + key + "'");
    config->value = ca3d::parse_config(text);
  });
}

ca3d_status ca3d_config_emit(const ca3d_config* config, char** text) {
  return guarded([&] {
    require(config, "config");
    require(text, "text");
    *text = dup_string(ca3d::emit_config(config->value));
  });
}

void ca3d_config_free(ca3d_config* config) { delete config; }

ca3d_status ca3d_dataset_generate(const char* dir, int64_t count, int64_t size, uint64_t seed,
                                  ca3d_split_counts* counts) {
  return guarded([&] {
    require(dir, "dir");
    if (size < 4) fail(ErrorCode::kUsage, "image size must be at least 4");
    ca3d::data::DatasetSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.phantom = phantom_for_size(size);
    const auto c = ca3d::data::dataset_generate(dir, spec);
    if (counts) *counts = {c.train, c.val, c.test};
  });
}

ca3d_status ca3d_image_read(const char* path, float** data, int64_t* height, int64_t* width) {
  return guarded([&] {
    require(path, "path");
    require(data, "data");
    require(height, "height");
    require(width, "width");
    const auto bytes = ca3d::io::read_file(path);
    const bool is_container = bytes.size() >= 4 && std::memcmp(bytes.data(), ca3d::io::kMagic, 4) == 0;
    if (!is_container) {
      const auto img = ca3d::data::read_pgm(path);
      *height = img.height;
      *width = img.width;
      *data = dup_floats(img.data);
      return;
    }
    const auto c = ca3d::io::parse(bytes);
    if (const auto bad = c.corrupt_records(); !bad.empty()) {
      fail(ErrorCode::kChecksum, std::string(path) + ": checksum mismatch in record '" + bad.front() + "'");
    }
    const ca3d::io::Record* rec = c.find("image");
    if (!rec) {
      for (const auto& r : c.records) {
        if (r.dtype != ca3d::io::DType::kF32) continue;
        if (rec) fail(ErrorCode::kFormat, std::string(path) + ": several float records and none named 'image'");
        rec = &r;
      }
    }
    if (!rec) fail(ErrorCode::kFormat, std::string(path) + ": no float image record");
    auto dims = rec->dims;
    while (dims.size() > 2 && dims.front() == 1) dims.erase(dims.begin());
    if (rec->dtype != ca3d::io::DType::kF32 || dims.size() != 2) {
      fail(ErrorCode::kFormat, std::string(path) + ": record '" + rec->name + "' is not a 2-D float image");
    }
    *height = static_cast<int64_t>(dims[0]);
    *width = static_cast<int64_t>(dims[1]);
    *data = dup_floats(rec->f32);
  });
}

ca3d_status ca3d_image_write_pgm(const char* path, const float* data, int64_t height, int64_t width) {
  return guarded([&] {
    require(path, "path");
    ca3d::data::write_pgm(path, image_from(data, height, width));
  });
}

ca3d_status ca3d_image_write_container(const char* path, const float* data, int64_t height, int64_t width) {
  return guarded([&] {
    require(path, "path");
    const auto img = image_from(data, height, width);
    ca3d::io::Record r;
    r.name = "image";
    r.dims = {static_cast<std::uint64_t>(height), static_cast<std::uint64_t>(width)};
    r.f32 = img.data;
    ca3d::io::write_container(path, {r});
  });
}

ca3d_status ca3d_train(const char* data_dir, const ca3d_config* config, int64_t steps, ca3d_log_fn log, void* user,
                       ca3d_model** out) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(config, "config");
    require(out, "out");
    const auto ds = ca3d::data::dataset_load(data_dir);
    const auto train = ds.split("train");
    const std::int64_t n = steps < 0 ? config->value.train_steps : steps;
    auto result = ca3d::pipeline::train(train, config->value, n, [&](const ca3d::pipeline::LogEntry& e) {
      if (log) log(e.step, e.loss, e.wallclock_ms, user);
    });
    auto* m = new ca3d_model{};
    m->config = config->value;
    m->step = result.steps;
    m->net = std::move(result.model);
    *out = m;
  });
}

ca3d_status ca3d_model_save(const ca3d_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    ca3d::pipeline::save_checkpoint(path, model->config, *model->net, model->step);
  });
}

ca3d_status ca3d_model_load(const char* path, ca3d_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto loaded = ca3d::pipeline::load_checkpoint(path);
    auto* m = new ca3d_model{};
    m->config = loaded.config;
    m->step = loaded.step;
    m->net = std::move(loaded.model);
    *out = m;
  });
}

ca3d_status ca3d_model_config(const ca3d_model* model, ca3d_config** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = new ca3d_config{model->config};
  });
}

int64_t ca3d_model_parameter_count(const ca3d_model* model) { return model ? model->net->parameter_count() : 0; }
int64_t ca3d_model_image_size(const ca3d_model* model) { return model ? model->config.model.image_size : 0; }
int64_t ca3d_model_step(const ca3d_model* model) { return model ? model->step : 0; }
void ca3d_model_free(ca3d_model* model) { delete model; }

ca3d_sample_options ca3d_sample_options_default(void) {
  const ca3d::pipeline::TranslateOptions t;
  return {t.steps, t.guidance, t.seed, t.clip_denoised ? 1 : 0, t.batch};
}

ca3d_status ca3d_translate(ca3d_model* model, const float* input, int64_t count, ca3d_direction direction,
                           const ca3d_sample_options* options, float* output) {
  return guarded([&] {
    require(model, "model");
    require(input, "input");
    require(output, "output");
    if (count < 1) fail(ErrorCode::kUsage, "translate: count must be at least 1");
    if (direction != CA3D_CC_TO_MLO && direction != CA3D_MLO_TO_CC) fail(ErrorCode::kUsage, "translate: bad direction");
    const auto opts = translate_options(options, model->config.T);
    const auto s = model->config.model.image_size;
    std::vector<ca3d::geometry::Image> refs;
    for (int64_t i = 0; i < count; ++i) refs.push_back(image_from(input + i * s * s, s, s));
    std::vector<const ca3d::geometry::Image*> ptrs;
    for (const auto& r : refs) ptrs.push_back(&r);
    const auto outs = ca3d::pipeline::translate(*model->net, model->config.schedule(), ptrs,
                                                static_cast<ca3d::diffusion::Direction>(direction), opts);
    for (int64_t i = 0; i < count; ++i) std::memcpy(output + i * s * s, outs[i].data.data(), s * s * sizeof(float));
  });
}

ca3d_status ca3d_evaluate(ca3d_model* model, const char* data_dir, const char* split, ca3d_eval_mode mode,
                          const ca3d_sample_options* options, char** report, double mean_psnr[2],
                          double mean_ssim[2]) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(split, "split");
    require(report, "report");
    const std::string name = split;
    if (name != "train" && name != "val" && name != "test") {
      fail(ErrorCode::kUsage, "split must be train, val or test, got '" + name + "'");
    }
    ca3d::pipeline::EvalMode m;
    switch (mode) {
      case CA3D_EVAL_MODEL: m = ca3d::pipeline::EvalMode::kModel; break;
      case CA3D_EVAL_SELF: m = ca3d::pipeline::EvalMode::kSelf; break;
      case CA3D_EVAL_COPY: m = ca3d::pipeline::EvalMode::kCopy; break;
      default: fail(ErrorCode::kUsage, "evaluate: unknown mode");
    }
    if (m == ca3d::pipeline::EvalMode::kModel) require(model, "model");
    const ca3d::RunConfig defaults;
    const auto& cfg = model ? model->config : defaults;
    const auto opts = translate_options(options, cfg.T);
    const auto ds = ca3d::data::dataset_load(data_dir);
    const auto pairs = ds.split(name);
    if (model) {
      for (const auto& p : pairs) {
        if (p.cc.height != cfg.model.image_size || p.cc.width != cfg.model.image_size) {
          fail(ErrorCode::kShape, "dataset image size does not match the checkpoint");
        }
      }
    }
    const auto reps = ca3d::pipeline::evaluate(
        model ? model->net.get() : nullptr, cfg.schedule(), pairs,
        {ca3d::diffusion::Direction::kCCtoMLO, ca3d::diffusion::Direction::kMLOtoCC}, m, opts);
    for (int i = 0; i < 2; ++i) {
      if (mean_psnr) mean_psnr[i] = reps[i].report.mean_psnr();
      if (mean_ssim) mean_ssim[i] = reps[i].report.mean_ssim();
    }
    *report = dup_string(ca3d::pipeline::format_eval(reps));
  });
}

ca3d_status ca3d_verify_geometry(uint64_t seed, double theta_perturbation, char** report, int* all_passed) {
  return guarded([&] {
    require(report, "report");
    require(all_passed, "all_passed");
    ca3d::verify::GeometryOptions o;
    o.seed = seed;
    o.theta_perturbation = theta_perturbation;
    const auto checks = ca3d::verify::geometry_suite(o);
    *all_passed = ca3d::verify::all_passed(checks) ? 1 : 0;
    *report = dup_string(ca3d::verify::format_checks(checks));
  });
}

ca3d_status ca3d_psnr(const float* a, const float* b, int64_t height, int64_t width, double* out) {
  return guarded([&] {
    require(out, "out");
    *out = ca3d::metrics::psnr(image_from(a, height, width), image_from(b, height, width));
  });
}

ca3d_status ca3d_ssim(const float* a, const float* b, int64_t height, int64_t width, double* out) {
  return guarded([&] {
    require(out, "out");
    *out = ca3d::metrics::ssim(image_from(a, height, width), image_from(b, height, width));
  });
}

}  // extern "C"
