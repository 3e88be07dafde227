// SPDX-License-Identifier: Apache-2.0
#include "ca3d/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ca3d/container.hpp"
#include "ca3d/error.hpp"
#include "ca3d/ops.hpp"
#include "ca3d/optim.hpp"
#include "ca3d/rng.hpp"

namespace ca3d::pipeline {

namespace {

constexpr const char* kParamPrefix = "param.";
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

const geometry::Image& view_of(const geometry::ViewPair& p, bool cc) { return cc ? p.cc : p.mlo; }

double clip_gradients(const std::vector<NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.node()->grad) g *= s;
    }
  }
  return norm;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const unet::UNet& model,
                     std::int64_t step) {
  std::vector<io::Record> records;
  records.push_back(io::Record::from_text("meta.config", emit_config(config)));
  records.push_back(io::Record::from_text("meta.step", std::to_string(step)));
  for (const auto& p : model.parameters()) records.push_back(io::Record::from_tensor(kParamPrefix + p.name, p.tensor));
  io::write_container(path, records);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  const auto c = io::read_container(path);
  if (const auto bad = c.corrupt_records(); !bad.empty()) {
    fail(ErrorCode::kChecksum, path.string() + ": checksum mismatch in record '" + bad.front() + "'");
  }
  LoadedModel out;
  out.config = parse_config(c.at("meta.config").text());
  try {
    out.step = std::stoll(c.at("meta.step").text());
  } catch (const std::invalid_argument&) {
    fail(ErrorCode::kFormat, path.string() + ": meta.step is not a number");
  }
  out.model = std::make_unique<unet::UNet>(out.config.model, out.config.seed);
  std::map<std::string, Tensor> params;
  const std::string prefix = kParamPrefix;
  for (const auto& r : c.records) {
    if (r.name.rfind(prefix, 0) == 0) params.emplace(r.name.substr(prefix.size()), r.to_tensor());
  }
  out.model->load(params);
  return out;
}

Tensor stack_images(const std::vector<const geometry::Image*>& images) {
  if (images.empty()) fail(ErrorCode::kShape, "stack_images: no images");
  const auto h = images.front()->height, w = images.front()->width;
  std::vector<float> data;
  data.reserve(images.size() * static_cast<std::size_t>(h * w));
  for (const auto* img : images) {
    if (img->channels != 1 || img->height != h || img->width != w) {
      fail(ErrorCode::kShape, "stack_images: images must be single-channel and share a size");
    }
    data.insert(data.end(), img->data.begin(), img->data.end());
  }
  return Tensor::from_data({static_cast<std::int64_t>(images.size()), 1, h, w}, std::move(data));
}

std::vector<geometry::Image> unstack_images(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 1) fail(ErrorCode::kShape, "unstack_images: expected [B, 1, H, W]");
  const auto b = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  std::vector<geometry::Image> out;
  for (std::int64_t i = 0; i < b; ++i) {
    geometry::Image img(1, h, w);
    std::copy_n(batch.data().begin() + i * h * w, h * w, img.data.begin());
    out.push_back(std::move(img));
  }
  return out;
}

std::string format_log_line(const LogEntry& e) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld\t%.6f\t%.1f\n", static_cast<long long>(e.step), e.loss, e.wallclock_ms);
  return buf;
}

TrainResult train(const std::vector<geometry::ViewPair>& pairs, const RunConfig& config, std::int64_t steps,
                  const std::function<void(const LogEntry&)>& on_log) {
  config.validate();
  if (pairs.empty()) fail(ErrorCode::kIo, "training split is empty");
  for (const auto& p : pairs) {
    if (p.cc.height != config.model.image_size || p.cc.width != config.model.image_size) {
      fail(ErrorCode::kShape, "dataset images are " + std::to_string(p.cc.height) + "x" + std::to_string(p.cc.width) +
                                  " but image_size is " + std::to_string(config.model.image_size));
    }
  }
  TrainResult result;
  result.model = std::make_unique<unet::UNet>(config.model, config.seed);
  unet::UNet& model = *result.model;
  const auto sched = config.schedule();
  const auto params = model.parameters();
  AdamWOptions opts;
  opts.lr = config.lr;
  opts.weight_decay = config.weight_decay;
  AdamW opt(params, opts);
  Rng data_rng = Rng(config.seed).fork(kDataStream);
  Rng noise_rng = Rng(config.seed).fork(kNoiseStream);

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor == order.size()) {
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[data_rng.below(i + 1)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  const auto start = std::chrono::steady_clock::now();
  double window_sum = 0.0;
  std::int64_t window_n = 0;
  for (std::int64_t step = 0; step < steps; ++step) {
    std::vector<const geometry::Image*> refs, tars;
    diffusion::TrainBatch batch;
    for (int i = 0; i < config.batch_size; ++i) {
      const auto& p = pairs[next_index()];
      const auto d = static_cast<diffusion::Direction>(i % 2);
      const bool ref_cc = d == diffusion::Direction::kCCtoMLO;
      refs.push_back(&view_of(p, ref_cc));
      tars.push_back(&view_of(p, !ref_cc));
      batch.d.push_back(d);
    }
    batch.ref = stack_images(refs);
    batch.tar = stack_images(tars);

    opt.zero_grad();
    auto out = diffusion::training_loss(model, batch, sched, config.mask_prob, noise_rng);
    const double loss = out.loss.item();
    if (!std::isfinite(loss)) {
      fail(ErrorCode::kNumerical, "training loss became non-finite at step " + std::to_string(step));
    }
    out.loss.backward();
    clip_gradients(params, config.grad_clip);
    opt.step(true);

    window_sum += loss;
    ++window_n;
    if (step == 0 || (step % config.log_every == 0) || step + 1 == steps) {
      LogEntry e;
      e.step = step;
      e.loss = window_sum / static_cast<double>(window_n);
      e.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(e);
      if (on_log) on_log(e);
      window_sum = 0.0;
      window_n = 0;
    }
  }
  result.steps = steps;
  return result;
}

std::vector<geometry::Image> translate(unet::UNet& model, const diffusion::NoiseSchedule& sched,
                                       const std::vector<const geometry::Image*>& refs, diffusion::Direction d,
                                       const TranslateOptions& options) {
  if (options.batch < 1) fail(ErrorCode::kUsage, "translate: batch must be at least 1");
  std::vector<geometry::Image> out;
  for (std::size_t start = 0, chunk = 0; start < refs.size(); start += options.batch, ++chunk) {
    const auto end = std::min(refs.size(), start + static_cast<std::size_t>(options.batch));
    std::vector<const geometry::Image*> part(refs.begin() + start, refs.begin() + end);
    diffusion::SamplerOptions so;
    so.steps = options.steps;
    so.guidance = options.guidance;
    so.clip_denoised = options.clip_denoised;
    so.seed = Rng(options.seed).fork(chunk).next_u64();
    const auto z = diffusion::sample(model, stack_images(part), std::vector<diffusion::Direction>(part.size(), d),
                                     sched, so);
    for (auto& img : unstack_images(z)) {
      for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
      out.push_back(std::move(img));
    }
  }
  return out;
}

std::vector<DirectionReport> evaluate(unet::UNet* model, const diffusion::NoiseSchedule& sched,
                                      const std::vector<geometry::ViewPair>& pairs,
                                      const std::vector<diffusion::Direction>& directions, EvalMode mode,
                                      const TranslateOptions& options) {
  if (pairs.empty()) fail(ErrorCode::kIo, "evaluation split is empty");
  if (mode == EvalMode::kModel && !model) fail(ErrorCode::kUsage, "evaluate: model required");
  std::vector<DirectionReport> out;
  for (const auto d : directions) {
    const bool ref_cc = d == diffusion::Direction::kCCtoMLO;
    std::vector<const geometry::Image*> refs;
    for (const auto& p : pairs) refs.push_back(&view_of(p, ref_cc));
    std::vector<geometry::Image> preds;
    if (mode == EvalMode::kModel) {
      TranslateOptions o = options;
      o.seed = Rng(options.seed).fork(static_cast<std::uint64_t>(d)).next_u64();
      preds = translate(*model, sched, refs, d, o);
    }
    DirectionReport rep{d, {}};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& truth = view_of(pairs[i], !ref_cc);
      const geometry::Image& pred = mode == EvalMode::kModel ? preds[i] : (mode == EvalMode::kSelf ? truth : *refs[i]);
      rep.report.add(pairs[i].sample_id, metrics::psnr(pred, truth), metrics::ssim(pred, truth));
    }
    out.push_back(std::move(rep));
  }
  return out;
}

std::string format_eval(const std::vector<DirectionReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += "# " + diffusion::direction_name(r.direction) + "\n" + r.report.format();
  return out;
}

}  // namespace ca3d::pipeline
