// SPDX-License-Identifier: Apache-2.0
#include "ca3d/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ca3d/container.hpp"
#include "ca3d/error.hpp"

namespace ca3d {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) fail(ErrorCode::kUsage, "config: '" + key + "' has invalid value '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kUsage, "config: '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty() || v == "auto") return out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field num(T RunConfig::*m) {
  return {[m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*m);
            else return std::to_string(c.*m);
          },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<T>(k, v); }};
}

template <typename T>
Field model_num(T unet::UNetConfig::*m) {
  return {[m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.model.*m);
            else return std::to_string(c.model.*m);
          },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.model.*m = parse_number<T>(k, v); }};
}

Field flag(bool RunConfig::*m) {
  return {[m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); }};
}

Field model_flag(bool unet::UNetConfig::*m) {
  return {[m](const RunConfig& c) { return std::string(c.model.*m ? "true" : "false"); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.model.*m = parse_bool(k, v); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"seed", num(&RunConfig::seed)},
      {"T", num(&RunConfig::T)},
      {"beta_start", num(&RunConfig::beta_start)},
      {"beta_end", num(&RunConfig::beta_end)},
      {"mask_prob", num(&RunConfig::mask_prob)},
      {"guidance", num(&RunConfig::guidance)},
      {"sample_steps", num(&RunConfig::sample_steps)},
      {"clip_denoised", flag(&RunConfig::clip_denoised)},
      {"lr", num(&RunConfig::lr)},
      {"weight_decay", num(&RunConfig::weight_decay)},
      {"grad_clip", num(&RunConfig::grad_clip)},
      {"batch_size", num(&RunConfig::batch_size)},
      {"train_steps", num(&RunConfig::train_steps)},
      {"log_every", num(&RunConfig::log_every)},
      {"image_size", model_num(&unet::UNetConfig::image_size)},
      {"base_channels", model_num(&unet::UNetConfig::base_channels)},
      {"channel_mults",
       {[](const RunConfig& c) { return join_ints(c.model.channel_mults); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.model.channel_mults = parse_ints(k, v); }}},
      {"res_blocks", model_num(&unet::UNetConfig::res_blocks)},
      {"attention_levels",
       {[](const RunConfig& c) {
          return c.model.attention_levels.empty() ? std::string("auto") : join_ints(c.model.attention_levels);
        },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.model.attention_levels = parse_ints(k, v); }}},
      {"groups", model_num(&unet::UNetConfig::groups)},
      {"heads", model_num(&unet::UNetConfig::heads)},
      {"sigma", model_num(&unet::UNetConfig::sigma)},
      {"use_caca", model_flag(&unet::UNetConfig::use_caca)},
      {"use_im3d", model_flag(&unet::UNetConfig::use_im3d)},
      {"volume_source",
       {[](const RunConfig& c) {
          return std::string(c.model.volume_source == unet::VolumeSource::kReferenceOnly ? "reference"
                                                                                           : "reference+target");
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "reference") c.model.volume_source = unet::VolumeSource::kReferenceOnly;
          else if (v == "reference+target") c.model.volume_source = unet::VolumeSource::kReferenceAndTarget;
          else fail(ErrorCode::kUsage, "config: '" + k + "' expects reference or reference+target, got '" + v + "'");
        }}},
      {"volume_size", model_num(&unet::UNetConfig::volume_size)},
      {"refine_hidden", model_num(&unet::UNetConfig::refine_hidden)},
      {"volume_slabs", model_num(&unet::UNetConfig::volume_slabs)},
  };
  return f;
}

void usage(const std::string& what) { fail(ErrorCode::kUsage, "config: " + what); }

}  // namespace

void RunConfig::validate() const {
  if (T < 1) usage("T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    usage("need 0 < beta_start <= beta_end < 1");
  }
  if (mask_prob < 0.0 || mask_prob > 1.0) usage("mask_prob must lie in [0, 1]");
  if (!(guidance >= 0.0)) usage("guidance must be non-negative");
  if (sample_steps < 1 || sample_steps > T) usage("sample_steps must lie in [1, T]");
  if (!(lr > 0.0)) usage("lr must be positive");
  if (weight_decay < 0.0) usage("weight_decay must be non-negative");
  if (grad_clip < 0.0) usage("grad_clip must be non-negative");
  if (batch_size < 1) usage("batch_size must be at least 1");
  if (train_steps < 0) usage("train_steps must be non-negative");
  if (log_every < 1) usage("log_every must be at least 1");
  try {
    model.validate();
  } catch (const Error& e) {
    usage(e.what());
  }
}

diffusion::NoiseSchedule RunConfig::schedule() const { return diffusion::make_schedule(T, beta_start, beta_end); }

diffusion::SamplerOptions RunConfig::sampler(std::uint64_t s) const {
  diffusion::SamplerOptions o;
  o.steps = sample_steps;
  o.guidance = guidance;
  o.seed = s;
  o.clip_denoised = clip_denoised;
  return o;
}

RunConfig parse_config(const std::string& text) {
  std::map<std::string, const Field*> by_key;
  for (const auto& [k, f] : fields()) by_key[k] = &f;
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) usage("line " + std::to_string(lineno) + " is not 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) usage("unknown key '" + key + "' on line " + std::to_string(lineno));
    if (!seen.insert(key).second) usage("key '" + key + "' repeated on line " + std::to_string(lineno));
    it->second->set(c, key, value);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string emit_config(const RunConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace ca3d
