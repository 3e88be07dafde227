// SPDX-License-Identifier: Apache-2.0
#include "ca3d/unet.hpp"

#include <algorithm>
#include <set>

#include "ca3d/error.hpp"
#include "ca3d/geometry.hpp"
#include "ca3d/ops.hpp"

namespace ca3d::unet {

namespace {

Tensor ones(std::int64_t n) { return Tensor::full({n}, 1.0f, true); }
Tensor zeros(Shape s) { return Tensor::zeros(std::move(s), true); }

Tensor conv_weight(std::int64_t out, std::int64_t in, std::int64_t k, Rng& rng) {
  return init_uniform({out, in, k, k}, in * k * k, rng);
}

void bad_config(const std::string& what) { fail(ErrorCode::kInvalidArgument, "unet config: " + what); }

}  // namespace

std::int64_t UNetConfig::volume_edge(int level) const {
  const auto r = resolution(level);
  return volume_size > 0 ? std::min(volume_size, r) : r;
}

std::vector<int> UNetConfig::resolved_attention_levels() const {
  if (!attention_levels.empty()) {
    std::vector<int> v = attention_levels;
    std::sort(v.begin(), v.end());
    return v;
  }
  std::vector<int> v;
  for (int i = std::max(0, levels() - 2); i < levels(); ++i) v.push_back(i);
  return v;
}

bool UNetConfig::has_attention(int level) const {
  const auto v = resolved_attention_levels();
  return std::find(v.begin(), v.end(), level) != v.end();
}

void UNetConfig::validate() const {
  if (image_size < 1) bad_config("image_size must be positive");
  if (in_channels < 1) bad_config("in_channels must be positive");
  if (base_channels < 1) bad_config("base_channels must be positive");
  if (channel_mults.empty()) bad_config("channel_mults must not be empty");
  for (int m : channel_mults) {
    if (m < 1) bad_config("channel multipliers must be positive");
  }
  if (res_blocks < 1) bad_config("res_blocks must be at least 1");
  if (groups < 1) bad_config("groups must be positive");
  if (heads < 1) bad_config("heads must be positive");
  if (!(sigma > 0.0)) bad_config("sigma must be positive");
  if (refine_hidden < 1) bad_config("refine_hidden must be positive");
  if (volume_slabs < 1) bad_config("volume_slabs must be positive");
  if (volume_size < 0) bad_config("volume_size must be non-negative");
  if (image_size % (std::int64_t{1} << (levels() - 1)) != 0) {
    bad_config("image_size " + std::to_string(image_size) + " not divisible by 2^(levels-1)");
  }
  auto check_width = [&](std::int64_t c, const std::string& where) {
    if (c % groups != 0) bad_config(where + " width " + std::to_string(c) + " not divisible by groups=" +
                                    std::to_string(groups));
  };
  check_width(base_channels, "input");
  for (int i = 0; i < levels(); ++i) {
    check_width(width(i), "level " + std::to_string(i));
    const auto below = i + 1 < levels() ? width(i + 1) : width(i);
    check_width(width(i) + below, "decoder concat at level " + std::to_string(i));
  }
  std::set<int> seen;
  for (int l : resolved_attention_levels()) {
    if (l < 0 || l >= levels()) bad_config("attention level " + std::to_string(l) + " out of range");
    if (!seen.insert(l).second) bad_config("attention level " + std::to_string(l) + " listed twice");
    if (width(l) % heads != 0) {
      bad_config("level " + std::to_string(l) + " width " + std::to_string(width(l)) + " not divisible by heads=" +
                 std::to_string(heads));
    }
    const auto edge = volume_edge(l);
    if (resolution(l) % edge != 0) bad_config("volume edge must divide the level resolution");
    if (edge % volume_slabs != 0) {
      bad_config("volume edge " + std::to_string(edge) + " not divisible by volume_slabs=" +
                 std::to_string(volume_slabs));
    }
  }
}

ResBlockParams ResBlockParams::create(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim, Rng& rng) {
  ResBlockParams p;
  p.gn1_g = ones(in_ch);
  p.gn1_b = zeros({in_ch});
  p.conv1_w = conv_weight(out_ch, in_ch, 3, rng);
  p.conv1_b = init_uniform({out_ch}, in_ch * 9, rng);
  p.emb_w = init_uniform({emb_dim, 2 * out_ch}, emb_dim, rng);
  p.emb_b = zeros({2 * out_ch});
  p.gn2_g = ones(out_ch);
  p.gn2_b = zeros({out_ch});
  p.conv2_w = conv_weight(out_ch, out_ch, 3, rng);
  p.conv2_b = init_uniform({out_ch}, out_ch * 9, rng);
  if (in_ch != out_ch) {
    p.skip_w = conv_weight(out_ch, in_ch, 1, rng);
    p.skip_b = zeros({out_ch});
  }
  return p;
}

void ResBlockParams::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".gn1.gamma", gn1_g});
  out.push_back({prefix + ".gn1.beta", gn1_b});
  out.push_back({prefix + ".conv1.w", conv1_w});
  out.push_back({prefix + ".conv1.b", conv1_b});
  out.push_back({prefix + ".emb.w", emb_w});
  out.push_back({prefix + ".emb.b", emb_b});
  out.push_back({prefix + ".gn2.gamma", gn2_g});
  out.push_back({prefix + ".gn2.beta", gn2_b});
  out.push_back({prefix + ".conv2.w", conv2_w});
  out.push_back({prefix + ".conv2.b", conv2_b});
  if (skip_w.defined()) {
    out.push_back({prefix + ".skip.w", skip_w});
    out.push_back({prefix + ".skip.b", skip_b});
  }
}

Refine3DParams Refine3DParams::create(std::int64_t in_ch, std::int64_t hidden, std::int64_t out_ch, Rng& rng) {
  Refine3DParams p;
  p.w1 = init_uniform({hidden, in_ch, 3, 3, 3}, in_ch * 27, rng);
  p.b1 = zeros({hidden});
  p.w2 = init_uniform({out_ch, hidden, 3, 3, 3}, hidden * 27, rng);
  p.b2 = zeros({out_ch});
  return p;
}

void Refine3DParams::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".conv1.w", w1});
  out.push_back({prefix + ".conv1.b", b1});
  out.push_back({prefix + ".conv2.w", w2});
  out.push_back({prefix + ".conv2.b", b2});
}

Tensor refine_3d(const Tensor& raw_volume, const Refine3DParams& p) {
  if (!raw_volume.defined() || raw_volume.rank() != 5) fail(ErrorCode::kShape, "refine_3d: expected [B, C, D, H, W]");
  if (raw_volume.dim(1) != p.in_channels()) {
    fail(ErrorCode::kShape, "refine_3d: volume has " + std::to_string(raw_volume.dim(1)) +
                                " channels but the refinement expects " + std::to_string(p.in_channels()));
  }
  return ops::conv3d(ops::silu(ops::conv3d(raw_volume, p.w1, p.b1, 1)), p.w2, p.b2, 1);
}

AttentionBlockParams AttentionBlockParams::create(std::int64_t ch, Rng& rng) {
  AttentionBlockParams p;
  p.gn_tar_g = ones(ch);
  p.gn_tar_b = zeros({ch});
  p.gn_ref_g = ones(ch);
  p.gn_ref_b = zeros({ch});
  p.caca = attention::AttentionWeights::create(ch, true, rng);
  p.inject = attention::InjectWeights::create(ch, rng);
  return p;
}

void AttentionBlockParams::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".gn_tar.gamma", gn_tar_g});
  out.push_back({prefix + ".gn_tar.beta", gn_tar_b});
  out.push_back({prefix + ".gn_ref.gamma", gn_ref_g});
  out.push_back({prefix + ".gn_ref.beta", gn_ref_b});
  caca.collect(prefix + ".caca", out);
  inject.collect(prefix + ".inject", out);
}

UNet::UNet(UNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const auto e = config_.emb_dim();
  const auto L = config_.levels();
  cond_ = diffusion::ConditionParams::create(config_.base_channels, e, rng);
  in_w = conv_weight(config_.base_channels, config_.in_channels, 3, rng);
  in_b = init_uniform({config_.base_channels}, config_.in_channels * 9, rng);

  levels_.resize(static_cast<std::size_t>(L));
  std::int64_t ch = config_.base_channels;
  for (int i = 0; i < L; ++i) {
    Level& lv = levels_[static_cast<std::size_t>(i)];
    const auto w = config_.width(i);
    for (int r = 0; r < config_.res_blocks; ++r) {
      lv.enc.push_back(ResBlockParams::create(ch, w, e, rng));
      ch = w;
    }
    if (config_.has_attention(i)) {
      lv.attention = true;
      lv.enc_attn = AttentionBlockParams::create(w, rng);
      lv.dec_attn = AttentionBlockParams::create(w, rng);
      lv.refine = Refine3DParams::create(2 * config_.in_channels, config_.refine_hidden, w, rng);
    }
    if (i + 1 < L) {
      lv.down_w = conv_weight(w, w, 3, rng);
      lv.down_b = init_uniform({w}, w * 9, rng);
    }
  }
  mid_ = ResBlockParams::create(ch, ch, e, rng);
  for (int i = L - 1; i >= 0; --i) {
    Level& lv = levels_[static_cast<std::size_t>(i)];
    const auto w = config_.width(i);
    std::int64_t in_ch = ch + w;
    for (int r = 0; r < config_.res_blocks; ++r) {
      lv.dec.push_back(ResBlockParams::create(in_ch, w, e, rng));
      in_ch = w;
    }
    ch = w;
    if (i > 0) {
      lv.up_w = conv_weight(w, w, 3, rng);
      lv.up_b = init_uniform({w}, w * 9, rng);
    }
  }
  out_gn_g = ones(ch);
  out_gn_b = zeros({ch});
  out_w = conv_weight(config_.in_channels, ch, 3, rng);
  // Small head: the untrained predictor starts near zero output.
  for (float& v : out_w.mutable_data()) v *= 0.1f;
  out_b = zeros({config_.in_channels});
}

std::vector<NamedParam> UNet::parameters() const {
  std::vector<NamedParam> out;
  cond_.collect("cond", out);
  out.push_back({"in.w", in_w});
  out.push_back({"in.b", in_b});
  for (int i = 0; i < config_.levels(); ++i) {
    const Level& lv = levels_[static_cast<std::size_t>(i)];
    const std::string p = "level" + std::to_string(i);
    for (std::size_t r = 0; r < lv.enc.size(); ++r) lv.enc[r].collect(p + ".enc" + std::to_string(r), out);
    if (lv.attention) {
      lv.enc_attn.collect(p + ".enc_attn", out);
      lv.dec_attn.collect(p + ".dec_attn", out);
      lv.refine.collect(p + ".refine", out);
    }
    if (lv.down_w.defined()) {
      out.push_back({p + ".down.w", lv.down_w});
      out.push_back({p + ".down.b", lv.down_b});
    }
    for (std::size_t r = 0; r < lv.dec.size(); ++r) lv.dec[r].collect(p + ".dec" + std::to_string(r), out);
    if (lv.up_w.defined()) {
      out.push_back({p + ".up.w", lv.up_w});
      out.push_back({p + ".up.b", lv.up_b});
    }
  }
  mid_.collect("mid", out);
  out.push_back({"out.gn.gamma", out_gn_g});
  out.push_back({"out.gn.beta", out_gn_b});
  out.push_back({"out.w", out_w});
  out.push_back({"out.b", out_b});
  return out;
}

std::int64_t UNet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor UNet::condition(const std::vector<int>& t, const std::vector<diffusion::Direction>& d,
                       const std::vector<bool>& null_cond) const {
  return diffusion::cond_embedding(t, d, null_cond, cond_);
}

Tensor UNet::resblock(const Tensor& x, const Tensor& emb_act, const ResBlockParams& p) const {
  const auto out_ch = p.conv1_w.dim(0);
  const int g1 = config_.groups, g2 = config_.groups;
  Tensor h = ops::conv2d(ops::silu(ops::group_norm(x, g1, p.gn1_g, p.gn1_b)), p.conv1_w, p.conv1_b, 1, 1);
  Tensor ss = ops::linear(emb_act, p.emb_w, p.emb_b);
  const auto b = ss.dim(0);
  Tensor scale = ops::reshape(ops::slice(ss, 1, 0, out_ch), {b, out_ch, 1, 1});
  Tensor shift = ops::reshape(ops::slice(ss, 1, out_ch, out_ch), {b, out_ch, 1, 1});
  h = ops::group_norm(h, g2, p.gn2_g, p.gn2_b);
  h = ops::add(ops::add(h, ops::mul(h, scale)), shift);
  h = ops::conv2d(ops::silu(h), p.conv2_w, p.conv2_b, 1, 1);
  Tensor skip = p.skip_w.defined() ? ops::conv2d(x, p.skip_w, p.skip_b, 1, 0) : x;
  return ops::add(skip, h);
}

Tensor UNet::attend(const Tensor& h, const Tensor& ref, const Tensor& f3d, const AttentionBlockParams& p) const {
  attention::CACAConfig cc;
  cc.sigma = config_.sigma;
  cc.heads = config_.heads;
  cc.use_bias = config_.use_caca;
  const int g = config_.groups;
  Tensor f_caca = ops::add(h, attention::caca(ops::group_norm(h, g, p.gn_tar_g, p.gn_tar_b),
                                              ops::group_norm(ref, g, p.gn_ref_g, p.gn_ref_b), p.caca, cc));
  return attention::inject_3d(f_caca, f3d, p.inject, config_.heads, config_.volume_slabs);
}

std::vector<Tensor> UNet::raw_volumes(const Tensor& lat_cc, const Tensor& lat_mlo) const {
  const Shape expect{lat_cc.dim(0), config_.in_channels, config_.image_size, config_.image_size};
  if (lat_cc.shape() != expect || lat_mlo.shape() != expect) {
    fail(ErrorCode::kShape, "raw_volumes: latents must be " + shape_str(expect));
  }
  const auto b = lat_cc.dim(0);
  const auto c = config_.in_channels;
  std::vector<Tensor> out;
  for (int level : config_.resolved_attention_levels()) {
    const auto edge = config_.volume_edge(level);
    const int factor = static_cast<int>(config_.image_size / edge);
    Tensor pc = factor > 1 ? ops::avg_pool2d(lat_cc, factor) : lat_cc;
    Tensor pm = factor > 1 ? ops::avg_pool2d(lat_mlo, factor) : lat_mlo;
    const auto per_img = c * edge * edge;
    const auto per_vol = 2 * c * edge * edge * edge;
    std::vector<float> data(static_cast<std::size_t>(b * per_vol));
    for (std::int64_t i = 0; i < b; ++i) {
      geometry::Image ic(c, edge, edge), im(c, edge, edge);
      std::copy_n(pc.data().begin() + i * per_img, per_img, ic.data.begin());
      std::copy_n(pm.data().begin() + i * per_img, per_img, im.data.begin());
      const auto vol = geometry::build_feature_volume(ic, im, edge);
      std::copy(vol.data.begin(), vol.data.end(), data.begin() + i * per_vol);
    }
    out.push_back(Tensor::from_data({b, 2 * c, edge, edge, edge}, std::move(data)));
  }
  return out;
}

std::vector<Tensor> UNet::refine_volumes(const std::vector<Tensor>& raw) const {
  const auto lv = config_.resolved_attention_levels();
  if (raw.size() != lv.size()) fail(ErrorCode::kShape, "refine_volumes: one raw volume per attention level required");
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < lv.size(); ++k) {
    out.push_back(refine_3d(raw[k], levels_[static_cast<std::size_t>(lv[k])].refine));
  }
  return out;
}

Tensor UNet::forward(const Tensor& z_t, const Tensor& c_emb, const Tensor& z_ref, const std::vector<Tensor>& f3d) const {
  const Shape expect{z_t.defined() ? z_t.dim(0) : 0, config_.in_channels, config_.image_size, config_.image_size};
  if (!z_t.defined() || z_t.shape() != expect) {
    fail(ErrorCode::kShape, "unet forward: z_t must be " + shape_str(expect) + ", got " +
                                (z_t.defined() ? shape_str(z_t.shape()) : "undefined"));
  }
  if (!z_ref.defined() || z_ref.shape() != z_t.shape()) {
    fail(ErrorCode::kShape, "unet forward: z_ref shape does not match z_t");
  }
  const auto b = z_t.dim(0);
  if (!c_emb.defined() || c_emb.shape() != Shape{b, config_.emb_dim()}) {
    fail(ErrorCode::kShape, "unet forward: c_emb must be [" + std::to_string(b) + ", " +
                                std::to_string(config_.emb_dim()) + "]");
  }
  const auto attn_levels = config_.resolved_attention_levels();
  if (!f3d.empty() && f3d.size() != attn_levels.size()) {
    fail(ErrorCode::kShape, "unet forward: expected " + std::to_string(attn_levels.size()) + " refined volumes, got " +
                                std::to_string(f3d.size()));
  }
  auto volume_at = [&](int level) -> Tensor {
    if (f3d.empty()) return Tensor();
    const auto it = std::find(attn_levels.begin(), attn_levels.end(), level);
    return f3d[static_cast<std::size_t>(it - attn_levels.begin())];
  };
  const int L = config_.levels();
  const int deepest_attn = attn_levels.empty() ? -1 : attn_levels.back();
  Tensor emb = ops::silu(c_emb);

  // Weight-shared reference encoder, only as deep as attention needs.
  std::vector<Tensor> ref_feats(static_cast<std::size_t>(L));
  if (deepest_attn >= 0) {
    Tensor r = ops::conv2d(z_ref, in_w, in_b, 1, 1);
    for (int i = 0; i <= deepest_attn; ++i) {
      const Level& lv = levels_[static_cast<std::size_t>(i)];
      for (const auto& rb : lv.enc) r = resblock(r, emb, rb);
      ref_feats[static_cast<std::size_t>(i)] = r;
      if (i < deepest_attn) r = ops::conv2d(r, lv.down_w, lv.down_b, 2, 1);
    }
  }

  Tensor h = ops::conv2d(z_t, in_w, in_b, 1, 1);
  std::vector<Tensor> skips;
  for (int i = 0; i < L; ++i) {
    const Level& lv = levels_[static_cast<std::size_t>(i)];
    for (const auto& rb : lv.enc) h = resblock(h, emb, rb);
    if (lv.attention) h = attend(h, ref_feats[static_cast<std::size_t>(i)], volume_at(i), lv.enc_attn);
    skips.push_back(h);
    if (i + 1 < L) h = ops::conv2d(h, lv.down_w, lv.down_b, 2, 1);
  }
  h = resblock(h, emb, mid_);
  for (int i = L - 1; i >= 0; --i) {
    const Level& lv = levels_[static_cast<std::size_t>(i)];
    h = ops::concat({h, skips[static_cast<std::size_t>(i)]}, 1);
    for (const auto& rb : lv.dec) h = resblock(h, emb, rb);
    if (lv.attention) h = attend(h, ref_feats[static_cast<std::size_t>(i)], volume_at(i), lv.dec_attn);
    if (i > 0) h = ops::conv2d(ops::upsample_nearest2x(h), lv.up_w, lv.up_b, 1, 1);
  }
  h = ops::silu(ops::group_norm(h, config_.groups, out_gn_g, out_gn_b));
  return ops::conv2d(h, out_w, out_b, 1, 1);
}

Tensor UNet::predict_noise(const diffusion::DenoiseInput& in) {
  Tensor c_emb = condition(in.t, in.d, in.null_cond);
  std::vector<Tensor> f3d;
  if (config_.use_im3d && !config_.resolved_attention_levels().empty()) {
    const auto b = in.z_t.dim(0);
    const auto per = in.z_t.numel() / b;
    std::vector<float> cc(static_cast<std::size_t>(in.z_t.numel())), mlo(cc.size());
    const auto& zt = in.z_t.data();
    const auto& zr = in.z_ref_noisy.data();
    const bool with_target = config_.volume_source == VolumeSource::kReferenceAndTarget;
    for (std::int64_t i = 0; i < b; ++i) {
      const bool ref_is_cc = in.d[static_cast<std::size_t>(i)] == diffusion::Direction::kCCtoMLO;
      auto ref_dst = (ref_is_cc ? cc : mlo).begin() + i * per;
      auto tar_dst = (ref_is_cc ? mlo : cc).begin() + i * per;
      std::copy_n(zr.begin() + i * per, per, ref_dst);
      if (with_target) std::copy_n(zt.begin() + i * per, per, tar_dst);
    }
    f3d = refine_volumes(raw_volumes(Tensor::from_data(in.z_t.shape(), std::move(cc)),
                                     Tensor::from_data(in.z_t.shape(), std::move(mlo))));
  }
  return forward(in.z_t, c_emb, in.z_ref, f3d);
}

void UNet::load(const std::map<std::string, Tensor>& tensors) {
  auto params = parameters();
  for (const auto& p : params) {
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) fail(ErrorCode::kFormat, "checkpoint is missing parameter '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape()) {
      fail(ErrorCode::kShape, "checkpoint parameter '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                                  ", model expects " + shape_str(p.tensor.shape()));
    }
  }
  if (tensors.size() != params.size()) {
    std::set<std::string> known;
    for (const auto& p : params) known.insert(p.name);
    for (const auto& [name, t] : tensors) {
      if (!known.count(name)) fail(ErrorCode::kFormat, "checkpoint has unexpected parameter '" + name + "'");
    }
  }
  for (auto& p : params) {
    Tensor dst = p.tensor;
    const auto& src = tensors.at(p.name).data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace ca3d::unet
