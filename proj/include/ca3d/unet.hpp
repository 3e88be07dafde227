// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ca3d/attention.hpp"
#include "ca3d/diffusion.hpp"
#include "ca3d/optim.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d::unet {

/// Which latents feed the back-projected volume.
enum class VolumeSource : int { kReferenceAndTarget = 0, kReferenceOnly = 1 };

struct UNetConfig {
  std::int64_t image_size = 32;
  std::int64_t in_channels = 1;
  std::int64_t base_channels = 32;
  std::vector<int> channel_mults{1, 2, 4};
  int res_blocks = 2;
  /// Level indices (0 = full resolution) carrying CACA and injection. Empty
  /// means the two lowest-resolution levels.
  std::vector<int> attention_levels;
  int groups = 8;
  int heads = 4;
  double sigma = 5.0;
  /// false: column bias zeroed (plain cross-attention).
  bool use_caca = true;
  /// false: f_3D is replaced by the zero volume.
  bool use_im3d = true;
  VolumeSource volume_source = VolumeSource::kReferenceAndTarget;
  /// Cubic volume edge per level; 0 uses the level resolution.
  std::int64_t volume_size = 0;
  std::int64_t refine_hidden = 16;
  int volume_slabs = 4;

  int levels() const { return static_cast<int>(channel_mults.size()); }
  std::int64_t width(int level) const { return base_channels * channel_mults[static_cast<std::size_t>(level)]; }
  std::int64_t resolution(int level) const { return image_size >> level; }
  std::int64_t emb_dim() const { return 4 * base_channels; }
  std::int64_t volume_edge(int level) const;
  std::vector<int> resolved_attention_levels() const;
  bool has_attention(int level) const;
  /// Throws ErrorCode::kInvalidArgument with the offending field.
  void validate() const;
};

struct ResBlockParams {
  Tensor gn1_g, gn1_b, conv1_w, conv1_b;
  Tensor emb_w, emb_b;  // c_emb -> [scale | shift]
  Tensor gn2_g, gn2_b, conv2_w, conv2_b;
  Tensor skip_w, skip_b;  // 1x1, only when widths differ

  static ResBlockParams create(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

struct Refine3DParams {
  Tensor w1, b1, w2, b2;

  static Refine3DParams create(std::int64_t in_ch, std::int64_t hidden, std::int64_t out_ch, Rng& rng);
  std::int64_t in_channels() const { return w1.dim(1); }
  std::int64_t out_channels() const { return w2.dim(0); }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// conv3d -> SiLU -> conv3d, 3x3x3 kernels with same padding.
Tensor refine_3d(const Tensor& raw_volume, const Refine3DParams& p);

struct AttentionBlockParams {
  Tensor gn_tar_g, gn_tar_b, gn_ref_g, gn_ref_b;
  attention::AttentionWeights caca;
  attention::InjectWeights inject;

  static AttentionBlockParams create(std::int64_t ch, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

class UNet final : public diffusion::Denoiser {
 public:
  UNet(UNetConfig config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }
  /// Stable order; names are unique.
  std::vector<NamedParam> parameters() const;
  std::int64_t parameter_count() const;

  /// Per-item embedding [B, emb_dim].
  Tensor condition(const std::vector<int>& t, const std::vector<diffusion::Direction>& d,
                   const std::vector<bool>& null_cond) const;

  /// Raw back-projected volumes [B, 2, D, D, D] for each attention level in
  /// resolved_attention_levels() order. CC latents fill channel 0, MLO latents
  /// channel 1.
  std::vector<Tensor> raw_volumes(const Tensor& lat_cc, const Tensor& lat_mlo) const;
  /// Refined volumes, one per attention level.
  std::vector<Tensor> refine_volumes(const std::vector<Tensor>& raw) const;

  /// z_t, z_ref: [B, in, S, S]; c_emb: [B, E]; f3d: refined volumes per
  /// attention level, or empty for the zero volume.
  Tensor forward(const Tensor& z_t, const Tensor& c_emb, const Tensor& z_ref, const std::vector<Tensor>& f3d) const;

  Tensor predict_noise(const diffusion::DenoiseInput& in) override;

  /// Replaces parameter values by name; every parameter must be supplied
  /// with its exact shape.
  void load(const std::map<std::string, Tensor>& tensors);

 private:
  struct Level {
    std::vector<ResBlockParams> enc, dec;
    Tensor down_w, down_b, up_w, up_b;
    bool attention = false;
    AttentionBlockParams enc_attn, dec_attn;
    Refine3DParams refine;
  };

  Tensor resblock(const Tensor& x, const Tensor& emb_act, const ResBlockParams& p) const;
  Tensor attend(const Tensor& h, const Tensor& ref, const Tensor& f3d, const AttentionBlockParams& p) const;

  UNetConfig config_;
  diffusion::ConditionParams cond_;
  Tensor in_w, in_b;
  std::vector<Level> levels_;
  ResBlockParams mid_;
  Tensor out_gn_g, out_gn_b, out_w, out_b;
};

}  // namespace ca3d::unet
