#pragma once

#include <array>
#include <vector>

#include <torch/torch.h>

#include "probeguide/config.hpp"
#include "probeguide/image.hpp"
#include "probeguide/pose.hpp"

namespace probeguide {

/// Single CPU thread and deterministic kernels; call once per process before training.
void init_torch_runtime();

/// Fixed 2D sin-cos positional embedding, [grid * grid, dim], row-major cells.
torch::Tensor sincos_2d(int dim, int grid);

/// Per-sample stochastic depth. Identity in eval mode or for p = 0.
torch::Tensor drop_path(const torch::Tensor& x, double p, bool training);

/// Pre-norm transformer block: x + MHSA(LN(x)), x + MLP(LN(x)).
class BlockImpl : public torch::nn::Module {
 public:
  BlockImpl(int dim, int heads, double mlp_ratio, double drop_path = 0.0);
  torch::Tensor forward(const torch::Tensor& x);

  double drop_path_rate = 0.0;

  torch::nn::LayerNorm norm1{nullptr};
  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};

 private:
  int heads_;
};
TORCH_MODULE(Block);

/// Pixel normalization applied by the encoder to [0, 1] intensities.
inline constexpr double kPixelMean = 0.35;
inline constexpr double kPixelStd = 0.25;

/// Vision transformer over single-channel images with a linear patch embedding.
class VisionTransformerImpl : public torch::nn::Module {
 public:
  explicit VisionTransformerImpl(const EncoderConfig& config);

  /// [B, 1, H, W] -> [B, grid*grid, patch*patch]
  torch::Tensor patchify(const torch::Tensor& images) const;

  /// Token features [B, K, D]. When `keep` ([B, K] cell indices) is given only those
  /// patches are embedded and encoded; the others are removed, not zeroed.
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& keep = {});

  /// Linearly increasing stochastic depth, reaching `rate` at the last block.
  void set_drop_path(double rate);

  const EncoderConfig& config() const { return config_; }

  torch::nn::Linear patch_embed{nullptr};
  torch::Tensor pos;
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm norm{nullptr};

 private:
  EncoderConfig config_;
};
TORCH_MODULE(VisionTransformer);

/// Motion input scaling: millimetres / 50 and degrees / 90, clipped to [-2, 2].
inline constexpr double kMotionTransScale = 50.0;
inline constexpr double kMotionRotScale = 90.0;
inline constexpr double kMotionClip = 2.0;

std::array<double, 6> normalize_motion(const Pose& p);
Pose denormalize_motion(const std::array<double, 6>& v);
torch::Tensor motion_tensor(const std::vector<Pose>& poses);

/// x W^T + b computed in fixed 16-row batched products, so every row's result is
/// independent of how many other rows share the call.
torch::Tensor stable_linear(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias);
torch::Tensor stable_linear(const torch::Tensor& x, const torch::nn::Linear& layer);

/// Two-layer MLP from a normalized relative pose to a motion feature.
class MotionEncoderImpl : public torch::nn::Module {
 public:
  MotionEncoderImpl(int hidden, int out_dim);
  torch::Tensor forward(const torch::Tensor& motion);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(MotionEncoder);

/// Linear(D, 2D), GELU, Linear(2D, D).
class ProjectorImpl : public torch::nn::Module {
 public:
  explicit ProjectorImpl(int dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(Projector);

/// Frames as a [B, 1, H, W] float tensor in [0, 1].
torch::Tensor images_to_tensor(const std::vector<const GrayImage*>& images);

/// Linear warmup from 0 to `peak`, then cosine decay to `final_value` at `total`.
double warmup_cosine(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak, double final_value);

/// Two AdamW parameter groups: matrices with weight decay, biases/norms/1-D tensors without.
std::vector<torch::optim::OptimizerParamGroup> decay_groups(const std::vector<torch::Tensor>& params, double lr,
                                                             double weight_decay);

/// Copies every parameter and buffer of `src` into `dst` (identical architectures).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

/// FNV-1a over the raw bytes of every parameter, for change detection in tests.
std::uint64_t parameter_hash(const torch::nn::Module& m);

}  // namespace probeguide
