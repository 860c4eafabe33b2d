#include "probeguide/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "probeguide/errors.hpp"

namespace probeguide {

void init_torch_runtime() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

torch::Tensor sincos_2d(int dim, int grid) {
  const int quarter = dim / 4;
  auto omega = torch::arange(quarter, torch::kFloat64) / static_cast<double>(quarter);
  omega = 1.0 / torch::pow(10000.0, omega);
  auto coords = torch::arange(grid, torch::kFloat64);
  auto rows = coords.repeat_interleave(grid);  // cell // grid
  auto cols = coords.repeat({grid});           // cell % grid
  auto out_r = torch::outer(rows, omega);
  auto out_c = torch::outer(cols, omega);
  return torch::cat({torch::sin(out_r), torch::cos(out_r), torch::sin(out_c), torch::cos(out_c)}, 1).to(torch::kFloat32);
}

torch::Tensor drop_path(const torch::Tensor& x, double p, bool training) {
  if (p <= 0.0 || !training) return x;
  const double keep = 1.0 - p;
  std::vector<int64_t> shape(static_cast<std::size_t>(x.dim()), 1);
  shape[0] = x.size(0);
  auto mask = torch::bernoulli(torch::full(shape, keep, x.options()));
  return x * mask / keep;
}

BlockImpl::BlockImpl(int dim, int heads, double mlp_ratio, double drop_path) : drop_path_rate(drop_path), heads_(heads) {
  const int hidden = static_cast<int>(dim * mlp_ratio);
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto t = x.size(1);
  const auto d = x.size(2);
  const auto hd = d / heads_;
  auto qkv_out = qkv(norm1(x)).reshape({b, t, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0];
  auto k = qkv_out[1];
  auto v = qkv_out[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, t, d});
  auto h = x + drop_path(proj(y), drop_path_rate, is_training());
  return h + drop_path(fc2(torch::gelu(fc1(norm2(h)))), drop_path_rate, is_training());
}

VisionTransformerImpl::VisionTransformerImpl(const EncoderConfig& config) : config_(config) {
  config.validate();
  const int p = config.patch_size;
  patch_embed = register_module("patch_embed", torch::nn::Linear(p * p, config.embed_dim));
  pos = register_buffer("pos", sincos_2d(config.embed_dim, config.grid()));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config.depth; ++i) blocks->push_back(Block(config.embed_dim, config.heads, config.mlp_ratio));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.embed_dim}).eps(1e-6)));
}

torch::Tensor VisionTransformerImpl::patchify(const torch::Tensor& images) const {
  const int g = config_.grid();
  const int p = config_.patch_size;
  if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != config_.image_size ||
      images.size(3) != config_.image_size) {
    throw ConfigError("encoder expects [B, 1, " + std::to_string(config_.image_size) + ", " +
                      std::to_string(config_.image_size) + "] images");
  }
  return images.reshape({images.size(0), g, p, g, p}).permute({0, 1, 3, 2, 4}).reshape({images.size(0), g * g, p * p});
}

torch::Tensor VisionTransformerImpl::forward(const torch::Tensor& images, const torch::Tensor& keep) {
  auto x = patch_embed((patchify(images) - kPixelMean) / kPixelStd) + pos.to(images.dtype());
  if (keep.defined()) {
    if (keep.dim() != 2 || keep.size(0) != images.size(0)) throw ConfigError("keep indices must be [B, K]");
    x = torch::gather(x, 1, keep.unsqueeze(-1).expand({keep.size(0), keep.size(1), x.size(2)}));
  }
  for (const auto& block : *blocks) x = block->as<Block>()->forward(x);
  return norm(x);
}

void VisionTransformerImpl::set_drop_path(double rate) {
  const auto n = static_cast<double>(blocks->size());
  for (std::size_t i = 0; i < blocks->size(); ++i) {
    blocks[i]->as<Block>()->drop_path_rate = n > 1 ? rate * static_cast<double>(i) / (n - 1) : rate;
  }
}

std::array<double, 6> normalize_motion(const Pose& p) {
  const auto v = p.as_array();
  std::array<double, 6> out{};
  for (int i = 0; i < 6; ++i) {
    const double scale = i < 3 ? kMotionTransScale : kMotionRotScale;
    out[static_cast<std::size_t>(i)] = std::clamp(v[static_cast<std::size_t>(i)] / scale, -kMotionClip, kMotionClip);
  }
  return out;
}

Pose denormalize_motion(const std::array<double, 6>& v) {
  std::array<double, 6> out{};
  for (int i = 0; i < 6; ++i) {
    out[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)] * (i < 3 ? kMotionTransScale : kMotionRotScale);
  }
  return Pose::from_array(out);
}

torch::Tensor motion_tensor(const std::vector<Pose>& poses) {
  auto out = torch::empty({static_cast<int64_t>(poses.size()), 6}, torch::kFloat32);
  auto acc = out.accessor<float, 2>();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const auto v = normalize_motion(poses[i]);
    for (int k = 0; k < 6; ++k) acc[static_cast<int64_t>(i)][k] = static_cast<float>(v[static_cast<std::size_t>(k)]);
  }
  return out;
}

constexpr int64_t kStableChunk = 16;

torch::Tensor stable_linear(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias) {
  const auto in = weight.size(1);
  const auto out = weight.size(0);
  if (x.size(-1) != in) throw ConfigError("linear input width mismatch");
  auto shape = x.sizes().vec();
  shape.back() = out;
  auto rows = x.reshape({-1, in});
  const auto r = rows.size(0);
  const auto n = (r + kStableChunk - 1) / kStableChunk;
  if (n * kStableChunk != r) rows = torch::cat({rows, torch::zeros({n * kStableChunk - r, in}, rows.options())}, 0);
  auto y = torch::bmm(rows.view({n, kStableChunk, in}), weight.t().unsqueeze(0).expand({n, in, out}));
  y = y.view({n * kStableChunk, out}).narrow(0, 0, r);
  if (bias.defined()) y = y + bias;
  return y.reshape(shape);
}

torch::Tensor stable_linear(const torch::Tensor& x, const torch::nn::Linear& layer) {
  return stable_linear(x, layer->weight, layer->bias);
}

MotionEncoderImpl::MotionEncoderImpl(int hidden, int out_dim) {
  fc1 = register_module("fc1", torch::nn::Linear(6, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, out_dim));
}

torch::Tensor MotionEncoderImpl::forward(const torch::Tensor& motion) {
  return stable_linear(torch::gelu(stable_linear(motion, fc1)), fc2);
}

ProjectorImpl::ProjectorImpl(int dim) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, 2 * dim));
  fc2 = register_module("fc2", torch::nn::Linear(2 * dim, dim));
}

torch::Tensor ProjectorImpl::forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }

torch::Tensor images_to_tensor(const std::vector<const GrayImage*>& images) {
  if (images.empty()) throw DataError("empty image batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  auto out = torch::empty({static_cast<int64_t>(images.size()), 1, h, w}, torch::kUInt8);
  auto* dst = out.data_ptr<std::uint8_t>();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) throw DataError("mixed image sizes in batch");
    std::copy(images[i]->pixels.begin(), images[i]->pixels.end(), dst + i * static_cast<std::size_t>(h * w));
  }
  return out.to(torch::kFloat32) / 255.0;
}

double warmup_cosine(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak, double final_value) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return final_value + (peak - final_value) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<torch::optim::OptimizerParamGroup> decay_groups(const std::vector<torch::Tensor>& params, double lr,
                                                             double weight_decay) {
  std::vector<torch::Tensor> decay;
  std::vector<torch::Tensor> no_decay;
  for (const auto& p : params) {
    if (!p.requires_grad()) continue;
    (p.dim() >= 2 ? decay : no_decay).push_back(p);
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  auto with_decay = std::make_unique<torch::optim::AdamWOptions>(lr);
  with_decay->weight_decay(weight_decay);
  auto without = std::make_unique<torch::optim::AdamWOptions>(lr);
  without->weight_decay(0.0);
  groups.emplace_back(decay, std::move(with_decay));
  groups.emplace_back(no_decay, std::move(without));
  return groups;
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto d = dst.named_parameters(true);
  for (const auto& item : src.named_parameters(true)) d[item.key()].copy_(item.value());
  auto db = dst.named_buffers(true);
  for (const auto& item : src.named_buffers(true)) db[item.key()].copy_(item.value());
}

std::uint64_t parameter_hash(const torch::nn::Module& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : m.parameters(true)) {
    const auto c = p.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    for (std::size_t i = 0; i < static_cast<std::size_t>(c.nbytes()); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace probeguide
