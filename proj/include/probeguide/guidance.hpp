#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "probeguide/config.hpp"
#include "probeguide/nn.hpp"
#include "probeguide/rng.hpp"
#include "probeguide/scan_store.hpp"
#include "probeguide/world_model.hpp"

namespace probeguide {

/// Softmax over the last dim with its normalizer summed in sorted order; the result
/// does not depend on the order of the entries.
torch::Tensor order_free_softmax(const torch::Tensor& logits);

/// Sum over `dim` in sorted order.
torch::Tensor order_free_sum(const torch::Tensor& x, int64_t dim);

/// Two-layer perceptron whose layers use stable_linear.
class AttentionMlpImpl : public torch::nn::Module {
 public:
  AttentionMlpImpl(int in_dim, int out_dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(AttentionMlp);

/// Attention where query i owns keys/values built from (h_j, z_{i->j}).
class MotionAwareAttentionImpl : public torch::nn::Module {
 public:
  MotionAwareAttentionImpl(int dim, int motion_dim, int heads);

  /// h [B, N, D], z [B, N, N, Dz] with z[:, i, j] = z_{i->j}. Returns O [B, N, D].
  /// When `scores` is given it receives the attention weights [B, heads, N, N].
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& z, torch::Tensor* scores = nullptr);

  /// Scaled dot-product attention with keys/values shared by every query. Without
  /// `augment` only the frame slice of the first key/value layer is used; with it, each
  /// key/value input is (h_j, augment).
  torch::Tensor standard(const torch::Tensor& h, const torch::Tensor& augment = {}, torch::Tensor* scores = nullptr);

  int heads() const { return heads_; }
  int dim() const { return dim_; }

  AttentionMlp q{nullptr};
  AttentionMlp k{nullptr};
  AttentionMlp v{nullptr};

 private:
  torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, torch::Tensor* scores);

  int dim_;
  int motion_dim_;
  int heads_;
};
TORCH_MODULE(MotionAwareAttention);

/// Ten independent two-layer heads, one 6-vector of normalized movement per plane.
class PlaneHeadsImpl : public torch::nn::Module {
 public:
  PlaneHeadsImpl(int dim, int hidden);
  /// [B, D] -> [B, 10, 6]
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ModuleList heads;
};
TORCH_MODULE(PlaneHeads);

/// Normalized prediction [10, 6] -> poses in mm/degrees, clamped to the normalization range.
Movements denormalize_movements(const torch::Tensor& pred);

/// Targets [B, 10, 6] and masks [B, 10] for a batch of plane targets.
std::pair<torch::Tensor, torch::Tensor> targets_to_tensors(const std::vector<PlaneTargets>& targets);

/// Mean absolute error over the 6 normalized components and the masked-in planes of
/// each sample, averaged over samples with a non-empty mask. Rotation differences are
/// wrapped to (-180, 180] degrees before normalizing.
torch::Tensor guidance_loss(const torch::Tensor& pred, const torch::Tensor& targets, const torch::Tensor& mask);

/// Encoder, motion encoder, aggregator and plane heads for one protocol.
class GuidanceModelImpl : public torch::nn::Module {
 public:
  GuidanceModelImpl(const EncoderConfig& encoder, const FinetuneConfig& finetune, Aggregator aggregator);

  /// Average-pooled frame features [M, D].
  torch::Tensor frame_features(const torch::Tensor& images);

  /// Motion features for normalized relative poses [..., 6].
  torch::Tensor motion_features(const torch::Tensor& motion) { return motion_encoder(motion); }

  /// Aggregated feature for the current (last) frame [B, D], from h [B, N, D] and
  /// normalized pairwise motion [B, N, N, 6].
  torch::Tensor aggregate(const torch::Tensor& h, const torch::Tensor& motion, torch::Tensor* scores = nullptr);

  /// Normalized movements [B, 10, 6].
  torch::Tensor forward_single(const torch::Tensor& images);
  torch::Tensor forward_sequence(const torch::Tensor& h, const torch::Tensor& motion);

  /// Copies the pre-trained context encoder and motion encoder.
  void load_pretrained(WorldModelImpl& world);

  /// Parameter groups for layer-wise learning-rate decay, each with its lr multiplier.
  std::vector<std::pair<std::vector<torch::Tensor>, double>> layer_groups(double layer_decay) const;

  Aggregator aggregator() const { return aggregator_; }
  const EncoderConfig& encoder_config() const { return encoder_config_; }

  VisionTransformer encoder{nullptr};
  MotionEncoder motion_encoder{nullptr};
  MotionAwareAttention attention{nullptr};
  torch::nn::ModuleList attention_layers{nullptr};
  torch::nn::Linear gru_visual{nullptr};
  torch::nn::Linear gru_motion{nullptr};
  torch::nn::GRU gru{nullptr};
  PlaneHeads heads{nullptr};

 private:
  EncoderConfig encoder_config_;
  Aggregator aggregator_;
};
TORCH_MODULE(GuidanceModel);

/// New model for the aggregator; a non-empty `init` copies the pre-trained context
/// encoder and motion encoder from that world-model checkpoint.
GuidanceModel make_guidance_model(const ExperimentConfig& config, Aggregator aggregator,
                                  const std::filesystem::path& init = {});

/// Single-layer GRU over [proj_v(h_i), proj_m(A(p_{i-1 -> i}))], zero motion at the first step.
torch::Tensor gru_aggregate(GuidanceModelImpl& model, const torch::Tensor& h, const torch::Tensor& motion);

/// Normalized pairwise motion [N, N, 6] of a sample.
torch::Tensor pairwise_motion_tensor(const GuidanceSample& sample);

/// Random brightness and contrast, one draw per sample, applied to [B, ...] images.
torch::Tensor augment_images(const torch::Tensor& images, double brightness, double contrast, Rng& rng);

enum class Protocol { Single, Sequential };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct FinetuneOptions {
  /// Pre-training checkpoint; empty trains from scratch.
  std::filesystem::path init;
  Aggregator aggregator = Aggregator::MotionAware;
  /// Scans used only to log a validation loss; never trained on.
  const std::vector<Scan>* validation = nullptr;
  bool resume = false;
  /// Stop after this many iterations in this call; -1 runs to the end.
  std::int64_t max_iterations = -1;
  bool quiet = false;
};

struct FinetuneSummary {
  std::int64_t iterations = 0;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
};

/// Fine-tunes a guidance model and writes a checkpoint directory with params.pt,
/// meta.json, config.json and finetune_log.csv (iteration,loss,lr,val_loss).
FinetuneSummary finetune(const ExperimentConfig& config, const std::vector<Scan>& train, Protocol protocol,
                         const std::filesystem::path& out_dir, const FinetuneOptions& options = {});

struct LoadedGuidance {
  GuidanceModel model{nullptr};
  Protocol protocol = Protocol::Single;
  ExperimentConfig config;
};

LoadedGuidance load_guidance_model(const std::filesystem::path& dir);

/// Attention scores of the first attention layer, one PNG and one CSV per head.
void dump_attention(GuidanceModelImpl& model, const GuidanceSample& sample, const std::filesystem::path& dir);

}  // namespace probeguide
