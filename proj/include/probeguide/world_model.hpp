#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "probeguide/config.hpp"
#include "probeguide/nn.hpp"
#include "probeguide/rng.hpp"
#include "probeguide/scan.hpp"

namespace probeguide {

/// Masked (M) and visible (V) patch cells of one image, as sorted row-major indices.
struct MaskSpec {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int64_t> masked;
  std::vector<int64_t> visible;

  void validate() const;
};

/// Four aspect-jittered rectangles plus a random extra drop from the visible set.
/// Draws are retried until V is non-empty and |M| / grid lies in [0.15, 0.85].
MaskSpec block_mask(int grid_h, int grid_w, const MaskConfig& config, Rng& rng);

/// Per-batch index tensors; every sample keeps the batch-minimum counts of V and M.
struct MaskBatch {
  torch::Tensor visible;  // [B, V] int64
  torch::Tensor masked;   // [B, M] int64
};

MaskBatch collate_masks(const std::vector<MaskSpec>& masks, Rng& rng);

/// Every cell visible, nothing masked (motion-only context).
MaskBatch full_context(int64_t batch, int cells);

class PredictorImpl : public torch::nn::Module {
 public:
  explicit PredictorImpl(const EncoderConfig& config);

  /// Features at the masked cells, [B, M, D].
  torch::Tensor spatial(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& masked);

  /// Feature predicted for the motion token, [B, D]; z is [B, predictor_dim].
  torch::Tensor motion(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& z);

  torch::nn::Linear in_proj{nullptr};
  torch::Tensor mask_token;
  torch::Tensor pos;
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear out_proj{nullptr};

 private:
  torch::Tensor run(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& queries);
};
TORCH_MODULE(Predictor);

/// Context/target encoders, predictor, motion encoder and the online/EMA projectors.
class WorldModelImpl : public torch::nn::Module {
 public:
  explicit WorldModelImpl(const EncoderConfig& config);

  /// h_x over the visible cells.
  torch::Tensor encode_context(const torch::Tensor& images, const torch::Tensor& visible = {});

  /// h_y over the full grid, without gradient tracking.
  torch::Tensor encode_target(const torch::Tensor& images);

  torch::Tensor encode_motion(const torch::Tensor& motion) { return motion_encoder(motion); }

  /// Online parameters: context encoder, predictor, motion encoder, projector.
  std::vector<torch::Tensor> online_parameters() const;

  const EncoderConfig& config() const { return config_; }

  VisionTransformer context{nullptr};
  VisionTransformer target{nullptr};
  Predictor predictor{nullptr};
  MotionEncoder motion_encoder{nullptr};
  Projector projector{nullptr};
  Projector projector_ema{nullptr};

 private:
  EncoderConfig config_;
};
TORCH_MODULE(WorldModel);

/// d = 1 - (1 - start) * (1 + cos(pi * step / total)) / 2.
double ema_decay(std::int64_t step, std::int64_t total, double start = 0.996);

/// theta' <- d theta' + (1 - d) theta for the target encoder and the EMA projector.
double ema_update(WorldModelImpl& model, std::int64_t step, std::int64_t total, double start = 0.996);

/// Smoothed L1 (beta = 1) between predictions [B, M, D] and the target features of
/// the masked cells, gathered from the full-grid targets [B, G, D]. "sum" sums over
/// cells and channels and averages over the batch; "mean" averages over everything.
torch::Tensor spatial_loss(const torch::Tensor& pred, const torch::Tensor& target_full, const torch::Tensor& masked,
                           const std::string& reduction = "sum");

/// Mean cross-entropy of matching each L2-normalized prediction to its own target
/// among the batch, logits p.t / tau. Symmetric adds the transposed term and halves.
torch::Tensor info_nce(const torch::Tensor& preds, const torch::Tensor& targets, double tau = 0.1,
                       bool symmetric = false);

/// (I_a, p_{a->b}, I_b) triples.
struct PretrainBatch {
  torch::Tensor images_a;  // [B, 1, H, W]
  torch::Tensor images_b;
  torch::Tensor motion;  // [B, 6] normalized p_{a->b}
};

struct StepLosses {
  torch::Tensor spatial;  // zero when the mode has no spatial term
  torch::Tensor motion;
  torch::Tensor total;
};

/// Forward pass of one pre-training step. Spatial and joint modes encode the masked
/// context once; motion mode uses the unmasked context.
StepLosses compute_losses(WorldModelImpl& model, const PretrainBatch& batch, const MaskBatch& masks,
                          const PretrainConfig& config);

/// Uint8 frames of a scan as one tensor, so batches avoid per-step conversion.
struct ScanTensor {
  const Scan* scan = nullptr;
  torch::Tensor frames;  // [F, 1, H, W] uint8
};

ScanTensor to_scan_tensor(const Scan& scan);

/// Samples `batch` pairs uniformly from the pool of (scan, a, b) triples.
PretrainBatch make_pretrain_batch(const std::vector<ScanTensor>& scans,
                                  const std::vector<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>>& pairs);

struct PretrainOptions {
  bool resume = false;
  /// Stop after this many optimizer steps in this call (tests); -1 runs to the end.
  std::int64_t max_steps = -1;
  bool quiet = false;
};

struct PretrainSummary {
  std::int64_t steps = 0;
  std::int64_t total_steps = 0;
  double first_spatial = 0.0;  // mean over the first epoch
  double last_spatial = 0.0;   // mean over the last epoch run
  double last_total = 0.0;
};

/// Trains the world model and writes a checkpoint directory:
///   params.pt   model and optimizer state
///   meta.json   {"kind", "step", "total_steps", "config_hash", "rng"}
///   config.json canonical config
///   train_log.csv step,l_spatial,l_motion,l_total,lr,ema_decay
PretrainSummary pretrain(const ExperimentConfig& config, const std::vector<Scan>& scans,
                         const std::filesystem::path& out_dir, const PretrainOptions& options = {});

/// Loads the model from a complete pre-training checkpoint. The architecture comes from
/// the checkpoint's own config, whose hash must match meta.json (and `expected_hash` if given).
WorldModel load_world_model(const std::filesystem::path& dir,
                            const std::optional<std::string>& expected_hash = std::nullopt);

}  // namespace probeguide
