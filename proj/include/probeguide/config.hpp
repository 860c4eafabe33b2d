#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "probeguide/phantom.hpp"

namespace probeguide {

/// ViT encoder, predictor and motion-encoder shapes.
struct EncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 96;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int predictor_depth = 6;
  int predictor_dim = 96;
  int predictor_heads = 4;
  int motion_hidden = 192;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  void validate() const;
};

enum class PretrainMode { Spatial, Motion, Joint };

std::string to_string(PretrainMode mode);
PretrainMode pretrain_mode_from_string(const std::string& s);

struct MaskConfig {
  int blocks = 4;
  double scale_min = 0.15;
  double scale_max = 0.2;
  double aspect_min = 0.75;
  double aspect_max = 1.5;
  double extra_drop_max = 0.15;
};

struct PretrainConfig {
  PretrainMode mode = PretrainMode::Joint;
  int epochs = 30;
  int warmup_epochs = 4;
  int batch_size = 64;
  int pairs_per_scan = 32;
  double lr = 1e-3;
  double final_lr = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double ema_start = 0.996;
  double lambda_motion = 0.1;
  double tau = 0.1;
  bool symmetric_nce = false;
  /// "mean" averages the smoothed L1 over cells and channels, "sum" sums them per sample.
  std::string spatial_reduction = "mean";
  MaskConfig mask;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Aggregator { SingleFrame, MotionAware, NoMotion, Gru };

std::string to_string(Aggregator a);
Aggregator aggregator_from_string(const std::string& s);

struct FinetuneConfig {
  int iterations = 2000;
  int batch_single = 32;
  int batch_sequential = 16;
  double lr = 1e-4;
  double final_lr = 1e-6;
  double weight_decay = 0.05;
  double layer_decay = 0.65;
  double drop_path = 0.1;
  double warmup_fraction = 0.05;
  double brightness = 0.2;
  double contrast = 0.2;
  int attention_heads = 4;
  int attention_depth = 1;
  int head_hidden = 96;
  int eval_every = 250;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ProtocolConfig {
  double single_fps = 6.0;
  double sequential_fps = 3.0;
  int history = 8;
  double alpha = 0.4;

  void validate() const;
};

struct DataConfig {
  PhantomConfig phantom;
  ImageSpec image;
  TrajectoryConfig trajectory;
  int train_scans = 40;
  int test_scans = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ExperimentConfig {
  std::string preset = "toy";
  DataConfig data;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  ProtocolConfig protocol;

  void validate() const;
};

/// Preset defaults: "toy" (desk-scale) or "paper" (full-scale hyperparameters).
ExperimentConfig preset_config(const std::string& preset);

nlohmann::json to_json(const ExperimentConfig& c);

/// Merges the given overrides over the preset named by its "preset" key (default "toy").
/// Unknown keys throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Reads a config file; an empty or missing path yields the toy defaults.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical text form: sorted keys, two-space indent.
std::string canonical_text(const ExperimentConfig& c);

/// FNV-1a 64 of the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

std::string fnv1a_hex(const std::string& text);

}  // namespace probeguide
