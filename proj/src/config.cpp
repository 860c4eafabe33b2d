#include "probeguide/config.hpp"

#include <cstdio>
#include <fstream>

#include "probeguide/errors.hpp"

namespace probeguide {

using nlohmann::json;

void EncoderConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (grid() < 2) throw ConfigError("patch grid must be at least 2x2");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (predictor_dim <= 0 || predictor_heads <= 0 || predictor_dim % predictor_heads != 0) {
    throw ConfigError("predictor_dim must be divisible by predictor_heads");
  }
  if (embed_dim % 4 != 0 || predictor_dim % 4 != 0) throw ConfigError("widths must be multiples of 4 for 2D sin-cos embeddings");
  if (depth < 1 || predictor_depth < 1 || motion_hidden < 1 || mlp_ratio <= 0.0) throw ConfigError("bad encoder depth/width");
}

std::string to_string(PretrainMode mode) {
  switch (mode) {
    case PretrainMode::Spatial: return "spatial";
    case PretrainMode::Motion: return "motion";
    case PretrainMode::Joint: return "joint";
  }
  return "joint";
}

PretrainMode pretrain_mode_from_string(const std::string& s) {
  if (s == "spatial") return PretrainMode::Spatial;
  if (s == "motion") return PretrainMode::Motion;
  if (s == "joint") return PretrainMode::Joint;
  throw ConfigError("unknown pretrain mode '" + s + "'");
}

void PretrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || pairs_per_scan < 1) throw ConfigError("pretrain epochs/batch/pairs must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs outside [0, epochs]");
  if (!(lr > 0.0) || final_lr < 0.0 || weight_decay < 0.0) throw ConfigError("bad pretrain learning rate or weight decay");
  if (!(ema_start > 0.0 && ema_start <= 1.0)) throw ConfigError("ema_start must be in (0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (lambda_motion < 0.0) throw ConfigError("lambda_motion must be non-negative");
  if (spatial_reduction != "mean" && spatial_reduction != "sum") throw ConfigError("spatial_reduction must be mean or sum");
  if (mask.blocks < 1 || !(mask.scale_min > 0.0 && mask.scale_min <= mask.scale_max && mask.scale_max < 1.0) ||
      !(mask.aspect_min > 0.0 && mask.aspect_min <= mask.aspect_max) ||
      !(mask.extra_drop_max >= 0.0 && mask.extra_drop_max < 1.0)) {
    throw ConfigError("bad mask configuration");
  }
}

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::SingleFrame: return "single-frame";
    case Aggregator::MotionAware: return "motion-aware";
    case Aggregator::NoMotion: return "no-motion";
    case Aggregator::Gru: return "gru";
  }
  return "single-frame";
}

Aggregator aggregator_from_string(const std::string& s) {
  if (s == "single-frame") return Aggregator::SingleFrame;
  if (s == "motion-aware") return Aggregator::MotionAware;
  if (s == "no-motion") return Aggregator::NoMotion;
  if (s == "gru") return Aggregator::Gru;
  throw ConfigError("unknown aggregator '" + s + "'");
}

void FinetuneConfig::validate() const {
  if (iterations < 1 || batch_single < 1 || batch_sequential < 1) throw ConfigError("finetune iterations/batches must be positive");
  if (!(lr > 0.0) || final_lr < 0.0 || weight_decay < 0.0) throw ConfigError("bad finetune learning rate or weight decay");
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("layer_decay must be in (0, 1]");
  if (!(drop_path >= 0.0 && drop_path < 1.0)) throw ConfigError("drop_path must be in [0, 1)");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0, 1)");
  if (brightness < 0.0 || contrast < 0.0) throw ConfigError("augmentation ranges must be non-negative");
  if (attention_heads < 1 || attention_depth < 1 || head_hidden < 1 || eval_every < 1) throw ConfigError("bad attention/head shape");
}

void ProtocolConfig::validate() const {
  if (!(single_fps > 0.0) || !(sequential_fps > 0.0)) throw ConfigError("protocol fps must be positive");
  if (history < 1 || !(alpha > 0.0)) throw ConfigError("history must be >= 1 and alpha > 0");
}

void DataConfig::validate() const {
  image.validate();
  trajectory.validate();
  if (phantom.resolution < 32) throw ConfigError("phantom resolution below 32");
  if (train_scans < 1 || test_scans < 1) throw ConfigError("need at least one train and one test scan");
}

void ExperimentConfig::validate() const {
  data.validate();
  encoder.validate();
  pretrain.validate();
  finetune.validate();
  protocol.validate();
  if (data.image.height != encoder.image_size || data.image.width != encoder.image_size) {
    throw ConfigError("image size " + std::to_string(data.image.height) + "x" + std::to_string(data.image.width) +
                      " does not match encoder image_size " + std::to_string(encoder.image_size));
  }
  if (encoder.embed_dim % finetune.attention_heads != 0) throw ConfigError("embed_dim must be divisible by attention_heads");
  if (protocol.single_fps > data.trajectory.fps || protocol.sequential_fps > data.trajectory.fps) {
    throw ConfigError("protocol fps exceeds the scan frame rate");
  }
}

ExperimentConfig preset_config(const std::string& preset) {
  ExperimentConfig c;
  c.preset = preset;
  if (preset == "toy") return c;
  if (preset != "paper") throw ConfigError("unknown preset '" + preset + "'");
  c.data.image.height = c.data.image.width = 224;
  c.data.train_scans = 284;
  c.data.test_scans = 72;
  c.encoder.image_size = 224;
  c.encoder.patch_size = 16;
  c.encoder.embed_dim = 384;
  c.encoder.depth = 12;
  c.encoder.heads = 6;
  c.encoder.predictor_dim = 384;
  c.encoder.predictor_heads = 6;
  c.encoder.motion_hidden = 384;
  c.pretrain.epochs = 300;
  c.pretrain.warmup_epochs = 40;
  c.pretrain.batch_size = 1024;
  c.finetune.iterations = 15000;
  c.finetune.batch_single = 256;
  c.finetune.batch_sequential = 64;
  c.finetune.head_hidden = 384;
  return c;
}

namespace {

json to_json(const PhantomConfig& p) {
  return {{"resolution", p.resolution}, {"extent_mm", p.extent_mm}, {"background", p.background}, {"texture", p.texture}};
}

json to_json(const TrajectoryConfig& t) {
  json order = json::array();
  for (PlaneId id : t.visit_order) order.push_back(std::string(plane_name(id)));
  return {{"duration", t.duration},
          {"fps", t.fps},
          {"visit_order", order},
          {"jitter_trans_mm", t.jitter_trans_mm},
          {"jitter_rot_deg", t.jitter_rot_deg},
          {"smoothing_window", t.smoothing_window}};
}

json to_json(const MaskConfig& m) {
  return {{"blocks", m.blocks},         {"scale_min", m.scale_min},   {"scale_max", m.scale_max},
          {"aspect_min", m.aspect_min}, {"aspect_max", m.aspect_max}, {"extra_drop_max", m.extra_drop_max}};
}

/// Rejects keys in `patch` that do not exist in `base`, recursively.
void check_keys(const json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + key + "'");
    if (base.at(key).is_object()) check_keys(base.at(key), value, where + key + ".");
  }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const auto& e = c.encoder;
  const auto& p = c.pretrain;
  const auto& f = c.finetune;
  return {
      {"preset", c.preset},
      {"data",
       {{"phantom", to_json(c.data.phantom)},
        {"image",
         {{"height", c.data.image.height},
          {"width", c.data.image.width},
          {"extent_mm", c.data.image.extent_mm},
          {"noise", c.data.image.noise}}},
        {"trajectory", to_json(c.data.trajectory)},
        {"train_scans", c.data.train_scans},
        {"test_scans", c.data.test_scans},
        {"seed", c.data.seed}}},
      {"encoder",
       {{"image_size", e.image_size},
        {"patch_size", e.patch_size},
        {"embed_dim", e.embed_dim},
        {"depth", e.depth},
        {"heads", e.heads},
        {"mlp_ratio", e.mlp_ratio},
        {"predictor_depth", e.predictor_depth},
        {"predictor_dim", e.predictor_dim},
        {"predictor_heads", e.predictor_heads},
        {"motion_hidden", e.motion_hidden}}},
      {"pretrain",
       {{"mode", to_string(p.mode)},
        {"epochs", p.epochs},
        {"warmup_epochs", p.warmup_epochs},
        {"batch_size", p.batch_size},
        {"pairs_per_scan", p.pairs_per_scan},
        {"lr", p.lr},
        {"final_lr", p.final_lr},
        {"weight_decay", p.weight_decay},
        {"beta1", p.beta1},
        {"beta2", p.beta2},
        {"ema_start", p.ema_start},
        {"lambda_motion", p.lambda_motion},
        {"tau", p.tau},
        {"symmetric_nce", p.symmetric_nce},
        {"spatial_reduction", p.spatial_reduction},
        {"mask", to_json(p.mask)},
        {"seed", p.seed}}},
      {"finetune",
       {{"iterations", f.iterations},
        {"batch_single", f.batch_single},
        {"batch_sequential", f.batch_sequential},
        {"lr", f.lr},
        {"final_lr", f.final_lr},
        {"weight_decay", f.weight_decay},
        {"layer_decay", f.layer_decay},
        {"drop_path", f.drop_path},
        {"warmup_fraction", f.warmup_fraction},
        {"brightness", f.brightness},
        {"contrast", f.contrast},
        {"attention_heads", f.attention_heads},
        {"attention_depth", f.attention_depth},
        {"head_hidden", f.head_hidden},
        {"eval_every", f.eval_every},
        {"seed", f.seed}}},
      {"protocol",
       {{"single_fps", c.protocol.single_fps},
        {"sequential_fps", c.protocol.sequential_fps},
        {"history", c.protocol.history},
        {"alpha", c.protocol.alpha}}},
  };
}

ExperimentConfig config_from_json(const json& patch) {
  if (!patch.is_object()) throw ConfigError("config must be a JSON object");
  std::string preset = "toy";
  if (patch.contains("preset")) get(patch, "preset", preset);
  const ExperimentConfig base = preset_config(preset);
  json merged = to_json(base);
  check_keys(merged, patch, "");
  merged.merge_patch(patch);

  ExperimentConfig c = base;
  const json& d = merged.at("data");
  get(d.at("phantom"), "resolution", c.data.phantom.resolution);
  get(d.at("phantom"), "extent_mm", c.data.phantom.extent_mm);
  get(d.at("phantom"), "background", c.data.phantom.background);
  get(d.at("phantom"), "texture", c.data.phantom.texture);
  get(d.at("image"), "height", c.data.image.height);
  get(d.at("image"), "width", c.data.image.width);
  get(d.at("image"), "extent_mm", c.data.image.extent_mm);
  get(d.at("image"), "noise", c.data.image.noise);
  const json& t = d.at("trajectory");
  get(t, "duration", c.data.trajectory.duration);
  get(t, "fps", c.data.trajectory.fps);
  get(t, "jitter_trans_mm", c.data.trajectory.jitter_trans_mm);
  get(t, "jitter_rot_deg", c.data.trajectory.jitter_rot_deg);
  get(t, "smoothing_window", c.data.trajectory.smoothing_window);
  std::vector<std::string> order;
  get(t, "visit_order", order);
  c.data.trajectory.visit_order.clear();
  for (const auto& name : order) {
    const auto id = plane_from_name(name);
    if (!id) throw ConfigError("unknown plane '" + name + "' in visit_order");
    c.data.trajectory.visit_order.push_back(*id);
  }
  get(d, "train_scans", c.data.train_scans);
  get(d, "test_scans", c.data.test_scans);
  get(d, "seed", c.data.seed);

  const json& e = merged.at("encoder");
  get(e, "image_size", c.encoder.image_size);
  get(e, "patch_size", c.encoder.patch_size);
  get(e, "embed_dim", c.encoder.embed_dim);
  get(e, "depth", c.encoder.depth);
  get(e, "heads", c.encoder.heads);
  get(e, "mlp_ratio", c.encoder.mlp_ratio);
  get(e, "predictor_depth", c.encoder.predictor_depth);
  get(e, "predictor_dim", c.encoder.predictor_dim);
  get(e, "predictor_heads", c.encoder.predictor_heads);
  get(e, "motion_hidden", c.encoder.motion_hidden);

  const json& p = merged.at("pretrain");
  std::string mode;
  get(p, "mode", mode);
  c.pretrain.mode = pretrain_mode_from_string(mode);
  get(p, "epochs", c.pretrain.epochs);
  get(p, "warmup_epochs", c.pretrain.warmup_epochs);
  get(p, "batch_size", c.pretrain.batch_size);
  get(p, "pairs_per_scan", c.pretrain.pairs_per_scan);
  get(p, "lr", c.pretrain.lr);
  get(p, "final_lr", c.pretrain.final_lr);
  get(p, "weight_decay", c.pretrain.weight_decay);
  get(p, "beta1", c.pretrain.beta1);
  get(p, "beta2", c.pretrain.beta2);
  get(p, "ema_start", c.pretrain.ema_start);
  get(p, "lambda_motion", c.pretrain.lambda_motion);
  get(p, "tau", c.pretrain.tau);
  get(p, "symmetric_nce", c.pretrain.symmetric_nce);
  get(p, "spatial_reduction", c.pretrain.spatial_reduction);
  const json& m = p.at("mask");
  get(m, "blocks", c.pretrain.mask.blocks);
  get(m, "scale_min", c.pretrain.mask.scale_min);
  get(m, "scale_max", c.pretrain.mask.scale_max);
  get(m, "aspect_min", c.pretrain.mask.aspect_min);
  get(m, "aspect_max", c.pretrain.mask.aspect_max);
  get(m, "extra_drop_max", c.pretrain.mask.extra_drop_max);
  get(p, "seed", c.pretrain.seed);

  const json& f = merged.at("finetune");
  get(f, "iterations", c.finetune.iterations);
  get(f, "batch_single", c.finetune.batch_single);
  get(f, "batch_sequential", c.finetune.batch_sequential);
  get(f, "lr", c.finetune.lr);
  get(f, "final_lr", c.finetune.final_lr);
  get(f, "weight_decay", c.finetune.weight_decay);
  get(f, "layer_decay", c.finetune.layer_decay);
  get(f, "drop_path", c.finetune.drop_path);
  get(f, "warmup_fraction", c.finetune.warmup_fraction);
  get(f, "brightness", c.finetune.brightness);
  get(f, "contrast", c.finetune.contrast);
  get(f, "attention_heads", c.finetune.attention_heads);
  get(f, "attention_depth", c.finetune.attention_depth);
  get(f, "head_hidden", c.finetune.head_hidden);
  get(f, "eval_every", c.finetune.eval_every);
  get(f, "seed", c.finetune.seed);

  const json& pr = merged.at("protocol");
  get(pr, "single_fps", c.protocol.single_fps);
  get(pr, "sequential_fps", c.protocol.sequential_fps);
  get(pr, "history", c.protocol.history);
  get(pr, "alpha", c.protocol.alpha);

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (path.empty()) return config_from_json(json::object());
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(json::object());
  try {
    return config_from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string canonical_text(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(canonical_text(c)); }

}  // namespace probeguide
