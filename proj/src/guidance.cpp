#include "probeguide/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/image.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kBatchStream = 0x6261746368ULL;
constexpr std::uint64_t kValStream = 0x76616c6964ULL;
constexpr std::uint64_t kInitStream = 0x6674696e6974ULL;

}  // namespace

torch::Tensor order_free_sum(const torch::Tensor& x, int64_t dim) {
  auto moved = x.movedim(dim, -1);
  return std::get<0>(torch::sort(moved, -1)).contiguous().sum(-1);
}

torch::Tensor order_free_softmax(const torch::Tensor& logits) {
  const auto peak = std::get<0>(logits.max(-1, true)).detach();
  const auto e = torch::exp(logits - peak);
  return e / order_free_sum(e, -1).unsqueeze(-1);
}

AttentionMlpImpl::AttentionMlpImpl(int in_dim, int out_dim) {
  fc1 = register_module("fc1", torch::nn::Linear(in_dim, out_dim));
  fc2 = register_module("fc2", torch::nn::Linear(out_dim, out_dim));
}

torch::Tensor AttentionMlpImpl::forward(const torch::Tensor& x) {
  return stable_linear(torch::gelu(stable_linear(x, fc1)), fc2);
}

MotionAwareAttentionImpl::MotionAwareAttentionImpl(int dim, int motion_dim, int heads)
    : dim_(dim), motion_dim_(motion_dim), heads_(heads) {
  if (heads <= 0 || dim % heads != 0) throw ConfigError("attention width must split evenly into heads");
  q = register_module("q", AttentionMlp(dim, dim));
  k = register_module("k", AttentionMlp(dim + motion_dim, dim));
  v = register_module("v", AttentionMlp(dim + motion_dim, dim));
}

torch::Tensor MotionAwareAttentionImpl::attend(const torch::Tensor& query, const torch::Tensor& key,
                                               const torch::Tensor& value, torch::Tensor* scores) {
  const auto b = query.size(0);
  const auto n = query.size(1);
  const auto hd = dim_ / heads_;
  auto qh = query.reshape({b, n, 1, heads_, hd});
  auto kh = key.reshape({b, n, n, heads_, hd});
  auto vh = value.reshape({b, n, n, heads_, hd});
  auto logits = (qh * kh).sum(-1) / std::sqrt(static_cast<double>(hd));  // [B, i, j, H]
  auto attn = order_free_softmax(logits.permute({0, 3, 1, 2}));           // [B, H, i, j]
  if (scores) *scores = attn;
  auto weighted = attn.permute({0, 2, 3, 1}).unsqueeze(-1) * vh;  // [B, i, j, H, hd]
  return order_free_sum(weighted, 2).reshape({b, n, dim_});
}

torch::Tensor MotionAwareAttentionImpl::forward(const torch::Tensor& h, const torch::Tensor& z, torch::Tensor* scores) {
  if (h.dim() != 3 || h.size(2) != dim_) throw ConfigError("attention expects h [B, N, D]");
  const auto b = h.size(0);
  const auto n = h.size(1);
  if (z.dim() != 4 || z.size(0) != b || z.size(1) != n || z.size(2) != n || z.size(3) != motion_dim_) {
    throw ConfigError("attention expects z [B, N, N, Dz]");
  }
  auto kv_in = torch::cat({h.unsqueeze(1).expand({b, n, n, dim_}), z}, -1);
  return attend(q(h), k(kv_in), v(kv_in), scores);
}

torch::Tensor MotionAwareAttentionImpl::standard(const torch::Tensor& h, const torch::Tensor& augment,
                                                 torch::Tensor* scores) {
  if (h.dim() != 3 || h.size(2) != dim_) throw ConfigError("attention expects h [B, N, D]");
  const auto b = h.size(0);
  const auto n = h.size(1);
  torch::Tensor key;
  torch::Tensor value;
  if (augment.defined()) {
    auto kv_in = torch::cat({h, augment.expand({b, n, motion_dim_})}, -1);
    key = k(kv_in);
    value = v(kv_in);
  } else {
    auto frame_only = [&](AttentionMlp& mlp) {
      auto w = mlp->fc1->weight.narrow(1, 0, dim_);
      return stable_linear(torch::gelu(stable_linear(h, w, mlp->fc1->bias)), mlp->fc2);
    };
    key = frame_only(k);
    value = frame_only(v);
  }
  return attend(q(h), key.unsqueeze(1).expand({b, n, n, dim_}), value.unsqueeze(1).expand({b, n, n, dim_}), scores);
}

PlaneHeadsImpl::PlaneHeadsImpl(int dim, int hidden) {
  heads = register_module("heads", torch::nn::ModuleList());
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    heads->push_back(torch::nn::Sequential(torch::nn::Linear(dim, hidden), torch::nn::GELU(), torch::nn::Linear(hidden, 6)));
  }
}

torch::Tensor PlaneHeadsImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  for (const auto& head : *heads) outs.push_back(head->as<torch::nn::SequentialImpl>()->forward(x));
  return torch::stack(outs, 1);
}

Movements denormalize_movements(const torch::Tensor& pred) {
  if (pred.dim() != 2 || pred.size(0) != static_cast<int64_t>(kNumPlanes) || pred.size(1) != 6) {
    throw ConfigError("movement prediction must be [10, 6]");
  }
  const auto p = pred.detach().to(torch::kFloat64).clamp(-kMotionClip, kMotionClip).contiguous();
  auto acc = p.accessor<double, 2>();
  Movements out{};
  for (std::size_t k = 0; k < kNumPlanes; ++k) {
    std::array<double, 6> v{};
    for (int c = 0; c < 6; ++c) v[static_cast<std::size_t>(c)] = acc[static_cast<int64_t>(k)][c];
    Pose pose = denormalize_motion(v);
    pose.yaw = wrap_degrees(pose.yaw);
    pose.pitch = wrap_degrees(pose.pitch);
    pose.roll = wrap_degrees(pose.roll);
    out[k] = pose;
  }
  return out;
}

std::pair<torch::Tensor, torch::Tensor> targets_to_tensors(const std::vector<PlaneTargets>& targets) {
  const auto b = static_cast<int64_t>(targets.size());
  auto t = torch::zeros({b, static_cast<int64_t>(kNumPlanes), 6}, torch::kFloat32);
  auto m = torch::zeros({b, static_cast<int64_t>(kNumPlanes)}, torch::kBool);
  auto ta = t.accessor<float, 3>();
  auto ma = m.accessor<bool, 2>();
  for (int64_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < kNumPlanes; ++k) {
      const auto& tg = targets[static_cast<std::size_t>(i)];
      const auto v = normalize_motion(tg.movement[k]);
      for (int c = 0; c < 6; ++c) ta[i][static_cast<int64_t>(k)][c] = static_cast<float>(v[static_cast<std::size_t>(c)]);
      ma[i][static_cast<int64_t>(k)] = tg.mask[k];
    }
  }
  return {t, m};
}

torch::Tensor guidance_loss(const torch::Tensor& pred, const torch::Tensor& targets, const torch::Tensor& mask) {
  if (pred.sizes() != targets.sizes() || pred.dim() != 3 || pred.size(2) != 6 || mask.dim() != 2 ||
      mask.size(0) != pred.size(0) || mask.size(1) != pred.size(1)) {
    throw ConfigError("guidance_loss expects pred/targets [B, P, 6] and mask [B, P]");
  }
  auto diff = pred - targets;
  auto trans = diff.narrow(-1, 0, 3);
  auto rot = torch::remainder(diff.narrow(-1, 3, 3) * kMotionRotScale + 180.0, 360.0) - 180.0;
  auto per_plane = torch::cat({trans, rot / kMotionRotScale}, -1).abs().mean(-1);
  auto kept = torch::where(mask, per_plane, torch::zeros_like(per_plane));
  auto count = mask.sum(1).to(pred.dtype());
  auto valid = (count > 0).to(pred.dtype());
  auto per_sample = kept.sum(1) / count.clamp_min(1.0);
  return (per_sample * valid).sum() / valid.sum().clamp_min(1.0);
}

GuidanceModelImpl::GuidanceModelImpl(const EncoderConfig& encoder_config, const FinetuneConfig& finetune,
                                     Aggregator aggregator)
    : encoder_config_(encoder_config), aggregator_(aggregator) {
  encoder_config.validate();
  const int d = encoder_config.embed_dim;
  const int dz = encoder_config.predictor_dim;
  encoder = register_module("encoder", VisionTransformer(encoder_config));
  motion_encoder = register_module("motion_encoder", MotionEncoder(encoder_config.motion_hidden, dz));
  if (aggregator == Aggregator::MotionAware || aggregator == Aggregator::NoMotion) {
    if (finetune.attention_depth < 1) throw ConfigError("attention_depth must be >= 1");
    attention_layers = register_module("attention", torch::nn::ModuleList());
    for (int i = 0; i < finetune.attention_depth; ++i) {
      attention_layers->push_back(MotionAwareAttention(d, dz, finetune.attention_heads));
    }
    attention = MotionAwareAttention(attention_layers->ptr<MotionAwareAttentionImpl>(0));
  } else if (aggregator == Aggregator::Gru) {
    gru_visual = register_module("gru_visual", torch::nn::Linear(d, d / 2));
    gru_motion = register_module("gru_motion", torch::nn::Linear(dz, d - d / 2));
    gru = register_module("gru", torch::nn::GRU(torch::nn::GRUOptions(d, d).batch_first(true)));
  }
  heads = register_module("heads", PlaneHeads(d, finetune.head_hidden));
}

torch::Tensor GuidanceModelImpl::frame_features(const torch::Tensor& images) { return encoder(images).mean(1); }

torch::Tensor gru_aggregate(GuidanceModelImpl& model, const torch::Tensor& h, const torch::Tensor& motion) {
  const auto b = h.size(0);
  const auto n = h.size(1);
  auto visual = model.gru_visual(h);
  std::vector<torch::Tensor> steps;
  const auto width = model.gru_motion->weight.size(0);
  steps.push_back(torch::zeros({b, 1, width}, h.options()));
  if (n > 1) {
    auto idx = torch::arange(n - 1, torch::kLong);
    auto consecutive = motion.index({torch::indexing::Slice(), idx, idx + 1});  // p_{i -> i+1}
    steps.push_back(model.gru_motion(model.motion_encoder(consecutive)));
  }
  auto input = torch::cat({visual, torch::cat(steps, 1)}, -1);
  auto out = std::get<0>(model.gru(input));
  return out;
}

torch::Tensor GuidanceModelImpl::aggregate(const torch::Tensor& h, const torch::Tensor& motion, torch::Tensor* scores) {
  torch::Tensor x;
  switch (aggregator_) {
    case Aggregator::MotionAware: {
      auto z = motion_encoder(motion);
      x = attention_layers->ptr<MotionAwareAttentionImpl>(0)->forward(h, z, scores);
      for (std::size_t l = 1; l < attention_layers->size(); ++l) {
        x = x + attention_layers->ptr<MotionAwareAttentionImpl>(l)->forward(x, z);
      }
      break;
    }
    case Aggregator::NoMotion: {
      x = attention_layers->ptr<MotionAwareAttentionImpl>(0)->standard(h, {}, scores);
      for (std::size_t l = 1; l < attention_layers->size(); ++l) {
        x = x + attention_layers->ptr<MotionAwareAttentionImpl>(l)->standard(x);
      }
      break;
    }
    case Aggregator::Gru:
      x = gru_aggregate(*this, h, motion);
      break;
    case Aggregator::SingleFrame:
      throw ConfigError("single-frame model has no history aggregator");
  }
  return x.select(1, x.size(1) - 1);
}

torch::Tensor GuidanceModelImpl::forward_single(const torch::Tensor& images) { return heads(frame_features(images)); }

torch::Tensor GuidanceModelImpl::forward_sequence(const torch::Tensor& h, const torch::Tensor& motion) {
  return heads(aggregate(h, motion));
}

void GuidanceModelImpl::load_pretrained(WorldModelImpl& world) {
  const auto& w = world.config();
  const auto& e = encoder_config_;
  if (w.image_size != e.image_size || w.patch_size != e.patch_size || w.embed_dim != e.embed_dim || w.depth != e.depth ||
      w.heads != e.heads || w.mlp_ratio != e.mlp_ratio || w.predictor_dim != e.predictor_dim ||
      w.motion_hidden != e.motion_hidden) {
    throw ConfigError("pre-trained encoder shape differs from the fine-tuning config");
  }
  copy_parameters(*encoder, *world.context);
  copy_parameters(*motion_encoder, *world.motion_encoder);
}

std::vector<std::pair<std::vector<torch::Tensor>, double>> GuidanceModelImpl::layer_groups(double layer_decay) const {
  const int depth = static_cast<int>(encoder->blocks->size());
  std::vector<std::pair<std::vector<torch::Tensor>, double>> groups;
  groups.push_back({encoder->patch_embed->parameters(), std::pow(layer_decay, depth)});
  for (int i = 0; i < depth; ++i) {
    groups.push_back({encoder->blocks->ptr(static_cast<std::size_t>(i))->parameters(), std::pow(layer_decay, depth - 1 - i)});
  }
  std::vector<torch::Tensor> rest = encoder->norm->parameters();
  for (const auto& item : named_children()) {
    if (item.key() == "encoder") continue;
    for (const auto& p : item.value()->parameters()) rest.push_back(p);
  }
  groups.push_back({rest, 1.0});
  return groups;
}

GuidanceModel make_guidance_model(const ExperimentConfig& config, Aggregator aggregator, const fs::path& init) {
  GuidanceModel model(config.encoder, config.finetune, aggregator);
  if (!init.empty()) {
    WorldModel world = load_world_model(init);
    model->load_pretrained(*world);
  }
  return model;
}

torch::Tensor pairwise_motion_tensor(const GuidanceSample& sample) {
  const auto n = static_cast<int64_t>(sample.size());
  std::vector<Pose> flat;
  flat.reserve(static_cast<std::size_t>(n * n));
  for (const auto& row : sample.pairwise_motion) flat.insert(flat.end(), row.begin(), row.end());
  return motion_tensor(flat).reshape({n, n, 6});
}

torch::Tensor augment_images(const torch::Tensor& images, double brightness, double contrast, Rng& rng) {
  const auto b = images.size(0);
  auto gain = torch::empty({b}, torch::kFloat32);
  auto stretch = torch::empty({b}, torch::kFloat32);
  for (int64_t i = 0; i < b; ++i) {
    gain[i] = static_cast<float>(rng.uniform(1.0 - brightness, 1.0 + brightness));
    stretch[i] = static_cast<float>(rng.uniform(1.0 - contrast, 1.0 + contrast));
  }
  std::vector<int64_t> shape(static_cast<std::size_t>(images.dim()), 1);
  shape[0] = b;
  auto mean = images.reshape({b, -1}).mean(1).view(shape);
  auto out = gain.view(shape).to(images.dtype()) * (mean + stretch.view(shape).to(images.dtype()) * (images - mean));
  return out.clamp(0.0, 1.0);
}

std::string to_string(Protocol p) { return p == Protocol::Single ? "single" : "sequential"; }

Protocol protocol_from_string(const std::string& s) {
  if (s == "single") return Protocol::Single;
  if (s == "sequential") return Protocol::Sequential;
  throw ConfigError("unknown protocol '" + s + "' (expected single or sequential)");
}

namespace {

struct FrameRef {
  std::size_t scan = 0;
  std::size_t position = 0;
};

struct SequenceRef {
  std::size_t scan = 0;
  GuidanceSample sample;
};

/// Frames of the decimated scans with at least one annotated plane.
std::vector<FrameRef> frame_pool(const std::vector<Scan>& scans) {
  std::vector<FrameRef> pool;
  for (std::size_t s = 0; s < scans.size(); ++s) {
    if (scans[s].annotations.empty()) continue;
    for (std::size_t p = 0; p < scans[s].frames.size(); ++p) pool.push_back({s, p});
  }
  return pool;
}

torch::Tensor gather_frames(const std::vector<ScanTensor>& tensors, std::size_t scan,
                            const std::vector<std::size_t>& positions) {
  std::vector<int64_t> idx(positions.begin(), positions.end());
  return tensors[scan].frames.index_select(0, torch::tensor(idx, torch::kLong)).to(torch::kFloat32) / 255.0;
}

SequenceRef draw_sequence(const std::vector<Scan>& scans, const ProtocolConfig& pc, Rng& rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const auto s = static_cast<std::size_t>(rng.uniform_int(scans.size()));
    const auto& scan = scans[s];
    const int t = 1 + static_cast<int>(rng.uniform_int(scan.frames.size()));
    const Direction dir = rng.uniform() < 0.5 ? Direction::Forward : Direction::Reverse;
    GuidanceSample sample = build_sequence_input(scan, t, pc.history, pc.alpha, dir);
    if (sample.targets.count() > 0) return {s, std::move(sample)};
  }
  throw DataError("no sequence with unvisited planes found in the training scans");
}

struct Batch {
  torch::Tensor images;  // single: [B, 1, H, W]; sequential: [B * N, 1, H, W]
  torch::Tensor motion;  // sequential: [B, N, N, 6]
  torch::Tensor targets;
  torch::Tensor mask;
  int64_t batch = 0;
  int64_t history = 0;
};

Batch single_batch(const std::vector<Scan>& scans, const std::vector<ScanTensor>& tensors,
                   const std::vector<FrameRef>& pool, int size, Rng& rng) {
  Batch out;
  std::vector<torch::Tensor> images;
  std::vector<PlaneTargets> targets;
  for (int i = 0; i < size; ++i) {
    const FrameRef& ref = pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))];
    images.push_back(gather_frames(tensors, ref.scan, {ref.position}));
    targets.push_back(all_plane_targets(scans[ref.scan], scans[ref.scan].frames[ref.position].pose));
  }
  out.images = torch::cat(images, 0);
  std::tie(out.targets, out.mask) = targets_to_tensors(targets);
  out.batch = size;
  return out;
}

Batch sequence_batch(const std::vector<Scan>& scans, const std::vector<ScanTensor>& tensors, const ProtocolConfig& pc,
                     int size, Rng& rng) {
  Batch out;
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> motion;
  std::vector<PlaneTargets> targets;
  for (int i = 0; i < size; ++i) {
    const SequenceRef ref = draw_sequence(scans, pc, rng);
    images.push_back(gather_frames(tensors, ref.scan, ref.sample.positions));
    motion.push_back(pairwise_motion_tensor(ref.sample));
    targets.push_back(ref.sample.targets);
  }
  out.images = torch::cat(images, 0);
  out.motion = torch::stack(motion, 0);
  std::tie(out.targets, out.mask) = targets_to_tensors(targets);
  out.batch = size;
  out.history = pc.history;
  return out;
}

torch::Tensor batch_forward(GuidanceModelImpl& model, const Batch& batch, const torch::Tensor& images) {
  if (!batch.motion.defined()) return model.forward_single(images);
  auto h = model.frame_features(images).view({batch.batch, batch.history, -1});
  return model.forward_sequence(h, batch.motion);
}

double validation_loss(GuidanceModelImpl& model, const std::vector<Batch>& batches) {
  if (batches.empty()) return std::nan("");
  torch::NoGradGuard guard;
  model.eval();
  double sum = 0.0;
  for (const auto& b : batches) sum += guidance_loss(batch_forward(model, b, b.images), b.targets, b.mask).item<double>();
  model.train();
  return sum / static_cast<double>(batches.size());
}

void save_guidance_checkpoint(const fs::path& dir, GuidanceModelImpl& model, torch::optim::Optimizer& optimizer,
                              const json& meta, const std::string& canonical) {
  fs::create_directories(dir);
  torch::serialize::OutputArchive root;
  torch::serialize::OutputArchive model_archive;
  model.save(model_archive);
  root.write("model", model_archive);
  torch::serialize::OutputArchive opt_archive;
  optimizer.save(opt_archive);
  root.write("optimizer", opt_archive);
  const fs::path tmp = dir / "params.pt.tmp";
  root.save_to(tmp.string());
  fs::rename(tmp, dir / "params.pt");
  write_text_atomic(dir / "config.json", canonical);
  write_meta(dir, meta);
}

std::string format_value(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

FinetuneSummary finetune(const ExperimentConfig& config, const std::vector<Scan>& train, Protocol protocol,
                         const fs::path& out_dir, const FinetuneOptions& options) {
  config.validate();
  if (train.empty()) throw DataError("no training scans");
  const auto& fc = config.finetune;
  const auto& pc = config.protocol;
  if (protocol == Protocol::Single && options.aggregator != Aggregator::SingleFrame) {
    throw ConfigError("single-frame protocol requires the single-frame aggregator");
  }
  if (protocol == Protocol::Sequential && options.aggregator == Aggregator::SingleFrame) {
    throw ConfigError("sequential protocol requires a history aggregator");
  }
  const std::string canonical = canonical_text(config);
  const std::string hash = config_hash(config);

  torch::manual_seed(mix_seed(fc.seed, kInitStream));
  GuidanceModel model = make_guidance_model(config, options.aggregator, options.init);
  const std::string init_hash =
      options.init.empty() ? "" : read_meta(options.init).at("config_hash").get<std::string>();
  model->encoder->set_drop_path(fc.drop_path);

  std::vector<torch::optim::OptimizerParamGroup> groups;
  std::vector<double> scales;
  for (auto& [params, scale] : model->layer_groups(fc.layer_decay)) {
    for (auto& g : decay_groups(params, fc.lr * scale, fc.weight_decay)) {
      if (g.params().empty()) continue;
      groups.push_back(std::move(g));
      scales.push_back(scale);
    }
  }
  torch::optim::AdamW optimizer(groups, torch::optim::AdamWOptions(fc.lr).weight_decay(fc.weight_decay));

  const double fps = protocol == Protocol::Single ? pc.single_fps : pc.sequential_fps;
  std::vector<Scan> scans;
  for (const auto& s : train) scans.push_back(decimate(s, fps));
  std::vector<ScanTensor> tensors;
  for (const auto& s : scans) tensors.push_back(to_scan_tensor(s));
  const std::vector<FrameRef> pool = frame_pool(scans);
  if (protocol == Protocol::Single && pool.empty()) throw DataError("no annotated frames to train on");

  std::vector<Scan> val_scans;
  std::vector<ScanTensor> val_tensors;
  std::vector<Batch> val_batches;
  if (options.validation && !options.validation->empty()) {
    for (const auto& s : *options.validation) val_scans.push_back(decimate(s, fps));
    for (const auto& s : val_scans) val_tensors.push_back(to_scan_tensor(s));
    Rng val_rng(mix_seed(fc.seed, kValStream));
    if (protocol == Protocol::Single) {
      const auto val_pool = frame_pool(val_scans);
      for (int i = 0; i < 4 && !val_pool.empty(); ++i) val_batches.push_back(single_batch(val_scans, val_tensors, val_pool, 32, val_rng));
    } else {
      for (int i = 0; i < 4; ++i) val_batches.push_back(sequence_batch(val_scans, val_tensors, pc, 16, val_rng));
    }
  }

  const std::int64_t total = fc.iterations;
  const auto warmup = static_cast<std::int64_t>(std::llround(fc.warmup_fraction * static_cast<double>(total)));
  std::int64_t it = 0;
  std::string log_text = "iteration,loss,lr,val_loss\n";
  FinetuneSummary summary;
  if (options.resume && fs::exists(out_dir / "params.pt")) {
    const json meta = read_meta(out_dir);
    check_config_hash(meta, hash, out_dir);
    if (meta.value("aggregator", "") != to_string(options.aggregator) || meta.value("protocol", "") != to_string(protocol)) {
      throw ConfigError("resume target " + out_dir.string() + " was trained with a different protocol or aggregator");
    }
    torch::serialize::InputArchive root;
    root.load_from((out_dir / "params.pt").string());
    torch::serialize::InputArchive model_archive;
    root.read("model", model_archive);
    model->load(model_archive);
    torch::serialize::InputArchive opt_archive;
    root.read("optimizer", opt_archive);
    optimizer.load(opt_archive);
    it = meta.at("iteration").get<std::int64_t>();
    const auto& stored = meta.at("initial_val_loss");
    summary.initial_val_loss = stored.is_number() ? stored.get<double>() : std::nan("");
    std::ifstream in(out_dir / "finetune_log.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (!line.empty() && std::stoll(line.substr(0, line.find(','))) < it) log_text += line + "\n";
    }
  }
  mark_incomplete(out_dir);

  auto checkpoint = [&](std::int64_t at) {
    json meta = {{"kind", "guidance"},
                 {"protocol", to_string(protocol)},
                 {"aggregator", to_string(options.aggregator)},
                 {"init", options.init.empty() ? "none" : options.init.string()},
                 {"init_config_hash", init_hash},
                 {"iteration", at},
                 {"total_iterations", total},
                 {"config_hash", hash},
                 {"initial_val_loss", std::isnan(summary.initial_val_loss) ? json(nullptr) : json(summary.initial_val_loss)}};
    save_guidance_checkpoint(out_dir, *model, optimizer, meta, canonical);
    write_text_atomic(out_dir / "finetune_log.csv", log_text);
  };

  const std::int64_t stop = options.max_iterations < 0 ? total : std::min(total, it + options.max_iterations);
  model->train();
  double window = 0.0;
  std::int64_t window_count = 0;
  while (it < stop) {
    double val = std::nan("");
    if (it % fc.eval_every == 0) {
      val = validation_loss(*model, val_batches);
      if (it == 0) summary.initial_val_loss = val;
    }
    Rng rng(mix_seed(mix_seed(fc.seed, kBatchStream), static_cast<std::uint64_t>(it)));
    torch::manual_seed(mix_seed(fc.seed, static_cast<std::uint64_t>(it)));
    const Batch batch = protocol == Protocol::Single ? single_batch(scans, tensors, pool, fc.batch_single, rng)
                                                     : sequence_batch(scans, tensors, pc, fc.batch_sequential, rng);
    torch::Tensor images = batch.images;
    if (protocol == Protocol::Single) {
      images = augment_images(images, fc.brightness, fc.contrast, rng);
    } else {
      const auto shape = images.sizes().vec();
      images = augment_images(images.view({batch.batch, batch.history, shape[1], shape[2], shape[3]}), fc.brightness,
                              fc.contrast, rng)
                   .view(shape);
    }

    const double lr = warmup_cosine(it, total, warmup, fc.lr, fc.final_lr);
    for (std::size_t g = 0; g < optimizer.param_groups().size(); ++g) {
      static_cast<torch::optim::AdamWOptions&>(optimizer.param_groups()[g].options()).lr(lr * scales[g]);
    }
    auto loss = guidance_loss(batch_forward(*model, batch, images), batch.targets, batch.mask);
    const double l = loss.item<double>();
    if (!std::isfinite(l)) throw NumericalError("non-finite guidance loss at iteration " + std::to_string(it));
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();

    log_text += std::to_string(it) + "," + format_value(l) + "," + format_value(lr) + "," + format_value(val) + "\n";
    window += l;
    ++window_count;
    ++it;
    summary.iterations = it;
    if (it % fc.eval_every == 0 || it == stop) {
      if (!options.quiet) {
        std::fprintf(stderr, "[finetune %s/%s] iteration %lld/%lld loss %.4f\n", to_string(protocol).c_str(),
                     to_string(options.aggregator).c_str(), static_cast<long long>(it), static_cast<long long>(total),
                     window / static_cast<double>(window_count));
      }
      window = 0.0;
      window_count = 0;
      checkpoint(it);
    }
  }
  if (it >= total) {
    summary.final_val_loss = validation_loss(*model, val_batches);
    log_text += std::to_string(it) + ",,," + format_value(summary.final_val_loss) + "\n";
    checkpoint(it);
    clear_incomplete(out_dir);
  }
  return summary;
}

LoadedGuidance load_guidance_model(const fs::path& dir) {
  const json meta = read_meta(dir);
  if (meta.at("kind") != "guidance") throw ConfigError(dir.string() + " is not a guidance checkpoint");
  if (is_incomplete(dir)) throw DataError(dir.string() + " is marked incomplete");
  LoadedGuidance out;
  out.config = load_checkpoint_config(dir);
  out.protocol = protocol_from_string(meta.at("protocol").get<std::string>());
  out.model = GuidanceModel(out.config.encoder, out.config.finetune,
                            aggregator_from_string(meta.at("aggregator").get<std::string>()));
  torch::serialize::InputArchive root;
  root.load_from((dir / "params.pt").string());
  torch::serialize::InputArchive model_archive;
  root.read("model", model_archive);
  out.model->load(model_archive);
  out.model->eval();
  return out;
}

void dump_attention(GuidanceModelImpl& model, const GuidanceSample& sample, const fs::path& dir) {
  if (model.aggregator() != Aggregator::MotionAware && model.aggregator() != Aggregator::NoMotion) {
    throw ConfigError("attention dump needs an attention aggregator");
  }
  torch::NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  std::vector<const GrayImage*> images;
  for (const auto& f : sample.frames) images.push_back(&f.image);
  const auto n = static_cast<int64_t>(sample.size());
  auto h = model.frame_features(images_to_tensor(images)).unsqueeze(0);
  torch::Tensor scores;
  model.aggregate(h, pairwise_motion_tensor(sample).unsqueeze(0), &scores);
  if (was_training) model.train();

  fs::create_directories(dir);
  const auto att = scores.squeeze(0).to(torch::kFloat64).contiguous();
  auto acc = att.accessor<double, 3>();
  constexpr int kCell = 16;
  for (int64_t head = 0; head < att.size(0); ++head) {
    std::string csv;
    GrayImage img(static_cast<int>(n * kCell), static_cast<int>(n * kCell));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        const double a = acc[head][i][j];
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%.9g", j ? "," : "", a);
        csv += buf;
        const auto level = static_cast<std::uint8_t>(std::lround(std::clamp(a, 0.0, 1.0) * 255.0));
        for (int r = 0; r < kCell; ++r) {
          for (int c = 0; c < kCell; ++c) {
            img.pixels[static_cast<std::size_t>((i * kCell + r) * n * kCell + j * kCell + c)] = level;
          }
        }
      }
      csv += "\n";
    }
    const std::string stem = "attention_head" + std::to_string(head);
    write_text_atomic(dir / (stem + ".csv"), csv);
    write_png(dir / (stem + ".png"), img);
  }
}

}  // namespace probeguide
