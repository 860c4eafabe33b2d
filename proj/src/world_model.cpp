#include "probeguide/world_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/scan_store.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

void MaskSpec::validate() const {
  const auto cells = static_cast<int64_t>(grid_h) * grid_w;
  if (masked.empty()) throw ConfigError("mask has no masked cells");
  std::set<int64_t> seen;
  for (const auto* set : {&masked, &visible}) {
    for (int64_t c : *set) {
      if (c < 0 || c >= cells) throw ConfigError("mask cell outside grid");
      if (!seen.insert(c).second) throw ConfigError("mask cell listed twice");
    }
  }
}

MaskSpec block_mask(int grid_h, int grid_w, const MaskConfig& config, Rng& rng) {
  if (grid_h < 4 || grid_w < 4) throw ConfigError("block masking needs a grid of at least 4x4");
  const int cells = grid_h * grid_w;
  for (;;) {
    std::vector<char> is_masked(static_cast<std::size_t>(cells), 0);
    for (int b = 0; b < config.blocks; ++b) {
      const double scale = rng.uniform(config.scale_min, config.scale_max);
      const double log_ar = rng.uniform(std::log(config.aspect_min), std::log(config.aspect_max));
      const double area = scale * cells;
      const double ar = std::exp(log_ar);
      const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ar))), 1, grid_h - 1);
      const int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area / ar))), 1, grid_w - 1);
      const int top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grid_h - h + 1)));
      const int left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(grid_w - w + 1)));
      for (int r = top; r < top + h; ++r) {
        for (int c = left; c < left + w; ++c) is_masked[static_cast<std::size_t>(r * grid_w + c)] = 1;
      }
    }
    std::vector<int64_t> visible;
    for (int c = 0; c < cells; ++c) {
      if (!is_masked[static_cast<std::size_t>(c)]) visible.push_back(c);
    }
    const double u = rng.uniform(0.0, config.extra_drop_max);
    const auto drop = static_cast<std::size_t>(std::floor(u * static_cast<double>(visible.size())));
    rng.shuffle(visible);
    for (std::size_t i = 0; i < drop; ++i) is_masked[static_cast<std::size_t>(visible[i])] = 1;

    MaskSpec m;
    m.grid_h = grid_h;
    m.grid_w = grid_w;
    for (int c = 0; c < cells; ++c) (is_masked[static_cast<std::size_t>(c)] ? m.masked : m.visible).push_back(c);
    const double frac = static_cast<double>(m.masked.size()) / cells;
    if (!m.visible.empty() && frac >= 0.15 && frac <= 0.85) return m;
  }
}

MaskBatch collate_masks(const std::vector<MaskSpec>& masks, Rng& rng) {
  if (masks.empty()) throw ConfigError("empty mask batch");
  std::size_t min_v = SIZE_MAX;
  std::size_t min_m = SIZE_MAX;
  for (const auto& m : masks) {
    min_v = std::min(min_v, m.visible.size());
    min_m = std::min(min_m, m.masked.size());
  }
  const auto b = static_cast<int64_t>(masks.size());
  auto visible = torch::empty({b, static_cast<int64_t>(min_v)}, torch::kInt64);
  auto masked = torch::empty({b, static_cast<int64_t>(min_m)}, torch::kInt64);
  auto take = [&rng](std::vector<int64_t> cells, std::size_t n, torch::Tensor row) {
    if (cells.size() > n) {
      rng.shuffle(cells);
      cells.resize(n);
      std::sort(cells.begin(), cells.end());
    }
    auto acc = row.accessor<int64_t, 1>();
    for (std::size_t i = 0; i < n; ++i) acc[static_cast<int64_t>(i)] = cells[i];
  };
  for (int64_t i = 0; i < b; ++i) {
    take(masks[static_cast<std::size_t>(i)].visible, min_v, visible[i]);
    take(masks[static_cast<std::size_t>(i)].masked, min_m, masked[i]);
  }
  return {visible, masked};
}

MaskBatch full_context(int64_t batch, int cells) {
  return {torch::arange(cells, torch::kInt64).unsqueeze(0).expand({batch, cells}).contiguous(),
          torch::empty({batch, 0}, torch::kInt64)};
}

PredictorImpl::PredictorImpl(const EncoderConfig& config) {
  const int dp = config.predictor_dim;
  in_proj = register_module("in_proj", torch::nn::Linear(config.embed_dim, dp));
  mask_token = register_parameter("mask_token", torch::randn({dp}) * 0.02);
  pos = register_buffer("pos", sincos_2d(dp, config.grid()));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config.predictor_depth; ++i) {
    blocks->push_back(Block(dp, config.predictor_heads, config.mlp_ratio));
  }
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dp}).eps(1e-6)));
  out_proj = register_module("out_proj", torch::nn::Linear(dp, config.embed_dim));
}

torch::Tensor PredictorImpl::run(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& queries) {
  if (h_x.size(0) != visible.size(0) || h_x.size(1) != visible.size(1)) {
    throw ConfigError("context tokens and visible indices disagree");
  }
  const auto p = pos.to(h_x.dtype());
  auto ctx = in_proj(h_x) + p.index({visible});
  auto x = torch::cat({ctx, queries}, 1);
  for (const auto& block : *blocks) x = block->as<Block>()->forward(x);
  x = norm(x).narrow(1, ctx.size(1), queries.size(1));
  return out_proj(x);
}

torch::Tensor PredictorImpl::spatial(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& masked) {
  if (masked.size(0) != h_x.size(0)) throw ConfigError("mask batch size mismatch");
  auto queries = mask_token.to(h_x.dtype()) + pos.to(h_x.dtype()).index({masked});
  return run(h_x, visible, queries);
}

torch::Tensor PredictorImpl::motion(const torch::Tensor& h_x, const torch::Tensor& visible, const torch::Tensor& z) {
  auto queries = (mask_token.to(h_x.dtype()) + z).unsqueeze(1);
  return run(h_x, visible, queries).squeeze(1);
}

WorldModelImpl::WorldModelImpl(const EncoderConfig& config) : config_(config) {
  context = register_module("context", VisionTransformer(config));
  target = register_module("target", VisionTransformer(config));
  predictor = register_module("predictor", Predictor(config));
  motion_encoder = register_module("motion_encoder", MotionEncoder(config.motion_hidden, config.predictor_dim));
  projector = register_module("projector", Projector(config.embed_dim));
  projector_ema = register_module("projector_ema", Projector(config.embed_dim));
  copy_parameters(*target, *context);
  copy_parameters(*projector_ema, *projector);
  for (auto& p : target->parameters()) p.set_requires_grad(false);
  for (auto& p : projector_ema->parameters()) p.set_requires_grad(false);
}

torch::Tensor WorldModelImpl::encode_context(const torch::Tensor& images, const torch::Tensor& visible) {
  return context(images, visible);
}

torch::Tensor WorldModelImpl::encode_target(const torch::Tensor& images) {
  torch::NoGradGuard guard;
  return target(images);
}

std::vector<torch::Tensor> WorldModelImpl::online_parameters() const {
  std::vector<torch::Tensor> out;
  for (const torch::nn::Module* m : std::initializer_list<const torch::nn::Module*>{
           context.get(), predictor.get(), motion_encoder.get(), projector.get()}) {
    for (const auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

double ema_decay(std::int64_t step, std::int64_t total, double start) {
  if (total <= 0) return 1.0;
  const double s = static_cast<double>(std::clamp<std::int64_t>(step, 0, total));
  return 1.0 - (1.0 - start) * (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total))) / 2.0;
}

double ema_update(WorldModelImpl& model, std::int64_t step, std::int64_t total, double start) {
  const double d = ema_decay(step, total, start);
  torch::NoGradGuard guard;
  auto blend = [d](torch::nn::Module& ema, const torch::nn::Module& online) {
    auto dst = ema.parameters();
    auto src = online.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].mul_(d).add_(src[i], 1.0 - d);
  };
  blend(*model.target, *model.context);
  blend(*model.projector_ema, *model.projector);
  return d;
}

torch::Tensor spatial_loss(const torch::Tensor& pred, const torch::Tensor& target_full, const torch::Tensor& masked,
                           const std::string& reduction) {
  auto target = torch::gather(target_full, 1, masked.unsqueeze(-1).expand({masked.size(0), masked.size(1), target_full.size(2)}));
  auto l = torch::smooth_l1_loss(pred, target.detach(), at::Reduction::None, 1.0);
  if (reduction == "mean") return l.mean();
  if (reduction == "sum") return l.sum() / static_cast<double>(pred.size(0));
  throw ConfigError("unknown spatial loss reduction '" + reduction + "'");
}

torch::Tensor info_nce(const torch::Tensor& preds, const torch::Tensor& targets, double tau, bool symmetric) {
  if (preds.size(0) == 0) throw DataError("info_nce needs at least one pair");
  auto p = torch::nn::functional::normalize(preds, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto t = torch::nn::functional::normalize(targets, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto logits = torch::matmul(p, t.t()) / tau;
  auto labels = torch::arange(preds.size(0), torch::TensorOptions().dtype(torch::kInt64));
  auto loss = torch::nn::functional::cross_entropy(logits, labels);
  if (symmetric) loss = 0.5 * (loss + torch::nn::functional::cross_entropy(logits.t(), labels));
  return loss;
}

StepLosses compute_losses(WorldModelImpl& model, const PretrainBatch& batch, const MaskBatch& masks,
                          const PretrainConfig& config) {
  const auto dtype = batch.images_a.scalar_type();
  const auto zero = torch::zeros({}, torch::TensorOptions().dtype(dtype));
  const int64_t b = batch.images_a.size(0);
  const int dim = model.config().embed_dim;
  StepLosses out{zero, zero, zero};

  const MaskBatch ctx_mask =
      config.mode == PretrainMode::Motion ? full_context(b, model.config().num_patches()) : masks;
  auto h_x = model.encode_context(batch.images_a, ctx_mask.visible);

  if (config.mode != PretrainMode::Motion) {
    torch::Tensor h_y;
    {
      torch::NoGradGuard guard;
      h_y = torch::layer_norm(model.target(batch.images_a), {dim});
    }
    auto pred = model.predictor->spatial(h_x, ctx_mask.visible, ctx_mask.masked);
    out.spatial = spatial_loss(pred, h_y, ctx_mask.masked, config.spatial_reduction);
  }
  if (config.mode != PretrainMode::Spatial) {
    auto z = model.encode_motion(batch.motion);
    auto pred = model.predictor->motion(h_x, ctx_mask.visible, z);
    torch::Tensor target;
    {
      torch::NoGradGuard guard;
      target = model.projector_ema(torch::layer_norm(model.target(batch.images_b), {dim}).mean(1));
    }
    out.motion = info_nce(model.projector(pred), target, config.tau, config.symmetric_nce);
  }
  switch (config.mode) {
    case PretrainMode::Spatial: out.total = out.spatial; break;
    case PretrainMode::Motion: out.total = out.motion; break;
    case PretrainMode::Joint: out.total = out.spatial + config.lambda_motion * out.motion; break;
  }
  return out;
}

ScanTensor to_scan_tensor(const Scan& scan) {
  if (scan.frames.empty()) throw DataError("scan " + scan.scan_id + " has no frames");
  const int h = scan.frames.front().image.height;
  const int w = scan.frames.front().image.width;
  auto t = torch::empty({static_cast<int64_t>(scan.frames.size()), 1, h, w}, torch::kUInt8);
  auto* dst = t.data_ptr<std::uint8_t>();
  for (std::size_t i = 0; i < scan.frames.size(); ++i) {
    const auto& px = scan.frames[i].image.pixels;
    if (px.size() != static_cast<std::size_t>(h * w)) throw DataError("mixed frame sizes in scan " + scan.scan_id);
    std::copy(px.begin(), px.end(), dst + i * px.size());
  }
  return {&scan, t};
}

PretrainBatch make_pretrain_batch(const std::vector<ScanTensor>& scans,
                                  const std::vector<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>>& pairs) {
  std::vector<torch::Tensor> a;
  std::vector<torch::Tensor> b;
  std::vector<Pose> motion;
  for (const auto& [s, ab] : pairs) {
    const ScanTensor& st = scans[s];
    a.push_back(st.frames[static_cast<int64_t>(ab.first)]);
    b.push_back(st.frames[static_cast<int64_t>(ab.second)]);
    motion.push_back(relative(st.scan->frames[ab.second].pose, st.scan->frames[ab.first].pose));
  }
  return {torch::stack(a).to(torch::kFloat32) / 255.0, torch::stack(b).to(torch::kFloat32) / 255.0,
          motion_tensor(motion)};
}

namespace {

constexpr std::uint64_t kPairStream = 0x7061697273ULL;
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;

using PairList = std::vector<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>>;

PairList epoch_pairs(const std::vector<Scan>& scans, int pairs_per_scan, std::uint64_t seed, std::int64_t epoch) {
  Rng rng(mix_seed(mix_seed(seed, kPairStream), static_cast<std::uint64_t>(epoch)));
  PairList pairs;
  for (std::size_t s = 0; s < scans.size(); ++s) {
    for (int k = 0; k < pairs_per_scan; ++k) {
      const PairSample p = sample_pair(scans[s], rng);
      pairs.push_back({s, {p.a, p.b}});
    }
  }
  rng.shuffle(pairs);
  return pairs;
}

void save_world_checkpoint(const fs::path& dir, WorldModelImpl& model, torch::optim::Optimizer& optimizer,
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

std::string log_row(std::int64_t step, double ls, double lm, double lt, double lr, double d) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(step), ls, lm, lt, lr, d);
  return buf;
}

}  // namespace

PretrainSummary pretrain(const ExperimentConfig& config, const std::vector<Scan>& scans, const fs::path& out_dir,
                         const PretrainOptions& options) {
  config.validate();
  if (scans.empty()) throw DataError("no training scans");
  const auto& pc = config.pretrain;
  const std::string canonical = canonical_text(config);
  const std::string hash = config_hash(config);

  torch::manual_seed(mix_seed(pc.seed, 0x696e6974ULL));
  WorldModel model(config.encoder);
  torch::optim::AdamW optimizer(decay_groups(model->online_parameters(), pc.lr, pc.weight_decay),
                                torch::optim::AdamWOptions(pc.lr).betas({pc.beta1, pc.beta2}).weight_decay(pc.weight_decay));

  std::vector<ScanTensor> tensors;
  for (const auto& s : scans) tensors.push_back(to_scan_tensor(s));

  const auto pairs_per_epoch = static_cast<std::int64_t>(scans.size()) * pc.pairs_per_scan;
  const std::int64_t steps_per_epoch = (pairs_per_epoch + pc.batch_size - 1) / pc.batch_size;
  const std::int64_t total = steps_per_epoch * pc.epochs;
  const std::int64_t warmup = steps_per_epoch * pc.warmup_epochs;

  std::int64_t step = 0;
  std::string log_text = "step,l_spatial,l_motion,l_total,lr,ema_decay\n";
  if (options.resume && fs::exists(out_dir / "params.pt")) {
    const json meta = read_meta(out_dir);
    check_config_hash(meta, hash, out_dir);
    torch::serialize::InputArchive root;
    root.load_from((out_dir / "params.pt").string());
    torch::serialize::InputArchive model_archive;
    root.read("model", model_archive);
    model->load(model_archive);
    torch::serialize::InputArchive opt_archive;
    root.read("optimizer", opt_archive);
    optimizer.load(opt_archive);
    step = meta.at("step").get<std::int64_t>();
    std::ifstream in(out_dir / "train_log.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= step) log_text += line + "\n";
    }
  }
  mark_incomplete(out_dir);

  PretrainSummary summary;
  summary.total_steps = total;
  const std::int64_t stop = options.max_steps < 0 ? total : std::min(total, step + options.max_steps);
  PairList pairs;
  std::int64_t pairs_epoch = -1;
  double epoch_spatial = 0.0;
  double epoch_total = 0.0;
  std::int64_t epoch_count = 0;
  const int grid = config.encoder.grid();

  auto checkpoint = [&](std::int64_t at_step) {
    json meta = {{"kind", "world_model"},
                 {"mode", to_string(pc.mode)},
                 {"step", at_step},
                 {"total_steps", total},
                 {"config_hash", hash},
                 {"rng", {{"pair_stream", mix_seed(pc.seed, kPairStream)}, {"mask_stream", mix_seed(pc.seed, kMaskStream)}}}};
    save_world_checkpoint(out_dir, *model, optimizer, meta, canonical);
    write_text_atomic(out_dir / "train_log.csv", log_text);
  };

  model->train();
  while (step < stop) {
    const std::int64_t epoch = step / steps_per_epoch;
    if (epoch != pairs_epoch) {
      pairs = epoch_pairs(scans, pc.pairs_per_scan, pc.seed, epoch);
      pairs_epoch = epoch;
    }
    const std::int64_t k = step % steps_per_epoch;
    const auto begin = static_cast<std::size_t>(k * pc.batch_size);
    const auto end = std::min(pairs.size(), begin + static_cast<std::size_t>(pc.batch_size));
    const PairList chunk(pairs.begin() + static_cast<std::ptrdiff_t>(begin), pairs.begin() + static_cast<std::ptrdiff_t>(end));
    const PretrainBatch batch = make_pretrain_batch(tensors, chunk);

    Rng mask_rng(mix_seed(mix_seed(pc.seed, kMaskStream), static_cast<std::uint64_t>(step)));
    std::vector<MaskSpec> specs;
    for (std::size_t i = 0; i < chunk.size(); ++i) specs.push_back(block_mask(grid, grid, pc.mask, mask_rng));
    const MaskBatch masks = collate_masks(specs, mask_rng);

    const double lr = warmup_cosine(step, total, warmup, pc.lr, pc.final_lr);
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

    const StepLosses losses = compute_losses(*model, batch, masks, pc);
    const double lt = losses.total.item<double>();
    if (!std::isfinite(lt)) throw NumericalError("non-finite pre-training loss at step " + std::to_string(step));
    optimizer.zero_grad();
    losses.total.backward();
    optimizer.step();
    const double d = ema_update(*model, step, total, pc.ema_start);

    const double ls = losses.spatial.item<double>();
    const double lm = losses.motion.item<double>();
    log_text += log_row(step, ls, lm, lt, lr, d);
    epoch_spatial += ls;
    epoch_total += lt;
    ++epoch_count;
    ++step;
    summary.steps = step;

    const bool epoch_end = step % steps_per_epoch == 0;
    if (epoch_end || step == stop) {
      const double mean_s = epoch_spatial / static_cast<double>(epoch_count);
      if (epoch == 0) summary.first_spatial = mean_s;
      summary.last_spatial = mean_s;
      summary.last_total = epoch_total / static_cast<double>(epoch_count);
      if (!options.quiet) {
        std::fprintf(stderr, "[pretrain %s] epoch %lld/%d step %lld/%lld l_spatial %.4f l_total %.4f\n",
                     to_string(pc.mode).c_str(), static_cast<long long>(epoch + 1), pc.epochs,
                     static_cast<long long>(step), static_cast<long long>(total), mean_s, summary.last_total);
      }
      epoch_spatial = epoch_total = 0.0;
      epoch_count = 0;
      checkpoint(step);
    }
  }
  if (step >= total) clear_incomplete(out_dir);
  return summary;
}

WorldModel load_world_model(const fs::path& dir, const std::optional<std::string>& expected_hash) {
  const json meta = read_meta(dir);
  if (meta.at("kind") != "world_model") throw ConfigError(dir.string() + " is not a pre-training checkpoint");
  if (expected_hash) check_config_hash(meta, *expected_hash, dir);
  if (is_incomplete(dir)) throw DataError(dir.string() + " is marked incomplete");
  const ExperimentConfig config = load_checkpoint_config(dir);
  WorldModel model(config.encoder);
  torch::serialize::InputArchive root;
  root.load_from((dir / "params.pt").string());
  torch::serialize::InputArchive model_archive;
  root.read("model", model_archive);
  model->load(model_archive);
  return model;
}

}  // namespace probeguide
