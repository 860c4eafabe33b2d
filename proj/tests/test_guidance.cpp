#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/guidance.hpp"
#include "fixtures.hpp"

using namespace probeguide;
using namespace fixtures;
namespace fs = std::filesystem;

namespace {

class GuidanceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    init_torch_runtime();
    torch::manual_seed(0);
  }
};

FinetuneConfig head_config(int heads = 4, int hidden = 16) {
  FinetuneConfig f;
  f.attention_heads = heads;
  f.head_hidden = hidden;
  return f;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

GuidanceSample sample_from(const Scan& scan, int t, Direction dir = Direction::Forward) {
  return build_sequence_input(scan, t, 8, 0.4, dir);
}

}  // namespace

TEST_F(GuidanceTest, StableLinearIgnoresRowCount) {
  torch::nn::Linear layer(24, 12);
  auto x = torch::randn({100, 24});
  auto all = stable_linear(x, layer);
  for (int64_t r : {1, 7, 16, 33}) {
    auto part = stable_linear(x.narrow(0, 0, r), layer);
    EXPECT_TRUE(torch::equal(part, all.narrow(0, 0, r))) << r;
  }
  EXPECT_TRUE(torch::allclose(all, layer(x), 1e-5, 1e-5));
}

TEST_F(GuidanceTest, ConstantMotionReducesToStandardAttention) {
  MotionAwareAttention attn(16, 8, 4);
  for (int64_t n : {1, 3, 6}) {
    auto h = torch::randn({2, n, 16});
    auto c = torch::randn({8});
    auto z = c.expand({2, n, n, 8}).contiguous();
    EXPECT_TRUE(torch::equal(attn(h, z), attn->standard(h, c))) << n;
  }
}

TEST_F(GuidanceTest, JointPermutationEquivariance) {
  MotionAwareAttention attn(16, 8, 4);
  const int64_t n = 5;
  auto h = torch::randn({1, n, 16});
  auto z = torch::randn({1, n, n, 8});
  const auto perm = torch::tensor({3, 0, 4, 1, 2}, torch::kLong);
  auto hp = h.index_select(1, perm);
  auto zp = z.index_select(1, perm).index_select(2, perm);
  auto out = attn(h, z);
  auto outp = attn(hp, zp);
  EXPECT_TRUE(torch::equal(outp, out.index_select(1, perm)));
  // Oracle: direct per-query loop in double precision.
  auto hd = h.to(torch::kFloat64).squeeze(0);
  auto zd = z.to(torch::kFloat64).squeeze(0);
  auto mlp = [](AttentionMlp& m, const torch::Tensor& x) {
    auto w1 = m->fc1->weight.to(torch::kFloat64);
    auto b1 = m->fc1->bias.to(torch::kFloat64);
    auto w2 = m->fc2->weight.to(torch::kFloat64);
    auto b2 = m->fc2->bias.to(torch::kFloat64);
    return torch::matmul(torch::gelu(torch::matmul(x, w1.t()) + b1), w2.t()) + b2;
  };
  for (int64_t i = 0; i < n; ++i) {
    auto q = mlp(attn->q, hd[i]).view({4, 4});
    auto kv_in = torch::cat({hd, zd[i]}, -1);
    auto k = mlp(attn->k, kv_in).view({n, 4, 4});
    auto v = mlp(attn->v, kv_in).view({n, 4, 4});
    auto logits = (k * q.unsqueeze(0)).sum(-1) / 2.0;  // [n, heads]
    auto w = torch::softmax(logits, 0);
    auto o = (w.unsqueeze(-1) * v).sum(0).view({16});
    EXPECT_TRUE(torch::allclose(o.to(torch::kFloat32), out[0][i], 1e-5, 1e-5)) << i;
  }
}

TEST_F(GuidanceTest, SingleFrameAttentionReturnsItsValue) {
  MotionAwareAttention attn(16, 8, 4);
  auto h = torch::randn({3, 1, 16});
  auto z = torch::randn({3, 1, 1, 8});
  torch::Tensor scores;
  auto out = attn->forward(h, z, &scores);
  EXPECT_TRUE(torch::equal(out, attn->v(torch::cat({h.unsqueeze(1), z}, -1)).squeeze(1)));
  EXPECT_TRUE(torch::equal(scores, torch::ones_like(scores)));
}

TEST_F(GuidanceTest, UniformLogitsAverageValues) {
  MotionAwareAttention attn(16, 8, 4);
  {
    torch::NoGradGuard guard;
    attn->k->fc2->weight.zero_();
    attn->k->fc2->bias.zero_();
  }
  auto h = torch::randn({2, 5, 16});
  auto z = torch::randn({2, 5, 5, 8});
  auto values = attn->v(torch::cat({h.unsqueeze(1).expand({2, 5, 5, 16}), z}, -1));
  EXPECT_TRUE(torch::allclose(attn(h, z), values.mean(2), 1e-6, 1e-6));
  auto frame_values = attn->standard(h);
  auto w = attn->v->fc1->weight.narrow(1, 0, 16);
  auto v_std = attn->v->fc2(torch::gelu(torch::nn::functional::linear(h, w, attn->v->fc1->bias)));
  EXPECT_TRUE(torch::allclose(frame_values, v_std.mean(1, true).expand_as(frame_values), 1e-5, 1e-5));
}

TEST_F(GuidanceTest, StandardAttentionEqualsZeroedMotionWeights) {
  MotionAwareAttention attn(16, 8, 4);
  auto h = torch::randn({2, 6, 16});
  auto z = torch::randn({2, 6, 6, 8});
  auto standard = attn->standard(h);
  {
    torch::NoGradGuard guard;
    attn->k->fc1->weight.narrow(1, 16, 8).zero_();
    attn->v->fc1->weight.narrow(1, 16, 8).zero_();
  }
  EXPECT_TRUE(torch::allclose(attn(h, z), standard, 1e-5, 1e-6));
}

TEST_F(GuidanceTest, AttentionRowsSumToOne) {
  MotionAwareAttention attn(16, 8, 4);
  torch::Tensor scores;
  attn->forward(torch::randn({2, 7, 16}), torch::randn({2, 7, 7, 8}), &scores);
  ASSERT_EQ(scores.sizes(), (std::vector<int64_t>{2, 4, 7, 7}));
  EXPECT_TRUE(torch::allclose(scores.sum(-1), torch::ones({2, 4, 7}), 1e-6, 1e-6));
  attn->standard(torch::randn({2, 7, 16}), {}, &scores);
  EXPECT_TRUE(torch::allclose(scores.sum(-1), torch::ones({2, 4, 7}), 1e-6, 1e-6));
}

TEST_F(GuidanceTest, AttentionRejectsShapeMismatch) {
  MotionAwareAttention attn(16, 8, 4);
  EXPECT_THROW(attn(torch::randn({2, 3, 16}), torch::randn({2, 3, 2, 8})), ConfigError);
  EXPECT_THROW(attn(torch::randn({2, 3, 12}), torch::randn({2, 3, 3, 8})), ConfigError);
  EXPECT_THROW(MotionAwareAttention(18, 8, 4), ConfigError);
}

TEST_F(GuidanceTest, HeadsAreIndependent) {
  PlaneHeads heads(16, 8);
  auto x = torch::randn({4, 16});
  auto before = heads(x);
  ASSERT_EQ(before.sizes(), (std::vector<int64_t>{4, 10, 6}));
  {
    torch::NoGradGuard guard;
    for (auto& p : heads->heads[3]->parameters()) p.zero_();
  }
  auto after = heads(x);
  for (int64_t k = 0; k < 10; ++k) {
    if (k == 3) {
      EXPECT_TRUE(torch::equal(after.select(1, k), torch::zeros({4, 6})));
    } else {
      EXPECT_TRUE(torch::equal(after.select(1, k), before.select(1, k))) << k;
    }
  }
}

TEST(Denormalize, RoundTripAndClamp) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    std::array<double, 6> v{};
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    const auto back = normalize_motion(denormalize_motion(v));
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(back[static_cast<std::size_t>(c)], v[static_cast<std::size_t>(c)], 1e-9);
  }
  auto pred = torch::full({10, 6}, 5.0);
  const Movements m = denormalize_movements(pred);
  for (const auto& p : m) {
    EXPECT_DOUBLE_EQ(p.x, 100.0);
    EXPECT_DOUBLE_EQ(p.yaw, 180.0);
  }
  EXPECT_THROW(denormalize_movements(torch::zeros({9, 6})), ConfigError);
}

TEST(GuidanceLoss, Contract) {
  auto targets = torch::randn({3, 10, 6}) * 0.5;
  auto mask = torch::zeros({3, 10}, torch::kBool);
  mask[0][2] = true;
  mask[1][0] = true;
  mask[1][9] = true;
  EXPECT_EQ(guidance_loss(targets.clone(), targets, mask).item<double>(), 0.0);

  auto pred = targets.clone();
  pred[0][2] += 1.0;
  // Sample 0 contributes 1, sample 1 contributes 0, sample 2 has no targets and is skipped.
  EXPECT_NEAR(guidance_loss(pred, targets, mask).item<double>(), 0.5, 1e-6);

  auto one = torch::zeros({1, 10, 6});
  auto one_mask = torch::zeros({1, 10}, torch::kBool);
  one_mask[0][4] = true;
  auto one_pred = one.clone();
  one_pred[0][4] = torch::ones({6});
  EXPECT_NEAR(guidance_loss(one_pred, one, one_mask).item<double>(), 1.0, 1e-6);

  auto perturbed = pred.clone();
  perturbed[0][5] += 3.0;
  perturbed[2] += 1.0;
  EXPECT_EQ(guidance_loss(perturbed, targets, mask).item<double>(), guidance_loss(pred, targets, mask).item<double>());

  // 351 degrees of rotation difference is 9 degrees once wrapped.
  auto wrapped = one.clone();
  wrapped[0][4][5] = 351.0 / 90.0;
  EXPECT_NEAR(guidance_loss(wrapped, one, one_mask).item<double>(), (9.0 / 90.0) / 6.0, 1e-6);
}

TEST(GuidanceLoss, EmptyMaskGivesZeroLossAndGradient) {
  auto pred = torch::randn({2, 10, 6}, torch::requires_grad());
  auto loss = guidance_loss(pred, torch::zeros({2, 10, 6}), torch::zeros({2, 10}, torch::kBool));
  EXPECT_EQ(loss.item<double>(), 0.0);
  loss.backward();
  EXPECT_TRUE(torch::equal(pred.grad(), torch::zeros_like(pred)));
}

TEST_F(GuidanceTest, MaskedPlaneHeadsGetExactlyZeroGradient) {
  GuidanceModel model(small_encoder(), head_config(2, 8), Aggregator::MotionAware);
  auto images = torch::rand({3 * 4, 1, 16, 16});
  auto h = model->frame_features(images).view({3, 4, -1});
  auto motion = torch::rand({3, 4, 4, 6}) * 2 - 1;
  auto mask = torch::ones({3, 10}, torch::kBool);
  mask.select(1, 6).fill_(false);
  auto loss = guidance_loss(model->forward_sequence(h, motion), torch::randn({3, 10, 6}), mask);
  loss.backward();
  for (std::size_t k = 0; k < 10; ++k) {
    for (const auto& p : model->heads->heads[k]->parameters()) {
      if (k == 6) {
        EXPECT_TRUE(torch::equal(p.grad(), torch::zeros_like(p)));
      } else {
        EXPECT_GT(p.grad().abs().sum().item<double>(), 0.0) << k;
      }
    }
  }
}

TEST_F(GuidanceTest, GuidanceGradientMatchesFiniteDifferences) {
  FinetuneConfig fc = head_config(2, 8);
  GuidanceModel model(tiny_encoder(), fc, Aggregator::MotionAware);
  model->to(torch::kFloat64);
  model->eval();
  auto images = torch::rand({2 * 3, 1, 8, 8}, torch::kFloat64);
  auto motion = torch::rand({2, 3, 3, 6}, torch::kFloat64) * 2 - 1;
  auto targets = torch::randn({2, 10, 6}, torch::kFloat64) * 0.3;
  auto mask = torch::rand({2, 10}) > 0.3;
  mask[0][0] = true;
  auto loss = [&] {
    auto h = model->frame_features(images).view({2, 3, -1});
    return guidance_loss(model->forward_sequence(h, motion), targets, mask);
  };
  model->zero_grad();
  loss().backward();
  std::vector<torch::Tensor> params;
  for (const auto& p : model->parameters()) {
    if (p.grad().defined()) params.push_back(p);
  }
  Rng rng(21);
  torch::NoGradGuard guard;
  int checked = 0;
  while (checked < 20) {
    auto& p = params[rng.uniform_int(params.size())];
    const auto i = static_cast<int64_t>(rng.uniform_int(static_cast<std::uint64_t>(p.numel())));
    auto flat = p.view({-1});
    const double analytic = p.grad().view({-1})[i].item<double>();
    const double orig = flat[i].item<double>();
    const double eps = 1e-5;
    flat[i] = orig + eps;
    const double up = loss().item<double>();
    flat[i] = orig - eps;
    const double down = loss().item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    EXPECT_LT(rel, 1e-3) << "analytic " << analytic << " numeric " << numeric;
    ++checked;
  }
}

TEST_F(GuidanceTest, GruIsOrderSensitiveAndDeterministic) {
  GuidanceModel model(small_encoder(), head_config(), Aggregator::Gru);
  model->eval();
  auto h = torch::randn({1, 5, 16});
  auto motion = torch::rand({1, 5, 5, 6}) * 2 - 1;
  auto out = model->aggregate(h, motion);
  EXPECT_TRUE(torch::equal(out, model->aggregate(h, motion)));
  auto rev = torch::arange(4, -1, -1, torch::kLong);
  auto flipped = model->aggregate(h.index_select(1, rev), motion.index_select(1, rev).index_select(2, rev));
  EXPECT_GT((out - flipped).abs().max().item<double>(), 1e-4);

  auto single = model->aggregate(h.narrow(1, 0, 1), motion.narrow(1, 0, 1).narrow(2, 0, 1));
  auto step_in = torch::cat({model->gru_visual(h.narrow(1, 0, 1)), torch::zeros({1, 1, 8})}, -1);
  auto expected = std::get<0>(model->gru(step_in)).select(1, 0);
  EXPECT_TRUE(torch::allclose(single, expected, 1e-6, 1e-6));
}

TEST_F(GuidanceTest, FeatureExtraction) {
  GuidanceModel model(small_encoder(), head_config(), Aggregator::MotionAware);
  model->eval();
  const auto scans = tiny_scans(1);
  GuidanceSample s = sample_from(scans[0], 20);
  auto motion = pairwise_motion_tensor(s);
  ASSERT_EQ(motion.sizes(), (std::vector<int64_t>{8, 8, 6}));
  auto z = model->motion_features(motion);
  auto identity = model->motion_features(motion_tensor({Pose::identity()}));
  for (int64_t i = 0; i < 8; ++i) EXPECT_TRUE(torch::equal(z[i][i], identity[0]));
  // Early timesteps repeat frames; repeated frames give identical features.
  std::vector<const GrayImage*> images;
  for (const auto& f : s.frames) images.push_back(&f.image);
  auto h = model->frame_features(images_to_tensor(images));
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s.positions[i] == s.positions[i - 1]) {
      EXPECT_TRUE(torch::equal(h[static_cast<int64_t>(i)], h[static_cast<int64_t>(i - 1)]));
    }
  }
}

TEST_F(GuidanceTest, LayerwiseLearningRates) {
  EncoderConfig e = small_encoder();
  e.depth = 3;
  GuidanceModel model(e, head_config(), Aggregator::MotionAware);
  const auto groups = model->layer_groups(0.65);
  ASSERT_EQ(groups.size(), 5u);
  EXPECT_DOUBLE_EQ(groups[0].second, 0.65 * 0.65 * 0.65);
  EXPECT_DOUBLE_EQ(groups[1].second, 0.65 * 0.65);
  EXPECT_DOUBLE_EQ(groups[2].second, 0.65);
  EXPECT_DOUBLE_EQ(groups[3].second, 1.0);
  EXPECT_DOUBLE_EQ(groups[4].second, 1.0);
  std::size_t count = 0;
  for (const auto& g : groups) count += g.first.size();
  EXPECT_EQ(count, model->parameters().size());
}

TEST_F(GuidanceTest, AugmentationStaysInRange) {
  Rng rng(3);
  auto images = torch::rand({6, 2, 1, 8, 8});
  auto out = augment_images(images, 0.2, 0.2, rng);
  EXPECT_GE(out.min().item<double>(), 0.0);
  EXPECT_LE(out.max().item<double>(), 1.0);
  Rng none(3);
  EXPECT_TRUE(torch::allclose(augment_images(images, 0.0, 0.0, none), images, 1e-6, 1e-6));
}

TEST_F(GuidanceTest, AttentionDumpRowsSumToOne) {
  GuidanceModel model(small_encoder(), head_config(2, 8), Aggregator::MotionAware);
  const auto scans = tiny_scans(1);
  const GuidanceSample s = sample_from(scans[0], 100);
  TempDir a;
  TempDir b;
  dump_attention(*model, s, a.path);
  dump_attention(*model, s, b.path);
  for (int head = 0; head < 2; ++head) {
    const std::string stem = "attention_head" + std::to_string(head);
    ASSERT_TRUE(fs::exists(a.path / (stem + ".png")));
    EXPECT_EQ(slurp(a.path / (stem + ".csv")), slurp(b.path / (stem + ".csv")));
    EXPECT_EQ(slurp(a.path / (stem + ".png")), slurp(b.path / (stem + ".png")));
    const auto rows = read_lines(a.path / (stem + ".csv"));
    ASSERT_EQ(rows.size(), 8u);
    for (const auto& row : rows) {
      std::stringstream ss(row);
      std::string cell;
      double sum = 0.0;
      int cols = 0;
      while (std::getline(ss, cell, ',')) {
        sum += std::stod(cell);
        ++cols;
      }
      EXPECT_EQ(cols, 8);
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
  GuidanceModel gru(small_encoder(), head_config(), Aggregator::Gru);
  EXPECT_THROW(dump_attention(*gru, s, a.path), ConfigError);
}

TEST_F(GuidanceTest, ScratchInitSkipsPretrainedWeights) {
  const auto scans = tiny_scans(2);
  ExperimentConfig cfg = tiny_experiment();
  cfg.pretrain.epochs = 1;
  TempDir pre;
  PretrainOptions quiet;
  quiet.quiet = true;
  pretrain(cfg, scans, pre.path, quiet);
  WorldModel world = load_world_model(pre.path);
  GuidanceModel loaded = make_guidance_model(cfg, Aggregator::MotionAware, pre.path);
  GuidanceModel scratch = make_guidance_model(cfg, Aggregator::MotionAware);
  EXPECT_EQ(parameter_hash(*loaded->encoder), parameter_hash(*world->context));
  EXPECT_EQ(parameter_hash(*loaded->motion_encoder), parameter_hash(*world->motion_encoder));
  EXPECT_NE(parameter_hash(*scratch->encoder), parameter_hash(*world->context));

  ExperimentConfig wide = cfg;
  wide.encoder.embed_dim = 32;
  EXPECT_THROW(make_guidance_model(wide, Aggregator::MotionAware, pre.path), ConfigError);
}

TEST_F(GuidanceTest, FinetuneWritesCheckpointAndResumes) {
  const auto scans = tiny_scans(2);
  const ExperimentConfig cfg = tiny_experiment();
  FinetuneOptions opt;
  opt.aggregator = Aggregator::MotionAware;
  opt.quiet = true;
  TempDir full;
  const FinetuneSummary s = finetune(cfg, scans, Protocol::Sequential, full.path, opt);
  EXPECT_EQ(s.iterations, 20);
  EXPECT_FALSE(is_incomplete(full.path));
  const auto lines = read_lines(full.path / "finetune_log.csv");
  ASSERT_EQ(lines.size(), 22u);
  EXPECT_EQ(lines[0], "iteration,loss,lr,val_loss");
  const LoadedGuidance g = load_guidance_model(full.path);
  EXPECT_EQ(g.protocol, Protocol::Sequential);
  EXPECT_EQ(g.model->aggregator(), Aggregator::MotionAware);
  EXPECT_EQ(config_hash(g.config), config_hash(cfg));

  TempDir part;
  FinetuneOptions partial = opt;
  partial.max_iterations = 7;
  finetune(cfg, scans, Protocol::Sequential, part.path, partial);
  EXPECT_TRUE(is_incomplete(part.path));
  EXPECT_THROW(load_guidance_model(part.path), DataError);
  FinetuneOptions resume = opt;
  resume.resume = true;
  finetune(cfg, scans, Protocol::Sequential, part.path, resume);
  EXPECT_EQ(read_lines(part.path / "finetune_log.csv"), lines);
  EXPECT_EQ(parameter_hash(*load_guidance_model(part.path).model), parameter_hash(*g.model));

  ExperimentConfig other = cfg;
  other.finetune.lr = 3e-4;
  EXPECT_THROW(finetune(other, scans, Protocol::Sequential, part.path, resume), ConfigError);
  FinetuneOptions wrong = opt;
  wrong.aggregator = Aggregator::SingleFrame;
  EXPECT_THROW(finetune(cfg, scans, Protocol::Sequential, part.path, wrong), ConfigError);
}

TEST_F(GuidanceTest, ShortFinetuneReducesValidationLoss) {
  const auto train = tiny_scans(3);
  const auto val = tiny_scans(2, 200);
  ExperimentConfig cfg = tiny_experiment();
  cfg.finetune.iterations = 150;
  cfg.finetune.lr = 1e-3;
  cfg.finetune.eval_every = 50;
  FinetuneOptions opt;
  opt.aggregator = Aggregator::SingleFrame;
  opt.validation = &val;
  opt.quiet = true;
  TempDir dir;
  const FinetuneSummary s = finetune(cfg, train, Protocol::Single, dir.path, opt);
  EXPECT_LT(s.final_val_loss, s.initial_val_loss);
}
