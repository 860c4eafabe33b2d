#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "probeguide/config.hpp"
#include "probeguide/phantom.hpp"

namespace fixtures {

inline probeguide::EncoderConfig small_encoder() {
  probeguide::EncoderConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.predictor_depth = 2;
  c.predictor_dim = 16;
  c.predictor_heads = 2;
  c.motion_hidden = 16;
  return c;
}

inline probeguide::EncoderConfig tiny_encoder() {
  probeguide::EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.predictor_depth = 1;
  c.predictor_dim = 8;
  c.predictor_heads = 2;
  c.motion_hidden = 8;
  return c;
}

/// Short 16x16 scans over small phantoms.
inline std::vector<probeguide::Scan> tiny_scans(int count, int first_seed = 100) {
  probeguide::PhantomConfig pc;
  pc.resolution = 48;
  probeguide::ImageSpec spec;
  spec.height = spec.width = 16;
  std::vector<probeguide::Scan> scans;
  for (int i = 0; i < count; ++i) {
    const probeguide::Phantom ph = probeguide::build_phantom(pc, static_cast<std::uint64_t>(first_seed + i));
    probeguide::TrajectoryConfig t;
    t.duration = 150;
    t.seed = static_cast<std::uint64_t>(first_seed + i);
    scans.push_back(probeguide::generate_scan(ph, t, spec, "s" + std::to_string(first_seed + i)));
  }
  return scans;
}

inline probeguide::ExperimentConfig tiny_experiment() {
  probeguide::ExperimentConfig c;
  c.encoder = small_encoder();
  c.data.image.height = c.data.image.width = 16;
  c.pretrain.epochs = 3;
  c.pretrain.warmup_epochs = 1;
  c.pretrain.batch_size = 8;
  c.pretrain.pairs_per_scan = 8;
  c.finetune.iterations = 20;
  c.finetune.batch_single = 8;
  c.finetune.batch_sequential = 4;
  c.finetune.head_hidden = 16;
  c.finetune.attention_heads = 2;
  c.finetune.eval_every = 10;
  return c;
}

struct TempDir {
  std::filesystem::path path = std::filesystem::temp_directory_path() /
                               ("probeguide_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  TempDir() { std::filesystem::remove_all(path); }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  static inline int counter = 0;
};

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace fixtures
