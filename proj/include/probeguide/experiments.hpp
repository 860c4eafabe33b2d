#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "probeguide/config.hpp"
#include "probeguide/guidance.hpp"
#include "probeguide/protocols.hpp"

namespace probeguide {

/// Pre-trains into `dir`, reusing a complete checkpoint with the same config hash and
/// resuming an incomplete one.
void ensure_pretrained(const ExperimentConfig& config, const std::vector<Scan>& train, const std::filesystem::path& dir,
                       bool quiet);

/// Fine-tunes into `dir` with the same reuse/resume rules.
void ensure_finetuned(const ExperimentConfig& config, const std::vector<Scan>& train, Protocol protocol,
                      const FinetuneOptions& options, const std::filesystem::path& dir);

/// Evaluates a checkpoint under its protocol. A checkpoint whose meta kind is "oracle"
/// predicts the ground truth.
MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<Scan>& test,
                                  std::optional<Protocol> protocol = std::nullopt);

struct SuiteCell {
  std::string name;
  MetricsReport report;
};

enum class Suite { Spatial, Motion, Joint, MotionAwareness };

Suite suite_from_string(const std::string& s);

/// World-modeling suites (spatial, motion, joint) fine-tune single-frame models from
/// scratch and from spatial-only, motion-only and joint pre-training. The
/// motion-awareness suite fine-tunes sequential models with and without motion from a
/// scratch backbone and from the joint backbone. Each cell writes
/// <out>/<cell>/report.csv and report.json; the suite writes <out>/comparison.csv.
std::vector<SuiteCell> run_suite(Suite suite, const ExperimentConfig& config, const std::vector<Scan>& train,
                                 const std::vector<Scan>& test, const std::filesystem::path& out, bool quiet);

}  // namespace probeguide
