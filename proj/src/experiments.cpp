#include "probeguide/experiments.hpp"

#include "probeguide/checkpoint.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/world_model.hpp"

namespace probeguide {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool complete_with_hash(const fs::path& dir, const std::string& hash) {
  if (!fs::exists(dir / "meta.json") || is_incomplete(dir)) return false;
  return read_meta(dir).value("config_hash", "") == hash;
}

}  // namespace

void ensure_pretrained(const ExperimentConfig& config, const std::vector<Scan>& train, const fs::path& dir, bool quiet) {
  if (complete_with_hash(dir, config_hash(config))) return;
  PretrainOptions opt;
  opt.resume = true;
  opt.quiet = quiet;
  pretrain(config, train, dir, opt);
}

void ensure_finetuned(const ExperimentConfig& config, const std::vector<Scan>& train, Protocol protocol,
                      const FinetuneOptions& options, const fs::path& dir) {
  if (complete_with_hash(dir, config_hash(config))) {
    const json meta = read_meta(dir);
    const std::string init = options.init.empty() ? "none" : options.init.string();
    if (meta.value("aggregator", "") == to_string(options.aggregator) && meta.value("protocol", "") == to_string(protocol) &&
        meta.value("init", "") == init) {
      return;
    }
  }
  FinetuneOptions opt = options;
  opt.resume = true;
  finetune(config, train, protocol, dir, opt);
}

MetricsReport evaluate_checkpoint(const fs::path& checkpoint, const std::vector<Scan>& test, std::optional<Protocol> protocol) {
  const json meta = read_meta(checkpoint);
  if (meta.at("kind") == "oracle") {
    const ExperimentConfig config = load_checkpoint_config(checkpoint);
    const Protocol p = protocol.value_or(protocol_from_string(meta.value("protocol", "single")));
    OraclePredictor oracle;
    MetricsReport r = p == Protocol::Single ? eval_single_frame(oracle, test, config.protocol.single_fps)
                                            : eval_sequential(oracle, test, config.protocol.sequential_fps,
                                                              config.protocol.history, config.protocol.alpha);
    r.config_hash = meta.at("config_hash");
    return r;
  }
  LoadedGuidance g = load_guidance_model(checkpoint);
  if (protocol && *protocol != g.protocol) {
    throw ConfigError(checkpoint.string() + " was fine-tuned for the " + to_string(g.protocol) + " protocol");
  }
  const auto& pc = g.config.protocol;
  ModelPredictor predictor(g.model);
  MetricsReport r = g.protocol == Protocol::Single ? eval_single_frame(predictor, test, pc.single_fps)
                                                   : eval_sequential(predictor, test, pc.sequential_fps, pc.history, pc.alpha);
  r.config_hash = config_hash(g.config);
  return r;
}

Suite suite_from_string(const std::string& s) {
  if (s == "spatial") return Suite::Spatial;
  if (s == "motion") return Suite::Motion;
  if (s == "joint") return Suite::Joint;
  if (s == "motion-awareness") return Suite::MotionAwareness;
  throw ConfigError("unknown suite '" + s + "' (expected spatial, motion, joint or motion-awareness)");
}

std::vector<SuiteCell> run_suite(Suite suite, const ExperimentConfig& config, const std::vector<Scan>& train,
                                 const std::vector<Scan>& test, const fs::path& out, bool quiet) {
  struct Cell {
    std::string name;
    std::optional<PretrainMode> backbone;
    Protocol protocol;
    Aggregator aggregator;
  };
  std::vector<Cell> cells;
  if (suite == Suite::MotionAwareness) {
    cells = {{"scratch_no_motion", std::nullopt, Protocol::Sequential, Aggregator::NoMotion},
             {"scratch_motion", std::nullopt, Protocol::Sequential, Aggregator::MotionAware},
             {"joint_no_motion", PretrainMode::Joint, Protocol::Sequential, Aggregator::NoMotion},
             {"joint_motion", PretrainMode::Joint, Protocol::Sequential, Aggregator::MotionAware}};
  } else {
    cells = {{"scratch", std::nullopt, Protocol::Single, Aggregator::SingleFrame},
             {"spatial", PretrainMode::Spatial, Protocol::Single, Aggregator::SingleFrame},
             {"motion", PretrainMode::Motion, Protocol::Single, Aggregator::SingleFrame},
             {"joint", PretrainMode::Joint, Protocol::Single, Aggregator::SingleFrame}};
  }
  std::vector<SuiteCell> results;
  std::vector<std::pair<std::string, PlaneTable>> tables;
  for (const auto& cell : cells) {
    ExperimentConfig c = config;
    FinetuneOptions opt;
    opt.aggregator = cell.aggregator;
    opt.quiet = quiet;
    if (cell.backbone) {
      c.pretrain.mode = *cell.backbone;
      const fs::path pre = out / ("pretrain_" + to_string(*cell.backbone));
      ensure_pretrained(c, train, pre, quiet);
      opt.init = pre;
    }
    const fs::path dir = out / cell.name;
    ensure_finetuned(c, train, cell.protocol, opt, dir / "checkpoint");
    MetricsReport report = evaluate_checkpoint(dir / "checkpoint", test, cell.protocol);
    write_report(report, dir / "report.csv");
    write_report_json(report, dir / "report.json");
    if (!quiet) std::fprintf(stderr, "[ablate] %s average MAE %.4f\n", cell.name.c_str(), report.planes.average());
    tables.emplace_back(cell.name, report.planes);
    results.push_back({cell.name, std::move(report)});
  }
  write_comparison(tables, out / "comparison.csv");
  return results;
}

}  // namespace probeguide
