#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "probeguide/checkpoint.hpp"
#include "probeguide/config.hpp"
#include "probeguide/dataset.hpp"
#include "probeguide/errors.hpp"
#include "probeguide/experiments.hpp"
#include "probeguide/guidance.hpp"
#include "probeguide/plot.hpp"
#include "probeguide/protocols.hpp"
#include "probeguide/world_model.hpp"

namespace fs = std::filesystem;
using namespace probeguide;

namespace {

// Refuses to overwrite a non-empty output without --force; --force clears it first.
void prepare_output(const fs::path& out, bool force, bool resume = false) {
  if (resume || is_empty_dir(out)) return;
  if (!force) throw ConfigError(out.string() + " is not empty (use --force to overwrite)");
  fs::remove_all(out);
}

std::vector<Scan> load_checked(const fs::path& data, const std::string& split, const ExperimentConfig& config) {
  return load_split(data, split, data_config_hash(config));
}

struct Common {
  std::string config;
  std::string data;
  std::string out;
  bool force = false;
  bool quiet = false;
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"probeguide: world-model pre-training and probe guidance on synthetic cardiac scans"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  DatasetRequest request;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate train/test scans");
  gen_cmd->add_option("--config", gen.config, "Config JSON (toy defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output data directory");
  gen_cmd->add_option("--train-scans", request.train_scans);
  gen_cmd->add_option("--test-scans", request.test_scans);
  gen_cmd->add_option("--seed", request.seed);
  gen_cmd->add_option("--test-seed-offset", request.test_seed_offset);
  gen_cmd->add_flag("--force", gen.force);
  gen_cmd->add_flag("--quiet", gen.quiet);
  bool train_set = false;
  bool test_set = false;
  bool seed_set = false;

  // pretrain
  Common pre;
  std::string pre_mode;
  bool pre_resume = false;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pre-train the world model");
  pre_cmd->add_option("--config", pre.config);
  pre_cmd->add_option("--data", pre.data);
  pre_cmd->add_option("--out", pre.out)->required();
  pre_cmd->add_option("--mode", pre_mode, "spatial, motion or joint");
  pre_cmd->add_flag("--resume", pre_resume);
  pre_cmd->add_flag("--force", pre.force);
  pre_cmd->add_flag("--quiet", pre.quiet);

  // finetune
  Common fin;
  std::string fin_init = "none";
  std::string fin_protocol;
  std::string fin_aggregator;
  std::string fin_val_split;
  bool fin_resume = false;
  auto* fin_cmd = app.add_subcommand("finetune", "Fine-tune a guidance model");
  fin_cmd->add_option("--config", fin.config);
  fin_cmd->add_option("--init", fin_init, "Pre-training checkpoint or 'none'");
  fin_cmd->add_option("--protocol", fin_protocol, "single or sequential")->required();
  fin_cmd->add_option("--aggregator", fin_aggregator, "motion-aware, no-motion or gru (sequential only)");
  fin_cmd->add_option("--data", fin.data);
  fin_cmd->add_option("--out", fin.out)->required();
  fin_cmd->add_option("--val-split", fin_val_split, "Split used only for validation-loss logging");
  fin_cmd->add_flag("--resume", fin_resume);
  fin_cmd->add_flag("--force", fin.force);
  fin_cmd->add_flag("--quiet", fin.quiet);

  // eval
  Common ev;
  std::string ev_checkpoint;
  std::string ev_protocol;
  std::string ev_split = "test";
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  ev_cmd->add_option("--checkpoint", ev_checkpoint)->required();
  ev_cmd->add_option("--protocol", ev_protocol);
  ev_cmd->add_option("--data", ev.data);
  ev_cmd->add_option("--split", ev_split);
  ev_cmd->add_option("--out", ev.out)->required();
  ev_cmd->add_flag("--force", ev.force);

  // ablate
  Common ab;
  std::string ab_suite;
  std::uint64_t ab_seed = 0;
  bool ab_seed_set = false;
  auto* ab_cmd = app.add_subcommand("ablate", "Run an ablation suite");
  ab_cmd->add_option("--suite", ab_suite, "spatial, motion, joint or motion-awareness")->required();
  ab_cmd->add_option("--config", ab.config);
  ab_cmd->add_option("--data", ab.data);
  ab_cmd->add_option("--out", ab.out)->required();
  ab_cmd->add_option("--seed", ab_seed);
  ab_cmd->add_flag("--force", ab.force);
  ab_cmd->add_flag("--quiet", ab.quiet);

  // attention
  Common at;
  std::string at_checkpoint;
  std::size_t at_scan = 0;
  int at_t = 0;
  auto* at_cmd = app.add_subcommand("attention", "Dump attention maps of a sequential checkpoint");
  at_cmd->add_option("--checkpoint", at_checkpoint)->required();
  at_cmd->add_option("--data", at.data);
  at_cmd->add_option("--scan", at_scan, "Index into the test split");
  at_cmd->add_option("--t", at_t, "1-based timestep of the decimated scan (default: last)");
  at_cmd->add_option("--out", at.out)->required();
  at_cmd->add_flag("--force", at.force);

  // plot
  std::string plot_report_path;
  std::string plot_log_path;
  std::string plot_attention_path;
  std::string plot_out;
  bool plot_force = false;
  auto* plot_cmd = app.add_subcommand("plot", "Render a report, training log or attention CSV");
  auto* source = plot_cmd->add_option_group("source");
  source->add_option("--report", plot_report_path);
  source->add_option("--log", plot_log_path);
  source->add_option("--attention", plot_attention_path);
  source->require_option(1);
  plot_cmd->add_option("--out", plot_out)->required();
  plot_cmd->add_flag("--force", plot_force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) {
      train_set = gen_cmd->count("--train-scans") > 0;
      test_set = gen_cmd->count("--test-scans") > 0;
      seed_set = gen_cmd->count("--seed") > 0;
      const ExperimentConfig config = load_config(gen.config);
      if (!train_set) request.train_scans = config.data.train_scans;
      if (!test_set) request.test_scans = config.data.test_scans;
      if (!seed_set) request.seed = config.data.seed;
      request.force = gen.force;
      request.quiet = gen.quiet;
      const fs::path out = gen.out.empty() ? default_data_root() : fs::path(gen.out);
      generate_dataset(config, out, request);
      std::printf("wrote %d train and %d test scans to %s\n", request.train_scans, request.test_scans, out.c_str());
    } else if (*pre_cmd) {
      ExperimentConfig config = load_config(pre.config);
      if (!pre_mode.empty()) config.pretrain.mode = pretrain_mode_from_string(pre_mode);
      config.validate();
      const fs::path data = pre.data.empty() ? default_data_root() : fs::path(pre.data);
      const auto train = load_checked(data, "train", config);
      prepare_output(pre.out, pre.force, pre_resume);
      PretrainOptions opt;
      opt.resume = pre_resume;
      opt.quiet = pre.quiet;
      const auto s = pretrain(config, train, pre.out, opt);
      std::printf("pre-trained %lld/%lld steps into %s\n", static_cast<long long>(s.steps),
                  static_cast<long long>(s.total_steps), pre.out.c_str());
    } else if (*fin_cmd) {
      const ExperimentConfig config = load_config(fin.config);
      config.validate();
      const Protocol protocol = protocol_from_string(fin_protocol);
      FinetuneOptions opt;
      opt.aggregator = fin_aggregator.empty()
                           ? (protocol == Protocol::Single ? Aggregator::SingleFrame : Aggregator::MotionAware)
                           : aggregator_from_string(fin_aggregator);
      if (fin_init != "none") opt.init = fin_init;
      opt.resume = fin_resume;
      opt.quiet = fin.quiet;
      const fs::path data = fin.data.empty() ? default_data_root() : fs::path(fin.data);
      const auto train = load_checked(data, "train", config);
      std::vector<Scan> val;
      if (!fin_val_split.empty()) {
        if (fin_val_split == "test") {
          std::fprintf(stderr, "warning: validation loss on the test split is logged only, never used for selection\n");
        }
        val = load_checked(data, fin_val_split, config);
        opt.validation = &val;
      }
      prepare_output(fin.out, fin.force, fin_resume);
      const auto s = finetune(config, train, protocol, fin.out, opt);
      std::printf("fine-tuned %lld iterations into %s\n", static_cast<long long>(s.iterations), fin.out.c_str());
    } else if (*ev_cmd) {
      const fs::path data = ev.data.empty() ? default_data_root() : fs::path(ev.data);
      const ExperimentConfig config = load_checkpoint_config(ev_checkpoint);
      const auto test = load_checked(data, ev_split, config);
      std::optional<Protocol> protocol;
      if (!ev_protocol.empty()) protocol = protocol_from_string(ev_protocol);
      prepare_output(ev.out, ev.force);
      fs::create_directories(ev.out);
      mark_incomplete(ev.out);
      const MetricsReport report = evaluate_checkpoint(ev_checkpoint, test, protocol);
      write_report(report, fs::path(ev.out) / "report.csv");
      write_report_json(report, fs::path(ev.out) / "report.json");
      clear_incomplete(ev.out);
      std::printf("%s protocol: average MAE %.4f (translation %.4f mm, rotation %.4f deg)\n", report.protocol.c_str(),
                  report.planes.average(), report.planes.avg_trans(), report.planes.avg_rot());
    } else if (*ab_cmd) {
      ab_seed_set = ab_cmd->count("--seed") > 0;
      ExperimentConfig config = load_config(ab.config);
      if (ab_seed_set) {
        config.pretrain.seed = ab_seed;
        config.finetune.seed = ab_seed;
      }
      config.validate();
      const Suite suite = suite_from_string(ab_suite);
      const fs::path data = ab.data.empty() ? default_data_root() : fs::path(ab.data);
      const auto train = load_checked(data, "train", config);
      const auto test = load_checked(data, "test", config);
      prepare_output(ab.out, ab.force);
      fs::create_directories(ab.out);
      mark_incomplete(ab.out);
      const auto cells = run_suite(suite, config, train, test, ab.out, ab.quiet);
      clear_incomplete(ab.out);
      for (const auto& cell : cells) std::printf("%-18s %.4f\n", cell.name.c_str(), cell.report.planes.average());
    } else if (*at_cmd) {
      LoadedGuidance g = load_guidance_model(at_checkpoint);
      if (g.protocol != Protocol::Sequential) throw ConfigError(at_checkpoint + " is not a sequential checkpoint");
      const fs::path data = at.data.empty() ? default_data_root() : fs::path(at.data);
      const auto test = load_checked(data, "test", g.config);
      if (at_scan >= test.size()) throw ConfigError("--scan is out of range");
      const Scan scan = decimate(test[at_scan], g.config.protocol.sequential_fps);
      const int length = static_cast<int>(scan.frames.size());
      const int t = at_t == 0 ? length : at_t;
      if (t < 1 || t > length) throw ConfigError("--t must lie in [1, " + std::to_string(length) + "]");
      prepare_output(at.out, at.force);
      const GuidanceSample sample =
          build_sequence_input(scan, t, g.config.protocol.history, g.config.protocol.alpha, Direction::Forward);
      g.model->eval();
      torch::NoGradGuard no_grad;
      dump_attention(*g.model, sample, at.out);
      std::printf("wrote attention maps to %s\n", at.out.c_str());
    } else if (*plot_cmd) {
      if (fs::exists(plot_out) && !plot_force) throw ConfigError(plot_out + " exists (use --force to overwrite)");
      if (!plot_report_path.empty()) plot_report(plot_report_path, plot_out);
      if (!plot_log_path.empty()) plot_log(plot_log_path, plot_out);
      if (!plot_attention_path.empty()) plot_attention(plot_attention_path, plot_out);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
