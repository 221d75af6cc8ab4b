// Command-line driver: synthetic dataset generation, training,
// evaluation, ablation sweeps, and match visualization.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "corrmoe/errors.hpp"
#include "corrmoe/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
namespace run = corrmoe::run;
namespace synth = corrmoe::synth;
namespace model = corrmoe::model;
namespace nn = corrmoe::nn;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string out;
  std::string split = "test";
  std::string weights = "predicted";
  std::string checkpoint;
  int index = 0;
};

run::RunConfig resolve_config(const CommonArgs& args) {
  run::RunConfig base;
  if (args.preset == "desk") {
    base = run::desk_preset();
  } else if (args.preset == "paper") {
    base = run::paper_preset();
  } else {
    throw corrmoe::ConfigError("unknown preset '" + args.preset +
                               "' (expected desk or paper)");
  }
  if (!args.config_path.empty())
    return run::load_run_config(args.config_path, base);
  base.validate();
  return base;
}

run::WeightMode weight_mode(const std::string& name) {
  if (name == "predicted") return run::WeightMode::kPredicted;
  if (name == "oracle") return run::WeightMode::kOracle;
  if (name == "uniform") return run::WeightMode::kUniform;
  throw corrmoe::ConfigError("unknown weight mode '" + name +
                             "' (expected predicted, oracle, or uniform)");
}

std::string now_iso8601() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? "."
                                                    : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw corrmoe::IoError("cannot open " + path.string());
  out << text;
  if (!out.good()) throw corrmoe::IoError("short write to " + path.string());
}

/// Metrics report with a stamped header line that reruns may strip.
void write_metrics(const fs::path& dir, const std::string& stem,
                   const run::MetricsTable& m) {
  json j = json::parse(run::metrics_to_json_text(m));
  j["timestamp"] = now_iso8601();
  write_file(dir / (stem + ".json"), j.dump(2) + "\n");
  write_file(dir / (stem + ".txt"), run::metrics_to_table_text(m));
  std::cout << stem << ":\n" << run::metrics_to_table_text(m);
}

nn::ParamStore load_params(const std::string& checkpoint) {
  nn::ParamStore ps(0);
  model::load_checkpoint(checkpoint, ps);
  return ps;
}

int cmd_gen_data(const CommonArgs& args) {
  const run::RunConfig cfg = resolve_config(args);
  synth::DatasetConfig dcfg = synth::default_dataset_config();
  dcfg.pair_size = cfg.n;
  dcfg.outlier_ratio = cfg.outlier_ratio;
  dcfg.counts.train = cfg.train_pairs;
  dcfg.counts.val = cfg.eval_pairs;
  dcfg.counts.test = cfg.eval_pairs;
  dcfg.counts.cross_domain = cfg.eval_pairs;
  dcfg.counts.cross_scene = cfg.eval_pairs;
  const fs::path out = args.out.empty() ? fs::path(cfg.data_dir)
                                        : fs::path(args.out);
  synth::build_dataset(dcfg, out, args.seed);
  const synth::Dataset data = synth::Dataset::open(out);
  std::cout << "dataset written to " << out.string() << "\n";
  for (const std::string& split : data.splits())
    std::cout << "  " << split << ": " << data.entries(split).size()
              << " pairs\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  const run::RunConfig cfg = resolve_config(args);
  const synth::Dataset data = synth::Dataset::open(cfg.data_dir);
  const fs::path out = args.out.empty() ? fs::path("runs/train")
                                        : fs::path(args.out);
  const run::TrainResult res = run::train(cfg, data, args.seed, out);
  std::cout << "trained " << cfg.total_steps << " steps; step-0 cls "
            << res.step0_cls << " -> final cls " << res.final_cls << "\n";
  std::cout << "best val AUC@5 " << res.best_val_auc5 << " at step "
            << res.best_val_step << "\n";
  std::cout << "checkpoints: " << res.best_checkpoint.string() << ", "
            << res.last_checkpoint.string() << "\n";

  nn::ParamStore ps = load_params(res.best_checkpoint.string());
  const run::MetricsTable val =
      run::evaluate(cfg, ps, data, "val", run::WeightMode::kPredicted);
  write_metrics(out, "metrics_val", val);
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  const run::RunConfig cfg = resolve_config(args);
  const synth::Dataset data = synth::Dataset::open(cfg.data_dir);
  const run::WeightMode mode = weight_mode(args.weights);
  nn::ParamStore ps(0);
  if (mode == run::WeightMode::kPredicted) {
    const std::string ckpt = args.checkpoint.empty()
                                 ? "runs/train/best.ckpt.json"
                                 : args.checkpoint;
    model::load_checkpoint(ckpt, ps);
  }
  const run::MetricsTable m =
      run::evaluate(cfg, ps, data, args.split, mode);
  const fs::path out = args.out.empty() ? fs::path("runs/eval")
                                        : fs::path(args.out);
  write_metrics(out, "metrics_" + args.split + "_" + args.weights, m);
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  const run::RunConfig cfg = resolve_config(args);
  const synth::Dataset data = synth::Dataset::open(cfg.data_dir);
  const fs::path out = args.out.empty() ? fs::path("runs/ablate")
                                        : fs::path(args.out);
  const run::AblationReport report = run::ablate(cfg, data, args.seed, out);
  std::cout << run::ablation_to_table_text(report);
  std::cout << "report written to " << (out / "ablation.json").string()
            << "\n";
  return 0;
}

int cmd_viz(const CommonArgs& args) {
  const run::RunConfig cfg = resolve_config(args);
  const synth::Dataset data = synth::Dataset::open(cfg.data_dir);
  std::string split_key = args.split;
  std::replace(split_key.begin(), split_key.end(), '-', '_');
  const std::vector<synth::ManifestEntry>& entries = data.entries(split_key);
  if (args.index < 0 || args.index >= static_cast<int>(entries.size()))
    throw corrmoe::ConfigError("viz: index " + std::to_string(args.index) +
                               " out of range for split '" + args.split +
                               "' with " + std::to_string(entries.size()) +
                               " pairs");
  const synth::PairRecord rec = data.load(entries[args.index]);
  const run::WeightMode mode = weight_mode(args.weights);
  nn::ParamStore ps(0);
  if (mode == run::WeightMode::kPredicted) {
    const std::string ckpt = args.checkpoint.empty()
                                 ? "runs/train/best.ckpt.json"
                                 : args.checkpoint;
    model::load_checkpoint(ckpt, ps);
  }
  const fs::path out = args.out.empty() ? fs::path("runs/viz/match.ppm")
                                        : fs::path(args.out);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  const run::RenderLog log = run::visualize_matches(cfg, ps, rec, out, mode);
  std::cout << "wrote " << out.string() << " (" << log.width << "x"
            << log.height << "): " << log.green_lines << " green / "
            << log.red_lines << " red lines over " << log.keypoints
            << " keypoints\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corrmoe: two-view correspondence pruning at desk scale"};
  app.require_subcommand(1);
  CommonArgs args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "JSON config file");
    sub->add_option("--seed", args.seed, "random seed");
    sub->add_option("--preset", args.preset, "base preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--out", args.out, "output directory or file");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "build the synthetic dataset");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "score a dataset split");
  add_common(eval);
  eval->add_option("--split", args.split,
                   "val, test, cross-domain, or cross-scene")
      ->check(CLI::IsMember({"val", "test", "cross-domain", "cross-scene"}));
  eval->add_option("--weights", args.weights,
                   "predicted, oracle, or uniform")
      ->check(CLI::IsMember({"predicted", "oracle", "uniform"}));
  eval->add_option("--checkpoint", args.checkpoint, "checkpoint file");
  CLI::App* ablate = app.add_subcommand("ablate", "train and score variants");
  add_common(ablate);
  CLI::App* viz = app.add_subcommand("viz", "render one pair's matches");
  add_common(viz);
  viz->add_option("--split", args.split, "dataset split to draw from")
      ->check(CLI::IsMember({"train", "val", "test", "cross-domain",
                             "cross-scene"}));
  viz->add_option("--index", args.index, "pair index within the split");
  viz->add_option("--weights", args.weights,
                  "predicted, oracle, or uniform")
      ->check(CLI::IsMember({"predicted", "oracle", "uniform"}));
  viz->add_option("--checkpoint", args.checkpoint, "checkpoint file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // malformed invocation is a configuration error
  }

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (train->parsed()) return cmd_train(args);
    if (eval->parsed()) return cmd_eval(args);
    if (ablate->parsed()) return cmd_ablate(args);
    if (viz->parsed()) return cmd_viz(args);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const corrmoe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const corrmoe::PreconditionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}
