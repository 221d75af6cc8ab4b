#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "corrmoe/pipeline.hpp"
#include "corrmoe/synthgen.hpp"

namespace corrmoe::run {

/// Every training/evaluation hyperparameter with full-scale defaults; the
/// desk preset overrides the entries that dominate wall-clock cost so the
/// whole suite fits a single machine.
struct RunConfig {
  // model
  int n = 2000;            // correspondences per pair
  int channels = 128;      // feature width C
  int clusters = 250;      // soft-pool cluster count M
  int knn_stage1 = 9;
  int knn_stage2 = 6;
  int annular_group = 3;
  int fusion_layers = 4;   // L
  int experts = 3;
  int top_k = 1;
  double pruning_rate = 0.5;
  bool use_dual = true;
  bool use_moe = true;
  bool use_implicit = true;
  bool use_explicit = true;
  nn::StyleNorm style_norm = nn::StyleNorm::kPMix;

  // progressive mixstyle ramp
  double p_start = 0.2;
  double p_end = 0.5;
  double alpha = 0.1;

  // loss
  double tau = 0.5;
  long warmup_steps = 20000;  // classification-only lead-in
  int virtual_pairs = 64;

  // optimizer
  int batch = 32;
  double lr = 1e-3;
  double lr_decay = 0.9;
  long lr_decay_every = 20000;
  long total_steps = 500000;
  long ablate_steps = 500000;  // shared budget for every ablation variant

  // bookkeeping
  long log_every = 100;
  long val_every = 1000;
  int train_pairs = 2000;       // gen-data manifest size
  int eval_pairs = 200;         // per held-out split
  double outlier_ratio = 0.7;
  std::string data_dir = "data";

  /// Throws ConfigError on any value its consuming module would reject.
  void validate() const;
};

/// Desk-scale preset: the full pipeline at a width/budget that trains in
/// well under an hour while keeping every architectural element active.
RunConfig desk_preset();
/// Paper-scale defaults, spelled out for documentation fidelity.
RunConfig paper_preset();

/// Strict JSON codec: unknown keys are rejected so config typos fail
/// loudly. Missing keys keep their preset defaults.
RunConfig run_config_from_json_text(const std::string& text,
                                    const RunConfig& base = RunConfig());
RunConfig load_run_config(const std::filesystem::path& path,
                          const RunConfig& base = RunConfig());
std::string run_config_to_json_text(const RunConfig& cfg);

/// Stepped decay: lr * decay^floor(step / every).
double lr_at(const RunConfig& cfg, long step);

model::ModelConfig model_config(const RunConfig& cfg);
model::LossConfig loss_config(const RunConfig& cfg);
/// Mixstyle ramp position expressed in optimizer steps.
nn::PMixParams pmix_params(const RunConfig& cfg, long step, bool training);

// ---- metrics -----------------------------------------------------------

struct SplitScore {
  double auc5 = 0.0, auc10 = 0.0, auc20 = 0.0;
  double precision = 0.0, recall = 0.0, f_score = 0.0;
  int pairs = 0;
  int failures = 0;  // geometry failures, scored at 180 degrees
};

struct MetricsTable {
  SplitScore overall;
  std::vector<std::pair<std::string, SplitScore>> per_domain;  // sorted
  std::vector<std::pair<std::string, SplitScore>> per_scene;   // sorted
  /// Token counts per "layer<i>.expert<j>", summed over evaluated pairs;
  /// empty when the fusion stack is disabled.
  std::vector<std::pair<std::string, long>> expert_utilization;
};

std::string metrics_to_json_text(const MetricsTable& m);
std::string metrics_to_table_text(const MetricsTable& m);

/// How per-correspondence weights are produced during evaluation.
enum class WeightMode {
  kPredicted,  // trained network
  kOracle,     // ground-truth labels bypass the network (upper bound)
  kUniform,    // all-ones weights (lower-bound baseline)
};

/// Scores one split: per pair an essential estimate, pose error against
/// ground truth, and full-size inlier classification at threshold 1e-4.
/// Aggregation is a fold over the entry list, so entry order cannot
/// change any table value. Throws RuntimeFailure if a cross-domain entry
/// carries a training domain id.
MetricsTable evaluate_entries(const RunConfig& cfg, nn::ParamStore& ps,
                              const synth::Dataset& data,
                              const std::vector<synth::ManifestEntry>& entries,
                              WeightMode mode);
MetricsTable evaluate(const RunConfig& cfg, nn::ParamStore& ps,
                      const synth::Dataset& data, const std::string& split,
                      WeightMode mode);

// ---- training ----------------------------------------------------------

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double total = 0.0, cls = 0.0, ess = 0.0;
  bool ess_active = false;
  std::vector<long> expert_tokens;  // per expert, summed over layers
};

struct TrainResult {
  std::filesystem::path best_checkpoint, last_checkpoint, log_path;
  double best_val_auc5 = 0.0;
  long best_val_step = -1;
  double step0_cls = 0.0;
  double final_cls = 0.0;
  std::vector<TrainLogEntry> log;
};

/// Adam with the stepped schedule; checkpoints the best validation
/// AUC@5 model and the final state under out_dir, and writes the loss /
/// utilization log as JSON. Fully reproducible from (cfg, seed). Throws
/// RuntimeFailure on a non-finite loss, naming the offending batch's
/// record ids. `resume` continues from an existing store instead of a
/// fresh seed-initialized one.
TrainResult train(const RunConfig& cfg, const synth::Dataset& data,
                  std::uint64_t seed, const std::filesystem::path& out_dir,
                  nn::ParamStore* resume = nullptr);

// ---- ablation ----------------------------------------------------------

struct AblationRow {
  std::string name;
  MetricsTable in_domain;      // test split
  MetricsTable cross_domain;   // held-out domains
};

struct AblationReport {
  std::vector<AblationRow> rows;
  long steps = 0;
  std::uint64_t seed = 0;
};

/// Names of the ablation roster, "full" first: branch variants
/// {moe_only, dual_only, implicit_off, explicit_off} and normalization
/// variants {pmix_off, pmix_in, pmix_fixed}.
std::vector<std::string> ablation_roster();

/// Trains every roster variant under the same seed and ablate_steps
/// budget, then scores the test and cross-domain splits.
AblationReport ablate(const RunConfig& cfg, const synth::Dataset& data,
                      std::uint64_t seed,
                      const std::filesystem::path& out_dir);

std::string ablation_to_json_text(const AblationReport& report);
std::string ablation_to_table_text(const AblationReport& report);

// ---- visualization -----------------------------------------------------

struct RenderLog {
  int keypoints = 0;
  int green_lines = 0;  // predicted inlier, correct
  int red_lines = 0;    // predicted inlier, actually outlier
  int width = 0, height = 0;
};

/// Renders both views side by side as a binary PPM: keypoint dots plus a
/// line per predicted inlier, green when the ground-truth label agrees
/// and red otherwise. Throws IoError when out_path is not writable.
RenderLog visualize_matches(const RunConfig& cfg, nn::ParamStore& ps,
                            const synth::PairRecord& pair,
                            const std::filesystem::path& out_path,
                            WeightMode mode = WeightMode::kPredicted);

}  // namespace corrmoe::run
