#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "corrmoe/bifusion.hpp"
#include "corrmoe/blocks.hpp"
#include "corrmoe/destylize.hpp"
#include "corrmoe/geometry.hpp"
#include "corrmoe/rng.hpp"
#include "corrmoe/synthgen.hpp"
#include "corrmoe/tape.hpp"

namespace corrmoe::model {

/// Architecture of one pruning module and the knobs the ablation study
/// flips. Defaults follow the reference configuration; the harness scales
/// them down for desk runs.
struct ModelConfig {
  int channels = 128;   // feature width C
  int clusters = 250;   // soft-pool cluster count M
  int knn_stage1 = 9;
  int knn_stage2 = 6;
  int annular_group = 3;
  bool edge_residual = false;
  bool use_dual = true;  // de-stylization branch; off = MoE-only variant
  bool use_moe = true;   // fusion stack; off = dual-only variant
  bool use_implicit = true;
  bool use_explicit = true;
  nn::StyleNorm style_norm = nn::StyleNorm::kPMix;
  nn::MoEConfig moe;
  double pruning_rate = 0.5;
  double verify_threshold = 1e-4;

  void validate() const;  // throws ConfigError
};

/// Result of one pruning stage over a batch of correspondence sets; the
/// vectors hold one entry per batch element. `logits_var` covers every
/// stage input item, `weights_var` only the retained ones.
struct PruningOutput {
  std::vector<geom::CorrespondenceSet> cands;  // retained subsets
  std::vector<Eigen::VectorXd> weights;        // tanh(relu(kept logits))
  std::vector<Eigen::VectorXd> logits;         // raw per-input scores
  std::vector<std::vector<int>> keep_idx;      // ascending, into the input
  nn::Var logits_var;                          // (B, 1, N, 1)
  nn::Var weights_var;                         // (B, 1, ceil(rate*N), 1)
  std::vector<nn::RoutingDecision> routings;   // one per fusion layer
};

/// Embed -> de-stylization dual branch -> fusion stack -> prediction
/// head; retains the top half of items by logit (ties toward the lower
/// index). Stage 1 reads 4 coordinate channels, stage 2 reads 5
/// (coordinates plus the previous stage's weight).
PruningOutput pruning_module(nn::Tape& t, nn::ParamStore& ps,
                             const std::string& prefix,
                             const std::vector<geom::CorrespondenceSet>& sets,
                             nn::Var stage_input, int stage,
                             const ModelConfig& cfg,
                             const nn::PMixParams& pmix, RngStream& rng);

struct ForwardResult {
  PruningOutput stage1, stage2;
  std::vector<nn::Var> e_vars;  // per-element essential estimates (1,3,3,1)
  std::vector<geom::EssentialMatrix> e_hat;
  /// False when fewer than 8 stage-2 weights were positive and the
  /// estimate fell back to uniform weights (geometry loss skipped).
  std::vector<bool> ess_ok;
  std::vector<geom::VerificationResult> full_mask;  // vs the full input
};

/// Two pruning iterations (coords, then pruned coords plus stage-1
/// weights), a differentiable weighted eight-point per element, and a
/// full-size verification mask. All sets must share one size N >= 64.
ForwardResult corrmoe_forward(nn::Tape& t, nn::ParamStore& ps,
                              const std::vector<geom::CorrespondenceSet>& batch,
                              const ModelConfig& cfg,
                              const nn::PMixParams& pmix, RngStream& rng);

/// 1/0 per row by symmetric epipolar distance against e at threshold.
Eigen::VectorXd epipolar_labels(const geom::EssentialMatrix& e,
                                const geom::CorrespondenceSet& set,
                                double threshold = synth::kLabelThreshold);

/// Sum over stages of mean BCE-with-logits, each stage's logits scaled by
/// a learnable positive temperature exp(loss.temp<j>) initialized at 1.
nn::Var classification_loss(nn::Tape& t, nn::ParamStore& ps,
                            const std::vector<nn::Var>& stage_logits,
                            const std::vector<nn::Tensor>& stage_labels,
                            std::vector<double>* per_stage = nullptr,
                            double cap = 15.0);

/// Mean symmetric epipolar quotient of the estimate over noise-free
/// virtual correspondences.
nn::Var essential_loss(nn::Tape& t, nn::Var e_hat,
                       const geom::CorrespondenceSet& virtual_pairs);

struct LossConfig {
  double tau = 0.5;
  long warmup_steps = 0;  // geometry term joins once step >= warmup_steps
  int virtual_pair_count = 64;
  double bce_cap = 15.0;
  double label_threshold = synth::kLabelThreshold;
};

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double ess = 0.0;  // 0 while inactive, keeping total = cls + tau*ess
  std::vector<double> per_stage_cls;
  double tau = 0.0;
  bool ess_active = false;
  nn::Var total_var;
};

/// total = cls + tau * ess, with the geometry term warmed up by step
/// count and skipped for elements that fell back to uniform weights.
LossReport hybrid_loss(nn::Tape& t, nn::ParamStore& ps,
                       const ForwardResult& fwd,
                       const std::vector<synth::PairRecord>& records,
                       long step, const LossConfig& cfg);

// ---- checkpointing -----------------------------------------------------

struct CheckpointMeta {
  int epoch = 0;
  int total_epochs = 1;
  long step = 0;  // optimizer steps taken
};

/// Self-describing JSON container: version, schedule position, and every
/// parameter with its Adam state. Doubles round-trip exactly.
void save_checkpoint(const std::filesystem::path& path,
                     const nn::ParamStore& ps, const CheckpointMeta& meta);

/// Replaces the store's contents. Throws IoError on missing file, parse
/// failure, or version mismatch.
CheckpointMeta load_checkpoint(const std::filesystem::path& path,
                               nn::ParamStore& ps);

}  // namespace corrmoe::model
