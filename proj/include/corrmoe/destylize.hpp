#pragma once

#include <string>
#include <vector>

#include "corrmoe/blocks.hpp"
#include "corrmoe/tape.hpp"

namespace corrmoe::nn {

/// KNN graph in feature space. Edge channels are [f_i || f_ij] (anchor
/// first), or [f_i || f_ij - f_i] when built with edge_residual.
struct NeighborGraph {
  Var edges;                                   // (B, 2C, N, k)
  std::vector<std::vector<int>> neighbor_idx;  // per batch, row-major (n, j)
  int k = 0;
};

/// Soft-pools N items into m ordered clusters: assignment logits from a
/// pointwise map, softmax over items per cluster, then G = F A^T.
Var diffpool(Tape& t, ParamStore& ps, const std::string& prefix, Var f, int m);

/// Encodes a coarse cluster graph: pointcn block plus a zero-initialized
/// learned mixing of the ordered cluster positions, residually added.
Var oa_filter(Tape& t, ParamStore& ps, const std::string& prefix, Var g);

/// Restores item resolution: assignment logits from the original feature
/// map, softmax over clusters per item, then G_filtered contracted over
/// clusters.
Var diffunpool(Tape& t, ParamStore& ps, const std::string& prefix,
               Var f_original, Var g_filtered);

/// k nearest neighbors per item by Euclidean feature distance; self
/// excluded, ties broken toward the lower index. Requires 1 <= k < N.
NeighborGraph build_knn_graph(Tape& t, Var f, int k,
                              bool edge_residual = false);

enum class MdaAxis { kSpatial, kNeighbor, kChannel };

/// One attention stage: encode with a pointcn block, squeeze the
/// complementary axes by max-pool + avg-pool, gate through a bottleneck
/// MLP + sigmoid, and add the gated features back onto the encoding.
/// forced_gate overrides the gate with a constant (tests).
Var mda_stage(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
              MdaAxis axis, const double* forced_gate = nullptr);

/// Spatial -> neighbor -> channel attention over a neighbor-graph tensor.
Var mda_attention(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
                  const double* forced_gate = nullptr);

/// Collapses the neighbor axis k -> k/group -> 1 with two grouped
/// convolutions and an interior nonlinearity; maps channels to cout.
/// Throws ConfigError when k is not divisible by group.
Var annular_conv(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
                 int cout, int group = 3);

/// Style-normalization choice at the branch boundaries; the non-PMix
/// modes exist for the normalization ablation.
enum class StyleNorm { kPMix, kNone, kInstanceNorm, kMixstyleFixed };

/// Activation probability used by the kMixstyleFixed mode (the classic
/// non-progressive schedule).
inline constexpr double kFixedMixProb = 0.5;

struct DualBranchConfig {
  int clusters = 250;
  int k = 9;
  int group = 3;
  bool edge_residual = false;
  bool use_implicit = true;
  bool use_explicit = true;
  StyleNorm norm = StyleNorm::kPMix;
};

/// De-stylization dual branch: style-normalized front-end, then the
/// implicit (pool/filter/unpool) and explicit (KNN/attention/annular)
/// paths, each closed by its own normalization site, concatenated to 2C
/// channels (C when one branch is disabled). PMix sites flip their
/// activation coins independently. Throws ConfigError when both branches
/// are disabled.
Var dual_branch(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                const DualBranchConfig& cfg, const PMixParams& pmix_params,
                RngStream& rng);

}  // namespace corrmoe::nn
