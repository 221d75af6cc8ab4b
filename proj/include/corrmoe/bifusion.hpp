#pragma once

#include <string>
#include <vector>

#include "corrmoe/tape.hpp"

namespace corrmoe::nn {

struct MoEConfig {
  int num_experts = 3;
  int top_k = 1;
  int num_layers = 4;
  int hidden_ratio = 2;
  bool balance_loss = false;

  void validate() const;  // throws ConfigError
};

/// Per-token gate outcome. weights is zero outside the selected experts
/// and a softmax simplex over them; selected lists expert ids per token,
/// highest logit first (ties toward the lower index).
struct RoutingDecision {
  Var weights;      // (B, E, N, 1)
  Var logits_var;   // (B, E, N, 1), pre-mask gate outputs
  Tensor logits;    // value copy of logits_var
  std::vector<std::vector<std::vector<int>>> selected;  // [b][token]
  int num_experts = 0;

  /// Tokens per expert, counted under each token's highest-weight expert;
  /// sums exactly to B*N.
  std::vector<long> utilization() const;
};

/// Linear-complexity attention: competition (source softmax over tokens),
/// aggregation (kernelized C x C contraction), allocation (sink gating).
/// Never materializes an N x N matrix.
Var flow_attention(Tape& t, ParamStore& ps, const std::string& prefix, Var f);

/// TopK gate: linear map to expert logits, keep the top_k per token, mask
/// the rest to -inf, softmax over experts.
RoutingDecision moe_gate(Tape& t, ParamStore& ps, const std::string& prefix,
                         Var u, const MoEConfig& cfg);

/// Switch-style load balancing penalty over one routing decision
/// (num_experts * sum_e fraction_e * mean_prob_e, averaged over batch).
Var moe_balance_loss(Tape& t, const RoutingDecision& routing);

/// u = norm(f + attention(f)); fused = sum of selected experts' MLP
/// outputs weighted on the routing simplex (experts run only on their
/// routed tokens); returns norm(u + fused).
Var bifusion_layer(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                   const MoEConfig& cfg,
                   RoutingDecision* routing_out = nullptr);

/// num_layers stacked bifusion layers.
Var bifusion_stack(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                   const MoEConfig& cfg,
                   std::vector<RoutingDecision>* routings = nullptr);

}  // namespace corrmoe::nn
