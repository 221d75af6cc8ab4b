#include "corrmoe/bifusion.hpp"

#include <algorithm>
#include <utility>

#include "corrmoe/errors.hpp"

namespace corrmoe::nn {

void MoEConfig::validate() const {
  if (num_experts < 1)
    throw ConfigError("moe: num_experts must be >= 1, got " +
                      std::to_string(num_experts));
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("moe: need 1 <= top_k <= num_experts, got top_k=" +
                      std::to_string(top_k) + " num_experts=" +
                      std::to_string(num_experts));
  if (num_layers < 1)
    throw ConfigError("moe: num_layers must be >= 1, got " +
                      std::to_string(num_layers));
  if (hidden_ratio < 1)
    throw ConfigError("moe: hidden_ratio must be >= 1, got " +
                      std::to_string(hidden_ratio));
}

std::vector<long> RoutingDecision::utilization() const {
  std::vector<long> counts(num_experts, 0);
  for (const auto& batch : selected)
    for (const auto& ids : batch) ++counts[ids.front()];
  return counts;
}

Var flow_attention(Tape& t, ParamStore& ps, const std::string& prefix,
                   Var f) {
  const Shape s = t.val(f).shape();
  if (s.k != 1)
    throw PreconditionError("flow_attention: input must be (B,C,N,1)");

  auto proj = [&](const char* name) {
    Var w = t.param(ps, prefix + "." + name + ".w", {1, s.c, s.c, 1},
                    Init::kHe);
    Var b = t.param(ps, prefix + "." + name + ".b", {1, s.c, 1, 1},
                    Init::kZeros);
    return t.conv1x1(f, w, b);
  };
  Var pq = t.sigmoid(proj("q"));  // (B, C, N, 1), positive kernel
  Var pk = t.sigmoid(proj("k"));
  Var v = proj("v");

  // Incoming flow per sink and outgoing flow per source; each is a dot
  // product against the other side's token sum, so no N x N matrix.
  Var ksum = t.reduce_items(pk, true, false, Reduce::kSum);  // (B,C,1,1)
  Var qsum = t.reduce_items(pq, true, false, Reduce::kSum);
  Var in_flow = t.reduce_channels_sum(t.mul(pq, ksum));   // (B,1,N,1)
  Var out_flow = t.reduce_channels_sum(t.mul(pk, qsum));  // (B,1,N,1)

  // Competition: sources share a fixed budget of outgoing information.
  Var vhat = t.mul(t.scale(t.softmax_items(out_flow), double(s.n)), v);
  // Aggregation in C x C instead of N x N.
  Var g = t.bmm_nt(vhat, pk);                   // (B, C, C, 1)
  Var agg = t.div(t.bmm_nn(g, pq), in_flow);    // (B, C, N, 1)
  // Allocation: sinks gate what they accept by incoming flow.
  return t.mul(t.sigmoid(in_flow), agg);
}

RoutingDecision moe_gate(Tape& t, ParamStore& ps, const std::string& prefix,
                         Var u, const MoEConfig& cfg) {
  cfg.validate();
  const Shape s = t.val(u).shape();
  if (s.k != 1)
    throw PreconditionError("moe_gate: input must be (B,C,N,1)");
  const int experts = cfg.num_experts;

  Var w = t.param(ps, prefix + ".w", {1, experts, s.c, 1}, Init::kHe);
  Var b = t.param(ps, prefix + ".b", {1, experts, 1, 1}, Init::kZeros);
  Var logits = t.conv1x1(u, w, b);  // (B, E, N, 1)
  const Tensor& lv = t.val(logits);

  RoutingDecision rd;
  rd.logits_var = logits;
  rd.logits = lv;
  rd.num_experts = experts;
  rd.selected.assign(s.b, std::vector<std::vector<int>>(s.n));

  // Keep the top_k experts per token (ties toward the lower index); the
  // rest are pushed to -inf so the softmax puts exact zeros on them.
  Tensor mask = Tensor::full({s.b, experts, s.n, 1}, -1e300);
  std::vector<std::pair<double, int>> order(experts);
  for (int bi = 0; bi < s.b; ++bi) {
    for (int n = 0; n < s.n; ++n) {
      for (int e = 0; e < experts; ++e) order[e] = {lv.at(bi, e, n, 0), e};
      std::sort(order.begin(), order.end(),
                [](const auto& x, const auto& y) {
                  if (x.first != y.first) return x.first > y.first;
                  return x.second < y.second;
                });
      auto& ids = rd.selected[bi][n];
      ids.reserve(cfg.top_k);
      for (int r = 0; r < cfg.top_k; ++r) {
        ids.push_back(order[r].second);
        mask.at(bi, order[r].second, n, 0) = 0.0;
      }
    }
  }
  rd.weights = t.softmax_channels(t.add(logits, t.input(std::move(mask))));
  return rd;
}

Var moe_balance_loss(Tape& t, const RoutingDecision& routing) {
  const Shape s = t.val(routing.logits_var).shape();
  const double tokens = double(s.b) * double(s.n);

  // Fraction of tokens whose top pick is each expert (a constant)...
  const std::vector<long> counts = routing.utilization();
  Tensor frac({1, routing.num_experts, 1, 1});
  for (int e = 0; e < routing.num_experts; ++e)
    frac.at(0, e, 0, 0) = double(counts[e]) / tokens;

  // ...dotted with the mean unmasked gate probability per expert.
  Var probs = t.softmax_channels(routing.logits_var);  // (B, E, N, 1)
  Var mean_n = t.reduce_items(probs, true, true, Reduce::kMean);
  Var mean = t.slice_batch(mean_n, 0);
  for (int bi = 1; bi < s.b; ++bi)
    mean = t.add(mean, t.slice_batch(mean_n, bi));
  mean = t.scale(mean, 1.0 / double(s.b));  // (1, E, 1, 1)

  Var dot = t.reduce_channels_sum(t.mul(mean, t.input(std::move(frac))));
  return t.scale(dot, double(routing.num_experts));
}

Var bifusion_layer(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                   const MoEConfig& cfg, RoutingDecision* routing_out) {
  cfg.validate();
  const Shape s = t.val(f).shape();
  if (s.k != 1)
    throw PreconditionError("bifusion_layer: input must be (B,C,N,1)");

  Var u = t.layer_norm_channels(
      t.add(f, flow_attention(t, ps, prefix + ".attn", f)));
  RoutingDecision rd = moe_gate(t, ps, prefix + ".gate", u, cfg);
  const int experts = cfg.num_experts;
  const int hidden = cfg.hidden_ratio * s.c;

  // Pack each expert's routed tokens into one dense batch. Lists are
  // padded with token 0 to a common length per expert; padded slots are
  // computed but never gathered back, so they cannot affect the output.
  std::vector<std::vector<std::vector<int>>> tokens(
      experts, std::vector<std::vector<int>>(s.b));
  std::vector<std::vector<std::vector<int>>> pos(
      s.b, std::vector<std::vector<int>>(s.n, std::vector<int>(cfg.top_k)));
  for (int bi = 0; bi < s.b; ++bi)
    for (int n = 0; n < s.n; ++n)
      for (int r = 0; r < cfg.top_k; ++r) {
        const int e = rd.selected[bi][n][r];
        pos[bi][n][r] = static_cast<int>(tokens[e][bi].size());
        tokens[e][bi].push_back(n);
      }

  std::vector<int> offset(experts, -1);
  std::vector<Var> packed;
  int items = 0;
  for (int e = 0; e < experts; ++e) {
    std::size_t longest = 0;
    for (int bi = 0; bi < s.b; ++bi)
      longest = std::max(longest, tokens[e][bi].size());
    if (longest == 0) continue;
    offset[e] = items;
    items += static_cast<int>(longest);
    std::vector<std::vector<int>> lists(s.b);
    for (int bi = 0; bi < s.b; ++bi) {
      lists[bi] = tokens[e][bi];
      lists[bi].resize(longest, 0);
    }
    const std::string ep = prefix + ".expert" + std::to_string(e);
    Var w1 = t.param(ps, ep + ".w1", {1, hidden, s.c, 1}, Init::kHe);
    Var b1 = t.param(ps, ep + ".b1", {1, hidden, 1, 1}, Init::kZeros);
    Var w2 = t.param(ps, ep + ".w2", {1, s.c, hidden, 1}, Init::kHe);
    Var b2 = t.param(ps, ep + ".b2", {1, s.c, 1, 1}, Init::kZeros);
    Var h = t.relu(t.conv1x1(t.gather_items(u, lists), w1, b1));
    packed.push_back(t.conv1x1(h, w2, b2));
  }
  Var bank = packed.size() == 1 ? packed.front() : t.concat_items(packed);

  // Route each token's slots back out of the bank, weighted on the gate
  // simplex.
  Var fused;
  std::vector<std::vector<int>> where(s.b, std::vector<int>(s.n));
  std::vector<std::vector<int>> which(s.b, std::vector<int>(s.n));
  for (int r = 0; r < cfg.top_k; ++r) {
    for (int bi = 0; bi < s.b; ++bi)
      for (int n = 0; n < s.n; ++n) {
        const int e = rd.selected[bi][n][r];
        where[bi][n] = offset[e] + pos[bi][n][r];
        which[bi][n] = e;
      }
    Var term = t.mul(t.gather_items(bank, where),
                     t.select_channels(rd.weights, which));
    fused = fused.valid() ? t.add(fused, term) : term;
  }

  if (routing_out) *routing_out = std::move(rd);
  return t.layer_norm_channels(t.add(u, fused));
}

Var bifusion_stack(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                   const MoEConfig& cfg,
                   std::vector<RoutingDecision>* routings) {
  cfg.validate();
  if (routings) routings->clear();
  for (int i = 0; i < cfg.num_layers; ++i) {
    RoutingDecision rd;
    f = bifusion_layer(t, ps, prefix + ".layer" + std::to_string(i), f, cfg,
                       routings ? &rd : nullptr);
    if (routings) routings->push_back(std::move(rd));
  }
  return f;
}

}  // namespace corrmoe::nn
