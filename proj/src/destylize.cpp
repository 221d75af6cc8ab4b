#include "corrmoe/destylize.hpp"

#include <algorithm>
#include <cmath>

#include "corrmoe/errors.hpp"

namespace corrmoe::nn {

Var diffpool(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
             int m) {
  if (m < 1) throw PreconditionError("diffpool: cluster count must be >= 1");
  const Shape s = t.val(f).shape();
  Var w = t.param(ps, prefix + ".assign.w", {1, m, s.c, 1}, Init::kHe);
  Var b = t.param(ps, prefix + ".assign.b", {1, m, 1, 1}, Init::kZeros);
  Var assign = t.softmax_items(t.conv1x1(f, w, b));  // (B, m, N, 1)
  return t.bmm_nt(f, assign);                        // (B, C, m, 1)
}

Var oa_filter(Tape& t, ParamStore& ps, const std::string& prefix, Var g) {
  const Shape s = t.val(g).shape();
  Var h = pointcn_block(t, ps, prefix + ".pcn", g);
  Var wpos = t.param(ps, prefix + ".pos.w", {1, s.n, s.n, 1}, Init::kZeros);
  Var mixed = t.bmm_nn(h, t.expand(wpos, {s.b, s.n, s.n, 1}));
  return t.add(h, mixed);
}

Var diffunpool(Tape& t, ParamStore& ps, const std::string& prefix,
               Var f_original, Var g_filtered) {
  const Shape so = t.val(f_original).shape();
  const Shape sg = t.val(g_filtered).shape();
  const int m = sg.n;
  Var w = t.param(ps, prefix + ".assign.w", {1, m, so.c, 1}, Init::kHe);
  Var b = t.param(ps, prefix + ".assign.b", {1, m, 1, 1}, Init::kZeros);
  Var assign = t.softmax_channels(t.conv1x1(f_original, w, b));  // (B,m,N,1)
  return t.bmm_nn(g_filtered, assign);                           // (B,C,N,1)
}

NeighborGraph build_knn_graph(Tape& t, Var f, int k, bool edge_residual) {
  const Tensor& vf = t.val(f);
  const Shape& s = vf.shape();
  if (s.k != 1)
    throw PreconditionError("build_knn_graph: input must be (B,C,N,1)");
  if (k < 1 || k >= s.n)
    throw PreconditionError("build_knn_graph: need 1 <= k < N, got k=" +
                            std::to_string(k) + " N=" + std::to_string(s.n));

  NeighborGraph g;
  g.k = k;
  g.neighbor_idx.resize(s.b);
  std::vector<std::pair<double, int>> cand(s.n - 1);
  for (int b = 0; b < s.b; ++b) {
    g.neighbor_idx[b].reserve(static_cast<std::size_t>(s.n) * k);
    for (int i = 0; i < s.n; ++i) {
      int pos = 0;
      for (int j = 0; j < s.n; ++j) {
        if (j == i) continue;
        double d2 = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const double d = vf.at(b, c, i, 0) - vf.at(b, c, j, 0);
          d2 += d * d;
        }
        cand[pos++] = {d2, j};
      }
      std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
      for (int j = 0; j < k; ++j) g.neighbor_idx[b].push_back(cand[j].second);
    }
  }

  Var anchor = t.expand(f, {s.b, s.c, s.n, k});
  Var nb = t.gather_neighbors(f, g.neighbor_idx, k);
  if (edge_residual) nb = t.sub(nb, anchor);
  g.edges = t.concat_channels(anchor, nb);
  return g;
}

Var mda_stage(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
              MdaAxis axis, const double* forced_gate) {
  const Shape s = t.val(x).shape();
  Var e = pointcn_block(t, ps, prefix + ".enc", x);

  Var gate;
  if (forced_gate != nullptr) {
    gate = t.input(Tensor::full({1, 1, 1, 1}, *forced_gate));
  } else {
    const bool over_n = axis != MdaAxis::kSpatial;
    const bool over_k = axis != MdaAxis::kNeighbor;
    Var desc = t.add(t.reduce_items(e, over_n, over_k, Reduce::kMax),
                     t.reduce_items(e, over_n, over_k, Reduce::kMean));
    const int mid = std::max(1, (s.c + 3) / 4);
    Var w1 = t.param(ps, prefix + ".gate.w1", {1, mid, s.c, 1}, Init::kHe);
    Var b1 = t.param(ps, prefix + ".gate.b1", {1, mid, 1, 1}, Init::kZeros);
    Var w2 = t.param(ps, prefix + ".gate.w2", {1, s.c, mid, 1}, Init::kHe);
    Var b2 = t.param(ps, prefix + ".gate.b2", {1, s.c, 1, 1}, Init::kZeros);
    gate = t.sigmoid(t.conv1x1(t.relu(t.conv1x1(desc, w1, b1)), w2, b2));
  }
  return t.add(e, t.mul(gate, e));
}

Var mda_attention(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
                  const double* forced_gate) {
  Var h = mda_stage(t, ps, prefix + ".sa", x, MdaAxis::kSpatial, forced_gate);
  h = mda_stage(t, ps, prefix + ".na", h, MdaAxis::kNeighbor, forced_gate);
  return mda_stage(t, ps, prefix + ".ca", h, MdaAxis::kChannel, forced_gate);
}

Var annular_conv(Tape& t, ParamStore& ps, const std::string& prefix, Var x,
                 int cout, int group) {
  const Shape s = t.val(x).shape();
  if (group < 1 || s.k % group != 0)
    throw ConfigError("annular_conv: neighbor count " + std::to_string(s.k) +
                      " not divisible by group " + std::to_string(group));
  const int mid = s.k / group;
  Var w1 = t.param(ps, prefix + ".c1.w", {1, cout, s.c, group}, Init::kHe);
  Var b1 = t.param(ps, prefix + ".c1.b", {1, cout, 1, 1}, Init::kZeros);
  Var h = t.relu(t.neighbor_group_conv(x, w1, b1, group));  // (B,cout,N,mid)
  Var w2 = t.param(ps, prefix + ".c2.w", {1, cout, cout, mid}, Init::kHe);
  Var b2 = t.param(ps, prefix + ".c2.b", {1, cout, 1, 1}, Init::kZeros);
  return t.neighbor_group_conv(h, w2, b2, mid);  // (B,cout,N,1)
}

namespace {

/// One style-normalization site; the mode selects between PMix, its
/// fixed-probability variant, plain instance norm, and a pass-through.
Var style_site(Tape& t, Var f, const DualBranchConfig& cfg,
               const PMixParams& pmix_params, RngStream& rng) {
  switch (cfg.norm) {
    case StyleNorm::kNone:
      return f;
    case StyleNorm::kInstanceNorm:
      return instance_norm_block(t, f);
    case StyleNorm::kMixstyleFixed: {
      PMixParams fixed = pmix_params;
      fixed.p_start = kFixedMixProb;
      fixed.p_end = kFixedMixProb;
      return pmix(t, f, fixed, rng);
    }
    case StyleNorm::kPMix:
      break;
  }
  return pmix(t, f, pmix_params, rng);
}

}  // namespace

Var dual_branch(Tape& t, ParamStore& ps, const std::string& prefix, Var f,
                const DualBranchConfig& cfg, const PMixParams& pmix_params,
                RngStream& rng) {
  if (!cfg.use_implicit && !cfg.use_explicit)
    throw ConfigError("dual_branch: at least one branch must be enabled");
  const Shape s = t.val(f).shape();
  RngStream front_rng = rng.fork("front");
  RngStream implicit_rng = rng.fork("implicit");
  RngStream explicit_rng = rng.fork("explicit");

  Var fmix = style_site(t, f, cfg, pmix_params, front_rng);

  Var implicit_out, explicit_out;
  if (cfg.use_implicit) {
    Var pooled = diffpool(t, ps, prefix + ".pool", fmix, cfg.clusters);
    Var filtered = oa_filter(t, ps, prefix + ".oa", pooled);
    Var unpooled = diffunpool(t, ps, prefix + ".unpool", fmix, filtered);
    implicit_out = style_site(t, unpooled, cfg, pmix_params, implicit_rng);
  }
  if (cfg.use_explicit) {
    NeighborGraph g = build_knn_graph(t, fmix, cfg.k, cfg.edge_residual);
    Var attended = mda_attention(t, ps, prefix + ".mda", g.edges);
    Var aggregated =
        annular_conv(t, ps, prefix + ".annular", attended, s.c, cfg.group);
    explicit_out = style_site(t, aggregated, cfg, pmix_params, explicit_rng);
  }
  if (!cfg.use_implicit) return explicit_out;
  if (!cfg.use_explicit) return implicit_out;
  return t.concat_channels(implicit_out, explicit_out);
}

}  // namespace corrmoe::nn
