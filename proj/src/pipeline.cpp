#include "corrmoe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <utility>

#include "corrmoe/errors.hpp"
#include "json.hpp"

namespace corrmoe::model {

using nn::Init;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
  if (channels < 1)
    throw ConfigError("model: channels must be >= 1, got " +
                      std::to_string(channels));
  if (clusters < 1)
    throw ConfigError("model: clusters must be >= 1, got " +
                      std::to_string(clusters));
  if (knn_stage1 < 1 || knn_stage2 < 1)
    throw ConfigError("model: knn sizes must be >= 1");
  if (annular_group < 1)
    throw ConfigError("model: annular_group must be >= 1");
  if (knn_stage1 % annular_group != 0 || knn_stage2 % annular_group != 0)
    throw ConfigError(
        "model: knn sizes must be divisible by annular_group, got k=(" +
        std::to_string(knn_stage1) + ", " + std::to_string(knn_stage2) +
        ") group=" + std::to_string(annular_group));
  if (use_dual && !use_implicit && !use_explicit)
    throw ConfigError("model: the dual branch needs at least one sub-branch");
  if (!use_dual && !use_moe)
    throw ConfigError("model: cannot disable both the dual branch and MoE");
  if (!(pruning_rate > 0.0 && pruning_rate <= 1.0))
    throw ConfigError("model: pruning_rate must be in (0, 1]");
  if (verify_threshold <= 0.0)
    throw ConfigError("model: verify_threshold must be positive");
  moe.validate();
}

PruningOutput pruning_module(Tape& t, nn::ParamStore& ps,
                             const std::string& prefix,
                             const std::vector<geom::CorrespondenceSet>& sets,
                             Var stage_input, int stage, const ModelConfig& cfg,
                             const nn::PMixParams& pmix, RngStream& rng) {
  cfg.validate();
  if (stage != 1 && stage != 2)
    throw PreconditionError("pruning_module: stage must be 1 or 2, got " +
                            std::to_string(stage));
  const Shape s = t.val(stage_input).shape();
  const int want_channels = stage == 1 ? 4 : 5;
  if (s.c != want_channels || s.k != 1)
    throw PreconditionError(
        "pruning_module: stage " + std::to_string(stage) + " input must be (B, " +
        std::to_string(want_channels) + ", N, 1), got " + s.str());
  if (static_cast<int>(sets.size()) != s.b)
    throw PreconditionError("pruning_module: set count must match batch size");
  for (const auto& set : sets)
    if (set.size() != s.n)
      throw PreconditionError(
          "pruning_module: every set must match the stage input item count");
  if (s.n < 16)
    throw PreconditionError("pruning_module: need at least 16 candidates, got " +
                            std::to_string(s.n));

  Var w_embed = t.param(ps, prefix + ".embed.w",
                        {1, cfg.channels, want_channels, 1}, Init::kHe);
  Var b_embed =
      t.param(ps, prefix + ".embed.b", {1, cfg.channels, 1, 1}, Init::kZeros);
  Var f = t.conv1x1(stage_input, w_embed, b_embed);

  if (cfg.use_dual) {
    nn::DualBranchConfig dcfg;
    dcfg.clusters = cfg.clusters;
    dcfg.k = stage == 1 ? cfg.knn_stage1 : cfg.knn_stage2;
    dcfg.group = cfg.annular_group;
    dcfg.edge_residual = cfg.edge_residual;
    dcfg.use_implicit = cfg.use_implicit;
    dcfg.use_explicit = cfg.use_explicit;
    dcfg.norm = cfg.style_norm;
    Var dual = nn::dual_branch(t, ps, prefix + ".dual", f, dcfg, pmix, rng);
    const int dual_channels = t.val(dual).shape().c;
    Var w_merge = t.param(ps, prefix + ".merge.w",
                          {1, cfg.channels, dual_channels, 1}, Init::kHe);
    Var b_merge =
        t.param(ps, prefix + ".merge.b", {1, cfg.channels, 1, 1}, Init::kZeros);
    f = t.conv1x1(dual, w_merge, b_merge);
  }

  PruningOutput out;
  if (cfg.use_moe)
    f = nn::bifusion_stack(t, ps, prefix + ".moe", f, cfg.moe, &out.routings);

  Var h = nn::pointcn_block(t, ps, prefix + ".head.b0", f);
  h = nn::pointcn_block(t, ps, prefix + ".head.b1", h);
  Var w_out =
      t.param(ps, prefix + ".head.out.w", {1, 1, cfg.channels, 1}, Init::kHe);
  Var b_out = t.param(ps, prefix + ".head.out.b", {1, 1, 1, 1}, Init::kZeros);
  out.logits_var = t.conv1x1(h, w_out, b_out);  // (B, 1, N, 1)

  const Tensor& lv = t.val(out.logits_var);
  const int keep =
      static_cast<int>(std::ceil(cfg.pruning_rate * static_cast<double>(s.n)));
  out.keep_idx.resize(s.b);
  out.cands.reserve(s.b);
  out.logits.resize(s.b);
  std::vector<int> order(s.n);
  for (int b = 0; b < s.b; ++b) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
      const double li = lv.at(b, 0, i, 0), lj = lv.at(b, 0, j, 0);
      if (li != lj) return li > lj;
      return i < j;
    });
    out.keep_idx[b].assign(order.begin(), order.begin() + keep);
    std::sort(out.keep_idx[b].begin(), out.keep_idx[b].end());
    out.cands.push_back(sets[b].subset(out.keep_idx[b]));
    out.logits[b].resize(s.n);
    for (int i = 0; i < s.n; ++i) out.logits[b](i) = lv.at(b, 0, i, 0);
  }
  out.weights_var =
      t.tanh_op(t.relu(t.gather_items(out.logits_var, out.keep_idx)));
  const Tensor& wv = t.val(out.weights_var);
  out.weights.resize(s.b);
  for (int b = 0; b < s.b; ++b) {
    out.weights[b].resize(keep);
    for (int i = 0; i < keep; ++i) out.weights[b](i) = wv.at(b, 0, i, 0);
  }
  return out;
}

ForwardResult corrmoe_forward(Tape& t, nn::ParamStore& ps,
                              const std::vector<geom::CorrespondenceSet>& batch,
                              const ModelConfig& cfg,
                              const nn::PMixParams& pmix, RngStream& rng) {
  if (batch.empty())
    throw PreconditionError("corrmoe_forward: empty batch");
  const int n = batch.front().size();
  for (const auto& set : batch)
    if (set.size() != n)
      throw PreconditionError(
          "corrmoe_forward: batch elements must share one size");
  if (n < 64)
    throw PreconditionError("corrmoe_forward: need at least 64 candidates, got " +
                            std::to_string(n));
  const int bsize = static_cast<int>(batch.size());

  Tensor x1({bsize, 4, n, 1});
  for (int b = 0; b < bsize; ++b)
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) x1.at(b, c, i, 0) = batch[b].coords(i, c);

  ForwardResult fr;
  fr.stage1 =
      pruning_module(t, ps, "stage1", batch, t.input(std::move(x1)), 1, cfg,
                     pmix, rng);

  const int n1 = fr.stage1.cands.front().size();
  Tensor c2({bsize, 4, n1, 1});
  for (int b = 0; b < bsize; ++b)
    for (int i = 0; i < n1; ++i)
      for (int c = 0; c < 4; ++c)
        c2.at(b, c, i, 0) = fr.stage1.cands[b].coords(i, c);
  Var x2 = t.concat_channels(t.input(std::move(c2)), fr.stage1.weights_var);
  fr.stage2 =
      pruning_module(t, ps, "stage2", fr.stage1.cands, x2, 2, cfg, pmix, rng);

  const Tensor& w2 = t.val(fr.stage2.weights_var);
  const int n2 = fr.stage2.cands.front().size();
  for (int b = 0; b < bsize; ++b) {
    int positives = 0;
    for (int i = 0; i < n2; ++i)
      if (w2.at(b, 0, i, 0) > 0.0) ++positives;
    // The essential term only makes sense when the predicted weights give a
    // well-posed design: enough positive entries, and the weighted normal
    // matrix must not be rank-deficient (early in training the weight mass
    // can sit on too few distinct points). Anything else falls back to a
    // uniform estimate that carries no gradient, flagged via ess_ok.
    bool ok = positives >= 8;
    Var ev;
    if (ok) {
      try {
        ev = t.eight_point(t.slice_batch(fr.stage2.weights_var, b),
                           fr.stage2.cands[b].coords);
      } catch (const DegenerateInputError&) {
        ok = false;
      }
    }
    if (!ok) {
      static bool warned = false;
      if (!warned) {
        std::fprintf(stderr,
                     "corrmoe: stage-2 weights give a degenerate eight-point "
                     "design; falling back to uniform weights for the "
                     "essential estimate (reported once)\n");
        warned = true;
      }
      try {
        ev = t.eight_point(t.input(Tensor::full({1, 1, n2, 1}, 1.0)),
                           fr.stage2.cands[b].coords);
      } catch (const DegenerateInputError&) {
        // Even uniform weighting is degenerate (e.g. coplanar candidates):
        // use a fixed placeholder essential; the element stays masked out
        // of the loss and downstream consumers re-estimate on their own.
        Tensor id({1, 3, 3, 1});
        id.at(0, 0, 0, 0) = 1.0;
        id.at(0, 1, 1, 0) = 1.0;
        ev = t.input(std::move(id));
      }
    }
    const Tensor& em = t.val(ev);
    geom::EssentialMatrix e;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) e.m(r, c) = em.at(0, r, c, 0);
    fr.e_vars.push_back(ev);
    fr.ess_ok.push_back(ok);
    fr.full_mask.push_back(
        geom::full_size_verification(e, batch[b], cfg.verify_threshold));
    fr.e_hat.push_back(std::move(e));
  }
  return fr;
}

Eigen::VectorXd epipolar_labels(const geom::EssentialMatrix& e,
                                const geom::CorrespondenceSet& set,
                                double threshold) {
  Eigen::VectorXd labels(set.size());
  for (int i = 0; i < set.size(); ++i)
    labels(i) =
        geom::symmetric_epipolar_distance(e.m, set.coords.row(i)) < threshold
            ? 1.0
            : 0.0;
  return labels;
}

Var classification_loss(Tape& t, nn::ParamStore& ps,
                        const std::vector<Var>& stage_logits,
                        const std::vector<Tensor>& stage_labels,
                        std::vector<double>* per_stage, double cap) {
  if (stage_logits.empty() || stage_logits.size() != stage_labels.size())
    throw PreconditionError(
        "classification_loss: need one label tensor per logit stage");
  if (per_stage) per_stage->clear();
  Var total;
  for (std::size_t j = 0; j < stage_logits.size(); ++j) {
    Var temp = t.param(ps, "loss.temp" + std::to_string(j), {1, 1, 1, 1},
                       Init::kZeros);
    Var scaled = t.mul(stage_logits[j], t.exp_op(temp));
    Var stage = t.bce_with_logits(scaled, stage_labels[j], cap);
    if (per_stage) per_stage->push_back(t.val(stage).item());
    total = total.valid() ? t.add(total, stage) : stage;
  }
  return total;
}

Var essential_loss(Tape& t, Var e_hat,
                   const geom::CorrespondenceSet& virtual_pairs) {
  return t.epipolar_quotient_mean(e_hat, virtual_pairs.coords);
}

LossReport hybrid_loss(Tape& t, nn::ParamStore& ps, const ForwardResult& fwd,
                       const std::vector<synth::PairRecord>& records,
                       long step, const LossConfig& cfg) {
  if (cfg.tau < 0.0)
    throw PreconditionError("hybrid_loss: tau must be >= 0");
  const Shape s1 = t.val(fwd.stage1.logits_var).shape();
  const Shape s2 = t.val(fwd.stage2.logits_var).shape();
  if (static_cast<int>(records.size()) != s1.b)
    throw PreconditionError("hybrid_loss: need one record per batch element");

  Tensor y1({s1.b, 1, s1.n, 1}), y2({s2.b, 1, s2.n, 1});
  for (int b = 0; b < s1.b; ++b) {
    const synth::PairRecord& rec = records[b];
    if (rec.corr.size() != s1.n)
      throw PreconditionError(
          "hybrid_loss: record does not match the forward input");
    const Eigen::VectorXd l1 =
        epipolar_labels(rec.e_gt, rec.corr, cfg.label_threshold);
    for (int i = 0; i < s1.n; ++i) y1.at(b, 0, i, 0) = l1(i);
    const Eigen::VectorXd l2 =
        epipolar_labels(rec.e_gt, fwd.stage1.cands[b], cfg.label_threshold);
    for (int i = 0; i < s2.n; ++i) y2.at(b, 0, i, 0) = l2(i);
  }

  LossReport rep;
  rep.tau = cfg.tau;
  Var cls = classification_loss(
      t, ps, {fwd.stage1.logits_var, fwd.stage2.logits_var}, {y1, y2},
      &rep.per_stage_cls, cfg.bce_cap);
  rep.cls = t.val(cls).item();
  rep.ess_active = step >= cfg.warmup_steps;

  Var total = cls;
  if (rep.ess_active) {
    Var acc;
    int terms = 0;
    for (int b = 0; b < s1.b; ++b) {
      if (!fwd.ess_ok[b]) continue;
      const geom::CorrespondenceSet vp =
          synth::virtual_pairs(records[b].pose_gt, cfg.virtual_pair_count);
      Var term = essential_loss(t, fwd.e_vars[b], vp);
      acc = acc.valid() ? t.add(acc, term) : term;
      ++terms;
    }
    if (terms > 0) {
      Var mean = t.scale(acc, 1.0 / static_cast<double>(terms));
      rep.ess = t.val(mean).item();
      total = t.add(cls, t.scale(mean, cfg.tau));
    }
  }
  rep.total_var = total;
  rep.total = t.val(total).item();
  return rep;
}

// ---- checkpointing -----------------------------------------------------

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor& t) {
  json a = json::array();
  for (long i = 0; i < t.numel(); ++i) a.push_back(t[i]);
  return a;
}

Tensor tensor_from_json(const json& a, const Shape& shape) {
  Tensor t(shape);
  if (static_cast<long>(a.size()) != t.numel())
    throw IoError("checkpoint: array length does not match its shape");
  for (long i = 0; i < t.numel(); ++i) t[i] = a[i].get<double>();
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const nn::ParamStore& ps, const CheckpointMeta& meta) {
  json j;
  j["format"] = "corrmoe-checkpoint";
  j["version"] = 1;
  j["epoch"] = meta.epoch;
  j["total_epochs"] = meta.total_epochs;
  j["step"] = meta.step;
  j["store_seed"] = ps.seed();
  json params = json::object();
  for (const auto& [name, p] : ps.entries()) {
    const Shape& s = p.value.shape();
    json e;
    e["shape"] = {s.b, s.c, s.n, s.k};
    e["value"] = tensor_to_json(p.value);
    e["adam_m"] = p.adam_m.empty() ? json::array() : tensor_to_json(p.adam_m);
    e["adam_v"] = p.adam_v.empty() ? json::array() : tensor_to_json(p.adam_v);
    params[name] = std::move(e);
  }
  j["params"] = std::move(params);

  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path,
                               nn::ParamStore& ps) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("checkpoint parse error in " + path.string() + ": " +
                  e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "corrmoe-checkpoint")
      throw IoError("not a checkpoint file: " + path.string());
    if (j.at("version").get<int>() != 1)
      throw IoError("unsupported checkpoint version in " + path.string());
    CheckpointMeta meta;
    meta.epoch = j.at("epoch").get<int>();
    meta.total_epochs = j.at("total_epochs").get<int>();
    meta.step = j.at("step").get<long>();
    ps.entries().clear();
    for (const auto& [name, e] : j.at("params").items()) {
      const auto& sh = e.at("shape");
      const Shape shape{sh.at(0).get<int>(), sh.at(1).get<int>(),
                        sh.at(2).get<int>(), sh.at(3).get<int>()};
      nn::Param p;
      p.value = tensor_from_json(e.at("value"), shape);
      if (!e.at("adam_m").empty()) p.adam_m = tensor_from_json(e.at("adam_m"), shape);
      if (!e.at("adam_v").empty()) p.adam_v = tensor_from_json(e.at("adam_v"), shape);
      ps.entries()[name] = std::move(p);
    }
    ps.set_steps_taken(static_cast<int>(meta.step));
    return meta;
  } catch (const json::exception& e) {
    throw IoError("checkpoint field error in " + path.string() + ": " +
                  e.what());
  }
}

}  // namespace corrmoe::model
