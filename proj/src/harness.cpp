#include "corrmoe/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "corrmoe/errors.hpp"
#include "corrmoe/rng.hpp"
#include "json.hpp"

namespace corrmoe::run {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ------------------------------------------------------------

namespace {

std::string style_norm_name(nn::StyleNorm v) {
  switch (v) {
    case nn::StyleNorm::kPMix: return "pmix";
    case nn::StyleNorm::kNone: return "none";
    case nn::StyleNorm::kInstanceNorm: return "instance_norm";
    case nn::StyleNorm::kMixstyleFixed: return "mixstyle_fixed";
  }
  throw ConfigError("unknown style_norm value");
}

nn::StyleNorm style_norm_from_name(const std::string& s) {
  if (s == "pmix") return nn::StyleNorm::kPMix;
  if (s == "none") return nn::StyleNorm::kNone;
  if (s == "instance_norm") return nn::StyleNorm::kInstanceNorm;
  if (s == "mixstyle_fixed") return nn::StyleNorm::kMixstyleFixed;
  throw ConfigError("config: style_norm must be one of pmix / none / "
                    "instance_norm / mixstyle_fixed, got '" + s + "'");
}

json config_to_json(const RunConfig& c) {
  json j;
  j["n"] = c.n;
  j["channels"] = c.channels;
  j["clusters"] = c.clusters;
  j["knn_stage1"] = c.knn_stage1;
  j["knn_stage2"] = c.knn_stage2;
  j["annular_group"] = c.annular_group;
  j["fusion_layers"] = c.fusion_layers;
  j["experts"] = c.experts;
  j["top_k"] = c.top_k;
  j["pruning_rate"] = c.pruning_rate;
  j["use_dual"] = c.use_dual;
  j["use_moe"] = c.use_moe;
  j["use_implicit"] = c.use_implicit;
  j["use_explicit"] = c.use_explicit;
  j["style_norm"] = style_norm_name(c.style_norm);
  j["p_start"] = c.p_start;
  j["p_end"] = c.p_end;
  j["alpha"] = c.alpha;
  j["tau"] = c.tau;
  j["warmup_steps"] = c.warmup_steps;
  j["virtual_pairs"] = c.virtual_pairs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["lr_decay"] = c.lr_decay;
  j["lr_decay_every"] = c.lr_decay_every;
  j["total_steps"] = c.total_steps;
  j["ablate_steps"] = c.ablate_steps;
  j["log_every"] = c.log_every;
  j["val_every"] = c.val_every;
  j["train_pairs"] = c.train_pairs;
  j["eval_pairs"] = c.eval_pairs;
  j["outlier_ratio"] = c.outlier_ratio;
  j["data_dir"] = c.data_dir;
  return j;
}

}  // namespace

void RunConfig::validate() const {
  auto bad = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (n < 64) bad("n must be >= 64");
  if (batch < 1) bad("batch must be >= 1");
  if (lr <= 0.0) bad("lr must be positive");
  if (lr_decay <= 0.0 || lr_decay > 1.0) bad("lr_decay must be in (0, 1]");
  if (lr_decay_every < 1) bad("lr_decay_every must be >= 1");
  if (total_steps < 1) bad("total_steps must be >= 1");
  if (ablate_steps < 1) bad("ablate_steps must be >= 1");
  if (log_every < 1) bad("log_every must be >= 1");
  if (val_every < 1) bad("val_every must be >= 1");
  if (train_pairs < batch) bad("train_pairs must be >= batch");
  if (eval_pairs < 1) bad("eval_pairs must be >= 1");
  if (outlier_ratio < 0.0 || outlier_ratio >= 1.0)
    bad("outlier_ratio must be in [0, 1)");
  if (tau < 0.0) bad("tau must be non-negative");
  if (warmup_steps < 0) bad("warmup_steps must be non-negative");
  if (virtual_pairs < 8) bad("virtual_pairs must be >= 8");
  model_config(*this).validate();
  try {
    pmix_params(*this, 0, true).validate();
  } catch (const PreconditionError& e) {
    bad(std::string("mixstyle ramp: ") + e.what());
  }
}

RunConfig desk_preset() {
  RunConfig c;
  c.n = 512;
  c.channels = 16;
  c.clusters = 48;
  c.knn_stage1 = 6;
  c.knn_stage2 = 6;
  c.fusion_layers = 2;
  c.batch = 8;
  c.total_steps = 5000;
  c.ablate_steps = 600;
  c.warmup_steps = 500;
  c.lr_decay_every = 200;  // the 20k-step cadence scaled by 500k/5k
  c.log_every = 50;
  c.val_every = 1000;
  c.train_pairs = 2000;
  c.eval_pairs = 200;
  return c;
}

RunConfig paper_preset() { return RunConfig(); }

RunConfig run_config_from_json_text(const std::string& text,
                                    const RunConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: parse failure: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig c = base;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n") c.n = value.get<int>();
      else if (key == "channels") c.channels = value.get<int>();
      else if (key == "clusters") c.clusters = value.get<int>();
      else if (key == "knn_stage1") c.knn_stage1 = value.get<int>();
      else if (key == "knn_stage2") c.knn_stage2 = value.get<int>();
      else if (key == "annular_group") c.annular_group = value.get<int>();
      else if (key == "fusion_layers") c.fusion_layers = value.get<int>();
      else if (key == "experts") c.experts = value.get<int>();
      else if (key == "top_k") c.top_k = value.get<int>();
      else if (key == "pruning_rate") c.pruning_rate = value.get<double>();
      else if (key == "use_dual") c.use_dual = value.get<bool>();
      else if (key == "use_moe") c.use_moe = value.get<bool>();
      else if (key == "use_implicit") c.use_implicit = value.get<bool>();
      else if (key == "use_explicit") c.use_explicit = value.get<bool>();
      else if (key == "style_norm")
        c.style_norm = style_norm_from_name(value.get<std::string>());
      else if (key == "p_start") c.p_start = value.get<double>();
      else if (key == "p_end") c.p_end = value.get<double>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "warmup_steps") c.warmup_steps = value.get<long>();
      else if (key == "virtual_pairs") c.virtual_pairs = value.get<int>();
      else if (key == "batch") c.batch = value.get<int>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "lr_decay") c.lr_decay = value.get<double>();
      else if (key == "lr_decay_every") c.lr_decay_every = value.get<long>();
      else if (key == "total_steps") c.total_steps = value.get<long>();
      else if (key == "ablate_steps") c.ablate_steps = value.get<long>();
      else if (key == "log_every") c.log_every = value.get<long>();
      else if (key == "val_every") c.val_every = value.get<long>();
      else if (key == "train_pairs") c.train_pairs = value.get<int>();
      else if (key == "eval_pairs") c.eval_pairs = value.get<int>();
      else if (key == "outlier_ratio") c.outlier_ratio = value.get<double>();
      else if (key == "data_dir") c.data_dir = value.get<std::string>();
      else
        throw ConfigError("config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field value: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_config_from_json_text(ss.str(), base);
}

std::string run_config_to_json_text(const RunConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

double lr_at(const RunConfig& cfg, long step) {
  const long decays = step / cfg.lr_decay_every;
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(decays));
}

model::ModelConfig model_config(const RunConfig& cfg) {
  model::ModelConfig m;
  m.channels = cfg.channels;
  m.clusters = cfg.clusters;
  m.knn_stage1 = cfg.knn_stage1;
  m.knn_stage2 = cfg.knn_stage2;
  m.annular_group = cfg.annular_group;
  m.use_dual = cfg.use_dual;
  m.use_moe = cfg.use_moe;
  m.use_implicit = cfg.use_implicit;
  m.use_explicit = cfg.use_explicit;
  m.style_norm = cfg.style_norm;
  m.moe.num_experts = cfg.experts;
  m.moe.top_k = cfg.top_k;
  m.moe.num_layers = cfg.fusion_layers;
  m.pruning_rate = cfg.pruning_rate;
  return m;
}

model::LossConfig loss_config(const RunConfig& cfg) {
  model::LossConfig l;
  l.tau = cfg.tau;
  l.warmup_steps = cfg.warmup_steps;
  l.virtual_pair_count = cfg.virtual_pairs;
  return l;
}

nn::PMixParams pmix_params(const RunConfig& cfg, long step, bool training) {
  nn::PMixParams p;
  p.p_start = cfg.p_start;
  p.p_end = cfg.p_end;
  p.alpha = cfg.alpha;
  p.epoch = static_cast<int>(std::min<long>(step, cfg.total_steps));
  p.total = static_cast<int>(std::max<long>(1, cfg.total_steps));
  p.training = training;
  return p;
}

// ---- metrics -----------------------------------------------------------

namespace {

struct ScoreAccum {
  std::vector<double> errors_deg;
  long tp = 0, fp = 0, fn = 0;
  int pairs = 0, failures = 0;
};

SplitScore finish_score(const ScoreAccum& a) {
  SplitScore s;
  s.pairs = a.pairs;
  s.failures = a.failures;
  const std::vector<double> auc =
      geom::pose_auc(a.errors_deg, {5.0, 10.0, 20.0});
  s.auc5 = auc[0];
  s.auc10 = auc[1];
  s.auc20 = auc[2];
  const double p_den = static_cast<double>(a.tp + a.fp);
  const double r_den = static_cast<double>(a.tp + a.fn);
  s.precision = p_den > 0.0 ? static_cast<double>(a.tp) / p_den : 0.0;
  s.recall = r_den > 0.0 ? static_cast<double>(a.tp) / r_den : 0.0;
  s.f_score = (s.precision + s.recall) > 1e-9
                  ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                  : 0.0;
  return s;
}

struct PairOutcome {
  double error_deg = 180.0;
  bool failure = true;
  long tp = 0, fp = 0, fn = 0;
  std::vector<std::pair<std::string, long>> utilization;
};

PairOutcome score_pair(const RunConfig& cfg, nn::ParamStore& ps,
                       const synth::PairRecord& rec, WeightMode mode) {
  const model::ModelConfig mcfg = model_config(cfg);
  const int n = rec.corr.size();
  PairOutcome out;
  geom::EssentialMatrix e;
  bool have_e = true;
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  try {
    if (mode == WeightMode::kPredicted) {
      nn::Tape t;
      RngStream rng(0);  // inference mode draws nothing
      const nn::PMixParams pm = pmix_params(cfg, 0, false);
      const model::ForwardResult fr =
          model::corrmoe_forward(t, ps, {rec.corr}, mcfg, pm, rng);
      e = fr.e_hat[0];
      mask = fr.full_mask[0].inlier_mask;
      for (int stage = 1; stage <= 2; ++stage) {
        const model::PruningOutput& st =
            stage == 1 ? fr.stage1 : fr.stage2;
        for (std::size_t l = 0; l < st.routings.size(); ++l) {
          const std::vector<long> u = st.routings[l].utilization();
          for (std::size_t ex = 0; ex < u.size(); ++ex)
            out.utilization.emplace_back(
                "stage" + std::to_string(stage) + ".layer" +
                    std::to_string(l) + ".expert" + std::to_string(ex),
                u[ex]);
        }
      }
    } else {
      const Eigen::VectorXd w = mode == WeightMode::kOracle
                                    ? rec.corr.labels
                                    : Eigen::VectorXd::Ones(n);
      e = geom::weighted_eight_point(rec.corr, w);
      mask =
          geom::full_size_verification(e, rec.corr, mcfg.verify_threshold)
              .inlier_mask;
    }
  } catch (const DegenerateInputError&) {
    have_e = false;
    std::fill(mask.begin(), mask.end(), false);
  }

  for (int i = 0; i < n; ++i) {
    const bool label = rec.corr.labels(i) > 0.5;
    const bool pred = mask[static_cast<std::size_t>(i)];
    if (pred && label) ++out.tp;
    else if (pred && !label) ++out.fp;
    else if (!pred && label) ++out.fn;
  }

  if (have_e) {
    std::vector<int> idx;
    for (int i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) idx.push_back(i);
    if (idx.size() >= 2) {  // pose disambiguation needs two inliers
      try {
        const geom::Pose est =
            geom::pose_from_essential(e, rec.corr.subset(idx));
        out.error_deg = geom::pose_error_deg(est, rec.pose_gt);
        out.failure = false;
      } catch (const DegenerateInputError&) {
        // fall through as a failure
      }
    }
  }
  if (out.failure) out.error_deg = 180.0;
  return out;
}

}  // namespace

MetricsTable evaluate_entries(const RunConfig& cfg, nn::ParamStore& ps,
                              const synth::Dataset& data,
                              const std::vector<synth::ManifestEntry>& entries,
                              WeightMode mode) {
  // Cross-domain purity: a held-out-domain pair must never share a domain
  // with the training manifest.
  const std::vector<std::string> splits = data.splits();
  std::set<std::string> train_domains;
  if (std::find(splits.begin(), splits.end(), "train") != splits.end())
    for (const synth::ManifestEntry& e : data.entries("train"))
      train_domains.insert(e.domain_id);
  for (const synth::ManifestEntry& e : entries)
    if (e.split == "cross_domain" && train_domains.count(e.domain_id))
      throw RuntimeFailure("evaluate: cross-domain entry " + e.id +
                           " carries training domain '" + e.domain_id + "'");

  ScoreAccum overall;
  std::map<std::string, ScoreAccum> by_domain, by_scene;
  std::map<std::string, long> util;
  for (const synth::ManifestEntry& entry : entries) {
    const synth::PairRecord rec = data.load(entry);
    const PairOutcome o = score_pair(cfg, ps, rec, mode);
    for (ScoreAccum* acc :
         {&overall, &by_domain[entry.domain_id], &by_scene[entry.scene_id]}) {
      acc->errors_deg.push_back(o.error_deg);
      acc->tp += o.tp;
      acc->fp += o.fp;
      acc->fn += o.fn;
      acc->pairs += 1;
      acc->failures += o.failure ? 1 : 0;
    }
    for (const auto& [label, count] : o.utilization) util[label] += count;
  }

  MetricsTable m;
  m.overall = finish_score(overall);
  for (const auto& [id, acc] : by_domain)
    m.per_domain.emplace_back(id, finish_score(acc));
  for (const auto& [id, acc] : by_scene)
    m.per_scene.emplace_back(id, finish_score(acc));
  for (const auto& [label, count] : util)
    m.expert_utilization.emplace_back(label, count);
  return m;
}

MetricsTable evaluate(const RunConfig& cfg, nn::ParamStore& ps,
                      const synth::Dataset& data, const std::string& split,
                      WeightMode mode) {
  // Accept the CLI's hyphenated split spellings for the stored split keys.
  std::string key = split;
  std::replace(key.begin(), key.end(), '-', '_');
  return evaluate_entries(cfg, ps, data, data.entries(key), mode);
}

namespace {

json score_to_json(const SplitScore& s) {
  json j;
  j["auc5"] = s.auc5;
  j["auc10"] = s.auc10;
  j["auc20"] = s.auc20;
  j["precision"] = s.precision;
  j["recall"] = s.recall;
  j["f_score"] = s.f_score;
  j["pairs"] = s.pairs;
  j["failures"] = s.failures;
  return j;
}

json metrics_to_json(const MetricsTable& m) {
  json j;
  j["overall"] = score_to_json(m.overall);
  json dom = json::object();
  for (const auto& [id, s] : m.per_domain) dom[id] = score_to_json(s);
  j["per_domain"] = dom;
  json scn = json::object();
  for (const auto& [id, s] : m.per_scene) scn[id] = score_to_json(s);
  j["per_scene"] = scn;
  json util = json::object();
  for (const auto& [label, count] : m.expert_utilization) util[label] = count;
  j["expert_utilization"] = util;
  return j;
}

void score_row(std::ostringstream& os, const std::string& name,
               const SplitScore& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%-24s %7.4f %7.4f %7.4f   %6.4f %6.4f %6.4f   %5d %5d\n",
                name.c_str(), s.auc5, s.auc10, s.auc20, s.precision, s.recall,
                s.f_score, s.pairs, s.failures);
  os << buf;
}

}  // namespace

std::string metrics_to_json_text(const MetricsTable& m) {
  return metrics_to_json(m).dump(2) + "\n";
}

std::string metrics_to_table_text(const MetricsTable& m) {
  std::ostringstream os;
  os << "group                      AUC@5  AUC@10  AUC@20        P      R "
        "     F   pairs  fail\n";
  score_row(os, "overall", m.overall);
  for (const auto& [id, s] : m.per_domain) score_row(os, "domain " + id, s);
  for (const auto& [id, s] : m.per_scene) score_row(os, "scene " + id, s);
  if (!m.expert_utilization.empty()) {
    os << "expert utilization:\n";
    for (const auto& [label, count] : m.expert_utilization)
      os << "  " << label << ": " << count << "\n";
  }
  return os.str();
}

// ---- training ----------------------------------------------------------

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out.good()) throw IoError("short write to " + path.string());
}

}  // namespace

TrainResult train(const RunConfig& cfg, const synth::Dataset& data,
                  std::uint64_t seed, const fs::path& out_dir,
                  nn::ParamStore* resume) {
  cfg.validate();
  const std::vector<std::string> splits = data.splits();
  for (const char* required : {"train", "val"})
    if (std::find(splits.begin(), splits.end(), required) == splits.end())
      throw ConfigError(std::string("train: dataset lacks a '") + required +
                        "' split");
  const std::vector<synth::ManifestEntry>& train_entries =
      data.entries("train");
  if (static_cast<int>(train_entries.size()) < cfg.batch)
    throw ConfigError("train: split smaller than one batch");
  for (const synth::ManifestEntry& e : train_entries)
    if (e.n != cfg.n)
      throw ConfigError("train: dataset pair size " + std::to_string(e.n) +
                        " does not match config n=" + std::to_string(cfg.n));
  fs::create_directories(out_dir);

  const model::ModelConfig mcfg = model_config(cfg);
  const model::LossConfig lcfg = loss_config(cfg);
  nn::ParamStore fresh(seed);
  nn::ParamStore& ps = resume != nullptr ? *resume : fresh;
  RngStream rng = RngStream(seed).fork("train-loop");

  const long steps_per_epoch =
      std::max<long>(1, static_cast<long>(train_entries.size()) / cfg.batch);
  const int total_epochs = static_cast<int>(
      (cfg.total_steps + steps_per_epoch - 1) / steps_per_epoch);

  TrainResult res;
  res.best_checkpoint = out_dir / "best.ckpt.json";
  res.last_checkpoint = out_dir / "last.ckpt.json";
  res.log_path = out_dir / "train_log.json";

  std::vector<int> order;
  std::size_t cursor = 0;
  long epoch = 0;
  auto reshuffle = [&]() {
    order = rng.fork("shuffle").fork(static_cast<std::uint64_t>(epoch))
                .permutation(static_cast<int>(train_entries.size()));
    cursor = 0;
  };
  reshuffle();

  auto save = [&](const fs::path& path, long step) {
    model::CheckpointMeta meta;
    meta.epoch = static_cast<int>(epoch);
    meta.total_epochs = total_epochs;
    meta.step = step;
    model::save_checkpoint(path, ps, meta);
  };

  for (long step = 0; step < cfg.total_steps; ++step) {
    if (cursor + static_cast<std::size_t>(cfg.batch) > order.size()) {
      ++epoch;
      reshuffle();
    }
    std::vector<const synth::ManifestEntry*> picked;
    std::vector<synth::PairRecord> records;
    std::vector<geom::CorrespondenceSet> sets;
    for (int i = 0; i < cfg.batch; ++i) {
      const synth::ManifestEntry& entry =
          train_entries[static_cast<std::size_t>(order[cursor++])];
      picked.push_back(&entry);
      records.push_back(data.load(entry));
      sets.push_back(records.back().corr);
    }

    ps.zero_grads();
    nn::Tape t;
    const nn::PMixParams pm = pmix_params(cfg, step, true);
    const model::ForwardResult fr =
        model::corrmoe_forward(t, ps, sets, mcfg, pm, rng);
    const model::LossReport rep =
        model::hybrid_loss(t, ps, fr, records, step, lcfg);
    if (!std::isfinite(rep.total)) {
      std::string ids;
      for (const synth::ManifestEntry* e : picked)
        ids += (ids.empty() ? "" : ", ") + e->id;
      throw RuntimeFailure("train: non-finite loss at step " +
                           std::to_string(step) + "; batch records: " + ids);
    }
    t.backward(rep.total_var);
    ps.adam_step(lr_at(cfg, step));

    if (step == 0) res.step0_cls = rep.cls;
    res.final_cls = rep.cls;

    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      TrainLogEntry le;
      le.step = step;
      le.lr = lr_at(cfg, step);
      le.total = rep.total;
      le.cls = rep.cls;
      le.ess = rep.ess;
      le.ess_active = rep.ess_active;
      le.expert_tokens.assign(static_cast<std::size_t>(cfg.experts), 0);
      if (cfg.use_moe)
        for (const model::PruningOutput* st : {&fr.stage1, &fr.stage2})
          for (const nn::RoutingDecision& r : st->routings) {
            const std::vector<long> u = r.utilization();
            for (std::size_t ex = 0; ex < u.size(); ++ex)
              le.expert_tokens[ex] += u[ex];
          }
      res.log.push_back(std::move(le));
    }

    if ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.total_steps) {
      const MetricsTable val =
          evaluate(cfg, ps, data, "val", WeightMode::kPredicted);
      save(res.last_checkpoint, step + 1);
      if (res.best_val_step < 0 || val.overall.auc5 > res.best_val_auc5) {
        res.best_val_auc5 = val.overall.auc5;
        res.best_val_step = step + 1;
        save(res.best_checkpoint, step + 1);
      }
    }
  }

  json log;
  log["seed"] = seed;
  log["config"] = config_to_json(cfg);
  log["step0_cls"] = res.step0_cls;
  log["final_cls"] = res.final_cls;
  log["best_val_auc5"] = res.best_val_auc5;
  log["best_val_step"] = res.best_val_step;
  json entries = json::array();
  for (const TrainLogEntry& le : res.log) {
    json e;
    e["step"] = le.step;
    e["lr"] = le.lr;
    e["total"] = le.total;
    e["cls"] = le.cls;
    e["ess"] = le.ess;
    e["ess_active"] = le.ess_active;
    e["expert_tokens"] = le.expert_tokens;
    entries.push_back(std::move(e));
  }
  log["entries"] = entries;
  write_text_file(res.log_path, log.dump(2) + "\n");
  return res;
}

// ---- ablation ----------------------------------------------------------

std::vector<std::string> ablation_roster() {
  return {"full",        "moe_only", "dual_only", "implicit_off",
          "explicit_off", "pmix_off", "pmix_in",   "pmix_fixed"};
}

namespace {

RunConfig apply_variant(RunConfig cfg, const std::string& name) {
  if (name == "full") return cfg;
  if (name == "moe_only") { cfg.use_dual = false; return cfg; }
  if (name == "dual_only") { cfg.use_moe = false; return cfg; }
  if (name == "implicit_off") { cfg.use_implicit = false; return cfg; }
  if (name == "explicit_off") { cfg.use_explicit = false; return cfg; }
  if (name == "pmix_off") { cfg.style_norm = nn::StyleNorm::kNone; return cfg; }
  if (name == "pmix_in") {
    cfg.style_norm = nn::StyleNorm::kInstanceNorm;
    return cfg;
  }
  if (name == "pmix_fixed") {
    cfg.style_norm = nn::StyleNorm::kMixstyleFixed;
    return cfg;
  }
  throw ConfigError("ablate: unknown variant '" + name + "'");
}

}  // namespace

AblationReport ablate(const RunConfig& cfg, const synth::Dataset& data,
                      std::uint64_t seed, const fs::path& out_dir) {
  AblationReport report;
  report.steps = cfg.ablate_steps;
  report.seed = seed;
  fs::create_directories(out_dir);
  for (const std::string& name : ablation_roster()) {
    RunConfig variant = apply_variant(cfg, name);
    variant.total_steps = cfg.ablate_steps;
    const fs::path dir = out_dir / name;
    const TrainResult tr = train(variant, data, seed, dir);
    nn::ParamStore ps(0);
    model::load_checkpoint(tr.best_checkpoint, ps);
    AblationRow row;
    row.name = name;
    row.in_domain = evaluate(variant, ps, data, "test", WeightMode::kPredicted);
    row.cross_domain =
        evaluate(variant, ps, data, "cross-domain", WeightMode::kPredicted);
    report.rows.push_back(std::move(row));
  }
  write_text_file(out_dir / "ablation.json", ablation_to_json_text(report));
  write_text_file(out_dir / "ablation.txt", ablation_to_table_text(report));
  return report;
}

std::string ablation_to_json_text(const AblationReport& report) {
  json j;
  j["steps"] = report.steps;
  j["seed"] = report.seed;
  json rows = json::array();
  for (const AblationRow& row : report.rows) {
    json r;
    r["name"] = row.name;
    r["in_domain"] = metrics_to_json(row.in_domain);
    r["cross_domain"] = metrics_to_json(row.cross_domain);
    rows.push_back(std::move(r));
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

std::string ablation_to_table_text(const AblationReport& report) {
  std::ostringstream os;
  os << "ablation (" << report.steps << " steps, seed " << report.seed
     << ")\n";
  os << "variant                  in-domain AUC@5      F   cross-domain "
        "AUC@5      F\n";
  for (const AblationRow& row : report.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s %15.4f %6.4f %18.4f %6.4f\n",
                  row.name.c_str(), row.in_domain.overall.auc5,
                  row.in_domain.overall.f_score, row.cross_domain.overall.auc5,
                  row.cross_domain.overall.f_score);
    os << buf;
  }
  return os.str();
}

// ---- visualization -----------------------------------------------------

namespace {

struct Canvas {
  int w = 0, h = 0;
  std::vector<std::uint8_t> rgb;

  Canvas(int width, int height) : w(width), h(height) {
    rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
    for (std::size_t i = 0; i < rgb.size(); i += 3) {
      rgb[i] = 24;
      rgb[i + 1] = 24;
      rgb[i + 2] = 28;
    }
  }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * w + x);
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }

  void dot(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) set(x + dx, y + dy, r, g, b);
  }

  void line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g,
            std::uint8_t b) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  }
};

}  // namespace

RenderLog visualize_matches(const RunConfig& cfg, nn::ParamStore& ps,
                            const synth::PairRecord& pair,
                            const fs::path& out_path, WeightMode mode) {
  const int n = pair.corr.size();
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  if (mode == WeightMode::kOracle) {
    for (int i = 0; i < n; ++i) mask[i] = pair.corr.labels(i) > 0.5;
  } else if (mode == WeightMode::kUniform) {
    const geom::EssentialMatrix e =
        geom::weighted_eight_point(pair.corr, Eigen::VectorXd::Ones(n));
    mask = geom::full_size_verification(e, pair.corr,
                                        model_config(cfg).verify_threshold)
               .inlier_mask;
  } else {
    nn::Tape t;
    RngStream rng(0);
    const model::ForwardResult fr = model::corrmoe_forward(
        t, ps, {pair.corr}, model_config(cfg), pmix_params(cfg, 0, false),
        rng);
    mask = fr.full_mask[0].inlier_mask;
  }

  const int panel = 360, marg = 20, gap = 40;
  Canvas cv(2 * panel + 2 * marg + gap, panel + 2 * marg);

  double lo = -1.0, hi = 1.0;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) {
      lo = std::min(lo, pair.corr.coords(i, c));
      hi = std::max(hi, pair.corr.coords(i, c));
    }
  const double span = (hi - lo) * 1.05;
  const double off = lo - (hi - lo) * 0.025;
  auto px = [&](double v, int origin) {
    return origin + static_cast<int>((v - off) / span * (panel - 1));
  };
  const int ox1 = marg, ox2 = marg + panel + gap, oy = marg;
  auto view1 = [&](int i) {
    return std::pair<int, int>{px(pair.corr.coords(i, 0), ox1),
                               px(pair.corr.coords(i, 1), oy)};
  };
  auto view2 = [&](int i) {
    return std::pair<int, int>{px(pair.corr.coords(i, 2), ox2),
                               px(pair.corr.coords(i, 3), oy)};
  };

  RenderLog log;
  log.width = cv.w;
  log.height = cv.h;
  for (int i = 0; i < n; ++i) {
    const auto [x1, y1] = view1(i);
    const auto [x2, y2] = view2(i);
    cv.dot(x1, y1, 180, 180, 180);
    cv.dot(x2, y2, 180, 180, 180);
    log.keypoints += 2;
  }
  for (int i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const auto [x1, y1] = view1(i);
    const auto [x2, y2] = view2(i);
    if (pair.corr.labels(i) > 0.5) {
      cv.line(x1, y1, x2, y2, 40, 220, 40);
      ++log.green_lines;
    } else {
      cv.line(x1, y1, x2, y2, 220, 40, 40);
      ++log.red_lines;
    }
  }

  std::ofstream out(out_path, std::ios::binary);
  if (!out)
    throw IoError("visualize_matches: cannot open " + out_path.string());
  out << "P6\n" << cv.w << " " << cv.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(cv.rgb.data()),
            static_cast<std::streamsize>(cv.rgb.size()));
  if (!out.good())
    throw IoError("visualize_matches: short write to " + out_path.string());
  return log;
}

}  // namespace corrmoe::run
