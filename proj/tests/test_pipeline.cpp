#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "corrmoe/errors.hpp"
#include "corrmoe/pipeline.hpp"
#include "corrmoe/rng.hpp"
#include "doctest.h"
#include "fd_util.hpp"

using corrmoe::RngStream;
namespace geom = corrmoe::geom;
namespace model = corrmoe::model;
namespace nn = corrmoe::nn;
namespace synth = corrmoe::synth;
using model::ModelConfig;
using nn::Shape;
using nn::Tensor;
using nn::Var;
using testutil::param_gradcheck;

namespace {

/// Configuration small enough for unit tests; knn sizes keep the
/// reference 9/6 split unless a case needs otherwise.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 16;
  cfg.clusters = 8;
  cfg.moe.num_experts = 2;
  cfg.moe.top_k = 1;
  cfg.moe.num_layers = 1;
  return cfg;
}

geom::CorrespondenceSet random_set(int n, RngStream& rng) {
  geom::CorrespondenceSet set;
  set.coords.resize(n, 4);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) set.coords(i, c) = rng.uniform(-1.0, 1.0);
  return set;
}

synth::PairRecord make_pair(int n, double outlier_ratio, std::uint64_t seed,
                            double sigma = 0.001) {
  synth::SceneSpec scene;
  scene.scene_id = "s";
  synth::DomainSpec domain;
  domain.domain_id = "d";
  domain.sigma = sigma;
  if (sigma == 0.0) domain.coordinate_warp = 0.0;
  return synth::generate_pair(scene, domain, n, outlier_ratio, seed);
}

double frobenius_gap(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  return std::min((a - b).norm(), (a + b).norm());
}

}  // namespace

TEST_CASE("pruning module keeps the top half by logit") {
  RngStream rng(900);
  nn::PMixParams pmix;  // inference mode -> identity

  SUBCASE("sizes, ordering oracle, and weight transform") {
    const int n = 128;
    const auto set = random_set(n, rng);
    nn::ParamStore ps(1);
    nn::Tape t;
    Tensor x({1, 4, n, 1});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) x.at(0, c, i, 0) = set.coords(i, c);
    RngStream branch = rng.fork("run");
    model::PruningOutput out = model::pruning_module(
        t, ps, "stage1", {set}, t.input(x), 1, tiny_config(), pmix, branch);

    REQUIRE(out.cands.size() == 1);
    CHECK(out.cands[0].size() == 64);
    CHECK(out.weights[0].size() == 64);
    CHECK(out.logits[0].size() == n);
    REQUIRE(out.keep_idx[0].size() == 64);
    CHECK(std::is_sorted(out.keep_idx[0].begin(), out.keep_idx[0].end()));

    // retained logits dominate discarded ones (full-sort oracle)
    std::vector<bool> kept(n, false);
    for (int i : out.keep_idx[0]) kept[i] = true;
    double min_kept = 1e300, max_dropped = -1e300;
    for (int i = 0; i < n; ++i) {
      if (kept[i]) min_kept = std::min(min_kept, out.logits[0](i));
      else max_dropped = std::max(max_dropped, out.logits[0](i));
    }
    CHECK(min_kept >= max_dropped);

    for (int i = 0; i < 64; ++i) {
      const double logit = out.logits[0](out.keep_idx[0][i]);
      const double expect = std::tanh(std::max(logit, 0.0));
      CHECK(out.weights[0](i) == doctest::Approx(expect).epsilon(1e-12));
      CHECK(out.weights[0](i) >= 0.0);
      CHECK(out.weights[0](i) <= 1.0);  // tanh may saturate to exactly 1
    }
    // retained coordinates are the keep_idx rows of the input
    for (int i = 0; i < 64; ++i)
      for (int c = 0; c < 4; ++c)
        CHECK(out.cands[0].coords(i, c) ==
              set.coords(out.keep_idx[0][i], c));
  }

  SUBCASE("odd item count rounds the retained half up") {
    const int n = 17;
    const auto set = random_set(n, rng);
    nn::ParamStore ps(2);
    nn::Tape t;
    Tensor x({1, 4, n, 1});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) x.at(0, c, i, 0) = set.coords(i, c);
    RngStream branch = rng.fork("odd");
    model::PruningOutput out = model::pruning_module(
        t, ps, "stage1", {set}, t.input(x), 1, tiny_config(), pmix, branch);
    CHECK(out.cands[0].size() == 9);
  }

  SUBCASE("all-equal logits keep the first half by index") {
    const int n = 32;
    const auto set = random_set(n, rng);
    nn::ParamStore ps(3);
    // zeroed prediction head -> identical logits for every candidate
    ps.get_or_create("stage1.head.out.w", {1, 1, 16, 1}, nn::Init::kZeros);
    ps.get_or_create("stage1.head.out.b", {1, 1, 1, 1}, nn::Init::kZeros);
    nn::Tape t;
    Tensor x({1, 4, n, 1});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) x.at(0, c, i, 0) = set.coords(i, c);
    RngStream branch = rng.fork("ties");
    model::PruningOutput out = model::pruning_module(
        t, ps, "stage1", {set}, t.input(x), 1, tiny_config(), pmix, branch);
    REQUIRE(out.keep_idx[0].size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(out.keep_idx[0][i] == i);
  }

  SUBCASE("preconditions") {
    nn::ParamStore ps(4);
    nn::Tape t;
    const auto set = random_set(32, rng);
    Tensor x({1, 4, 32, 1});
    RngStream branch = rng.fork("err");
    CHECK_THROWS_AS(model::pruning_module(t, ps, "p", {set}, t.input(x), 3,
                                          tiny_config(), pmix, branch),
                    corrmoe::PreconditionError);
    // stage 2 wants 5 channels
    CHECK_THROWS_AS(model::pruning_module(t, ps, "p", {set}, t.input(x), 2,
                                          tiny_config(), pmix, branch),
                    corrmoe::PreconditionError);
    const auto small = random_set(15, rng);
    Tensor xs({1, 4, 15, 1});
    CHECK_THROWS_AS(model::pruning_module(t, ps, "p", {small}, t.input(xs), 1,
                                          tiny_config(), pmix, branch),
                    corrmoe::PreconditionError);
    ModelConfig bad = tiny_config();
    bad.knn_stage1 = 7;  // not divisible by the annular group
    CHECK_THROWS_AS(bad.validate(), corrmoe::ConfigError);
    bad = tiny_config();
    bad.use_dual = false;
    bad.use_moe = false;
    CHECK_THROWS_AS(bad.validate(), corrmoe::ConfigError);
  }
}

TEST_CASE("forward pass cascades, verifies, and is deterministic") {
  nn::PMixParams pmix;

  SUBCASE("shape cascade at reference sizes") {
    RngStream rng(910);
    ModelConfig cfg = tiny_config();
    cfg.channels = 8;
    const auto set = random_set(2000, rng);
    nn::ParamStore ps(5);
    nn::Tape t;
    RngStream branch = rng.fork("fw");
    model::ForwardResult fr =
        model::corrmoe_forward(t, ps, {set}, cfg, pmix, branch);
    CHECK(fr.stage1.cands[0].size() == 1000);
    CHECK(fr.stage2.cands[0].size() == 500);
    CHECK(fr.full_mask[0].inlier_mask.size() == 2000);
    CHECK(fr.e_hat[0].satisfies_invariants(1e-7));
  }

  SUBCASE("batched forward and inference determinism") {
    const synth::PairRecord ra = make_pair(128, 0.6, 41);
    const synth::PairRecord rb = make_pair(128, 0.6, 42);
    const std::vector<geom::CorrespondenceSet> batch{ra.corr, rb.corr};
    nn::ParamStore ps(6);
    const ModelConfig cfg = tiny_config();

    auto run = [&]() {
      nn::Tape t;
      RngStream branch(77);
      model::ForwardResult fr =
          model::corrmoe_forward(t, ps, batch, cfg, pmix, branch);
      std::vector<double> flat;
      for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < fr.stage1.logits[b].size(); ++i)
          flat.push_back(fr.stage1.logits[b](i));
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) flat.push_back(fr.e_hat[b].m(r, c));
      }
      return flat;
    };
    const auto first = run();
    const auto second = run();
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i)
      CHECK(first[i] == second[i]);

    nn::Tape t;
    RngStream branch(77);
    model::ForwardResult fr =
        model::corrmoe_forward(t, ps, batch, cfg, pmix, branch);
    CHECK(fr.stage1.cands[0].size() == 64);
    CHECK(fr.stage2.cands[0].size() == 32);
    CHECK(fr.full_mask[1].inlier_mask.size() == 128);
    CHECK(t.val(fr.stage2.weights_var).shape() == Shape{2, 1, 32, 1});
  }

  SUBCASE("uniform fallback recovers the pose on clean data") {
    const synth::PairRecord rec = make_pair(64, 0.0, 43, /*sigma=*/0.0);
    nn::ParamStore ps(7);
    // force every stage-2 logit negative: weights all zero -> fallback
    ps.get_or_create("stage2.head.out.w", {1, 1, 16, 1}, nn::Init::kZeros);
    ps.get_or_create("stage2.head.out.b", {1, 1, 1, 1}, nn::Init::kZeros)
        .value.at(0, 0, 0, 0) = -1.0;
    nn::Tape t;
    RngStream branch(78);
    model::ForwardResult fr =
        model::corrmoe_forward(t, ps, {rec.corr}, tiny_config(), pmix, branch);
    CHECK_FALSE(fr.ess_ok[0]);
    CHECK(frobenius_gap(fr.e_hat[0].m, rec.e_gt.m) < 1e-6);
  }

  SUBCASE("preconditions") {
    RngStream rng(911);
    nn::ParamStore ps(8);
    nn::Tape t;
    nn::PMixParams pm;
    RngStream branch = rng.fork("err");
    CHECK_THROWS_AS(
        model::corrmoe_forward(t, ps, {}, tiny_config(), pm, branch),
        corrmoe::PreconditionError);
    CHECK_THROWS_AS(model::corrmoe_forward(t, ps, {random_set(32, rng)},
                                           tiny_config(), pm, branch),
                    corrmoe::PreconditionError);
    CHECK_THROWS_AS(
        model::corrmoe_forward(t, ps,
                               {random_set(64, rng), random_set(96, rng)},
                               tiny_config(), pm, branch),
        corrmoe::PreconditionError);
  }
}

TEST_CASE("stage labels come from the epipolar distance") {
  const synth::PairRecord clean = make_pair(96, 0.6, 51, /*sigma=*/0.0);
  const Eigen::VectorXd recomputed =
      model::epipolar_labels(clean.e_gt, clean.corr);
  REQUIRE(recomputed.size() == clean.corr.labels.size());
  for (int i = 0; i < recomputed.size(); ++i)
    CHECK(recomputed(i) == clean.corr.labels(i));

  const synth::PairRecord noisy = make_pair(96, 0.6, 52);
  const Eigen::VectorXd labels = model::epipolar_labels(noisy.e_gt, noisy.corr);
  REQUIRE(labels.size() == 96);
  for (int i = 0; i < labels.size(); ++i)
    CHECK((labels(i) == 0.0 || labels(i) == 1.0));
}

TEST_CASE("classification loss values and temperature gradients") {
  SUBCASE("perfect capped logits vanish") {
    nn::Tape t;
    nn::ParamStore ps(1);
    Tensor z({1, 1, 20, 1}), y({1, 1, 20, 1});
    for (int i = 0; i < 20; ++i) {
      y.at(0, 0, i, 0) = i % 2 ? 1.0 : 0.0;
      z.at(0, 0, i, 0) = i % 2 ? 15.0 : -15.0;
    }
    Var loss = model::classification_loss(t, ps, {t.input(z), t.input(z)},
                                          {y, y});
    CHECK(t.val(loss).item() < 1e-6);
  }

  SUBCASE("indifferent logits on balanced labels cost ln 2 per stage") {
    nn::Tape t;
    nn::ParamStore ps(2);
    Tensor z({1, 1, 10, 1}), y({1, 1, 10, 1});
    for (int i = 0; i < 10; ++i) y.at(0, 0, i, 0) = i < 5 ? 1.0 : 0.0;
    std::vector<double> per_stage;
    Var loss = model::classification_loss(t, ps, {t.input(z), t.input(z)},
                                          {y, y}, &per_stage);
    CHECK(t.val(loss).item() ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    REQUIRE(per_stage.size() == 2);
    CHECK(per_stage[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(per_stage[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("temperature gradients match finite differences") {
    RngStream rng(920);
    const Shape s{2, 1, 30, 1};
    Tensor z = testutil::rand_tensor(s, rng, -3.0, 3.0);
    Tensor y(s);
    for (long i = 0; i < y.numel(); ++i) y[i] = rng.below(2) ? 1.0 : 0.0;
    nn::ParamStore ps(3);
    auto build = [&](nn::Tape& t, nn::ParamStore& store) {
      return model::classification_loss(t, store, {t.input(z)}, {y});
    };
    CHECK(param_gradcheck(ps, build) < 1e-4);
    CHECK(ps.has("loss.temp0"));
  }

  SUBCASE("mismatches throw") {
    nn::Tape t;
    nn::ParamStore ps(4);
    Tensor z({1, 1, 8, 1}), y({1, 1, 9, 1});
    CHECK_THROWS_AS(model::classification_loss(t, ps, {t.input(z)}, {y}),
                    corrmoe::PreconditionError);
    CHECK_THROWS_AS(
        model::classification_loss(t, ps, {t.input(z), t.input(z)}, {z}),
        corrmoe::PreconditionError);
  }
}

TEST_CASE("essential loss oracle") {
  geom::Pose pose;
  pose.rotation = Eigen::AngleAxisd(0.3, Eigen::Vector3d(1, 2, 3).normalized())
                      .toRotationMatrix();
  pose.translation = Eigen::Vector3d(0.6, -0.4, 0.2).normalized();
  const geom::EssentialMatrix e_gt = geom::essential_from_pose(pose);
  const geom::CorrespondenceSet vp = synth::virtual_pairs(pose, 40);

  auto as_tensor = [](const Eigen::Matrix3d& m) {
    Tensor t({1, 3, 3, 1});
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t.at(0, r, c, 0) = m(r, c);
    return t;
  };

  SUBCASE("ground truth and any rescaling of it score zero") {
    nn::Tape t;
    CHECK(t.val(model::essential_loss(t, t.input(as_tensor(e_gt.m)), vp))
              .item() < 1e-12);
    CHECK(t.val(model::essential_loss(t, t.input(as_tensor(3.0 * e_gt.m)), vp))
              .item() < 1e-12);
  }

  SUBCASE("random matrix matches the direct transcription") {
    RngStream rng(930);
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = rng.uniform(-1.0, 1.0);
    nn::Tape t;
    const double got =
        t.val(model::essential_loss(t, t.input(as_tensor(m)), vp)).item();
    double expect = 0.0;
    for (int i = 0; i < vp.size(); ++i) {
      const Eigen::Vector3d p(vp.coords(i, 0), vp.coords(i, 1), 1.0);
      const Eigen::Vector3d q(vp.coords(i, 2), vp.coords(i, 3), 1.0);
      const double num = q.dot(m * p);
      const Eigen::Vector3d mp = m * p, mtq = m.transpose() * q;
      const double den =
          mp(0) * mp(0) + mp(1) * mp(1) + mtq(0) * mtq(0) + mtq(1) * mtq(1);
      expect += num * num / den;
    }
    expect /= vp.size();
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("hybrid loss composition and warm-up") {
  const synth::PairRecord ra = make_pair(64, 0.5, 61);
  const synth::PairRecord rb = make_pair(64, 0.5, 62);
  const std::vector<geom::CorrespondenceSet> batch{ra.corr, rb.corr};
  const std::vector<synth::PairRecord> records{ra, rb};
  nn::PMixParams pmix;
  nn::ParamStore ps(9);
  // keep every stage-2 weight positive so the geometry term is active
  ps.get_or_create("stage2.head.out.w", {1, 1, 16, 1}, nn::Init::kZeros);
  ps.get_or_create("stage2.head.out.b", {1, 1, 1, 1}, nn::Init::kZeros)
      .value.at(0, 0, 0, 0) = 0.5;

  model::LossConfig lcfg;
  lcfg.warmup_steps = 100;

  auto run = [&](long step) {
    nn::Tape t;
    RngStream branch(79);
    model::ForwardResult fr =
        model::corrmoe_forward(t, ps, batch, tiny_config(), pmix, branch);
    for (bool ok : fr.ess_ok) REQUIRE(ok);
    return model::hybrid_loss(t, ps, fr, records, step, lcfg);
  };

  SUBCASE("during warm-up the total is the classification term") {
    const model::LossReport rep = run(99);
    CHECK_FALSE(rep.ess_active);
    CHECK(rep.ess == 0.0);
    CHECK(rep.total == rep.cls);
    REQUIRE(rep.per_stage_cls.size() == 2);
    CHECK(rep.cls == doctest::Approx(rep.per_stage_cls[0] +
                                     rep.per_stage_cls[1])
                         .epsilon(1e-12));
  }

  SUBCASE("after warm-up the geometry term joins at weight tau") {
    const model::LossReport rep = run(100);
    CHECK(rep.ess_active);
    CHECK(rep.ess > 0.0);
    CHECK(rep.tau == 0.5);
    CHECK(rep.total ==
          doctest::Approx(rep.cls + 0.5 * rep.ess).epsilon(1e-7));
  }

  SUBCASE("negative tau is rejected") {
    nn::Tape t;
    RngStream branch(80);
    model::ForwardResult fr =
        model::corrmoe_forward(t, ps, batch, tiny_config(), pmix, branch);
    model::LossConfig bad;
    bad.tau = -0.1;
    CHECK_THROWS_AS(model::hybrid_loss(t, ps, fr, records, 0, bad),
                    corrmoe::PreconditionError);
  }
}

TEST_CASE("tiny full-model gradients match finite differences") {
  const synth::PairRecord rec = make_pair(64, 0.5, 71);
  ModelConfig cfg = tiny_config();
  cfg.clusters = 8;
  cfg.knn_stage1 = 4;
  cfg.knn_stage2 = 4;
  cfg.annular_group = 2;
  nn::PMixParams pmix;  // off
  model::LossConfig lcfg;  // warmup 0 -> geometry term active
  nn::ParamStore ps(31);

  double cut_margin = 1e300;
  double positives = 1e300;
  bool ess_ok = true;
  auto build = [&](nn::Tape& t, nn::ParamStore& store) {
    RngStream branch(81);
    model::ForwardResult fr =
        model::corrmoe_forward(t, store, {rec.corr}, cfg, pmix, branch);
    // margins that keep the discrete choices stable under FD nudges
    for (const model::PruningOutput* st : {&fr.stage1, &fr.stage2}) {
      Eigen::VectorXd sorted = st->logits[0];
      std::sort(sorted.data(), sorted.data() + sorted.size(),
                std::greater<>());
      const int keep = static_cast<int>(st->keep_idx[0].size());
      cut_margin = std::min(cut_margin, sorted(keep - 1) - sorted(keep));
    }
    positives = std::min(
        positives, static_cast<double>((fr.stage2.weights[0].array() > 0.0)
                                           .count()));
    ess_ok = ess_ok && fr.ess_ok[0];
    return model::hybrid_loss(t, store, fr, {rec}, 0, lcfg).total_var;
  };

  // Throwaway pass creates every parameter; then tame the classifier heads
  // so logits land O(1).  At raw init the logits reach +-25/-40, which
  // saturates the tanh weights, parks tokens beyond the BCE clamp, and zeroes
  // every stage-2 weight (no geometry branch).  A small positive stage-2
  // bias gives enough positive weights to keep the eight-point path active.
  {
    nn::Tape t;
    build(t, ps);
  }
  for (const char* nm : {"stage1.head.out.w", "stage2.head.out.w"}) {
    nn::Tensor& w = ps.at(nm).value;
    for (long j = 0; j < w.numel(); ++j) w[j] *= 0.1;
  }
  ps.at("stage2.head.out.b").value.at(0, 0, 0, 0) = 2.5;
  cut_margin = 1e300;
  positives = 1e300;
  ess_ok = true;

  // h below the spacing of the relu kinks that the amplified init scatters
  // around the operating point; the backward pass itself is smooth there.
  CHECK(param_gradcheck(ps, build, 1e-6) < 1e-4);
  CHECK(cut_margin > 1e-3);
  CHECK(positives >= 10.0);
  CHECK(ess_ok);
}

TEST_CASE("checkpoints round-trip parameters and optimizer state") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "corrmoe_ckpt_test";
  fs::create_directories(dir);
  const fs::path path = dir / "model.ckpt.json";

  RngStream rng(940);
  nn::ParamStore ps(17);
  // create a few parameters and give them Adam state via one real step
  {
    nn::Tape t;
    Var w = t.param(ps, "w", {1, 4, 3, 1}, nn::Init::kHe);
    Var x = t.input(testutil::rand_tensor({1, 3, 5, 1}, rng, -1.0, 1.0));
    Var b = t.param(ps, "b", {1, 4, 1, 1}, nn::Init::kZeros);
    Var out = t.conv1x1(x, w, b);
    t.backward(testutil::dot_const(
        t, out, testutil::rand_tensor({1, 4, 5, 1}, rng, -1.0, 1.0)));
    ps.adam_step(1e-3);
  }

  model::CheckpointMeta meta;
  meta.epoch = 3;
  meta.total_epochs = 7;
  meta.step = ps.steps_taken();
  model::save_checkpoint(path, ps, meta);

  SUBCASE("bitwise round trip") {
    nn::ParamStore loaded(0);
    const model::CheckpointMeta got = model::load_checkpoint(path, loaded);
    CHECK(got.epoch == 3);
    CHECK(got.total_epochs == 7);
    CHECK(got.step == ps.steps_taken());
    CHECK(loaded.steps_taken() == ps.steps_taken());
    REQUIRE(loaded.names() == ps.names());
    for (const auto& name : ps.names()) {
      const nn::Param& a = ps.at(name);
      const nn::Param& b = loaded.at(name);
      REQUIRE(a.value.shape() == b.value.shape());
      for (long i = 0; i < a.value.numel(); ++i)
        CHECK(a.value[i] == b.value[i]);
      REQUIRE(a.adam_m.numel() == b.adam_m.numel());
      for (long i = 0; i < a.adam_m.numel(); ++i) {
        CHECK(a.adam_m[i] == b.adam_m[i]);
        CHECK(a.adam_v[i] == b.adam_v[i]);
      }
    }
  }

  SUBCASE("failure modes") {
    nn::ParamStore sink(0);
    CHECK_THROWS_AS(model::load_checkpoint(dir / "missing.json", sink),
                    corrmoe::IoError);

    const fs::path garbage = dir / "garbage.json";
    std::ofstream(garbage) << "not json at all {";
    CHECK_THROWS_AS(model::load_checkpoint(garbage, sink), corrmoe::IoError);

    const fs::path wrong = dir / "wrong_version.json";
    std::ofstream(wrong)
        << R"({"format":"corrmoe-checkpoint","version":2,"epoch":0,)"
        << R"("total_epochs":1,"step":0,"store_seed":0,"params":{}})";
    CHECK_THROWS_AS(model::load_checkpoint(wrong, sink), corrmoe::IoError);

    const fs::path alien = dir / "alien.json";
    std::ofstream(alien) << R"({"format":"something-else","version":1})";
    CHECK_THROWS_AS(model::load_checkpoint(alien, sink), corrmoe::IoError);
  }
}
