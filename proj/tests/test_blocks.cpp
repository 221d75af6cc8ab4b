#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "corrmoe/blocks.hpp"
#include "corrmoe/errors.hpp"
#include "corrmoe/rng.hpp"
#include "doctest.h"
#include "fd_util.hpp"

using corrmoe::RngStream;
namespace nn = corrmoe::nn;
using nn::Shape;
using nn::Tensor;
using nn::Var;
using testutil::dot_const;
using testutil::param_gradcheck;
using testutil::rand_tensor;

namespace {

// empirical per-(b,c) moments over the item axis
void moments(const Tensor& x, int b, int c, double* mu, double* sd) {
  const Shape& s = x.shape();
  double m = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int k = 0; k < s.k; ++k) m += x.at(b, c, n, k);
  m /= static_cast<double>(s.n) * s.k;
  double v = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int k = 0; k < s.k; ++k) {
      const double d = x.at(b, c, n, k) - m;
      v += d * d;
    }
  v /= static_cast<double>(s.n) * s.k;
  *mu = m;
  *sd = std::sqrt(v);
}

}  // namespace

TEST_CASE("pmix probability follows the linear ramp") {
  nn::PMixParams p;
  p.total = 100;
  p.epoch = 0;
  CHECK(pmix_probability(p) == doctest::Approx(0.2));
  p.epoch = 100;
  CHECK(pmix_probability(p) == doctest::Approx(0.5));
  p.epoch = 50;
  CHECK(pmix_probability(p) == doctest::Approx(0.35));

  nn::PMixParams zero_total;
  zero_total.total = 0;
  CHECK_THROWS_AS(pmix_probability(zero_total), corrmoe::PreconditionError);

  nn::PMixParams bad;
  bad.p_start = 0.6;
  bad.p_end = 0.4;
  CHECK_THROWS_AS(bad.validate(), corrmoe::PreconditionError);
  nn::PMixParams bad_alpha;
  bad_alpha.alpha = 0.0;
  CHECK_THROWS_AS(bad_alpha.validate(), corrmoe::PreconditionError);
  nn::PMixParams bad_epoch;
  bad_epoch.total = 10;
  bad_epoch.epoch = 11;
  CHECK_THROWS_AS(bad_epoch.validate(), corrmoe::PreconditionError);
}

TEST_CASE("pmix is the identity at inference and for degenerate draws") {
  RngStream rng(500);
  const Tensor x = rand_tensor({2, 3, 16, 1}, rng, -2.0, 2.0);

  SUBCASE("inference mode: exact identity") {
    nn::PMixParams p;
    p.training = false;
    nn::Tape t;
    RngStream r = rng.fork("a");
    Var f = t.input(x);
    Var out = nn::pmix(t, f, p, r);
    CHECK(out.id == f.id);  // literally the same node
  }
  SUBCASE("inactive coin: exact identity") {
    nn::PMixParams p;
    p.training = true;
    nn::PMixDraw d;
    d.active = false;
    nn::Tape t;
    RngStream r = rng.fork("b");
    Var f = t.input(x);
    Var out = nn::pmix(t, f, p, r, &d);
    CHECK(out.id == f.id);
  }
  SUBCASE("batch of one: identity with a diagnostic") {
    const Tensor x1 = rand_tensor({1, 3, 16, 1}, rng, -2.0, 2.0);
    nn::PMixParams p;
    p.training = true;
    nn::Tape t;
    RngStream r = rng.fork("c");
    Var f = t.input(x1);
    Var out = nn::pmix(t, f, p, r);
    CHECK(out.id == f.id);
  }
  SUBCASE("lambda forced to one reconstructs the input") {
    nn::PMixParams p;
    p.training = true;
    nn::PMixDraw d;
    d.active = true;
    d.lambdas = {1.0, 1.0};
    d.perm = {1, 0};
    nn::Tape t;
    RngStream r = rng.fork("d");
    Var out = nn::pmix(t, t.input(x), p, r, &d);
    for (long i = 0; i < x.numel(); ++i)
      CHECK(t.val(out)[i] == doctest::Approx(x[i]).epsilon(1e-6));
  }
  SUBCASE("identity permutation reconstructs the input for any lambda") {
    nn::PMixParams p;
    p.training = true;
    nn::PMixDraw d;
    d.active = true;
    d.lambdas = {0.3, 0.85};
    d.perm = {0, 1};
    nn::Tape t;
    RngStream r = rng.fork("e");
    Var out = nn::pmix(t, t.input(x), p, r, &d);
    for (long i = 0; i < x.numel(); ++i)
      CHECK(t.val(out)[i] == doctest::Approx(x[i]).epsilon(1e-6));
  }
  SUBCASE("mis-sized forced draw throws") {
    nn::PMixParams p;
    p.training = true;
    nn::PMixDraw d;
    d.active = true;
    d.lambdas = {0.5};
    d.perm = {0};
    nn::Tape t;
    RngStream r = rng.fork("f");
    CHECK_THROWS_AS(nn::pmix(t, t.input(x), p, r, &d),
                    corrmoe::PreconditionError);
  }
}

TEST_CASE("active pmix mixes the target moments") {
  RngStream rng(501);
  const Tensor x = rand_tensor({2, 4, 256, 1}, rng, -2.0, 2.0);
  nn::PMixParams p;
  p.training = true;
  nn::PMixDraw d;
  d.active = true;
  d.lambdas = {0.25, 0.8};
  d.perm = {1, 0};

  nn::Tape t;
  RngStream r = rng.fork("run");
  Var out = nn::pmix(t, t.input(x), p, r, &d);
  CHECK(t.val(out).shape() == x.shape());

  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 4; ++c) {
      double mu_b, sd_b, mu_p, sd_p;
      moments(x, b, c, &mu_b, &sd_b);
      moments(x, d.perm[b], c, &mu_p, &sd_p);
      const double lam = d.lambdas[b];
      const double beta_mix = lam * mu_b + (1.0 - lam) * mu_p;
      const double gamma_mix = lam * sd_b + (1.0 - lam) * sd_p;
      double mu_o, sd_o;
      moments(t.val(out), b, c, &mu_o, &sd_o);
      CHECK(std::abs(mu_o - beta_mix) < 1e-5);
      CHECK(std::abs(sd_o - gamma_mix) < 1e-5);
    }
}

TEST_CASE("pmix activation frequency follows the schedule") {
  RngStream rng(502);
  const Tensor x = rand_tensor({2, 1, 4, 1}, rng, -1.0, 1.0);
  nn::PMixParams p;
  p.training = true;
  p.p_start = 0.5;
  p.p_end = 0.5;

  auto differs = [&](Var out, nn::Tape& t) {
    for (long i = 0; i < x.numel(); ++i)
      if (t.val(out)[i] != x[i]) return true;
    return false;
  };

  int active = 0;
  const int trials = 300;
  for (int i = 0; i < trials; ++i) {
    nn::Tape t;
    RngStream r = rng.fork(static_cast<std::uint64_t>(i));
    Var out = nn::pmix(t, t.input(x), p, r);
    if (differs(out, t)) ++active;
  }
  // Binomial(300, 0.5): +-5 sigma around 150 is about +-43
  CHECK(active > 107);
  CHECK(active < 193);

  p.p_start = 0.0;
  p.p_end = 0.0;
  for (int i = 0; i < 20; ++i) {
    nn::Tape t;
    RngStream r = rng.fork(static_cast<std::uint64_t>(1000 + i));
    Var out = nn::pmix(t, t.input(x), p, r);
    CHECK_FALSE(differs(out, t));
  }
}

TEST_CASE("pmix differentiates through both stat paths") {
  RngStream rng(503);
  const Tensor x = rand_tensor({2, 4, 8, 1}, rng, -1.5, 1.5);
  const Tensor coeff = rand_tensor({2, 4, 8, 1}, rng, -1.0, 1.0);
  nn::PMixParams p;
  p.training = true;
  nn::PMixDraw d;
  d.active = true;
  d.lambdas = {0.3, 0.7};
  d.perm = {1, 0};

  nn::ParamStore ps(77);
  ps.get_or_create("in", x.shape(), nn::Init::kZeros).value = x;
  RngStream unused(0);
  const double err = param_gradcheck(ps, [&](nn::Tape& t, nn::ParamStore& s) {
    Var f = t.param(s, "in", x.shape(), nn::Init::kZeros);
    Var out = nn::pmix(t, f, p, unused, &d);
    return dot_const(t, out, coeff);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("pointcn block preserves shape and the residual path") {
  RngStream rng(504);

  SUBCASE("shape for (2,32,100,1)") {
    const Tensor x = rand_tensor({2, 32, 100, 1}, rng, -1.0, 1.0);
    nn::ParamStore ps(1);
    nn::Tape t;
    Var out = nn::pointcn_block(t, ps, "blk", t.input(x));
    CHECK(t.val(out).shape() == Shape{2, 32, 100, 1});
    CHECK(t.val(out).all_finite());
  }

  SUBCASE("constant-over-items input passes through exactly at init") {
    // values chosen so the item mean is exact in floating point; the
    // context-normalized interior is then exactly zero and the residual
    // alone survives
    Tensor x({2, 6, 50, 1});
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 6; ++c)
        for (int n = 0; n < 50; ++n)
          x.at(b, c, n, 0) = 0.5 * (c + 1) * (b == 0 ? 1.0 : -1.0);
    nn::ParamStore ps(2);
    nn::Tape t;
    Var out = nn::pointcn_block(t, ps, "blk", t.input(x));
    for (long i = 0; i < x.numel(); ++i) CHECK(t.val(out)[i] == x[i]);
  }

  SUBCASE("permutation equivariance") {
    const Tensor x = rand_tensor({2, 8, 20, 1}, rng, -1.0, 1.0);
    RngStream prng = rng.fork("perm");
    const std::vector<int> perm = prng.permutation(20);
    const std::vector<std::vector<int>> idx{perm, perm};

    nn::ParamStore ps(3);
    nn::Tape t1;
    Var out_then_perm =
        t1.gather_items(nn::pointcn_block(t1, ps, "blk", t1.input(x)), idx);
    nn::Tape t2;
    Var perm_then_out =
        nn::pointcn_block(t2, ps, "blk", t2.gather_items(t2.input(x), idx));
    for (long i = 0; i < x.numel(); ++i)
      CHECK(t1.val(out_then_perm)[i] ==
            doctest::Approx(t2.val(perm_then_out)[i]).epsilon(1e-6));
  }

  SUBCASE("single item degenerates to the residual with a diagnostic") {
    const Tensor x = rand_tensor({2, 8, 1, 1}, rng, -1.0, 1.0);
    nn::ParamStore ps(4);
    nn::Tape t;
    Var out = nn::pointcn_block(t, ps, "blk", t.input(x));
    for (long i = 0; i < x.numel(); ++i) CHECK(t.val(out)[i] == x[i]);
  }

  SUBCASE("finite-difference gradient on (1,8,16,1)") {
    const Tensor x = rand_tensor({1, 8, 16, 1}, rng, -1.0, 1.0);
    const Tensor coeff = rand_tensor({1, 8, 16, 1}, rng, -1.0, 1.0);
    nn::ParamStore ps(5);
    ps.get_or_create("in", x.shape(), nn::Init::kZeros).value = x;
    const double err =
        param_gradcheck(ps, [&](nn::Tape& t, nn::ParamStore& s) {
          Var f = t.param(s, "in", x.shape(), nn::Init::kZeros);
          return dot_const(t, nn::pointcn_block(t, s, "blk", f), coeff);
        });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("instance norm block standardizes per instance-channel") {
  RngStream rng(505);
  const Tensor x = rand_tensor({2, 4, 64, 1}, rng, -3.0, 1.0);
  nn::Tape t;
  Var out = nn::instance_norm_block(t, t.input(x));
  CHECK(t.val(out).shape() == x.shape());
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 4; ++c) {
      double mu, sd;
      moments(t.val(out), b, c, &mu, &sd);
      CHECK(std::abs(mu) < 1e-12);
      CHECK(sd == doctest::Approx(1.0).epsilon(1e-3));
    }
}
