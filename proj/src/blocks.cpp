#include "corrmoe/blocks.hpp"

#include <cstdio>

#include "corrmoe/errors.hpp"

namespace corrmoe::nn {

namespace {
constexpr double kMomentEps = 1e-5;
}

void PMixParams::validate() const {
  if (!(p_start >= 0.0 && p_start <= p_end && p_end <= 1.0))
    throw PreconditionError("pmix: need 0 <= p_start <= p_end <= 1");
  if (!(alpha > 0.0)) throw PreconditionError("pmix: alpha must be positive");
  if (total < 0 || epoch < 0 || epoch > total)
    throw PreconditionError("pmix: need 0 <= epoch <= total");
}

double pmix_probability(const PMixParams& params) {
  params.validate();
  if (params.total == 0)
    throw PreconditionError("pmix: schedule total must be positive");
  const double frac = static_cast<double>(params.epoch) / params.total;
  return params.p_start + frac * (params.p_end - params.p_start);
}

Var pmix(Tape& t, Var f, const PMixParams& params, RngStream& rng,
         const PMixDraw* forced) {
  const double p = pmix_probability(params);
  if (!params.training) return f;
  const Shape s = t.val(f).shape();
  if (s.b < 2) {
    std::fprintf(stderr,
                 "corrmoe: pmix needs a batch of at least 2 to shuffle; "
                 "passing input through\n");
    return f;
  }

  bool active;
  std::vector<double> lambdas;
  std::vector<int> perm;
  if (forced != nullptr) {
    active = forced->active;
    if (active) {
      lambdas = forced->lambdas;
      perm = forced->perm;
      if (static_cast<int>(lambdas.size()) != s.b ||
          static_cast<int>(perm.size()) != s.b)
        throw PreconditionError("pmix: forced draw sized for a different batch");
    }
  } else {
    active = rng.uniform() < p;
    if (active) {
      lambdas.resize(s.b);
      for (int b = 0; b < s.b; ++b)
        lambdas[b] = rng.beta(params.alpha, params.alpha);
      perm = rng.permutation(s.b);
    }
  }
  if (!active) return f;

  Tensor lam({s.b, 1, 1, 1});
  Tensor lam_inv({s.b, 1, 1, 1});
  for (int b = 0; b < s.b; ++b) {
    lam[b] = lambdas[b];
    lam_inv[b] = 1.0 - lambdas[b];
  }
  Var vlam = t.input(lam);
  Var vlam_inv = t.input(lam_inv);

  Var mu = t.reduce_items(f, true, true, Reduce::kMean);
  Var centered = t.sub(f, mu);
  Var var = t.reduce_items(t.mul(centered, centered), true, true, Reduce::kMean);
  Var sigma = t.sqrt_op(t.add_const(var, kMomentEps));

  Var mu_sh = t.permute_batch(mu, perm);
  Var sigma_sh = t.permute_batch(sigma, perm);
  Var gamma_mix = t.add(t.mul(vlam, sigma), t.mul(vlam_inv, sigma_sh));
  Var beta_mix = t.add(t.mul(vlam, mu), t.mul(vlam_inv, mu_sh));

  Var normalized = t.div(centered, sigma);
  return t.add(t.mul(gamma_mix, normalized), beta_mix);
}

Var pointcn_block(Tape& t, ParamStore& ps, const std::string& prefix, Var f) {
  const Shape s = t.val(f).shape();
  const int c = s.c;
  auto stage = [&](Var x, const std::string& tag) {
    Var w = t.param(ps, prefix + "." + tag + ".conv.w", {1, c, c, 1},
                    Init::kHe);
    Var b = t.param(ps, prefix + "." + tag + ".conv.b", {1, c, 1, 1},
                    Init::kZeros);
    Var h = t.conv1x1(x, w, b);
    h = t.context_norm(h);
    Var gamma = t.param(ps, prefix + "." + tag + ".fn.gamma", {1, c, 1, 1},
                        Init::kOnes);
    Var beta = t.param(ps, prefix + "." + tag + ".fn.beta", {1, c, 1, 1},
                       Init::kZeros);
    h = t.add(t.mul(h, gamma), beta);
    return t.relu(h);
  };
  Var h = stage(f, "s1");
  h = stage(h, "s2");
  return t.add(f, h);
}

Var instance_norm_block(Tape& t, Var f) { return t.context_norm(f); }

}  // namespace corrmoe::nn
