#pragma once

#include <string>
#include <vector>

#include "corrmoe/rng.hpp"
#include "corrmoe/tape.hpp"

namespace corrmoe::nn {

/// Progressive Mixstyle schedule and mode. epoch/total are the t/T of the
/// linear ramp p = p_start + (t/T)(p_end - p_start).
struct PMixParams {
  double p_start = 0.2;
  double p_end = 0.5;
  double alpha = 0.1;  // Beta concentration for the mixing weight
  int epoch = 0;
  int total = 1;
  bool training = false;

  void validate() const;  // throws PreconditionError
};

/// Current activation probability of the ramp. Throws when total == 0.
double pmix_probability(const PMixParams& params);

/// Forced stochastic decisions for deterministic tests.
struct PMixDraw {
  bool active = false;
  std::vector<double> lambdas;  // one per batch instance
  std::vector<int> perm;        // batch shuffle
};

/// Progressive Mixstyle: with the scheduled probability, renormalizes each
/// instance-channel with statistics mixed between the instance and a
/// batch-shuffled partner. Identity at inference, when inactive, or when
/// the batch cannot be shuffled (B = 1). Gradients flow through both the
/// original and the partner statistics.
Var pmix(Tape& t, Var f, const PMixParams& params, RngStream& rng,
         const PMixDraw* forced = nullptr);

/// Two [pointwise conv -> context norm -> per-channel affine -> relu]
/// stages with a residual connection; channel count preserved.
Var pointcn_block(Tape& t, ParamStore& ps, const std::string& prefix, Var f);

/// Plain instance normalization over the item axis; stands in for PMix in
/// the normalization ablation.
Var instance_norm_block(Tape& t, Var f);

}  // namespace corrmoe::nn
