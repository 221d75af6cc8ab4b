#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace corrmoe {

/// Deterministic, forkable random stream.
///
/// Child streams derived with fork(tag) depend only on the parent's base
/// seed and the tag, never on how much the parent has already drawn, so
/// adding a consumer somewhere does not shift every other stream.
/// Distribution transforms are implemented locally (Box-Muller etc.) so a
/// given (seed, call sequence) yields the same bytes on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  RngStream fork(std::string_view tag) const;
  RngStream fork(std::uint64_t tag) const;

  std::uint64_t base_seed() const { return base_seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mu, double sigma);
  /// Zero-mean Laplace with standard deviation sigma.
  double laplace_std(double sigma);
  /// Zero-mean uniform with standard deviation sigma.
  double uniform_std(double sigma);
  double gamma(double alpha);
  double beta(double a, double b);
  /// Fisher-Yates permutation of [0, n).
  std::vector<int> permutation(int n);

 private:
  std::uint64_t base_seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; also used to combine seeds with tags.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_tag(std::string_view tag);

}  // namespace corrmoe
