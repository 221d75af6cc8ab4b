#include "corrmoe/rng.hpp"

#include <cmath>
#include <numbers>

#include "corrmoe/errors.hpp"

namespace corrmoe {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed)
    : base_seed_(seed), engine_(splitmix64(seed)) {}

RngStream RngStream::fork(std::string_view tag) const {
  return RngStream(mix_seed(base_seed_, hash_tag(tag)));
}

RngStream RngStream::fork(std::uint64_t tag) const {
  return RngStream(mix_seed(base_seed_, tag));
}

std::uint64_t RngStream::next_u64() { return engine_(); }

double RngStream::uniform() {
  // 53-bit mantissa, value in [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw PreconditionError("RngStream::below: n must be positive");
  // rejection sampling to avoid modulo bias
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  // Box-Muller; the sine branch is discarded to keep call counts simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::normal(double mu, double sigma) {
  return mu + sigma * normal();
}

double RngStream::laplace_std(double sigma) {
  // Laplace(b) has std b*sqrt(2)
  const double b = sigma / std::numbers::sqrt2;
  const double u = uniform() - 0.5;
  return -b * std::copysign(std::log(1.0 - 2.0 * std::abs(u)), -u);
}

double RngStream::uniform_std(double sigma) {
  // U(-h, h) has std h/sqrt(3)
  const double h = sigma * std::sqrt(3.0);
  return uniform(-h, h);
}

double RngStream::gamma(double alpha) {
  if (alpha <= 0.0) throw PreconditionError("gamma: alpha must be positive");
  if (alpha < 1.0) {
    // boost: G(a) = G(a+1) * U^(1/a)
    const double g = gamma(alpha + 1.0);
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return g * std::pow(u, 1.0 / alpha);
  }
  // Marsaglia-Tsang squeeze
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
      return d * v;
  }
}

double RngStream::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

std::vector<int> RngStream::permutation(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(below(static_cast<std::uint64_t>(i) + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

}  // namespace corrmoe
