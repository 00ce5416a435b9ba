#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace udes {

struct SpecialFnTolerance {
  double abs_tol = 1e-10;
  double rel_tol = 1e-8;
};

/// Seeded random stream. Distribution transforms are implemented here rather
/// than taken from <random> so draw sequences do not depend on the standard
/// library vendor.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1); never returns 0.
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  double gamma(double shape);

  /// Independent child stream; derived deterministically from this stream's
  /// seed and `stream_id` without advancing this stream.
  RngStream split(std::uint64_t stream_id) const;

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

double lgamma(double x);
double digamma(double x);
double trigamma(double x);

std::vector<double> sample_dirichlet(std::span<const double> alpha, RngStream& rng);

/// log Dir(mu | alpha); terms with alpha_k == 1 contribute exactly zero.
double dirichlet_log_density(std::span<const double> alpha, std::span<const double> mu);

struct McEstimate {
  double estimate = 0.0;
  double std_err = 0.0;
};

/// Monte-Carlo estimate of -E[ln Dir(mu | alpha)] under mu ~ Dir(alpha).
McEstimate mc_dirichlet_entropy(std::span<const double> alpha, std::size_t n_samples,
                                RngStream& rng);

/// Mean and standard error of an arbitrary sample.
McEstimate mean_and_stderr(std::span<const double> xs);

}  // namespace udes
