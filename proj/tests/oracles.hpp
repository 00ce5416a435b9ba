// Independent reference implementations used only by the tests. Nothing here
// calls into the library's special functions or samplers.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

/// ln Gamma(x) by Stirling's series in long double after lifting x above 20
/// with the recurrence Gamma(x + 1) = x Gamma(x).
inline long double lgamma(long double x) {
  long double shift = 0.0L;
  while (x < 20.0L) {
    shift += std::log(x);
    x += 1.0L;
  }
  const long double z2 = 1.0L / (x * x);
  long double series = 1.0L / 156.0L;
  series = series * z2 - 691.0L / 360360.0L;
  series = series * z2 + 1.0L / 1188.0L;
  series = series * z2 - 1.0L / 1680.0L;
  series = series * z2 + 1.0L / 1260.0L;
  series = series * z2 - 1.0L / 360.0L;
  series = series * z2 + 1.0L / 12.0L;
  const long double half_log_2pi = 0.918938533204672741780329736405617639861L;
  return (x - 0.5L) * std::log(x) - x + half_log_2pi + series / x - shift;
}

/// psi(x) from the series -gamma + sum_k (x - 1) / ((k + 1)(k + x)), summed
/// directly for K terms and closed with an Euler-Maclaurin tail.
inline long double digamma(long double x) {
  const long double euler_gamma = 0.577215664901532860606512090082402431L;
  const long double a = x - 1.0L;
  const int terms = 4000;
  long double sum = 0.0L;
  for (int k = terms - 1; k >= 0; --k) sum += a / ((k + 1.0L) * (k + x));
  // Tail sum_{k >= K} f(k), f(k) = 1/(k+1) - 1/(k+x).
  const long double kk = terms;
  auto f = [&](long double k) { return 1.0L / (k + 1.0L) - 1.0L / (k + x); };
  auto f1 = [&](long double k) { return -1.0L / ((k + 1.0L) * (k + 1.0L)) + 1.0L / ((k + x) * (k + x)); };
  auto f3 = [&](long double k) {
    return -6.0L / std::pow(k + 1.0L, 4.0L) + 6.0L / std::pow(k + x, 4.0L);
  };
  const long double integral = std::log((kk + x) / (kk + 1.0L));
  const long double tail = integral + f(kk) / 2.0L - f1(kk) / 12.0L + f3(kk) / 720.0L;
  return -euler_gamma + sum + tail;
}

/// Dirichlet draws through std::gamma_distribution.
class DirichletSampler {
 public:
  explicit DirichletSampler(std::uint64_t seed) : gen_(seed) {}
  std::vector<double> draw(const std::vector<double>& alpha) {
    std::vector<double> g(alpha.size());
    double s = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      std::gamma_distribution<double> d(alpha[k], 1.0);
      g[k] = d(gen_);
      s += g[k];
    }
    for (double& v : g) v /= s;
    return g;
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

inline double log_density(const std::vector<double>& alpha, const std::vector<double>& mu) {
  double a0 = 0.0, out = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    a0 += alpha[k];
    out -= std::lgamma(alpha[k]);
    out += (alpha[k] - 1.0) * std::log(mu[k]);
  }
  return out + std::lgamma(a0);
}

struct Estimate {
  double mean = 0.0;
  double std_err = 0.0;
};

inline Estimate summarize(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size() - 1);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

/// Mass function over singletons {k} and the whole frame, combined with
/// Dempster's rule by explicit set intersection over bitmasks.
struct MassFunction {
  std::size_t classes = 0;
  std::vector<std::pair<std::uint32_t, double>> focal;  // (subset bitmask, mass)

  static MassFunction from_opinion(const std::vector<double>& belief, double uncertainty) {
    MassFunction m;
    m.classes = belief.size();
    for (std::size_t k = 0; k < belief.size(); ++k) m.focal.push_back({1u << k, belief[k]});
    m.focal.push_back({(1u << belief.size()) - 1u, uncertainty});
    return m;
  }

  double mass(std::uint32_t set) const {
    double s = 0.0;
    for (const auto& [b, v] : focal)
      if (b == set) s += v;
    return s;
  }

  static MassFunction combine(const MassFunction& a, const MassFunction& b) {
    MassFunction out;
    out.classes = a.classes;
    double conflict = 0.0;
    std::vector<std::pair<std::uint32_t, double>> acc;
    for (const auto& [sa, va] : a.focal)
      for (const auto& [sb, vb] : b.focal) {
        const std::uint32_t inter = sa & sb;
        if (inter == 0) {
          conflict += va * vb;
          continue;
        }
        bool found = false;
        for (auto& [s, v] : acc)
          if (s == inter) {
            v += va * vb;
            found = true;
          }
        if (!found) acc.push_back({inter, va * vb});
      }
    for (auto& [s, v] : acc) out.focal.push_back({s, v / (1.0 - conflict)});
    return out;
  }
};

/// Member m of a dense rank-p ensemble evaluated with explicitly formed
/// weights W * sum_t r_t s_t^T. Inputs are row-major (batch, in); returns
/// row-major (batch, classes) logits. Reads raw parameter buffers only.
template <typename Net>
std::vector<double> dense_member_forward(const Net& net, std::size_t m, const std::vector<double>& x, std::size_t batch) {
  std::vector<double> h = x;
  const auto& layers = net.layers();
  const std::size_t p = net.rank();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::size_t in = L.spec.in, out = L.spec.out;
    std::vector<long double> w(in * out);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < out; ++j) {
        long double f = 0.0L;
        for (std::size_t t = 0; t < p; ++t)
          f += static_cast<long double>(L.r.at((m * p + t) * in + i)) * L.s.at((m * p + t) * out + j);
        w[i * out + j] = f * L.weight.at(i * out + j);
      }
    std::vector<double> y(batch * out);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < out; ++j) {
        long double acc = L.bias.at(m * out + j);
        for (std::size_t i = 0; i < in; ++i) acc += h[b * in + i] * w[i * out + j];
        const double v = static_cast<double>(acc);
        y[b * out + j] = (l + 1 < layers.size() && v < 0.0) ? 0.0 : v;
      }
    h = std::move(y);
  }
  return h;
}

}  // namespace oracle
