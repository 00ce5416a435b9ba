#pragma once

#include <span>
#include <vector>

#include "udes/ensemble.hpp"

namespace udes {

enum class BandwidthMode { fixed, median };
enum class RepulsionNorm { svgd, plain };

struct DiversityConfig {
  double weight = 0.1;
  BandwidthMode bandwidth_mode = BandwidthMode::median;
  double bandwidth = 1.0;  ///< used when bandwidth_mode == fixed
  RepulsionNorm normalization = RepulsionNorm::svgd;

  void validate() const;
};

/// exp(-|a - b|^2 / h)
double rbf_kernel(std::span<const double> a, std::span<const double> b, double h);

/// Median of pairwise squared distances over ln(M + 1), floored at 1e-8.
double median_bandwidth(const std::vector<std::vector<double>>& vectors);

/// weight * sum_j grad_{v_i} k(v_i, v_j), divided by sum_j k(v_i, v_j) under
/// svgd normalisation. grad_{v_i} k = -(2/h)(v_i - v_j) k(v_i, v_j).
std::vector<double> repulsive_term(std::size_t i, const std::vector<std::vector<double>>& vectors, double h,
                                   RepulsionNorm norm, double weight);

struct RepulsiveTerms {
  std::vector<double> r;  ///< length p * in
  std::vector<double> s;  ///< length p * out
};

/// Flattened r (or s) factor vectors of every member for one layer.
std::vector<std::vector<double>> factor_vectors(const EnsembleNet& net, std::size_t layer, bool s_family);

/// Terms for member i in one layer; bandwidth resolved per family from cfg.
RepulsiveTerms repulsive_term(const EnsembleNet& net, std::size_t layer, std::size_t member,
                              const DiversityConfig& cfg);

/// Adds the repulsive term to the r and s gradients of every member and
/// layer, so that a subsequent descent step pushes members apart. Shared
/// weights and biases are untouched.
void apply_regularizer(EnsembleNet& net, const DiversityConfig& cfg);

/// Minimum and mean pairwise Euclidean distance between members' full
/// concatenated factor vectors (all layers, r and s).
struct FactorDistances {
  double min = 0.0;
  double mean = 0.0;
  bool operator==(const FactorDistances&) const = default;
};
FactorDistances pairwise_factor_distances(const EnsembleNet& net);

}  // namespace udes
