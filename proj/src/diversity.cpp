#include "udes/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "udes/errors.hpp"

namespace udes {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("squared_distance: length mismatch");
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
  return d;
}

double resolve_bandwidth(const std::vector<std::vector<double>>& vectors, const DiversityConfig& cfg) {
  return cfg.bandwidth_mode == BandwidthMode::fixed ? cfg.bandwidth : median_bandwidth(vectors);
}

}  // namespace

void DiversityConfig::validate() const {
  if (!std::isfinite(weight) || weight < 0.0) throw DomainError("diversity: weight must be finite and non-negative");
  if (bandwidth_mode == BandwidthMode::fixed && !(bandwidth > 0.0)) {
    throw DomainError("diversity: fixed bandwidth must be positive");
  }
}

double rbf_kernel(std::span<const double> a, std::span<const double> b, double h) {
  if (!(h > 0.0)) throw DomainError("rbf_kernel: bandwidth must be positive");
  return std::exp(-squared_distance(a, b) / h);
}

double median_bandwidth(const std::vector<std::vector<double>>& vectors) {
  const std::size_t m = vectors.size();
  if (m < 2) throw ContractError("median_bandwidth: need at least two vectors");
  std::vector<double> d;
  d.reserve(m * (m - 1) / 2);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) d.push_back(squared_distance(vectors[i], vectors[j]));
  std::sort(d.begin(), d.end());
  const std::size_t mid = d.size() / 2;
  const double median = d.size() % 2 ? d[mid] : 0.5 * (d[mid - 1] + d[mid]);
  return std::max(median / std::log(static_cast<double>(m) + 1.0), 1e-8);
}

std::vector<double> repulsive_term(std::size_t i, const std::vector<std::vector<double>>& vectors, double h,
                                   RepulsionNorm norm, double weight) {
  if (i >= vectors.size()) throw ContractError("repulsive_term: member index out of range");
  if (!(h > 0.0)) throw DomainError("repulsive_term: bandwidth must be positive");
  const auto& vi = vectors[i];
  std::vector<double> term(vi.size(), 0.0);
  double ksum = 0.0;
  for (std::size_t j = 0; j < vectors.size(); ++j) {
    if (vectors[j].size() != vi.size()) throw ShapeError("repulsive_term: factor vectors differ in length");
    const double k = rbf_kernel(vi, vectors[j], h);
    ksum += k;
    if (j == i) continue;
    const double c = -(2.0 / h) * k;
    for (std::size_t d = 0; d < vi.size(); ++d) term[d] += c * (vi[d] - vectors[j][d]);
  }
  const double f = norm == RepulsionNorm::svgd ? weight / ksum : weight;
  for (double& v : term) v *= f;
  return term;
}

std::vector<std::vector<double>> factor_vectors(const EnsembleNet& net, std::size_t layer, bool s_family) {
  const auto& L = net.layers().at(layer);
  const Tensor& t = s_family ? L.s : L.r;
  const std::size_t width = net.rank() * t.shape()[1];
  std::vector<std::vector<double>> out(net.members());
  for (std::size_t m = 0; m < net.members(); ++m) {
    out[m].assign(t.data().begin() + m * width, t.data().begin() + (m + 1) * width);
  }
  return out;
}

RepulsiveTerms repulsive_term(const EnsembleNet& net, std::size_t layer, std::size_t member,
                              const DiversityConfig& cfg) {
  cfg.validate();
  if (member >= net.members()) throw ContractError("repulsive_term: member index out of range");
  RepulsiveTerms out;
  if (net.members() < 2) {
    out.r.assign(net.rank() * net.layers().at(layer).spec.in, 0.0);
    out.s.assign(net.rank() * net.layers().at(layer).spec.out, 0.0);
    return out;
  }
  const auto rv = factor_vectors(net, layer, false);
  const auto sv = factor_vectors(net, layer, true);
  out.r = repulsive_term(member, rv, resolve_bandwidth(rv, cfg), cfg.normalization, cfg.weight);
  out.s = repulsive_term(member, sv, resolve_bandwidth(sv, cfg), cfg.normalization, cfg.weight);
  return out;
}

void apply_regularizer(EnsembleNet& net, const DiversityConfig& cfg) {
  cfg.validate();
  if (cfg.weight == 0.0 || net.members() < 2) return;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& L = net.layers()[l];
    if (!L.r.requires_grad() || !L.s.requires_grad()) {
      throw ContractError("apply_regularizer: factor tensors of layer " + std::to_string(l) + " carry no gradients");
    }
    const auto rv = factor_vectors(net, l, false);
    const auto sv = factor_vectors(net, l, true);
    const double hr = resolve_bandwidth(rv, cfg);
    const double hs = resolve_bandwidth(sv, cfg);
    std::vector<std::vector<double>> tr, ts;
    for (std::size_t m = 0; m < net.members(); ++m) {
      tr.push_back(repulsive_term(m, rv, hr, cfg.normalization, cfg.weight));
      ts.push_back(repulsive_term(m, sv, hs, cfg.normalization, cfg.weight));
    }
    auto gr = L.r.mutable_grad();
    auto gs = L.s.mutable_grad();
    for (std::size_t m = 0; m < net.members(); ++m) {
      for (std::size_t d = 0; d < tr[m].size(); ++d) gr[m * tr[m].size() + d] += tr[m][d];
      for (std::size_t d = 0; d < ts[m].size(); ++d) gs[m * ts[m].size() + d] += ts[m][d];
    }
  }
}

FactorDistances pairwise_factor_distances(const EnsembleNet& net) {
  const std::size_t m = net.members();
  std::vector<std::vector<double>> full(m);
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    for (bool s_family : {false, true}) {
      const auto v = factor_vectors(net, l, s_family);
      for (std::size_t i = 0; i < m; ++i) full[i].insert(full[i].end(), v[i].begin(), v[i].end());
    }
  }
  FactorDistances out;
  if (m < 2) return out;
  out.min = std::numeric_limits<double>::infinity();
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double d = std::sqrt(squared_distance(full[i], full[j]));
      out.min = std::min(out.min, d);
      out.mean += d;
      ++pairs;
    }
  out.mean /= static_cast<double>(pairs);
  return out;
}

}  // namespace udes
