// Test helpers that build library objects. Kept apart from oracles.hpp, which
// must not depend on the library.
#pragma once

#include <vector>

#include "udes/ensemble.hpp"
#include "udes/numerics.hpp"

namespace fixture {

/// Dense ensemble with random shared weights, factors and biases.
inline udes::EnsembleNet random_ensemble(udes::RngStream& rng, std::size_t in, std::vector<std::size_t> hidden,
                                         std::size_t classes, std::size_t members, std::size_t rank,
                                         double factor_scale = 0.5) {
  const auto arch = udes::Architecture::mlp(in, std::move(hidden), classes);
  auto base = udes::PlainNet::init(arch, rng);
  for (auto& b : base.biases)
    for (double& v : b.mutable_data()) v = rng.normal(0.0, 0.1);
  auto net = udes::init_from_pretrained(base, members, rank, rng, factor_scale);
  for (auto& L : net.layers())
    for (double& v : L.bias.mutable_data()) v += rng.normal(0.0, 0.1);
  return net;
}

inline udes::Tensor random_inputs(udes::RngStream& rng, udes::Shape shape, bool grad = false) {
  std::vector<double> v(udes::shape_numel(shape));
  for (double& x : v) x = rng.uniform();
  return udes::Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace fixture
