#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udes/ensemble.hpp"
#include "udes/numerics.hpp"
#include "udes/tensor.hpp"

namespace udes {

enum class AttackFamily { fgsm, pgd, mim, cw, dim, tim };

/// Which readout of the model defines the attacked loss.
enum class LossTarget {
  member,   ///< one member's output (AttackSpec::member)
  average,  ///< mean of all members' probabilities (CE) or logits (CW)
  dsc,      ///< Dempster-Shafer fused prediction of all members (CE only)
};

struct AttackSpec {
  AttackFamily family = AttackFamily::pgd;
  double eps = 8.0 / 255.0;
  std::size_t steps = 20;
  double step_size = 1.0 / 255.0;
  double momentum_decay = 1.0;
  /// Unset: on for pgd and cw, off otherwise.
  std::optional<bool> random_init;
  double transform_prob = 0.5;
  std::size_t kernel_size = 7;
  double cw_kappa = 0.0;
  LossTarget loss_target = LossTarget::average;
  std::size_t member = 0;

  bool uses_random_init() const;
  bool uses_cw_loss() const { return family == AttackFamily::cw; }
  void validate() const;
  /// Stable identifier, e.g. "pgd".
  std::string family_name() const;
};

AttackFamily parse_attack_family(const std::string& s);
std::string attack_family_name(AttackFamily f);
LossTarget parse_loss_target(const std::string& s);
std::string loss_target_name(LossTarget t);

/// Scalar attack objective summed over the batch (to be ascended).
/// CE: -ln p_y with p the targeted readout's class probabilities.
/// CW: min(max_{k != y} z_k - z_y, kappa) on the targeted (averaged) logits, so the
/// ascent stops once a sample is misclassified by margin kappa.
Tensor attack_loss(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec);

/// Gradient of attack_loss with respect to the input values, never touching
/// model parameters. `transform`, when given, is applied to the input first
/// and differentiated through.
std::vector<double> input_gradient(const EnsembleNet& frozen_net, const Tensor& x, std::span<const int> labels,
                                   const AttackSpec& spec,
                                   const std::function<Tensor(const Tensor&)>& transform = {});

Tensor fgsm(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec);
Tensor pgd(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng);
Tensor mim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng);
/// Momentum iteration with the gradient taken through dim_transform.
Tensor dim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng);
/// Momentum iteration with the gradient smoothed by tim_gradient.
Tensor tim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng);
/// Dispatch on spec.family. cw runs the pgd iteration on the CW margin loss.
Tensor run_attack(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  RngStream& rng);

/// With probability transform_prob: nearest-neighbour downscale to a random
/// smaller size, then zero-pad at a random offset back to the input size.
/// Differentiable. x: (N, C, H, W).
Tensor dim_transform(const Tensor& x, double transform_prob, RngStream& rng);

/// Per-channel convolution with a normalised Gaussian (sigma = kernel_size / 3),
/// zero padding. grad has shape (N, C, H, W).
std::vector<double> tim_gradient(std::span<const double> grad, const Shape& shape, std::size_t kernel_size);

/// Normalised Gaussian stencil used by tim_gradient, row-major k x k.
std::vector<double> gaussian_kernel(std::size_t kernel_size);

}  // namespace udes
