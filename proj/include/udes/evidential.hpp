#pragma once

#include <span>
#include <vector>

#include "udes/ensemble.hpp"
#include "udes/tensor.hpp"

namespace udes {

/// Dirichlet concentration over N classes.
struct DirichletOpinion {
  std::vector<double> alpha;

  /// Validates: N >= 2, every entry positive and finite.
  static DirichletOpinion from_alpha(std::vector<double> alpha);
  std::size_t classes() const { return alpha.size(); }
  double strength() const;
};

struct EvidentialLossParts {
  double nll = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

/// alpha_k = softplus(z_k) + 1
DirichletOpinion alpha_from_logits(std::span<const double> logits);
std::vector<double> predictive_mean(const DirichletOpinion& op);
/// psi(alpha_0) - psi(alpha_c), i.e. -E[ln mu_c].
double expected_nll(const DirichletOpinion& op, int label);
/// True-class entry forced to 1, the rest kept.
std::vector<double> label_adjusted_alpha(const DirichletOpinion& op, int label);
/// KL(Dir(alpha~) || Dir(1, ..., 1)) with alpha~ built from a one-hot label.
double kl_to_uniform(const DirichletOpinion& op, std::span<const double> one_hot);
double kl_to_uniform(const DirichletOpinion& op, int label);
/// Negated ELBO: total = nll + kl_weight * kl.
EvidentialLossParts elbo_loss(const DirichletOpinion& op, int label, double kl_weight = 1.0);
/// Mean of elbo_loss over a batch.
EvidentialLossParts elbo_loss(std::span<const DirichletOpinion> ops, std::span<const int> labels,
                              double kl_weight = 1.0);
/// Differential entropy of Dir(alpha); can be negative.
double dirichlet_entropy(const DirichletOpinion& op);

/// Row-wise readout of logits as probabilities under the given head.
std::vector<std::vector<double>> probabilities(const Tensor& logits, Head head);
/// Row-wise Dirichlet opinions from a (R, N) logit tensor.
std::vector<DirichletOpinion> opinions_from_logits(const Tensor& logits);

/// Batched, differentiable counterparts. Inputs are (R, N); outputs (R, 1)
/// unless stated.
namespace evidential_ad {
/// (R, N) -> (R, N)
Tensor alpha(const Tensor& logits);
Tensor expected_nll(const Tensor& alpha, std::span<const int> labels);
Tensor kl_to_uniform(const Tensor& alpha, std::span<const int> labels);
Tensor entropy(const Tensor& alpha);
/// (R, N) -> (R, N) class probabilities under the head.
Tensor probabilities(const Tensor& logits, Head head);
}  // namespace evidential_ad

}  // namespace udes
