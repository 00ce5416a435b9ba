#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "udes/attacks.hpp"
#include "udes/data.hpp"
#include "udes/diversity.hpp"
#include "udes/ensemble.hpp"
#include "udes/evidential.hpp"
#include "udes/fusion.hpp"

namespace udes {

struct TrainConfig {
  std::size_t members = 4;
  std::size_t rank = 2;
  double lr_shared = 0.001;
  double lr_factors = 0.01;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double gamma = 8.0;
  AttackSpec adv = default_adv();
  DiversityConfig diversity;
  double kl_weight = 1.0;
  /// Ramp the KL weight linearly over the first quarter of the epochs.
  bool kl_warmup = false;
  double momentum = 0.0;
  double init_scale = 0.1;
  /// Samples used for the per-epoch history (taken from the head of the set).
  std::size_t monitor_samples = 256;
  std::uint64_t seed = 0;

  static AttackSpec default_adv();
  void validate() const;
};

/// Plain SGD over the parameters of one ownership group. Parameters of the
/// other group are never touched.
class SgdOptimizer {
 public:
  SgdOptimizer(ParamGroup owned, double lr, double momentum = 0.0);
  /// Returns the number of scalars updated.
  std::size_t step(const std::vector<Param>& params);
  ParamGroup owned() const { return owned_; }
  double lr() const { return lr_; }

 private:
  ParamGroup owned_;
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

/// Per-member entropy margin plus DSC log-likelihood, the quantity to ascend.
/// benign and adv are indexed [member][sample].
struct CorrectionTerms {
  double margin = 0.0;
  double dsc_loglik = 0.0;
  double total = 0.0;
};
CorrectionTerms uncertainty_correction_loss(const std::vector<std::vector<DirichletOpinion>>& benign,
                                            const std::vector<std::vector<DirichletOpinion>>& adv,
                                            std::span<const int> adv_labels, double gamma);

/// Differentiable objective on a concatenated forward pass.
/// alpha: (M * 2B, N), rows (member, sample) with the B benign samples first.
struct ObjectiveParts {
  Tensor loss;  ///< descent objective: -ELBO - R
  double nll = 0.0;
  double kl = 0.0;
  double margin = 0.0;
  double dsc_loglik = 0.0;
  double entropy_gap = 0.0;  ///< unclamped mean |dH| over members and samples
};
ObjectiveParts training_objective(const Tensor& alpha, std::size_t members, std::span<const int> labels,
                                  double gamma, double kl_weight);

struct StepMetrics {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double margin = 0.0;
  double dsc_loglik = 0.0;
  double entropy_gap = 0.0;
};

struct Trainer {
  EnsembleNet& net;
  TrainConfig cfg;
  SgdOptimizer shared_opt;
  SgdOptimizer factor_opt;

  Trainer(EnsembleNet& net, const TrainConfig& cfg);
  /// One step of adversarial generation, objective, backward, repulsion and
  /// dual-rate update. `epoch` only labels errors and drives the KL warm-up.
  StepMetrics step(const Tensor& x, std::span<const int> labels, RngStream& rng, std::size_t epoch = 0);
};

StepMetrics train_step(EnsembleNet& net, const Tensor& x, std::span<const int> labels, const TrainConfig& cfg,
                       RngStream& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::map<std::string, double> policy_accuracy;
  double benign_entropy = 0.0;
  double adv_entropy = 0.0;
  double entropy_gap = 0.0;
  FactorDistances factor_distance;
  bool operator==(const EpochRecord&) const = default;
};

struct FitResult {
  EpochRecord initial;
  std::vector<EpochRecord> history;
};

/// Policies reported in the training history.
std::vector<PolicySpec> monitor_policies();

FitResult fit(EnsembleNet& net, const Dataset& data, const TrainConfig& cfg);

/// Evaluate the current net on the monitor set: accuracies and entropy stats
/// under the fixed-seed adversarial condition.
EpochRecord measure(const EnsembleNet& net, const Dataset& monitor, const TrainConfig& cfg);

struct PretrainResult {
  PlainNet net;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

/// Softmax cross-entropy training of a plain network with SGD.
PretrainResult pretrain_baseline(const Architecture& arch, const Dataset& data, std::size_t epochs, double lr,
                                 RngStream& rng, double momentum = 0.9, std::size_t batch_size = 32);

/// Per-sample member opinions, indexed [sample][member].
std::vector<std::vector<DirichletOpinion>> sample_opinions(const EnsembleNet& net, const Tensor& x);
/// Accuracy of argmax over a single member's logits.
double member_accuracy(const EnsembleNet& net, std::size_t member, const Tensor& x, std::span<const int> labels);
double plain_accuracy(const PlainNet& net, const Tensor& x, std::span<const int> labels);

}  // namespace udes
