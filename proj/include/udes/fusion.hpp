#pragma once

#include <span>
#include <string>
#include <vector>

#include "udes/evidential.hpp"
#include "udes/numerics.hpp"
#include "udes/tensor.hpp"

namespace udes {

/// Belief masses over singletons plus an uncertainty mass; sum(belief) + u = 1.
struct SubjectiveOpinion {
  std::vector<double> belief;
  double uncertainty = 1.0;

  /// S = sum(alpha), belief = (alpha - 1) / S, u = N / S.
  static SubjectiveOpinion from_dirichlet(const DirichletOpinion& op);
  /// belief = 0, u = 1.
  static SubjectiveOpinion vacuous(std::size_t classes);
  std::size_t classes() const { return belief.size(); }
  /// belief_k + u / N
  std::vector<double> probabilities() const;
  DirichletOpinion to_dirichlet() const;
};

/// Reduced Dempster rule for two opinions over the same frame.
/// Throws FusionError when the conflict reaches 1 - 1e-12.
SubjectiveOpinion dsc_combine(const SubjectiveOpinion& a, const SubjectiveOpinion& b);
/// Left fold of dsc_combine in member order.
SubjectiveOpinion dsc_fuse_all(std::span<const SubjectiveOpinion> opinions);

/// Differentiable DSC fusion of M opinions per sample. alpha is (M*B, N) with
/// rows ordered (member, sample); returns fused class probabilities (B, N).
/// Uses the product form of the fold, which is symmetric in the members.
Tensor dsc_fused_probabilities(const Tensor& alpha, std::size_t batch);

enum class PolicyKind { uncertain, stochastic, average, dsc };
enum class SubsetFusion { mean, dsc };

struct PolicySpec {
  PolicyKind kind = PolicyKind::uncertain;
  std::size_t h = 1;
  SubsetFusion subset_fusion = SubsetFusion::mean;

  /// "uncertain-2", "stochastic-2", "average", "dsc"; a "+dsc" suffix on the
  /// -h kinds selects DSC fusion of the selected subset.
  static PolicySpec parse(const std::string& text);
  std::string name() const;
  bool operator==(const PolicySpec&) const = default;
};

struct PolicyOutcome {
  std::vector<double> uncertainties;
  std::vector<std::size_t> selected;
  std::vector<double> fused;
  int predicted = -1;
};

/// uncertain-h: the h smallest, ties to the lower index, in ascending order;
/// stochastic-h: h distinct uniform draws; average/dsc: every member.
std::vector<std::size_t> select_members(std::span<const double> uncertainties, const PolicySpec& spec,
                                        RngStream& rng);

PolicyOutcome policy_predict(std::span<const DirichletOpinion> members, const PolicySpec& spec, RngStream& rng);

int argmax(std::span<const double> v);

}  // namespace udes
