#include "udes/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udes/errors.hpp"

namespace udes {

SubjectiveOpinion SubjectiveOpinion::from_dirichlet(const DirichletOpinion& op) {
  const double s = op.strength();
  SubjectiveOpinion o;
  o.belief.resize(op.classes());
  for (std::size_t k = 0; k < op.classes(); ++k) o.belief[k] = (op.alpha[k] - 1.0) / s;
  o.uncertainty = static_cast<double>(op.classes()) / s;
  return o;
}

SubjectiveOpinion SubjectiveOpinion::vacuous(std::size_t classes) {
  return SubjectiveOpinion{std::vector<double>(classes, 0.0), 1.0};
}

std::vector<double> SubjectiveOpinion::probabilities() const {
  std::vector<double> p(belief);
  const double share = uncertainty / static_cast<double>(belief.size());
  for (double& v : p) v += share;
  return p;
}

DirichletOpinion SubjectiveOpinion::to_dirichlet() const {
  if (!(uncertainty > 0.0)) throw DomainError("to_dirichlet: zero uncertainty has no finite Dirichlet");
  const double s = static_cast<double>(belief.size()) / uncertainty;
  std::vector<double> a(belief.size());
  for (std::size_t k = 0; k < a.size(); ++k) a[k] = belief[k] * s + 1.0;
  return DirichletOpinion::from_alpha(std::move(a));
}

SubjectiveOpinion dsc_combine(const SubjectiveOpinion& a, const SubjectiveOpinion& b) {
  const std::size_t n = a.classes();
  if (b.classes() != n) throw ShapeError("dsc_combine: opinions over different frames");
  double conflict = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) conflict += a.belief[i] * b.belief[j];
  if (conflict >= 1.0 - 1e-12) throw FusionError("dsc_combine: total conflict between opinions");
  const double norm = 1.0 - conflict;
  SubjectiveOpinion out;
  out.belief.resize(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    out.belief[k] = (a.belief[k] * b.belief[k] + a.belief[k] * b.uncertainty + b.belief[k] * a.uncertainty) / norm;
    total += out.belief[k];
  }
  out.uncertainty = a.uncertainty * b.uncertainty / norm;
  total += out.uncertainty;
  for (double& v : out.belief) v /= total;
  out.uncertainty /= total;
  return out;
}

SubjectiveOpinion dsc_fuse_all(std::span<const SubjectiveOpinion> opinions) {
  if (opinions.empty()) throw ContractError("dsc_fuse_all: no opinions");
  SubjectiveOpinion acc = opinions[0];
  for (std::size_t m = 1; m < opinions.size(); ++m) acc = dsc_combine(acc, opinions[m]);
  return acc;
}

Tensor dsc_fused_probabilities(const Tensor& alpha, std::size_t batch) {
  if (alpha.ndim() != 2 || batch == 0 || alpha.shape()[0] % batch != 0) {
    throw ShapeError("dsc_fused_probabilities: expected (M*B, N) with B = " + std::to_string(batch) + ", got " +
                     shape_str(alpha.shape()));
  }
  const std::size_t n = alpha.shape()[1];
  const Tensor s = ad::sum_cols(alpha);
  const Tensor u = ad::div(Tensor::scalar(static_cast<double>(n)), s);
  const Tensor belief = ad::div(ad::add_scalar(alpha, -1.0), ad::expand_cols(s, n));
  // mass_k = prod_m (b_mk + u_m) - prod_m u_m, uncertainty = prod_m u_m.
  const Tensor prod_bu = ad::prod_row_blocks(ad::add(belief, ad::expand_cols(u, n)), batch);
  const Tensor prod_u = ad::prod_row_blocks(u, batch);
  const Tensor mass = ad::sub(prod_bu, ad::expand_cols(prod_u, n));
  const Tensor total = ad::add(ad::sum_cols(mass), prod_u);
  const Tensor unnorm = ad::add(mass, ad::expand_cols(ad::scale(prod_u, 1.0 / static_cast<double>(n)), n));
  return ad::div(unnorm, ad::expand_cols(total, n));
}

// ---------------------------------------------------------------------------
// policies

PolicySpec PolicySpec::parse(const std::string& text) {
  PolicySpec p;
  std::string t = text;
  const auto plus = t.find('+');
  if (plus != std::string::npos) {
    const auto suffix = t.substr(plus + 1);
    if (suffix != "dsc" && suffix != "mean") throw ContractError("policy: unknown subset fusion '" + suffix + "'");
    p.subset_fusion = suffix == "dsc" ? SubsetFusion::dsc : SubsetFusion::mean;
    t = t.substr(0, plus);
  }
  if (t == "average") {
    p.kind = PolicyKind::average;
    p.h = 0;
    return p;
  }
  if (t == "dsc") {
    p.kind = PolicyKind::dsc;
    p.h = 0;
    return p;
  }
  const auto dash = t.rfind('-');
  if (dash == std::string::npos) throw ContractError("policy: cannot parse '" + text + "'");
  const auto kind = t.substr(0, dash);
  if (kind == "uncertain") {
    p.kind = PolicyKind::uncertain;
  } else if (kind == "stochastic") {
    p.kind = PolicyKind::stochastic;
  } else {
    throw ContractError("policy: unknown kind '" + kind + "'");
  }
  try {
    std::size_t used = 0;
    const auto h = std::stoul(t.substr(dash + 1), &used);
    if (used != t.size() - dash - 1 || h == 0) throw ContractError("");
    p.h = h;
  } catch (const std::exception&) {
    throw ContractError("policy: invalid member count in '" + text + "'");
  }
  return p;
}

std::string PolicySpec::name() const {
  switch (kind) {
    case PolicyKind::average:
      return "average";
    case PolicyKind::dsc:
      return "dsc";
    case PolicyKind::uncertain:
    case PolicyKind::stochastic: {
      std::string s = (kind == PolicyKind::uncertain ? "uncertain-" : "stochastic-") + std::to_string(h);
      if (subset_fusion == SubsetFusion::dsc) s += "+dsc";
      return s;
    }
  }
  return "?";
}

std::vector<std::size_t> select_members(std::span<const double> uncertainties, const PolicySpec& spec,
                                        RngStream& rng) {
  const std::size_t m = uncertainties.size();
  if (m == 0) throw ContractError("select_members: no members");
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  if (spec.kind == PolicyKind::average || spec.kind == PolicyKind::dsc) return idx;
  if (spec.h < 1 || spec.h > m) {
    throw ContractError("select_members: h = " + std::to_string(spec.h) + " outside [1, " + std::to_string(m) + "]");
  }
  if (spec.kind == PolicyKind::uncertain) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return uncertainties[a] < uncertainties[b]; });
    idx.resize(spec.h);
    return idx;
  }
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < spec.h; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(m - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(spec.h);
  return idx;
}

int argmax(std::span<const double> v) {
  if (v.empty()) return -1;
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

PolicyOutcome policy_predict(std::span<const DirichletOpinion> members, const PolicySpec& spec, RngStream& rng) {
  if (members.empty()) throw ContractError("policy_predict: no member opinions");
  const std::size_t n = members[0].classes();
  PolicyOutcome out;
  out.uncertainties.reserve(members.size());
  for (const auto& op : members) {
    if (op.classes() != n) throw ShapeError("policy_predict: members disagree on class count");
    out.uncertainties.push_back(dirichlet_entropy(op));
  }
  out.selected = select_members(out.uncertainties, spec, rng);
  const bool fuse_dsc = spec.kind == PolicyKind::dsc ||
                        (spec.kind != PolicyKind::average && spec.subset_fusion == SubsetFusion::dsc);
  if (fuse_dsc) {
    std::vector<SubjectiveOpinion> ops;
    for (auto i : out.selected) ops.push_back(SubjectiveOpinion::from_dirichlet(members[i]));
    out.fused = dsc_fuse_all(ops).probabilities();
  } else {
    out.fused.assign(n, 0.0);
    for (auto i : out.selected) {
      const auto p = predictive_mean(members[i]);
      for (std::size_t k = 0; k < n; ++k) out.fused[k] += p[k];
    }
    for (double& v : out.fused) v /= static_cast<double>(out.selected.size());
  }
  out.predicted = argmax(out.fused);
  return out;
}

}  // namespace udes
