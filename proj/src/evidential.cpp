#include "udes/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "udes/errors.hpp"
#include "udes/numerics.hpp"

namespace udes {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_label(int label, std::size_t n, const char* fn) {
  if (label < 0 || static_cast<std::size_t>(label) >= n) {
    throw ContractError(std::string(fn) + ": class index " + std::to_string(label) + " out of range for " +
                        std::to_string(n) + " classes");
  }
}

double kl_uniform_closed_form(std::span<const double> a) {
  double a0 = 0.0;
  for (double v : a) a0 += v;
  const double psi0 = digamma(a0);
  double out = lgamma(a0) - lgamma(static_cast<double>(a.size()));
  for (double v : a) {
    out -= lgamma(v);
    if (v != 1.0) out += (v - 1.0) * (digamma(v) - psi0);
  }
  return std::max(out, 0.0);
}

}  // namespace

DirichletOpinion DirichletOpinion::from_alpha(std::vector<double> alpha) {
  if (alpha.size() < 2) throw DomainError("DirichletOpinion: need at least two classes");
  for (double a : alpha) {
    if (!(a > 0.0) || !std::isfinite(a)) throw DomainError("DirichletOpinion: concentrations must be positive and finite");
  }
  return DirichletOpinion{std::move(alpha)};
}

double DirichletOpinion::strength() const {
  double s = 0.0;
  for (double a : alpha) s += a;
  return s;
}

DirichletOpinion alpha_from_logits(std::span<const double> logits) {
  std::vector<double> a(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (!std::isfinite(logits[k])) throw DomainError("alpha_from_logits: non-finite logit");
    a[k] = softplus(logits[k]) + 1.0;
  }
  return DirichletOpinion::from_alpha(std::move(a));
}

std::vector<double> predictive_mean(const DirichletOpinion& op) {
  const double s = op.strength();
  std::vector<double> out(op.alpha.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = op.alpha[k] / s;
  return out;
}

double expected_nll(const DirichletOpinion& op, int label) {
  check_label(label, op.classes(), "expected_nll");
  return digamma(op.strength()) - digamma(op.alpha[static_cast<std::size_t>(label)]);
}

std::vector<double> label_adjusted_alpha(const DirichletOpinion& op, int label) {
  check_label(label, op.classes(), "label_adjusted_alpha");
  auto a = op.alpha;
  a[static_cast<std::size_t>(label)] = 1.0;
  return a;
}

double kl_to_uniform(const DirichletOpinion& op, std::span<const double> one_hot) {
  if (one_hot.size() != op.classes()) throw ContractError("kl_to_uniform: one-hot length differs from class count");
  int label = -1;
  for (std::size_t k = 0; k < one_hot.size(); ++k) {
    if (one_hot[k] == 1.0) {
      if (label >= 0) throw ContractError("kl_to_uniform: one-hot has several hot entries");
      label = static_cast<int>(k);
    } else if (one_hot[k] != 0.0) {
      throw ContractError("kl_to_uniform: one-hot entries must be 0 or 1");
    }
  }
  if (label < 0) throw ContractError("kl_to_uniform: one-hot has no hot entry");
  return kl_to_uniform(op, label);
}

double kl_to_uniform(const DirichletOpinion& op, int label) {
  return kl_uniform_closed_form(label_adjusted_alpha(op, label));
}

EvidentialLossParts elbo_loss(const DirichletOpinion& op, int label, double kl_weight) {
  EvidentialLossParts p;
  p.nll = expected_nll(op, label);
  p.kl = kl_to_uniform(op, label);
  p.total = p.nll + kl_weight * p.kl;
  return p;
}

EvidentialLossParts elbo_loss(std::span<const DirichletOpinion> ops, std::span<const int> labels, double kl_weight) {
  if (ops.size() != labels.size() || ops.empty()) throw ShapeError("elbo_loss: batch and label counts differ or are empty");
  EvidentialLossParts acc;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const auto p = elbo_loss(ops[i], labels[i], kl_weight);
    acc.nll += p.nll;
    acc.kl += p.kl;
    acc.total += p.total;
  }
  const double n = static_cast<double>(ops.size());
  return {acc.nll / n, acc.kl / n, acc.total / n};
}

double dirichlet_entropy(const DirichletOpinion& op) {
  const double a0 = op.strength();
  const double n = static_cast<double>(op.classes());
  double h = -lgamma(a0) + (a0 - n) * digamma(a0);
  for (double a : op.alpha) {
    h += lgamma(a);
    if (a != 1.0) h -= (a - 1.0) * digamma(a);
  }
  return h;
}

std::vector<std::vector<double>> probabilities(const Tensor& logits, Head head) {
  const Tensor p = evidential_ad::probabilities(logits.detach(), head);
  const std::size_t r = p.shape()[0], c = p.shape()[1];
  std::vector<std::vector<double>> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i].assign(p.data().begin() + i * c, p.data().begin() + (i + 1) * c);
  return out;
}

std::vector<DirichletOpinion> opinions_from_logits(const Tensor& logits) {
  if (logits.ndim() != 2) throw ShapeError("opinions_from_logits: expected (R, N) logits");
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  std::vector<DirichletOpinion> out;
  out.reserve(r);
  for (std::size_t i = 0; i < r; ++i) out.push_back(alpha_from_logits(logits.data().subspan(i * c, c)));
  return out;
}

namespace evidential_ad {

namespace {
void check_rows(const Tensor& a, std::span<const int> labels, const char* fn) {
  if (a.ndim() != 2) throw ShapeError(std::string(fn) + ": expected (R, N), got " + shape_str(a.shape()));
  if (labels.size() != a.shape()[0]) throw ShapeError(std::string(fn) + ": label count differs from rows");
}
}  // namespace

Tensor alpha(const Tensor& logits) { return ad::add_scalar(ad::softplus(logits), 1.0); }

Tensor expected_nll(const Tensor& alpha, std::span<const int> labels) {
  check_rows(alpha, labels, "expected_nll");
  return ad::sub(ad::digamma(ad::sum_cols(alpha)), ad::gather_cols(ad::digamma(alpha), labels));
}

Tensor kl_to_uniform(const Tensor& alpha, std::span<const int> labels) {
  check_rows(alpha, labels, "kl_to_uniform");
  const std::size_t r = alpha.shape()[0], n = alpha.shape()[1];
  std::vector<double> hot(r * n, 0.0), keep(r * n, 1.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) throw ContractError("kl_to_uniform: label out of range");
    hot[i * n + static_cast<std::size_t>(labels[i])] = 1.0;
    keep[i * n + static_cast<std::size_t>(labels[i])] = 0.0;
  }
  const Tensor adj = ad::add(Tensor::from({r, n}, std::move(hot)), ad::mul(Tensor::from({r, n}, std::move(keep)), alpha));
  const Tensor s = ad::sum_cols(adj);
  const Tensor psi_s = ad::expand_cols(ad::digamma(s), n);
  Tensor kl = ad::sub(ad::lgamma(s), ad::sum_cols(ad::lgamma(adj)));
  kl = ad::add_scalar(kl, -udes::lgamma(static_cast<double>(n)));
  return ad::add(kl, ad::sum_cols(ad::mul(ad::add_scalar(adj, -1.0), ad::sub(ad::digamma(adj), psi_s))));
}

Tensor entropy(const Tensor& alpha) {
  if (alpha.ndim() != 2) throw ShapeError("entropy: expected (R, N), got " + shape_str(alpha.shape()));
  const double n = static_cast<double>(alpha.shape()[1]);
  const Tensor s = ad::sum_cols(alpha);
  Tensor h = ad::sub(ad::sum_cols(ad::lgamma(alpha)), ad::lgamma(s));
  h = ad::add(h, ad::mul(ad::add_scalar(s, -n), ad::digamma(s)));
  return ad::sub(h, ad::sum_cols(ad::mul(ad::add_scalar(alpha, -1.0), ad::digamma(alpha))));
}

Tensor probabilities(const Tensor& logits, Head head) {
  if (logits.ndim() != 2) throw ShapeError("probabilities: expected (R, N), got " + shape_str(logits.shape()));
  const std::size_t r = logits.shape()[0], n = logits.shape()[1];
  if (head == Head::evidential) {
    const Tensor a = alpha(logits);
    return ad::div(a, ad::expand_cols(ad::sum_cols(a), n));
  }
  std::vector<double> shift(r * n);
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = logits.data().subspan(i * n, n);
    const double mx = *std::max_element(row.begin(), row.end());
    std::fill_n(shift.begin() + i * n, n, mx);
  }
  const Tensor e = ad::exp(ad::sub(logits, Tensor::from({r, n}, std::move(shift))));
  return ad::div(e, ad::expand_cols(ad::sum_cols(e), n));
}

}  // namespace evidential_ad
}  // namespace udes
