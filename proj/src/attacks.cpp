#include "udes/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "udes/errors.hpp"
#include "udes/evidential.hpp"
#include "udes/fusion.hpp"

namespace udes {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Projects v onto the L-inf ball around x and the [0, 1] box. The ball bound
// is tightened by one ulp where rounding would otherwise leave |v - x| > eps.
double project(double v, double x, double eps) {
  v = std::min(std::max(v, x - eps), x + eps);
  while (v - x > eps) v = std::nextafter(v, x);
  while (x - v > eps) v = std::nextafter(v, x);
  return std::clamp(v, 0.0, 1.0);
}

void require_image(const Tensor& x, const char* fn) {
  if (x.ndim() != 4) {
    throw ContractError(std::string(fn) + ": needs image-shaped input (N, C, H, W), got " + shape_str(x.shape()));
  }
}

std::vector<double> random_start(const Tensor& x, double eps, bool enabled, RngStream& rng) {
  std::vector<double> cur(x.data().begin(), x.data().end());
  if (!enabled || eps == 0.0) return cur;
  for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = project(cur[i] + rng.uniform(-eps, eps), x.data()[i], eps);
  return cur;
}

// Shared momentum iteration used by mim, dim and tim.
Tensor momentum_iterate(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                        RngStream& rng, bool diverse_inputs, bool smooth) {
  spec.validate();
  const EnsembleNet frozen = net.frozen();
  const Shape shape = x.shape();
  const std::size_t rows = x.rows(), width = x.row_size();
  std::vector<double> cur = random_start(x, spec.eps, spec.uses_random_init(), rng);
  std::vector<double> velocity(cur.size(), 0.0);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    std::function<Tensor(const Tensor&)> transform;
    if (diverse_inputs) transform = [&](const Tensor& in) { return dim_transform(in, spec.transform_prob, rng); };
    auto g = input_gradient(frozen, Tensor::from(shape, cur), labels, spec, transform);
    if (smooth) g = tim_gradient(g, shape, spec.kernel_size);
    for (std::size_t r = 0; r < rows; ++r) {
      double l1 = 0.0;
      for (std::size_t j = 0; j < width; ++j) l1 += std::abs(g[r * width + j]);
      const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t i = r * width + j;
        velocity[i] = spec.momentum_decay * velocity[i] + g[i] * inv;
      }
    }
    for (std::size_t i = 0; i < cur.size(); ++i) {
      cur[i] = project(cur[i] + spec.step_size * sign(velocity[i]), x.data()[i], spec.eps);
    }
  }
  return Tensor::from(shape, std::move(cur));
}

}  // namespace

bool AttackSpec::uses_random_init() const {
  if (random_init) return *random_init;
  return family == AttackFamily::pgd || family == AttackFamily::cw;
}

void AttackSpec::validate() const {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ContractError("attack: eps must be finite and non-negative");
  if (steps < 1) throw ContractError("attack: steps must be at least 1");
  if (steps > 1 && !(step_size > 0.0)) throw ContractError("attack: step_size must be positive for iterative attacks");
  if (!(transform_prob >= 0.0 && transform_prob <= 1.0)) throw ContractError("attack: transform_prob must lie in [0, 1]");
  if (kernel_size % 2 == 0) throw ContractError("attack: kernel_size must be odd");
  if (!std::isfinite(momentum_decay) || momentum_decay < 0.0) throw ContractError("attack: momentum_decay must be >= 0");
  if (loss_target == LossTarget::dsc && family == AttackFamily::cw) {
    throw ContractError("attack: the CW margin loss has no DSC-fused readout");
  }
}

std::string AttackSpec::family_name() const { return attack_family_name(family); }

AttackFamily parse_attack_family(const std::string& s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "pgd") return AttackFamily::pgd;
  if (s == "mim") return AttackFamily::mim;
  if (s == "cw") return AttackFamily::cw;
  if (s == "dim") return AttackFamily::dim;
  if (s == "tim") return AttackFamily::tim;
  throw ContractError("unknown attack family '" + s + "'");
}

std::string attack_family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::mim: return "mim";
    case AttackFamily::cw: return "cw";
    case AttackFamily::dim: return "dim";
    case AttackFamily::tim: return "tim";
  }
  return "?";
}

LossTarget parse_loss_target(const std::string& s) {
  if (s == "member" || s == "single-member") return LossTarget::member;
  if (s == "avg" || s == "average" || s == "ensemble-average") return LossTarget::average;
  if (s == "dsc" || s == "dsc-fused") return LossTarget::dsc;
  throw ContractError("unknown loss target '" + s + "'");
}

std::string loss_target_name(LossTarget t) {
  switch (t) {
    case LossTarget::member: return "member";
    case LossTarget::average: return "avg";
    case LossTarget::dsc: return "dsc";
  }
  return "?";
}

Tensor attack_loss(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
  const std::size_t batch = x.rows();
  if (labels.size() != batch) throw ShapeError("attack_loss: label count differs from batch size");
  if (spec.loss_target == LossTarget::dsc && net.head() != Head::evidential) {
    throw ContractError("attack_loss: DSC readout needs an evidential head");
  }
  const bool single = spec.loss_target == LossTarget::member;
  if (single && spec.member >= net.members()) throw ContractError("attack_loss: member index out of range");
  const Tensor logits = single ? net.member_forward(spec.member, x) : net.grouped_forward(x);
  const std::size_t groups = single ? 1 : net.members();
  const double inv = 1.0 / static_cast<double>(groups);

  if (spec.uses_cw_loss()) {
    if (spec.loss_target == LossTarget::dsc) throw ContractError("attack_loss: CW has no DSC readout");
    const Tensor z = groups == 1 ? logits : ad::scale(ad::sum_row_blocks(logits, batch, groups), inv);
    const Tensor margin = ad::sub(ad::masked_max_cols(z, labels), ad::gather_cols(z, labels));
    return ad::sum(ad::clamp(margin, -std::numeric_limits<double>::infinity(), spec.cw_kappa));
  }

  Tensor probs;
  if (spec.loss_target == LossTarget::dsc) {
    probs = dsc_fused_probabilities(evidential_ad::alpha(logits), batch);
  } else {
    probs = evidential_ad::probabilities(logits, net.head());
    if (groups > 1) probs = ad::scale(ad::sum_row_blocks(probs, batch, groups), inv);
  }
  const Tensor py = ad::clamp(ad::gather_cols(probs, labels), 1e-300, 1.0);
  return ad::neg(ad::sum(ad::log(py)));
}

std::vector<double> input_gradient(const EnsembleNet& frozen_net, const Tensor& x, std::span<const int> labels,
                                   const AttackSpec& spec, const std::function<Tensor(const Tensor&)>& transform) {
  Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  const Tensor in = transform ? transform(leaf) : leaf;
  const Tensor loss = attack_loss(frozen_net, in, labels, spec);
  if (!loss.requires_grad()) return std::vector<double>(x.numel(), 0.0);
  backward(loss);
  return std::vector<double>(leaf.grad().begin(), leaf.grad().end());
}

Tensor fgsm(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
  spec.validate();
  if (spec.eps == 0.0) return x.detach();
  const auto g = input_gradient(net.frozen(), x, labels, spec);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = project(x.data()[i] + spec.eps * sign(g[i]), x.data()[i], spec.eps);
  return Tensor::from(x.shape(), std::move(out));
}

Tensor pgd(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng) {
  spec.validate();
  const EnsembleNet frozen = net.frozen();
  std::vector<double> cur = random_start(x, spec.eps, spec.uses_random_init(), rng);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    const auto g = input_gradient(frozen, Tensor::from(x.shape(), cur), labels, spec);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = project(cur[i] + spec.step_size * sign(g[i]), x.data()[i], spec.eps);
  }
  return Tensor::from(x.shape(), std::move(cur));
}

Tensor mim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng) {
  return momentum_iterate(net, x, labels, spec, rng, false, false);
}

Tensor dim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng) {
  require_image(x, "dim");
  return momentum_iterate(net, x, labels, spec, rng, true, false);
}

Tensor tim(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           RngStream& rng) {
  require_image(x, "tim");
  return momentum_iterate(net, x, labels, spec, rng, false, true);
}

Tensor run_attack(const EnsembleNet& net, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  RngStream& rng) {
  switch (spec.family) {
    case AttackFamily::fgsm: return fgsm(net, x, labels, spec);
    case AttackFamily::pgd:
    case AttackFamily::cw: return pgd(net, x, labels, spec, rng);
    case AttackFamily::mim: return mim(net, x, labels, spec, rng);
    case AttackFamily::dim: return dim(net, x, labels, spec, rng);
    case AttackFamily::tim: return tim(net, x, labels, spec, rng);
  }
  throw ContractError("run_attack: unknown family");
}

Tensor dim_transform(const Tensor& x, double transform_prob, RngStream& rng) {
  require_image(x, "dim_transform");
  if (!(transform_prob >= 0.0 && transform_prob <= 1.0)) throw ContractError("dim_transform: probability outside [0, 1]");
  // Always consume the same number of draws so sequences stay aligned.
  const double coin = rng.uniform();
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t lo = std::max<std::size_t>(1, (3 * H + 3) / 4);
  const std::size_t span_h = H > lo ? H - lo : 0;
  const std::size_t new_h = span_h ? lo + static_cast<std::size_t>(rng.below(span_h)) : H;
  const std::size_t new_w = std::max<std::size_t>(1, (W * new_h + H / 2) / H);
  const std::size_t top = static_cast<std::size_t>(rng.below(H - new_h + 1));
  const std::size_t left = static_cast<std::size_t>(rng.below(W - new_w + 1));
  if (coin >= transform_prob || new_h == H) return x;

  std::vector<long> index(x.numel(), -1);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < new_h; ++i)
        for (std::size_t j = 0; j < new_w; ++j) {
          const std::size_t si = i * H / new_h, sj = j * W / new_w;
          const std::size_t dst = ((n * C + c) * H + top + i) * W + left + j;
          index[dst] = static_cast<long>(((n * C + c) * H + si) * W + sj);
        }
  return ad::gather_flat(x, index, x.shape());
}

std::vector<double> gaussian_kernel(std::size_t kernel_size) {
  if (kernel_size % 2 == 0) throw ContractError("gaussian_kernel: kernel_size must be odd");
  const double sigma = static_cast<double>(kernel_size) / 3.0;
  const long half = static_cast<long>(kernel_size / 2);
  std::vector<double> k(kernel_size * kernel_size);
  double total = 0.0;
  for (long i = -half; i <= half; ++i)
    for (long j = -half; j <= half; ++j) {
      const double v = std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
      k[static_cast<std::size_t>((i + half) * static_cast<long>(kernel_size) + (j + half))] = v;
      total += v;
    }
  for (double& v : k) v /= total;
  return k;
}

std::vector<double> tim_gradient(std::span<const double> grad, const Shape& shape, std::size_t kernel_size) {
  if (shape.size() != 4) throw ContractError("tim_gradient: needs an (N, C, H, W) gradient");
  if (grad.size() != shape_numel(shape)) throw ShapeError("tim_gradient: gradient size differs from shape");
  const auto k = gaussian_kernel(kernel_size);
  const std::size_t planes = shape[0] * shape[1], H = shape[2], W = shape[3];
  const long half = static_cast<long>(kernel_size / 2);
  std::vector<double> out(grad.size(), 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = 0.0;
        for (long di = -half; di <= half; ++di)
          for (long dj = -half; dj <= half; ++dj) {
            const long si = static_cast<long>(i) + di, sj = static_cast<long>(j) + dj;
            if (si < 0 || sj < 0 || si >= static_cast<long>(H) || sj >= static_cast<long>(W)) continue;
            acc += k[static_cast<std::size_t>((di + half) * static_cast<long>(kernel_size) + dj + half)] *
                   grad[(p * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj)];
          }
        out[(p * H + i) * W + j] = acc;
      }
  return out;
}

}  // namespace udes
