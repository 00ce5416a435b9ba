#include "udes/training.hpp"

#include <algorithm>
#include <cmath>

#include "udes/errors.hpp"

namespace udes {

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kAdvStream = 2;
constexpr std::uint64_t kMonitorAttackStream = 3;
constexpr std::uint64_t kMonitorPolicyStream = 4;
constexpr std::size_t kEvalChunk = 512;

double sum_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

AttackSpec training_attack(const AttackSpec& adv) {
  AttackSpec a = adv;
  a.loss_target = LossTarget::average;
  return a;
}

}  // namespace

AttackSpec TrainConfig::default_adv() {
  AttackSpec a;
  a.family = AttackFamily::pgd;
  a.eps = 0.03;
  a.steps = 20;
  a.step_size = 0.005;
  a.loss_target = LossTarget::average;
  return a;
}

void TrainConfig::validate() const {
  if (members < 1) throw ContractError("train: members must be at least 1");
  if (rank < 1) throw ContractError("train: rank must be at least 1");
  if (!(lr_shared > 0.0) || !(lr_factors > 0.0)) throw DomainError("train: learning rates must be positive");
  if (!(gamma > 0.0)) throw DomainError("train: gamma must be positive");
  if (batch_size < 1) throw ContractError("train: batch_size must be at least 1");
  if (!(kl_weight >= 0.0)) throw DomainError("train: kl_weight must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("train: momentum must lie in [0, 1)");
  if (!(init_scale >= 0.0)) throw DomainError("train: init_scale must be non-negative");
  if (monitor_samples < 1) throw ContractError("train: monitor_samples must be at least 1");
  adv.validate();
  diversity.validate();
}

// ---------------------------------------------------------------------------
// optimizer

SgdOptimizer::SgdOptimizer(ParamGroup owned, double lr, double momentum)
    : owned_(owned), lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw DomainError("sgd: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("sgd: momentum must lie in [0, 1)");
}

std::size_t SgdOptimizer::step(const std::vector<Param>& params) {
  std::size_t updated = 0;
  for (const auto& p : params) {
    if (p.group != owned_) continue;
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_data();
    if (momentum_ > 0.0) {
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(w.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        w[i] -= lr_ * v[i];
      }
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
    updated += w.size();
  }
  return updated;
}

// ---------------------------------------------------------------------------
// objective

CorrectionTerms uncertainty_correction_loss(const std::vector<std::vector<DirichletOpinion>>& benign,
                                            const std::vector<std::vector<DirichletOpinion>>& adv,
                                            std::span<const int> adv_labels, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("correction: gamma must be positive");
  if (benign.size() != adv.size() || benign.empty()) throw ShapeError("correction: member counts differ");
  const std::size_t batch = adv_labels.size();
  for (std::size_t m = 0; m < benign.size(); ++m) {
    if (benign[m].size() != batch || adv[m].size() != batch) {
      throw ShapeError("correction: member " + std::to_string(m) + " has a mismatched batch size");
    }
  }
  if (batch == 0) throw ShapeError("correction: empty batch");
  CorrectionTerms out;
  for (std::size_t m = 0; m < benign.size(); ++m) {
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      acc += std::min(std::abs(dirichlet_entropy(benign[m][b]) - dirichlet_entropy(adv[m][b])), gamma);
    }
    out.margin += acc / static_cast<double>(batch);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<SubjectiveOpinion> ops;
    for (std::size_t m = 0; m < adv.size(); ++m) ops.push_back(SubjectiveOpinion::from_dirichlet(adv[m][b]));
    const auto p = dsc_fuse_all(ops).probabilities();
    const auto y = static_cast<std::size_t>(adv_labels[b]);
    if (y >= p.size()) throw ContractError("correction: label out of range");
    out.dsc_loglik += std::log(std::max(p[y], 1e-12));
  }
  out.dsc_loglik /= static_cast<double>(batch);
  out.total = out.margin + out.dsc_loglik;
  return out;
}

ObjectiveParts training_objective(const Tensor& alpha, std::size_t members, std::span<const int> labels,
                                  double gamma, double kl_weight) {
  const std::size_t batch = labels.size();
  if (alpha.ndim() != 2 || members == 0 || batch == 0 || alpha.shape()[0] != members * 2 * batch) {
    throw ShapeError("training_objective: expected (" + std::to_string(members * 2 * batch) + ", N) alpha, got " +
                     shape_str(alpha.shape()));
  }
  const std::size_t n = alpha.shape()[1];
  std::vector<long> bi, ai;
  bi.reserve(members * batch * n);
  ai.reserve(members * batch * n);
  for (std::size_t m = 0; m < members; ++m)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = 0; k < n; ++k) {
        bi.push_back(static_cast<long>(((m * 2 * batch) + b) * n + k));
        ai.push_back(static_cast<long>(((m * 2 * batch) + batch + b) * n + k));
      }
  const Tensor ab = ad::gather_flat(alpha, bi, {members * batch, n});
  const Tensor aa = ad::gather_flat(alpha, ai, {members * batch, n});
  std::vector<int> tiled;
  tiled.reserve(members * batch);
  for (std::size_t m = 0; m < members; ++m) tiled.insert(tiled.end(), labels.begin(), labels.end());

  const double inv_b = 1.0 / static_cast<double>(batch);
  const Tensor nll = evidential_ad::expected_nll(ab, tiled);
  const Tensor kl = evidential_ad::kl_to_uniform(ab, tiled);
  const Tensor neg_elbo = ad::scale(ad::sum(ad::add(nll, ad::scale(kl, kl_weight))), inv_b);

  const Tensor gap = ad::abs(ad::sub(evidential_ad::entropy(ab), evidential_ad::entropy(aa)));
  const Tensor margin = ad::scale(ad::sum(ad::clamp(gap, 0.0, gamma)), inv_b);
  const Tensor fused = dsc_fused_probabilities(aa, batch);
  const Tensor loglik = ad::scale(ad::sum(ad::log(ad::clamp(ad::gather_cols(fused, labels), 1e-12, 1.0))), inv_b);

  ObjectiveParts out;
  out.loss = ad::sub(neg_elbo, ad::add(margin, loglik));
  out.nll = sum_of(nll) * inv_b;
  out.kl = sum_of(kl) * inv_b;
  out.margin = margin.item();
  out.dsc_loglik = loglik.item();
  out.entropy_gap = sum_of(gap) / static_cast<double>(members * batch);
  return out;
}

// ---------------------------------------------------------------------------
// steps

Trainer::Trainer(EnsembleNet& n, const TrainConfig& c)
    : net(n),
      cfg(c),
      shared_opt(ParamGroup::shared, c.lr_shared, c.momentum),
      factor_opt(ParamGroup::factor, c.lr_factors, c.momentum) {
  cfg.validate();
  if (net.head() != Head::evidential) throw ContractError("train: the ensemble must use the evidential head");
}

StepMetrics Trainer::step(const Tensor& x, std::span<const int> labels, RngStream& rng, std::size_t epoch) {
  const int ep = static_cast<int>(epoch);
  for (double v : x.data())
    if (!std::isfinite(v)) throw DomainError("train: non-finite input value");
  const Tensor xb = x.detach();
  const Tensor xa = cfg.adv.eps > 0.0 ? run_attack(net, xb, labels, training_attack(cfg.adv), rng) : xb;
  const Tensor alpha = evidential_ad::alpha(net.grouped_forward(ad::concat_rows(xb, xa.detach())));
  for (double v : alpha.data())
    if (!std::isfinite(v)) throw TrainingError("train: non-finite network output", ep);

  double klw = cfg.kl_weight;
  if (cfg.kl_warmup) {
    const double ramp = std::max<double>(1.0, static_cast<double>(cfg.epochs) / 4.0);
    klw *= std::min(1.0, static_cast<double>(epoch + 1) / ramp);
  }
  const auto parts = training_objective(alpha, net.members(), labels, cfg.gamma, klw);
  const double loss = parts.loss.item();
  if (!std::isfinite(loss)) {
    throw TrainingError("train: non-finite loss (nll " + std::to_string(parts.nll) + ", kl " +
                            std::to_string(parts.kl) + ", margin " + std::to_string(parts.margin) + ", dsc " +
                            std::to_string(parts.dsc_loglik) + ")",
                        ep);
  }
  backward(parts.loss);
  const auto params = net.parameters();
  for (const auto& p : params)
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw TrainingError("train: non-finite gradient in " + p.name, ep);
  apply_regularizer(net, cfg.diversity);
  shared_opt.step(params);
  factor_opt.step(params);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  return {loss, parts.nll, parts.kl, parts.margin, parts.dsc_loglik, parts.entropy_gap};
}

StepMetrics train_step(EnsembleNet& net, const Tensor& x, std::span<const int> labels, const TrainConfig& cfg,
                       RngStream& rng) {
  Trainer t(net, cfg);
  return t.step(x, labels, rng);
}

// ---------------------------------------------------------------------------
// evaluation helpers

std::vector<std::vector<DirichletOpinion>> sample_opinions(const EnsembleNet& net, const Tensor& x) {
  if (net.head() != Head::evidential) throw ContractError("sample_opinions: the net must use the evidential head");
  const EnsembleNet f = net.frozen();
  const std::size_t total = x.shape().at(0), m = f.members(), n = f.num_classes();
  std::vector<std::vector<DirichletOpinion>> out(total);
  for (std::size_t start = 0; start < total; start += kEvalChunk) {
    const std::size_t end = std::min(total, start + kEvalChunk), b = end - start;
    const Tensor logits = f.grouped_forward(ad::slice_rows(x, start, end));
    for (std::size_t mm = 0; mm < m; ++mm)
      for (std::size_t i = 0; i < b; ++i) {
        out[start + i].push_back(alpha_from_logits(logits.data().subspan((mm * b + i) * n, n)));
      }
  }
  return out;
}

namespace {

double argmax_accuracy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.shape()[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += argmax(logits.data().subspan(i * n, n)) == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

double member_accuracy(const EnsembleNet& net, std::size_t member, const Tensor& x, std::span<const int> labels) {
  return argmax_accuracy(net.frozen().member_forward(member, x), labels);
}

double plain_accuracy(const PlainNet& net, const Tensor& x, std::span<const int> labels) {
  PlainNet f = net.clone();
  for (auto& t : f.weights) t = t.detach();
  for (auto& t : f.biases) t = t.detach();
  return argmax_accuracy(f.forward(x), labels);
}

std::vector<PolicySpec> monitor_policies() {
  std::vector<PolicySpec> out;
  for (const char* s : {"uncertain-1", "uncertain-2", "stochastic-2", "average", "dsc"}) out.push_back(PolicySpec::parse(s));
  return out;
}

EpochRecord measure(const EnsembleNet& net, const Dataset& monitor, const TrainConfig& cfg) {
  const Tensor x = monitor.inputs_tensor();
  const auto& y = monitor.labels;
  const auto benign = sample_opinions(net, x);
  EpochRecord rec;
  RngStream root(cfg.seed);
  for (const auto& spec : monitor_policies()) {
    RngStream prng = root.split(kMonitorPolicyStream);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < benign.size(); ++i) hits += policy_predict(benign[i], spec, prng).predicted == y[i];
    rec.policy_accuracy[spec.name()] = static_cast<double>(hits) / static_cast<double>(benign.size());
  }
  RngStream arng = root.split(kMonitorAttackStream);
  const Tensor xa = cfg.adv.eps > 0.0 ? run_attack(net, x, y, training_attack(cfg.adv), arng) : x;
  const auto adv = sample_opinions(net, xa);
  double hb = 0.0, ha = 0.0, gap = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < benign.size(); ++i)
    for (std::size_t m = 0; m < benign[i].size(); ++m) {
      const double b = dirichlet_entropy(benign[i][m]), a = dirichlet_entropy(adv[i][m]);
      hb += b;
      ha += a;
      gap += std::abs(b - a);
      ++count;
    }
  rec.benign_entropy = hb / static_cast<double>(count);
  rec.adv_entropy = ha / static_cast<double>(count);
  rec.entropy_gap = gap / static_cast<double>(count);
  rec.factor_distance = pairwise_factor_distances(net);
  return rec;
}

FitResult fit(EnsembleNet& net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("fit: empty dataset");
  if (data.num_classes != net.num_classes()) throw ShapeError("fit: dataset and net disagree on class count");
  RngStream root(cfg.seed);
  RngStream shuffle_rng = root.split(kShuffleStream);
  RngStream adv_rng = root.split(kAdvStream);
  const Dataset monitor = data.head(cfg.monitor_samples);
  Trainer trainer(net, cfg);
  FitResult out;
  out.initial = measure(net, monitor, cfg);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double loss = 0.0;
    const auto batches = batch_iter(data.size(), cfg.batch_size, true, shuffle_rng);
    for (const auto& idx : batches) {
      const auto labels = data.labels_of(idx);
      loss += trainer.step(data.inputs_tensor(idx), labels, adv_rng, e).loss;
    }
    EpochRecord rec = measure(net, monitor, cfg);
    rec.epoch = e + 1;
    rec.mean_loss = loss / static_cast<double>(batches.size());
    out.history.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// baseline

PretrainResult pretrain_baseline(const Architecture& arch, const Dataset& data, std::size_t epochs, double lr,
                                 RngStream& rng, double momentum, std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("pretrain: empty dataset");
  if (data.num_classes != arch.num_classes) throw ShapeError("pretrain: dataset and architecture disagree on classes");
  if (!(lr > 0.0)) throw DomainError("pretrain: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("pretrain: momentum must lie in [0, 1)");
  PretrainResult out{PlainNet::init(arch, rng), {}, 0.0};
  auto params = out.net.parameters();
  std::vector<std::vector<double>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].numel(), 0.0);
  for (std::size_t e = 0; e < epochs; ++e) {
    double total = 0.0;
    const auto batches = batch_iter(data.size(), batch_size, true, rng);
    for (const auto& idx : batches) {
      const auto labels = data.labels_of(idx);
      const Tensor logits = out.net.forward(data.inputs_tensor(idx));
      const std::size_t r = logits.shape()[0], n = logits.shape()[1];
      std::vector<double> shift(r * n);
      for (std::size_t i = 0; i < r; ++i) {
        const auto row = logits.data().subspan(i * n, n);
        std::fill_n(shift.begin() + static_cast<long>(i * n), n, *std::max_element(row.begin(), row.end()));
      }
      const Tensor z = ad::sub(logits, Tensor::from({r, n}, std::move(shift)));
      const Tensor lse = ad::log(ad::sum_cols(ad::exp(z)));
      const Tensor loss = ad::mean(ad::sub(lse, ad::gather_cols(z, labels)));
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw TrainingError("pretrain: non-finite cross-entropy", static_cast<int>(e));
      total += lv;
      backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_data();
        const auto g = params[i].grad();
        for (std::size_t k = 0; k < w.size(); ++k) {
          velocity[i][k] = momentum * velocity[i][k] + g[k];
          w[k] -= lr * velocity[i][k];
        }
        params[i].zero_grad();
      }
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
  }
  out.train_accuracy = plain_accuracy(out.net, data.inputs_tensor(), data.labels);
  return out;
}

}  // namespace udes
