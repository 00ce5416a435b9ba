#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "udes/errors.hpp"
#include "udes/training.hpp"

using namespace udes;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.members = 3;
  c.rank = 2;
  c.epochs = 2;
  c.batch_size = 16;
  c.adv.eps = 0.05;
  c.adv.steps = 3;
  c.adv.step_size = 0.02;
  c.monitor_samples = 32;
  c.seed = 4;
  return c;
}

EnsembleNet ensemble_on(const Dataset& d, const TrainConfig& c, std::uint64_t seed, double init_scale) {
  RngStream rng(seed);
  const auto base = PlainNet::init(Architecture::mlp(d.sample_numel(), {8}, d.num_classes), rng);
  return init_from_pretrained(base, c.members, c.rank, rng, init_scale);
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  TrainConfig c;
  c.lr_factors = 0.0;
  CHECK_THROWS_AS(c.validate(), DomainError);
  c = TrainConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), DomainError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  const auto adv = TrainConfig::default_adv();
  CHECK(adv.family == AttackFamily::pgd);
  CHECK(adv.eps == 0.03);
}

TEST_CASE("dual-rate optimisers update only their own group") {
  RngStream rng(1);
  auto net = fixture::random_ensemble(rng, 2, {3}, 2, 2, 1);
  const auto x = fixture::random_inputs(rng, {4, 2});
  backward(ad::sum(ad::softplus(net.grouped_forward(x))));
  const auto before = net.clone();
  SgdOptimizer shared(ParamGroup::shared, 0.5), factor(ParamGroup::factor, 0.25);
  const auto params = net.parameters();
  const std::size_t n_shared = shared.step(params);
  CHECK(n_shared == 2 * 3 + 3 * 2);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = net.layers()[l];
    const auto& b = before.layers()[l];
    for (std::size_t i = 0; i < a.weight.numel(); ++i) CHECK(a.weight.at(i) == b.weight.at(i) - 0.5 * a.weight.grad()[i]);
    for (std::size_t i = 0; i < a.r.numel(); ++i) CHECK(a.r.at(i) == b.r.at(i));
  }
  factor.step(params);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = net.layers()[l];
    const auto& b = before.layers()[l];
    for (std::size_t i = 0; i < a.s.numel(); ++i) CHECK(a.s.at(i) == b.s.at(i) - 0.25 * a.s.grad()[i]);
    for (std::size_t i = 0; i < a.bias.numel(); ++i) CHECK(a.bias.at(i) == b.bias.at(i) - 0.25 * a.bias.grad()[i]);
  }
  CHECK_THROWS_AS(SgdOptimizer(ParamGroup::shared, 0.0), DomainError);
}

TEST_CASE("momentum accumulates velocity per parameter") {
  auto t = Tensor::from({1}, {1.0}, true);
  std::vector<Param> params{{"w", t, ParamGroup::factor}};
  SgdOptimizer opt(ParamGroup::factor, 0.1, 0.5);
  t.mutable_grad()[0] = 2.0;
  opt.step(params);  // v = 2, w = 0.8
  opt.step(params);  // v = 3, w = 0.5
  CHECK(t.at(0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("entropy margin is clamped at gamma exactly") {
  const auto sharp = DirichletOpinion::from_alpha({200.0, 1.0});
  const auto flat = DirichletOpinion::from_alpha({1.0, 1.0});
  const double gap = std::abs(dirichlet_entropy(sharp) - dirichlet_entropy(flat));
  REQUIRE(gap > 1.0);
  const std::vector<std::vector<DirichletOpinion>> benign{{sharp}}, adv{{flat}};
  const std::vector<int> y{0};
  CHECK(uncertainty_correction_loss(benign, adv, y, 0.75).margin == 0.75);
  CHECK(uncertainty_correction_loss(benign, adv, y, gap + 1.0).margin == gap);
  // Clamp inside the differentiable objective: the margin part is gamma and
  // carries no gradient once the gap exceeds it.
  auto alpha = Tensor::from({2, 2}, {200.0, 1.0, 1.0, 1.0}, true);
  const auto parts = training_objective(alpha, 1, y, 0.75, 1.0);
  CHECK(parts.margin == 0.75);
  CHECK(parts.entropy_gap == doctest::Approx(gap).epsilon(1e-14));
  CHECK_THROWS_AS(uncertainty_correction_loss(benign, adv, y, 0.0), DomainError);
  CHECK_THROWS_AS(uncertainty_correction_loss(benign, {{flat, flat}}, y, 1.0), ShapeError);
}

TEST_CASE("objective equals the scalar composition") {
  RngStream rng(2);
  const std::size_t members = 3, batch = 4, n = 3;
  std::vector<double> a(members * 2 * batch * n);
  for (double& v : a) v = rng.uniform(1.1, 9.0);
  const auto alpha = Tensor::from({members * 2 * batch, n}, a, true);
  const std::vector<int> y{0, 2, 1, 2};
  const double gamma = 8.0, klw = 0.7;
  const auto parts = training_objective(alpha, members, y, gamma, klw);

  std::vector<std::vector<DirichletOpinion>> benign(members), adv(members);
  double elbo = 0.0;
  for (std::size_t m = 0; m < members; ++m)
    for (std::size_t r = 0; r < 2 * batch; ++r) {
      const auto row = (m * 2 * batch + r) * n;
      const auto op = DirichletOpinion::from_alpha(std::vector<double>(a.begin() + row, a.begin() + row + n));
      if (r < batch) {
        benign[m].push_back(op);
        elbo += elbo_loss(op, y[r], klw).total / static_cast<double>(batch);
      } else {
        adv[m].push_back(op);
      }
    }
  const auto corr = uncertainty_correction_loss(benign, adv, y, gamma);
  CHECK(parts.margin == doctest::Approx(corr.margin).epsilon(1e-12));
  CHECK(parts.dsc_loglik == doctest::Approx(corr.dsc_loglik).epsilon(1e-12));
  CHECK(parts.loss.item() == doctest::Approx(elbo - corr.total).epsilon(1e-12));
  CHECK_THROWS_AS(training_objective(alpha, 2, y, gamma, klw), ShapeError);
}

TEST_CASE("objective passes finite differences through the network") {
  RngStream rng(3);
  auto net = fixture::random_ensemble(rng, 2, {5}, 3, 2, 2);
  const auto x = fixture::random_inputs(rng, {6, 2});
  const std::vector<int> y{0, 1, 2};
  // Benign rows 0..2, "adversarial" rows 3..5 with a large gamma.
  auto leaf = net.layers()[1].s.detach();
  leaf.set_requires_grad(true);
  auto f = [&](const Tensor& s) {
    auto copy = net.frozen();
    copy.layers()[1].s = s;
    return training_objective(evidential_ad::alpha(copy.grouped_forward(x)), 2, y, 50.0, 1.0).loss;
  };
  CHECK(finite_diff_check(f, leaf) < 1e-4);
}

TEST_CASE("trainer needs the evidential head and rejects non-finite losses") {
  RngStream rng(5);
  auto data = gen_two_moons(32, 0.1, rng);
  auto cfg = small_config();
  auto net = ensemble_on(data, cfg, 1, 0.1);
  net.set_head(Head::softmax);
  CHECK_THROWS_AS(Trainer(net, cfg), ContractError);
  net.set_head(Head::evidential);
  cfg.adv.eps = 0.0;
  Trainer t(net, cfg);
  auto x = data.inputs_tensor();
  x.mutable_data()[0] = std::nan("");
  CHECK_THROWS_AS(t.step(x, data.labels, rng, 3), DomainError);
  // Infinite weights make the loss non-finite; parameters stay untouched.
  for (double& w : net.layers()[1].weight.mutable_data()) w = std::numeric_limits<double>::infinity();
  const auto before = net.checksum();
  bool thrown = false;
  try {
    t.step(data.inputs_tensor(), data.labels, rng, 3);
  } catch (const TrainingError& e) {
    thrown = true;
    CHECK(e.epoch() == 3);
  }
  CHECK(thrown);
  CHECK(net.checksum() == before);
}

TEST_CASE("symmetric members stay bitwise identical without repulsion") {
  RngStream rng(6);
  const auto data = gen_two_moons(64, 0.1, rng);
  auto cfg = small_config();
  cfg.diversity.weight = 0.0;
  auto net = ensemble_on(data, cfg, 2, 0.0);
  Trainer t(net, cfg);
  RngStream step_rng(1);
  for (int s = 0; s < 10; ++s) t.step(data.inputs_tensor(), data.labels, step_rng);
  CHECK(pairwise_factor_distances(net).min == 0.0);
  const auto y0 = net.member_forward(0, data.inputs_tensor());
  for (std::size_t m = 1; m < cfg.members; ++m) {
    const auto ym = net.member_forward(m, data.inputs_tensor());
    for (std::size_t i = 0; i < y0.numel(); ++i) REQUIRE(ym.at(i) == y0.at(i));
  }
}

TEST_CASE("fit records one entry per epoch and is deterministic") {
  RngStream rng(7);
  const auto data = gen_two_moons(96, 0.1, rng);
  const auto cfg = small_config();
  auto a = ensemble_on(data, cfg, 3, 0.1), b = ensemble_on(data, cfg, 3, 0.1);
  const auto fa = fit(a, data, cfg), fb = fit(b, data, cfg);
  REQUIRE(fa.history.size() == 2);
  CHECK(fa.history[0].epoch == 1);
  CHECK(fa.history[1].epoch == 2);
  CHECK(fa.initial.epoch == 0);
  CHECK(fa.history == fb.history);
  CHECK(a.checksum() == b.checksum());
  for (const auto& p : monitor_policies()) CHECK(fa.history[1].policy_accuracy.count(p.name()) == 1);
  for (const auto& rec : fa.history) {
    CHECK(std::isfinite(rec.mean_loss));
    CHECK(rec.entropy_gap >= 0.0);
  }
  Dataset wrong = data;
  wrong.num_classes = 3;
  CHECK_THROWS_AS(fit(a, wrong, cfg), ShapeError);
}

TEST_CASE("pretraining separates blobs") {
  RngStream rng(8);
  const auto data = gen_blobs(200, rng);
  const auto res = pretrain_baseline(Architecture::mlp(2, {8}, 2), data, 10, 0.05, rng);
  CHECK(res.epoch_loss.size() == 10);
  CHECK(res.epoch_loss.back() < res.epoch_loss.front());
  CHECK(res.train_accuracy >= 0.99);
  CHECK_THROWS_AS(pretrain_baseline(Architecture::mlp(2, {8}, 3), data, 1, 0.05, rng), ShapeError);
}

TEST_CASE("per-sample opinions match the grouped forward across chunks") {
  RngStream rng(9);
  const auto net = fixture::random_ensemble(rng, 2, {4}, 2, 3, 1);
  const auto x = fixture::random_inputs(rng, {700, 2});
  const auto ops = sample_opinions(net, x);
  REQUIRE(ops.size() == 700);
  REQUIRE(ops[0].size() == 3);
  for (std::size_t i : {0u, 511u, 512u, 699u}) {
    const auto z = net.member_forward(2, ad::slice_rows(x, i, i + 1));
    const auto op = alpha_from_logits(z.data());
    for (std::size_t k = 0; k < 2; ++k) CHECK(ops[i][2].alpha[k] == doctest::Approx(op.alpha[k]).epsilon(1e-13));
  }
  const std::vector<int> y(700, 0);
  CHECK(member_accuracy(net, 0, x, y) >= 0.0);
}
