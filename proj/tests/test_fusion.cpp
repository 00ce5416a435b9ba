#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "udes/errors.hpp"
#include "udes/fusion.hpp"

using namespace udes;

namespace {

SubjectiveOpinion random_opinion(oracle::DirichletSampler& s, std::size_t n) {
  const auto w = s.draw(std::vector<double>(n + 1, 1.0));
  SubjectiveOpinion o;
  o.belief.assign(w.begin(), w.begin() + static_cast<long>(n));
  o.uncertainty = w[n];
  return o;
}

double max_diff(const SubjectiveOpinion& a, const SubjectiveOpinion& b) {
  double d = std::abs(a.uncertainty - b.uncertainty);
  for (std::size_t k = 0; k < a.classes(); ++k) d = std::max(d, std::abs(a.belief[k] - b.belief[k]));
  return d;
}

}  // namespace

TEST_CASE("dirichlet and subjective opinions convert both ways") {
  const auto d = DirichletOpinion::from_alpha({3.0, 1.0, 6.0});
  const auto o = SubjectiveOpinion::from_dirichlet(d);
  CHECK(o.uncertainty == doctest::Approx(0.3));
  CHECK(o.belief[0] == doctest::Approx(0.2));
  CHECK(o.belief[1] == 0.0);
  const auto back = o.to_dirichlet();
  for (std::size_t k = 0; k < 3; ++k) CHECK(back.alpha[k] == doctest::Approx(d.alpha[k]).epsilon(1e-14));
  const auto p = o.probabilities();
  const auto pm = predictive_mean(d);
  for (std::size_t k = 0; k < 3; ++k) CHECK(p[k] == doctest::Approx(pm[k]).epsilon(1e-14));
  CHECK_THROWS_AS((SubjectiveOpinion{{1.0, 0.0}, 0.0}.to_dirichlet()), DomainError);
}

TEST_CASE("DSC algebra over random pairs") {
  oracle::DirichletSampler s(99);
  double worst_comm = 0.0, worst_neutral = 0.0;
  int u_violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + i % 5;
    const auto a = random_opinion(s, n), b = random_opinion(s, n);
    const auto ab = dsc_combine(a, b), ba = dsc_combine(b, a);
    worst_comm = std::max(worst_comm, max_diff(ab, ba));
    worst_neutral = std::max(worst_neutral, max_diff(dsc_combine(a, SubjectiveOpinion::vacuous(n)), a));
    u_violations += ab.uncertainty > std::min(a.uncertainty, b.uncertainty);
    double total = ab.uncertainty;
    for (double v : ab.belief) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-13));
  }
  CHECK(worst_comm < 1e-12);
  CHECK(worst_neutral < 1e-12);
  CHECK(u_violations == 0);
}

TEST_CASE("three-member fold matches the mass-function oracle") {
  oracle::DirichletSampler s(5);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + i % 4;
    std::vector<SubjectiveOpinion> ops;
    auto mf = oracle::MassFunction{};
    for (int m = 0; m < 3; ++m) {
      ops.push_back(random_opinion(s, n));
      const auto f = oracle::MassFunction::from_opinion(ops.back().belief, ops.back().uncertainty);
      mf = m == 0 ? f : oracle::MassFunction::combine(mf, f);
    }
    const auto fused = dsc_fuse_all(ops);
    for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(fused.belief[k] - mf.mass(1u << k)));
    worst = std::max(worst, std::abs(fused.uncertainty - mf.mass((1u << n) - 1u)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("total conflict and frame mismatch are rejected") {
  const SubjectiveOpinion a{{1.0, 0.0}, 0.0}, b{{0.0, 1.0}, 0.0};
  CHECK_THROWS_AS(dsc_combine(a, b), FusionError);
  CHECK_THROWS_AS(dsc_combine(a, SubjectiveOpinion::vacuous(3)), ShapeError);
  CHECK_THROWS_AS(dsc_fuse_all(std::vector<SubjectiveOpinion>{}), ContractError);
}

TEST_CASE("differentiable fusion agrees with the pairwise fold") {
  RngStream rng(12);
  const std::size_t members = 3, batch = 4, n = 3;
  std::vector<double> a(members * batch * n);
  for (double& v : a) v = rng.uniform(1.0, 8.0);
  const auto alpha = Tensor::from({members * batch, n}, a, true);
  const auto fused = dsc_fused_probabilities(alpha, batch);
  CHECK(fused.shape() == Shape{batch, n});
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<SubjectiveOpinion> ops;
    for (std::size_t m = 0; m < members; ++m) {
      const auto row = (m * batch + b) * n;
      ops.push_back(SubjectiveOpinion::from_dirichlet(
          DirichletOpinion::from_alpha(std::vector<double>(a.begin() + row, a.begin() + row + n))));
    }
    const auto ref = dsc_fuse_all(ops).probabilities();
    for (std::size_t k = 0; k < n; ++k) CHECK(fused.at(b * n + k) == doctest::Approx(ref[k]).epsilon(1e-12));
  }
  CHECK(finite_diff_check(
            [&](const Tensor& t) { return ad::sum(ad::log(dsc_fused_probabilities(t, batch))); }, alpha) < 1e-4);
  CHECK_THROWS_AS(dsc_fused_probabilities(alpha, 5), ShapeError);
}

TEST_CASE("policy names parse and print") {
  for (const std::string s : {"uncertain-1", "uncertain-2", "stochastic-2", "average", "dsc", "uncertain-3+dsc"})
    CHECK(PolicySpec::parse(s).name() == s);
  CHECK(PolicySpec::parse("uncertain-2+mean").name() == "uncertain-2");
  for (const std::string s : {"uncertain", "uncertain-0", "uncertain-x", "greedy-1", "uncertain-1+max"})
    CHECK_THROWS_AS(PolicySpec::parse(s), ContractError);
}

TEST_CASE("member selection") {
  RngStream rng(0);
  const std::vector<double> u{0.5, -1.0, 0.5, -1.0};
  CHECK(select_members(u, PolicySpec::parse("uncertain-1"), rng) == std::vector<std::size_t>{1});
  CHECK(select_members(u, PolicySpec::parse("uncertain-3"), rng) == std::vector<std::size_t>{1, 3, 0});
  CHECK(select_members(u, PolicySpec::parse("average"), rng).size() == 4);
  CHECK_THROWS_AS(select_members(u, PolicySpec::parse("uncertain-5"), rng), ContractError);
  // stochastic-2 draws distinct pairs, each member about equally often.
  std::map<std::size_t, int> counts;
  for (int i = 0; i < 8000; ++i) {
    const auto sel = select_members(u, PolicySpec::parse("stochastic-2"), rng);
    REQUIRE(sel.size() == 2);
    REQUIRE(sel[0] != sel[1]);
    for (auto m : sel) ++counts[m];
  }
  for (const auto& [m, c] : counts) CHECK(std::abs(c - 4000) < 250);
}

TEST_CASE("policy predictions") {
  RngStream rng(1);
  // Member 0 confident in class 1, member 1 vague leaning to class 0.
  const std::vector<DirichletOpinion> members{DirichletOpinion::from_alpha({1.0, 30.0}),
                                              DirichletOpinion::from_alpha({2.2, 1.0}),
                                              DirichletOpinion::from_alpha({2.0, 1.1})};
  const auto u1 = policy_predict(members, PolicySpec::parse("uncertain-1"), rng);
  CHECK(u1.selected == std::vector<std::size_t>{0});
  CHECK(u1.predicted == 1);
  CHECK(u1.uncertainties[0] == dirichlet_entropy(members[0]));
  const auto avg = policy_predict(members, PolicySpec::parse("average"), rng);
  double s = 0.0;
  for (double v : avg.fused) s += v;
  CHECK(s == doctest::Approx(1.0));
  const auto dsc = policy_predict(members, PolicySpec::parse("dsc"), rng);
  std::vector<SubjectiveOpinion> ops;
  for (const auto& m : members) ops.push_back(SubjectiveOpinion::from_dirichlet(m));
  CHECK(dsc.fused == dsc_fuse_all(ops).probabilities());
  CHECK_THROWS_AS(policy_predict(std::vector<DirichletOpinion>{}, PolicySpec::parse("average"), rng), ContractError);
  CHECK(argmax(std::vector<double>{0.2, 0.5, 0.5}) == 1);
}
