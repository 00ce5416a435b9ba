#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "udes/errors.hpp"

using namespace udes;

TEST_CASE("architecture validation") {
  CHECK_NOTHROW(Architecture::mlp(2, {8, 8}, 2));
  CHECK_THROWS_AS(Architecture::mlp(2, {8}, 1), ShapeError);
  CHECK_THROWS_AS(Architecture::image(1, 4, 4, {2}, 2, {}, 3), ShapeError);
  Architecture bad = Architecture::mlp(2, {4}, 2);
  bad.layers[1].in = 5;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  const auto img = Architecture::image(1, 4, 4, {3}, 3, {5}, 2);
  CHECK(img.is_image());
  CHECK(img.layers[1].in == 3 * 16);
}

TEST_CASE("member forward matches explicitly materialised weights on random nets") {
  RngStream rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 1 + rng.below(5), classes = 2 + rng.below(4);
    std::vector<std::size_t> hidden;
    for (std::size_t k = 0, n = rng.below(3); k < n; ++k) hidden.push_back(1 + rng.below(7));
    const std::size_t members = 1 + rng.below(4), rank = 1 + rng.below(3), batch = 1 + rng.below(6);
    const auto net = fixture::random_ensemble(rng, in, hidden, classes, members, rank);
    const auto x = fixture::random_inputs(rng, {batch, in});
    const std::vector<double> xv(x.data().begin(), x.data().end());
    const auto grouped = net.grouped_forward(x);
    for (std::size_t m = 0; m < members; ++m) {
      const auto y = net.member_forward(m, x);
      const auto ref = oracle::dense_member_forward(net, m, xv, batch);
      const auto yp = net.materialize_member(m).forward(x);
      for (std::size_t i = 0; i < ref.size(); ++i) {
        worst = std::max(worst, std::abs(y.at(i) - ref[i]));
        worst = std::max(worst, std::abs(yp.at(i) - ref[i]));
        REQUIRE(grouped.at(m * batch * classes + i) == y.at(i));
      }
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("image ensembles agree with their materialised members") {
  RngStream rng(8);
  const auto arch = Architecture::image(2, 5, 4, {3, 2}, 3, {6}, 3);
  auto net = init_from_pretrained(PlainNet::init(arch, rng), 3, 2, rng, 0.4);
  const auto x = fixture::random_inputs(rng, {4, 2, 5, 4});
  const auto grouped = net.grouped_forward(x);
  for (std::size_t m = 0; m < 3; ++m) {
    const auto y = net.member_forward(m, x);
    const auto ref = net.materialize_member(m).forward(x);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK(std::abs(y.at(i) - ref.at(i)) < 1e-9);
      CHECK(grouped.at(m * y.numel() + i) == y.at(i));
    }
  }
}

TEST_CASE("parameter count and groups") {
  RngStream rng(1);
  const auto net = fixture::random_ensemble(rng, 3, {5}, 4, 4, 2);
  CHECK(net.parameter_count() == EnsembleNet::expected_parameter_count(net.arch(), 4, 2));
  // layer 0: 15 + 4*2*(3+5) + 4*5; layer 1: 20 + 4*2*(5+4) + 4*4
  CHECK(net.parameter_count() == 15 + 64 + 20 + 20 + 72 + 16);
  std::size_t shared = 0;
  for (const auto& p : net.parameters())
    if (p.group == ParamGroup::shared) shared += p.tensor.numel();
  CHECK(shared == 35);
}

TEST_CASE("zero init scale reproduces the baseline in every member") {
  RngStream rng(5);
  const auto arch = Architecture::mlp(2, {6}, 3);
  const auto base = PlainNet::init(arch, rng);
  const auto net = init_from_pretrained(base, 3, 2, rng, 0.0);
  // rank 2 with all-ones factors doubles each weight.
  auto doubled = base.clone();
  for (auto& w : doubled.weights)
    for (double& v : w.mutable_data()) v *= 2.0;
  for (std::size_t m = 0; m < 3; ++m) {
    const auto a = net.materialize_member(m);
    for (std::size_t l = 0; l < a.weights.size(); ++l)
      for (std::size_t i = 0; i < a.weights[l].numel(); ++i) CHECK(a.weights[l].at(i) == doubled.weights[l].at(i));
  }
  const auto single = as_single_member(base, Head::softmax);
  const auto back = single.materialize_member(0);
  for (std::size_t l = 0; l < back.weights.size(); ++l)
    for (std::size_t i = 0; i < back.weights[l].numel(); ++i) CHECK(back.weights[l].at(i) == base.weights[l].at(i));
  CHECK(single.head() == Head::softmax);
}

TEST_CASE("checkpoints round-trip exactly") {
  RngStream rng(77);
  auto net = fixture::random_ensemble(rng, 2, {4, 3}, 2, 3, 2);
  net.set_head(Head::softmax);
  const auto text = checkpoint_to_string(net);
  const auto back = checkpoint_from_string(text);
  CHECK(back.checksum() == net.checksum());
  CHECK(back.head() == Head::softmax);
  CHECK(back.arch() == net.arch());
  CHECK(checkpoint_to_string(back) == text);

  const auto path = (std::filesystem::temp_directory_path() / "udes_ckpt_test.json").string();
  save_checkpoint(net, path);
  CHECK(load_checkpoint(path).checksum() == net.checksum());
  std::filesystem::remove(path);

  CHECK_THROWS_AS(checkpoint_from_string("not json"), FormatError);
  CHECK_THROWS_AS(checkpoint_from_string(R"({"format":"other"})"), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.json"), FormatError);
}

TEST_CASE("frozen and clone copies are independent") {
  RngStream rng(3);
  auto net = fixture::random_ensemble(rng, 2, {3}, 2, 2, 1);
  const auto sum0 = net.checksum();
  auto c = net.clone();
  auto f = net.frozen();
  c.layers()[0].r.mutable_data()[0] += 1.0;
  CHECK(net.checksum() == sum0);
  CHECK_FALSE(f.layers()[0].weight.requires_grad());
  CHECK(net.layers()[0].weight.requires_grad());
  CHECK(f.checksum() == sum0);
}

TEST_CASE("forward input checks") {
  RngStream rng(4);
  const auto net = fixture::random_ensemble(rng, 3, {}, 2, 2, 1);
  CHECK_THROWS_AS(net.grouped_forward(Tensor::zeros({2, 4})), ShapeError);
  CHECK_THROWS_AS(net.member_forward(2, Tensor::zeros({2, 3})), ContractError);
  CHECK_THROWS_AS(net.materialize_member(5), ContractError);
}

TEST_CASE("gradients reach shared weights and factors") {
  RngStream rng(6);
  auto net = fixture::random_ensemble(rng, 2, {3}, 2, 2, 2);
  const auto x = fixture::random_inputs(rng, {4, 2});
  backward(ad::sum(ad::softplus(net.grouped_forward(x))));
  for (const auto& p : net.parameters()) {
    CAPTURE(p.name);
    REQUIRE(p.tensor.has_grad());
    double n = 0.0;
    for (double g : p.tensor.grad()) n += std::abs(g);
    CHECK(n > 0.0);
  }
}
