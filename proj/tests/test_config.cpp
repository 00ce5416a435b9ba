#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "udes/config.hpp"
#include "udes/errors.hpp"

using namespace udes;

namespace {

KvConfig kv_from_echo(const std::map<std::string, std::string>& echo) {
  std::string text;
  for (const auto& [k, v] : echo) text += k + " = " + v + "\n";
  return KvConfig::parse(text);
}

}  // namespace

TEST_CASE("kv parsing: comments, whitespace, blank lines") {
  const auto kv = KvConfig::parse("# header\n\n  a = 1  \nb=two # trailing\n\tc =  x y \n");
  CHECK(kv.values().size() == 3);
  CHECK(kv.get_string("a", "") == "1");
  CHECK(kv.get_string("b", "") == "two");
  CHECK(kv.get_string("c", "") == "x y");
  CHECK(kv.get_string("missing", "fb") == "fb");
}

TEST_CASE("kv parsing errors") {
  CHECK_THROWS_AS(KvConfig::parse("a = 1\na = 2\n"), FormatError);
  CHECK_THROWS_AS(KvConfig::parse("no equals sign\n"), FormatError);
  CHECK_THROWS_AS(KvConfig::parse(" = 3\n"), FormatError);
  CHECK_THROWS_AS(KvConfig::load("/nonexistent/dir/x.cfg"), FormatError);
}

TEST_CASE("typed getters") {
  const auto kv = KvConfig::parse("f = 8/255\nd = 0.25\nn = 12\nneg = -3\nb1 = yes\nb0 = false\nbad = maybe\nl = a, b,,c\nz = 1/0\n");
  CHECK(kv.get_double("f", 0) == 8.0 / 255.0);
  CHECK(kv.get_double("d", 0) == 0.25);
  CHECK(kv.get_double("absent", 1.5) == 1.5);
  CHECK(kv.get_size("n", 0) == 12);
  CHECK_THROWS_AS(kv.get_size("neg", 0), FormatError);
  CHECK_THROWS_AS(kv.get_size("d", 0), FormatError);
  CHECK(kv.get_bool("b1", false));
  CHECK_FALSE(kv.get_bool("b0", true));
  CHECK_THROWS_AS(kv.get_bool("bad", true), FormatError);
  CHECK(kv.get_list("l", {}) == std::vector<std::string>{"a", "b", "c"});
  CHECK_THROWS_AS(kv.get_double("z", 0), FormatError);
  CHECK_THROWS_AS(parse_real("abc"), FormatError);
  CHECK_THROWS_AS(parse_real("1.5x"), FormatError);
  CHECK(parse_real(" 3 / 4 ") == 0.75);
}

TEST_CASE("unused keys are tracked") {
  const auto kv = KvConfig::parse("a = 1\nb = 2\nc = 3\n");
  kv.get_string("a", "");
  kv.get_size("c", 0);
  CHECK(kv.unused_keys() == std::vector<std::string>{"b"});
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 8.0 / 255.0, 1e-300, -2.5, 0.0, 123456789.125}) {
    CHECK(parse_real(format_double(v)) == v);
  }
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("experiment defaults validate") {
  const ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.policies.size() == 5);
  CHECK(c.policies.front().name() == "uncertain-1");
}

TEST_CASE("experiment from kv") {
  const auto kv = KvConfig::parse(
      "seed = 7\nmembers = 3\nrank = 2\nepochs = 2\neps = 8/255, 0.1\nattacks = pgd, fgsm\n"
      "policies = uncertain-1, average\nmode = whitebox\nhidden = 16, 8\n");
  const auto c = ExperimentConfig::from_kv(kv);
  CHECK(c.seed == 7);
  CHECK(c.train.seed == 7);
  CHECK(c.train.members == 3);
  CHECK(c.train.rank == 2);
  CHECK(c.eps == std::vector<double>{8.0 / 255.0, 0.1});
  CHECK(c.attacks == std::vector<AttackFamily>{AttackFamily::pgd, AttackFamily::fgsm});
  CHECK(c.policies.size() == 2);
  CHECK(c.mode == EvalMode::whitebox);
  CHECK(c.hidden == std::vector<std::size_t>{16, 8});
}

TEST_CASE("experiment rejects bad documents") {
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("sed = 1\n")), FormatError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("dataset = mnist9\n")), FormatError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("hidden = 4, 0\n")), FormatError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("hidden = 2.5\n")), FormatError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("eps = -0.1\n")), DomainError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("attack_steps = 0\n")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("mode = greybox\n")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("dataset = idx\n")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("dataset = cifar10\n")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("diversity_normalization = weird\n")), FormatError);
  CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("diversity_bandwidth_mode = auto\n")), FormatError);
  CHECK_THROWS(ExperimentConfig::from_kv(KvConfig::parse("members = 0\n")));
}

TEST_CASE("attack spec per grid cell") {
  ExperimentConfig c;
  c.attack_steps = 10;
  const auto f = c.attack_spec(AttackFamily::fgsm, 0.1);
  CHECK(f.steps == 1);
  CHECK(f.eps == 0.1);
  const auto p = c.attack_spec(AttackFamily::pgd, 0.1);
  CHECK(p.steps == 10);
  CHECK(p.step_size == doctest::Approx(0.025).epsilon(1e-15));
  c.attack_step_size = 0.01;
  CHECK(c.attack_spec(AttackFamily::pgd, 0.1).step_size == 0.01);
  c.loss_target = LossTarget::dsc;
  CHECK(c.attack_spec(AttackFamily::pgd, 0.1).loss_target == LossTarget::dsc);
  CHECK(c.attack_spec(AttackFamily::cw, 0.1).loss_target == LossTarget::average);
}

TEST_CASE("echo round-trips through from_kv") {
  ExperimentConfig c;
  c.seed = 99;
  c.train.seed = 99;
  c.eps = {1.0 / 3.0, 0.2};
  c.train.gamma = 0.7;
  c.train.diversity.weight = 0.123;
  c.hidden = {5, 6, 7};
  c.mode = EvalMode::whitebox;
  const auto echo = c.echo();
  const auto back = ExperimentConfig::from_kv(kv_from_echo(echo));
  CHECK(back.echo() == echo);
  CHECK(back.eps == c.eps);
  CHECK(back.train.gamma == 0.7);
  CHECK(ExperimentConfig().echo().size() == echo.size());
  CHECK(echo.count("out_dir") == 0);
}

TEST_CASE("load from file") {
  const auto path = std::filesystem::temp_directory_path() / "udes_test_config.cfg";
  {
    std::ofstream os(path);
    os << "# tiny\nseed = 3\ntrain_samples = 64\n";
  }
  const auto c = ExperimentConfig::load(path.string());
  CHECK(c.seed == 3);
  CHECK(c.train_samples == 64);
  std::filesystem::remove(path);
}
