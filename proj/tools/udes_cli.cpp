#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "udes/errors.hpp"
#include "udes/harness.hpp"

namespace {

using namespace udes;

struct Common {
  std::string config;
  std::string out_dir;
  std::string attacks;
  std::string eps;
  std::size_t steps = 0;
  double step_size = 0.0;
  std::string loss_target;
  std::string mode;
  std::string surrogate;
  std::string seed;
};

void add_common(CLI::App* app, Common& c, bool attack_flags) {
  app->add_option("--config", c.config, "flat key = value experiment config");
  app->add_option("--seed", c.seed, "override the master seed");
  if (!attack_flags) return;
  app->add_option("--attack", c.attacks, "attack families, comma separated (fgsm,pgd,mim,cw,dim,tim)");
  app->add_option("--eps", c.eps, "budgets, comma separated; fractions such as 8/255 accepted");
  app->add_option("--steps", c.steps, "attack iterations");
  app->add_option("--step-size", c.step_size, "attack step size (0 = 2.5 * eps / steps)");
  app->add_option("--loss-target", c.loss_target, "member, avg or dsc");
  app->add_option("--mode", c.mode, "transfer or whitebox");
  app->add_option("--surrogate", c.surrogate, "surrogate checkpoint (transfer mode)");
}

ExperimentConfig load_config(const Common& c) {
  KvConfig kv = c.config.empty() ? KvConfig{} : KvConfig::load(c.config);
  if (!c.seed.empty()) kv.set("seed", c.seed);
  if (!c.attacks.empty()) kv.set("attacks", c.attacks);
  if (!c.eps.empty()) kv.set("eps", c.eps);
  if (c.steps) kv.set("attack_steps", std::to_string(c.steps));
  if (c.step_size > 0.0) kv.set("attack_step_size", format_double(c.step_size));
  if (!c.loss_target.empty()) kv.set("loss_target", c.loss_target);
  if (!c.mode.empty()) kv.set("mode", c.mode);
  if (!c.surrogate.empty()) kv.set("surrogate", c.surrogate);
  if (!c.out_dir.empty()) kv.set("out_dir", c.out_dir);
  return ExperimentConfig::from_kv(kv);
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os << text;
}

int report_checks(const std::vector<SelfCheck>& checks) {
  int failed = 0;
  for (const auto& c : checks) {
    if (c.passed) continue;
    ++failed;
    std::cerr << "self-check failed: " << c.name << " (" << c.detail << ")\n";
  }
  return failed ? 1 : 0;
}

std::optional<EnsembleNet> load_surrogate(const ExperimentConfig& cfg) {
  if (cfg.mode != EvalMode::transfer) return std::nullopt;
  if (cfg.surrogate.empty()) throw ContractError("transfer mode needs --surrogate or a surrogate key in the config");
  return load_checkpoint(cfg.surrogate);
}

int cmd_pretrain(const Common& c, const std::string& out, bool surrogate) {
  const auto cfg = load_config(c);
  const auto data = make_data(cfg);
  const auto res = pretrain_for(cfg, data, surrogate);
  save_checkpoint(as_single_member(res.net, Head::softmax), out);
  std::printf("pretrained %s: train accuracy %s, final loss %s -> %s\n", surrogate ? "surrogate" : "baseline",
              format_double(res.train_accuracy).c_str(),
              res.epoch_loss.empty() ? "n/a" : format_double(res.epoch_loss.back()).c_str(), out.c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& baseline_path, const std::string& out) {
  const auto cfg = load_config(c);
  const auto data = make_data(cfg);
  const EnsembleNet baseline = load_checkpoint(baseline_path);
  if (baseline.members() != 1) throw ContractError("train: baseline checkpoint must hold a single member");
  EnsembleNet net = init_victim(cfg, baseline.materialize_member(0));
  const auto fr = fit(net, data.train, cfg.train);
  save_checkpoint(net, out);
  if (!c.out_dir.empty()) {
    write_text((std::filesystem::path(c.out_dir) / "history.json").string(), history_to_json(fr).dump(2) + "\n");
  }
  const auto& last = fr.history.empty() ? fr.initial : fr.history.back();
  std::printf("trained %zu epochs: uncertain-1 accuracy %s, entropy gap %s -> %s\n", fr.history.size(),
              format_double(last.policy_accuracy.at("uncertain-1")).c_str(), format_double(last.entropy_gap).c_str(),
              out.c_str());
  return report_checks(history_checks(fr, cfg.train));
}

int cmd_attack(const Common& c, const std::string& model_path, const std::string& out) {
  const auto cfg = load_config(c);
  if (cfg.attacks.size() != 1 || cfg.eps.size() != 1) throw ContractError("attack: give exactly one --attack and one --eps");
  const auto data = make_data(cfg);
  const EnsembleNet model = load_checkpoint(model_path);
  const AttackSpec spec = cfg.attack_spec(cfg.attacks[0], cfg.eps[0]);
  RngStream rng = RngStream(cfg.seed).split(0xa77ac4);
  const Tensor x = data.test.inputs_tensor();
  const Tensor xa = run_attack(model, x, data.test.labels, spec, rng);
  Dataset adv = data.test;
  adv.inputs.assign(xa.data().begin(), xa.data().end());
  save_dataset(adv, out);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(xa.data()[i] - x.data()[i]));
  std::printf("%s eps=%s on %zu samples: max |x'-x| = %s -> %s\n", spec.family_name().c_str(),
              format_double(spec.eps).c_str(), adv.size(), format_double(worst).c_str(), out.c_str());
  return report_checks({{"eps-ball", worst <= spec.eps, format_double(worst)}});
}

int cmd_eval(const Common& c, const std::string& victim_path) {
  const auto cfg = load_config(c);
  const auto data = make_data(cfg);
  const EnsembleNet victim = load_checkpoint(victim_path);
  const auto surrogate = load_surrogate(cfg);
  const auto eval = run_attack_eval(victim, data.test, cfg, surrogate ? &*surrogate : nullptr);
  const auto paths = emit_report(eval, cfg, cfg.out_dir);
  std::printf("%s", metrics_csv(eval.table).c_str());
  std::printf("wrote %s and %s\n", paths.csv.c_str(), paths.json.c_str());
  return report_checks(eval.checks);
}

int cmd_dynamics(const Common& c, const std::string& victim_path) {
  const auto cfg = load_config(c);
  const auto data = make_data(cfg);
  const EnsembleNet victim = load_checkpoint(victim_path);
  const auto surrogate = load_surrogate(cfg);
  const auto hists = run_dynamics_report(victim, data.test, cfg, surrogate ? &*surrogate : nullptr);
  nlohmann::json j{{"format", "udes-selection"}, {"seed", cfg.seed}, {"histograms", histograms_to_json(hists)}};
  nlohmann::json tv = nlohmann::json::array();
  for (const auto& h : hists) tv.push_back({{"attack", h.attack}, {"eps", h.eps}, {"tv_vs_benign", total_variation(h, hists[0])}});
  j["total_variation"] = tv;
  const auto path = (std::filesystem::path(cfg.out_dir) / "selection.json").string();
  write_text(path, j.dump(2) + "\n");
  std::vector<SelfCheck> checks;
  for (const auto& h : hists) {
    std::printf("%-6s eps=%-10s counts:", h.attack.c_str(), format_double(h.eps).c_str());
    for (auto n : h.counts) std::printf(" %zu", n);
    std::printf("  tv=%s\n", format_double(total_variation(h, hists[0])).c_str());
    checks.push_back({"histogram-total " + h.attack, h.total() == data.test.size(), std::to_string(h.total())});
  }
  std::printf("wrote %s\n", path.c_str());
  return report_checks(checks);
}

int cmd_report(const Common& c) {
  const auto cfg = load_config(c);
  const auto r = run_pipeline(cfg);
  const auto paths = emit_report(r.eval, cfg, cfg.out_dir, r.fit);
  std::printf("%s", metrics_csv(r.eval.table).c_str());
  std::printf("wrote %s and %s\n", paths.csv.c_str(), paths.json.c_str());
  return report_checks(r.eval.checks);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-driven dynamic ensemble selection: training and adversarial evaluation"};
  app.require_subcommand(1);
  Common common;
  std::string out, baseline, model, victim;
  bool surrogate_role = false;

  auto* pretrain = app.add_subcommand("pretrain", "train a softmax baseline (or surrogate) network");
  add_common(pretrain, common, false);
  pretrain->add_option("--out", out, "checkpoint path")->required();
  pretrain->add_flag("--as-surrogate", surrogate_role, "use the independent surrogate seed stream");

  auto* train = app.add_subcommand("train", "fine-tune the evidential ensemble from a baseline checkpoint");
  add_common(train, common, false);
  train->add_option("--baseline", baseline, "baseline checkpoint")->required();
  train->add_option("--out", out, "ensemble checkpoint path")->required();
  train->add_option("--out-dir", common.out_dir, "directory for history.json");

  auto* attack = app.add_subcommand("attack", "craft an adversarial copy of the test set");
  add_common(attack, common, true);
  attack->add_option("--model", model, "checkpoint to attack")->required();
  attack->add_option("--out", out, "dataset JSON path")->required();

  auto* eval = app.add_subcommand("eval", "policy x attack x eps accuracy and Proportion table");
  add_common(eval, common, true);
  eval->add_option("--victim", victim, "ensemble checkpoint")->required();
  eval->add_option("--out-dir", common.out_dir, "report directory");

  auto* dynamics = app.add_subcommand("dynamics", "argmin-entropy selection histograms");
  add_common(dynamics, common, true);
  dynamics->add_option("--victim", victim, "ensemble checkpoint")->required();
  dynamics->add_option("--out-dir", common.out_dir, "report directory");

  auto* report = app.add_subcommand("report", "end-to-end run: pretrain, train, evaluate, write reports");
  add_common(report, common, true);
  report->add_option("--out-dir", common.out_dir, "report directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (pretrain->parsed()) return cmd_pretrain(common, out, surrogate_role);
    if (train->parsed()) return cmd_train(common, baseline, out);
    if (attack->parsed()) return cmd_attack(common, model, out);
    if (eval->parsed()) return cmd_eval(common, victim);
    if (dynamics->parsed()) return cmd_dynamics(common, victim);
    if (report->parsed()) return cmd_report(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
