#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "udes/attacks.hpp"
#include "udes/fusion.hpp"
#include "udes/training.hpp"

namespace udes {

/// Flat `key = value` document. '#' starts a comment; blank lines are ignored.
class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  /// Accepts plain decimals and fractions such as "8/255".
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated list; empty items are dropped.
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;

  /// Keys never read through a getter.
  std::vector<std::string> unused_keys() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

double parse_real(const std::string& text);
std::vector<std::string> split_list(const std::string& text);

enum class DatasetKind { two_moons, quadrants, idx, cifar10 };
enum class EvalMode { transfer, whitebox };

struct ExperimentConfig {
  std::uint64_t seed = 0;

  DatasetKind dataset = DatasetKind::two_moons;
  std::size_t train_samples = 4000;
  std::size_t test_samples = 2000;
  double noise = 0.1;
  std::size_t image_side = 8;
  std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;
  std::vector<std::string> cifar_train, cifar_test;

  std::vector<std::size_t> hidden{32, 32};
  std::vector<std::size_t> conv_channels{8};
  std::size_t kernel = 3;

  std::size_t pretrain_epochs = 40;
  double pretrain_lr = 0.05;
  double pretrain_momentum = 0.9;
  std::size_t pretrain_batch = 32;

  TrainConfig train;

  std::vector<AttackFamily> attacks{AttackFamily::fgsm, AttackFamily::pgd, AttackFamily::mim, AttackFamily::cw};
  std::vector<double> eps{8.0 / 255.0, 16.0 / 255.0};
  std::size_t attack_steps = 20;
  /// 0 selects 2.5 * eps / steps.
  double attack_step_size = 0.0;
  std::vector<PolicySpec> policies;

  EvalMode mode = EvalMode::transfer;
  LossTarget loss_target = LossTarget::average;
  std::string surrogate;
  std::string out_dir = "out";
  bool per_sample_log = false;

  ExperimentConfig();
  static ExperimentConfig from_kv(const KvConfig& kv);
  static ExperimentConfig load(const std::string& path);
  void validate() const;
  /// Attack spec for one grid cell.
  AttackSpec attack_spec(AttackFamily family, double eps) const;
  /// Key-value echo of every field except out_dir, in a fixed order, so
  /// reports do not depend on where they are written.
  std::map<std::string, std::string> echo() const;
};

TrainConfig train_config_from_kv(const KvConfig& kv, TrainConfig base = {});
std::string dataset_kind_name(DatasetKind k);
std::string eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

}  // namespace udes
