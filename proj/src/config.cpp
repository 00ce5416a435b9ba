#include "udes/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "udes/errors.hpp"

namespace udes {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_real(const std::string& text) {
  const std::string t = trim(text);
  const auto slash = t.find('/');
  auto one = [&](const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError("config: '" + text + "' is not a number");
    return v;
  };
  if (slash == std::string::npos) return one(t);
  const double den = one(trim(t.substr(slash + 1)));
  if (den == 0.0) throw FormatError("config: zero denominator in '" + text + "'");
  return one(trim(t.substr(0, slash))) / den;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// KvConfig

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key)) throw FormatError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
  used_.insert(key);
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  used_.insert(key);
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_real(it->second);
}

std::size_t KvConfig::get_size(const std::string& key, std::size_t fallback) const {
  used_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::size_t v = 0;
  const auto& s = it->second;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw FormatError("config: " + key + " expects a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  return static_cast<std::uint64_t>(get_size(key, static_cast<std::size_t>(fallback)));
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  used_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
  if (it->second == "false" || it->second == "0" || it->second == "no") return false;
  throw FormatError("config: " + key + " expects a boolean, got '" + it->second + "'");
}

std::vector<std::string> KvConfig::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
  used_.insert(key);
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : split_list(it->second);
}

std::vector<std::string> KvConfig::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// TrainConfig mapping

TrainConfig train_config_from_kv(const KvConfig& kv, TrainConfig c) {
  c.members = kv.get_size("members", c.members);
  c.rank = kv.get_size("rank", c.rank);
  c.lr_shared = kv.get_double("lr_shared", c.lr_shared);
  c.lr_factors = kv.get_double("lr_factors", c.lr_factors);
  c.epochs = kv.get_size("epochs", c.epochs);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.gamma = kv.get_double("gamma", c.gamma);
  c.adv.family = parse_attack_family(kv.get_string("adv_attack", attack_family_name(c.adv.family)));
  c.adv.eps = kv.get_double("adv_eps", c.adv.eps);
  c.adv.steps = kv.get_size("adv_steps", c.adv.steps);
  c.adv.step_size = kv.get_double("adv_step_size", c.adv.step_size);
  c.diversity.weight = kv.get_double("diversity_weight", c.diversity.weight);
  const auto mode = kv.get_string("diversity_bandwidth_mode", c.diversity.bandwidth_mode == BandwidthMode::fixed ? "fixed" : "median");
  if (mode != "fixed" && mode != "median") throw FormatError("config: diversity_bandwidth_mode must be fixed or median");
  c.diversity.bandwidth_mode = mode == "fixed" ? BandwidthMode::fixed : BandwidthMode::median;
  c.diversity.bandwidth = kv.get_double("diversity_bandwidth", c.diversity.bandwidth);
  const auto norm = kv.get_string("diversity_normalization", c.diversity.normalization == RepulsionNorm::svgd ? "svgd" : "plain");
  if (norm != "svgd" && norm != "plain") throw FormatError("config: diversity_normalization must be svgd or plain");
  c.diversity.normalization = norm == "svgd" ? RepulsionNorm::svgd : RepulsionNorm::plain;
  c.kl_weight = kv.get_double("kl_weight", c.kl_weight);
  c.kl_warmup = kv.get_bool("kl_warmup", c.kl_warmup);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.init_scale = kv.get_double("init_scale", c.init_scale);
  c.monitor_samples = kv.get_size("monitor_samples", c.monitor_samples);
  c.seed = kv.get_u64("seed", c.seed);
  return c;
}

std::string dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::quadrants: return "quadrants";
    case DatasetKind::idx: return "idx";
    case DatasetKind::cifar10: return "cifar10";
  }
  return "?";
}

std::string eval_mode_name(EvalMode m) { return m == EvalMode::transfer ? "transfer" : "whitebox"; }

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "transfer") return EvalMode::transfer;
  if (s == "whitebox" || s == "white-box") return EvalMode::whitebox;
  throw ContractError("unknown evaluation mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig::ExperimentConfig() {
  for (const char* p : {"uncertain-1", "uncertain-2", "stochastic-2", "average", "dsc"}) policies.push_back(PolicySpec::parse(p));
}

ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
  ExperimentConfig c;
  c.seed = kv.get_u64("seed", c.seed);
  const auto ds = kv.get_string("dataset", dataset_kind_name(c.dataset));
  if (ds == "two_moons") c.dataset = DatasetKind::two_moons;
  else if (ds == "quadrants") c.dataset = DatasetKind::quadrants;
  else if (ds == "idx") c.dataset = DatasetKind::idx;
  else if (ds == "cifar10") c.dataset = DatasetKind::cifar10;
  else throw FormatError("config: unknown dataset '" + ds + "'");
  c.train_samples = kv.get_size("train_samples", c.train_samples);
  c.test_samples = kv.get_size("test_samples", c.test_samples);
  c.noise = kv.get_double("noise", c.noise);
  c.image_side = kv.get_size("image_side", c.image_side);
  c.idx_train_images = kv.get_string("idx_train_images", c.idx_train_images);
  c.idx_train_labels = kv.get_string("idx_train_labels", c.idx_train_labels);
  c.idx_test_images = kv.get_string("idx_test_images", c.idx_test_images);
  c.idx_test_labels = kv.get_string("idx_test_labels", c.idx_test_labels);
  c.cifar_train = kv.get_list("cifar_train", c.cifar_train);
  c.cifar_test = kv.get_list("cifar_test", c.cifar_test);

  auto sizes = [&](const std::string& key, const std::vector<std::size_t>& fallback) {
    if (!kv.has(key)) return fallback;
    std::vector<std::size_t> out;
    for (const auto& s : kv.get_list(key, {})) {
      const double v = parse_real(s);
      if (v < 1 || v != std::floor(v)) throw FormatError("config: " + key + " expects positive integers");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  };
  c.hidden = sizes("hidden", c.hidden);
  c.conv_channels = sizes("conv_channels", c.conv_channels);
  c.kernel = kv.get_size("kernel", c.kernel);

  c.pretrain_epochs = kv.get_size("pretrain_epochs", c.pretrain_epochs);
  c.pretrain_lr = kv.get_double("pretrain_lr", c.pretrain_lr);
  c.pretrain_momentum = kv.get_double("pretrain_momentum", c.pretrain_momentum);
  c.pretrain_batch = kv.get_size("pretrain_batch", c.pretrain_batch);

  TrainConfig tc = c.train;
  tc.seed = c.seed;
  c.train = train_config_from_kv(kv, tc);

  if (kv.has("attacks")) {
    c.attacks.clear();
    for (const auto& a : kv.get_list("attacks", {})) c.attacks.push_back(parse_attack_family(a));
  }
  if (kv.has("eps")) {
    c.eps.clear();
    for (const auto& e : kv.get_list("eps", {})) c.eps.push_back(parse_real(e));
  }
  c.attack_steps = kv.get_size("attack_steps", c.attack_steps);
  c.attack_step_size = kv.get_double("attack_step_size", c.attack_step_size);
  if (kv.has("policies")) {
    c.policies.clear();
    for (const auto& p : kv.get_list("policies", {})) c.policies.push_back(PolicySpec::parse(p));
  }
  c.mode = parse_eval_mode(kv.get_string("mode", eval_mode_name(c.mode)));
  c.loss_target = parse_loss_target(kv.get_string("loss_target", loss_target_name(c.loss_target)));
  c.surrogate = kv.get_string("surrogate", c.surrogate);
  c.out_dir = kv.get_string("out_dir", c.out_dir);
  c.per_sample_log = kv.get_bool("per_sample_log", c.per_sample_log);

  if (const auto unused = kv.unused_keys(); !unused.empty()) {
    std::string all;
    for (const auto& k : unused) all += (all.empty() ? "" : ", ") + k;
    throw FormatError("config: unknown keys: " + all);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return from_kv(KvConfig::load(path)); }

void ExperimentConfig::validate() const {
  if (policies.empty()) throw ContractError("experiment: at least one policy is required");
  if (train_samples < 2 || test_samples < 1) throw ContractError("experiment: dataset sizes too small");
  for (double e : eps) {
    if (!std::isfinite(e) || e < 0.0) throw DomainError("experiment: eps values must be finite and non-negative");
  }
  if (attack_steps < 1) throw ContractError("experiment: attack_steps must be at least 1");
  if (!(attack_step_size >= 0.0)) throw DomainError("experiment: attack_step_size must be non-negative");
  if (!(pretrain_lr > 0.0)) throw DomainError("experiment: pretrain_lr must be positive");
  if (dataset == DatasetKind::idx &&
      (idx_train_images.empty() || idx_train_labels.empty() || idx_test_images.empty() || idx_test_labels.empty())) {
    throw ContractError("experiment: idx dataset needs idx_train_images, idx_train_labels, idx_test_images, idx_test_labels");
  }
  if (dataset == DatasetKind::cifar10 && (cifar_train.empty() || cifar_test.empty())) {
    throw ContractError("experiment: cifar10 dataset needs cifar_train and cifar_test");
  }
  train.validate();
}

AttackSpec ExperimentConfig::attack_spec(AttackFamily family, double e) const {
  AttackSpec a;
  a.family = family;
  a.eps = e;
  a.steps = family == AttackFamily::fgsm ? 1 : attack_steps;
  a.step_size = attack_step_size > 0.0 ? attack_step_size : 2.5 * e / static_cast<double>(attack_steps);
  a.loss_target = loss_target;
  if (a.loss_target == LossTarget::dsc && family == AttackFamily::cw) a.loss_target = LossTarget::average;
  return a;
}

std::map<std::string, std::string> ExperimentConfig::echo() const {
  std::map<std::string, std::string> m;
  auto num = [](std::size_t v) { return std::to_string(v); };
  auto sizes = [&](const std::vector<std::size_t>& v) { return join<std::size_t>(v, [&](const std::size_t& x) { return num(x); }); };
  m["seed"] = std::to_string(seed);
  m["dataset"] = dataset_kind_name(dataset);
  m["train_samples"] = num(train_samples);
  m["test_samples"] = num(test_samples);
  m["noise"] = format_double(noise);
  m["image_side"] = num(image_side);
  m["idx_train_images"] = idx_train_images;
  m["idx_train_labels"] = idx_train_labels;
  m["idx_test_images"] = idx_test_images;
  m["idx_test_labels"] = idx_test_labels;
  m["cifar_train"] = join<std::string>(cifar_train, [](const std::string& s) { return s; });
  m["cifar_test"] = join<std::string>(cifar_test, [](const std::string& s) { return s; });
  m["hidden"] = sizes(hidden);
  m["conv_channels"] = sizes(conv_channels);
  m["kernel"] = num(kernel);
  m["pretrain_epochs"] = num(pretrain_epochs);
  m["pretrain_lr"] = format_double(pretrain_lr);
  m["pretrain_momentum"] = format_double(pretrain_momentum);
  m["pretrain_batch"] = num(pretrain_batch);
  m["members"] = num(train.members);
  m["rank"] = num(train.rank);
  m["lr_shared"] = format_double(train.lr_shared);
  m["lr_factors"] = format_double(train.lr_factors);
  m["epochs"] = num(train.epochs);
  m["batch_size"] = num(train.batch_size);
  m["gamma"] = format_double(train.gamma);
  m["adv_attack"] = attack_family_name(train.adv.family);
  m["adv_eps"] = format_double(train.adv.eps);
  m["adv_steps"] = num(train.adv.steps);
  m["adv_step_size"] = format_double(train.adv.step_size);
  m["diversity_weight"] = format_double(train.diversity.weight);
  m["diversity_bandwidth_mode"] = train.diversity.bandwidth_mode == BandwidthMode::fixed ? "fixed" : "median";
  m["diversity_bandwidth"] = format_double(train.diversity.bandwidth);
  m["diversity_normalization"] = train.diversity.normalization == RepulsionNorm::svgd ? "svgd" : "plain";
  m["kl_weight"] = format_double(train.kl_weight);
  m["kl_warmup"] = train.kl_warmup ? "true" : "false";
  m["momentum"] = format_double(train.momentum);
  m["init_scale"] = format_double(train.init_scale);
  m["monitor_samples"] = num(train.monitor_samples);
  m["attacks"] = join<AttackFamily>(attacks, [](const AttackFamily& f) { return attack_family_name(f); });
  m["eps"] = join<double>(eps, [](const double& e) { return format_double(e); });
  m["attack_steps"] = num(attack_steps);
  m["attack_step_size"] = format_double(attack_step_size);
  m["policies"] = join<PolicySpec>(policies, [](const PolicySpec& p) { return p.name(); });
  m["mode"] = eval_mode_name(mode);
  m["loss_target"] = loss_target_name(loss_target);
  m["surrogate"] = surrogate;
  m["per_sample_log"] = per_sample_log ? "true" : "false";
  return m;
}

}  // namespace udes
