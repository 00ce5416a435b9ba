#include "udes/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "udes/errors.hpp"

namespace udes {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainDataStream = 10;
constexpr std::uint64_t kTestDataStream = 11;
constexpr std::uint64_t kBaselineStream = 20;
constexpr std::uint64_t kSurrogateStream = 21;
constexpr std::uint64_t kVictimInitStream = 30;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Dataset take(const Dataset& d, std::size_t n, RngStream rng) {
  return n >= d.size() ? d : d.sample(n, rng);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os << text;
  if (!os) throw FormatError("failed writing " + path);
}

void check_input_shape(const EnsembleNet& net, const Dataset& data, const char* who) {
  if (net.arch().input_shape != data.sample_shape || net.num_classes() != data.num_classes) {
    throw ShapeError(std::string(who) + " checkpoint expects inputs " + shape_str(net.arch().input_shape) + " with " +
                     std::to_string(net.num_classes()) + " classes, data has " + shape_str(data.sample_shape) +
                     " with " + std::to_string(data.num_classes));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// data and architecture

DataSplits make_data(const ExperimentConfig& cfg) {
  const RngStream root(cfg.seed);
  RngStream tr = root.split(kTrainDataStream), te = root.split(kTestDataStream);
  DataSplits d;
  switch (cfg.dataset) {
    case DatasetKind::two_moons:
      d.train = gen_two_moons(cfg.train_samples, cfg.noise, tr);
      d.test = gen_two_moons(cfg.test_samples, cfg.noise, te);
      break;
    case DatasetKind::quadrants:
      d.train = gen_quadrant_images(cfg.train_samples, cfg.image_side, 4, cfg.noise, tr);
      d.test = gen_quadrant_images(cfg.test_samples, cfg.image_side, 4, cfg.noise, te);
      break;
    case DatasetKind::idx:
      d.train = take(load_idx(cfg.idx_train_images, cfg.idx_train_labels, Split::train), cfg.train_samples, tr);
      d.test = take(load_idx(cfg.idx_test_images, cfg.idx_test_labels, Split::test), cfg.test_samples, te);
      break;
    case DatasetKind::cifar10:
      d.train = take(load_cifar10_bin(cfg.cifar_train, 0, 0, Split::train), cfg.train_samples, tr);
      d.test = take(load_cifar10_bin(cfg.cifar_test, 0, 0, Split::test), cfg.test_samples, te);
      break;
  }
  d.test.split = Split::test;
  d.test.num_classes = d.train.num_classes = std::max(d.train.num_classes, d.test.num_classes);
  return d;
}

Architecture make_architecture(const ExperimentConfig& cfg, const Dataset& data) {
  const auto& s = data.sample_shape;
  if (s.size() == 1) return Architecture::mlp(s[0], cfg.hidden, data.num_classes);
  if (s.size() == 3) return Architecture::image(s[0], s[1], s[2], cfg.conv_channels, cfg.kernel, cfg.hidden, data.num_classes);
  throw ShapeError("make_architecture: unsupported sample shape " + shape_str(s));
}

// ---------------------------------------------------------------------------
// tables

const MetricsRow& MetricsTable::at(const std::string& policy, const std::string& attack, double eps) const {
  for (const auto& r : rows)
    if (r.policy == policy && r.attack == attack && r.eps == eps) return r;
  throw ContractError("metrics: no row for " + policy + "/" + attack + "/" + format_double(eps));
}

std::size_t SelectionHistogram::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

double total_variation(const SelectionHistogram& a, const SelectionHistogram& b) {
  if (a.counts.size() != b.counts.size()) throw ShapeError("total_variation: member counts differ");
  const double ta = static_cast<double>(a.total()), tb = static_cast<double>(b.total());
  if (ta == 0.0 || tb == 0.0) throw ContractError("total_variation: empty histogram");
  double d = 0.0;
  for (std::size_t i = 0; i < a.counts.size(); ++i) d += std::abs(a.counts[i] / ta - b.counts[i] / tb);
  return 0.5 * d;
}

std::string Condition::key() const { return attack + "@" + format_double(eps); }

std::vector<Condition> conditions(const ExperimentConfig& cfg) {
  std::vector<Condition> out{{"none", 0.0, std::nullopt}};
  for (auto f : cfg.attacks)
    for (double e : cfg.eps) out.push_back({attack_family_name(f), e, cfg.attack_spec(f, e)});
  return out;
}

// ---------------------------------------------------------------------------
// cache

std::string AdversarialCache::key(EvalMode mode, std::uint64_t model_id, const AttackSpec& s, std::uint64_t seed) {
  std::ostringstream k;
  k << eval_mode_name(mode) << '|' << model_id << '|' << s.family_name() << '|' << format_double(s.eps) << '|' << s.steps
    << '|' << format_double(s.step_size) << '|' << format_double(s.momentum_decay) << '|' << s.uses_random_init() << '|'
    << format_double(s.transform_prob) << '|' << s.kernel_size << '|' << format_double(s.cw_kappa) << '|'
    << loss_target_name(s.loss_target) << '|' << s.member << '|' << seed;
  return k.str();
}

const Tensor* AdversarialCache::find(const std::string& key) const {
  const auto it = sets_.find(key);
  return it == sets_.end() ? nullptr : &it->second;
}

void AdversarialCache::insert(const std::string& key, Tensor x) { sets_.insert_or_assign(key, std::move(x)); }

std::vector<std::string> AdversarialCache::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : sets_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

bool EvalOutput::all_checks_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const SelfCheck& c) { return c.passed; });
}

EvalOutput run_attack_eval(const EnsembleNet& victim, const Dataset& test, const ExperimentConfig& cfg,
                           const EnsembleNet* surrogate, AdversarialCache* cache) {
  if (victim.head() != Head::evidential) throw ContractError("eval: the victim must use the evidential head");
  check_input_shape(victim, test, "victim");
  if (cfg.mode == EvalMode::transfer) {
    if (!surrogate) throw ContractError("eval: transfer mode needs a surrogate");
    check_input_shape(*surrogate, test, "surrogate");
  }
  AdversarialCache local;
  if (!cache) cache = &local;
  const EnsembleNet& attacked = cfg.mode == EvalMode::transfer ? *surrogate : victim;
  const std::uint64_t model_id = attacked.checksum();
  const Tensor x = test.inputs_tensor();
  const auto& y = test.labels;
  const std::size_t n = test.size(), m = victim.members();
  const RngStream root(cfg.seed);

  EvalOutput out;
  out.table.members = m;
  for (const auto& cond : conditions(cfg)) {
    Tensor xa = x;
    if (cond.spec) {
      AttackSpec spec = *cond.spec;
      if (cfg.mode == EvalMode::transfer && spec.loss_target == LossTarget::dsc) spec.loss_target = LossTarget::average;
      const auto key = AdversarialCache::key(cfg.mode, model_id, spec, cfg.seed);
      if (const Tensor* hit = cache->find(key)) {
        xa = *hit;
      } else {
        RngStream arng = root.split(fnv1a("attack|" + cond.key()));
        xa = run_attack(attacked, x, y, spec, arng);
        cache->insert(key, xa);
      }
      double worst = 0.0;
      bool in_box = true;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        worst = std::max(worst, std::abs(xa.data()[i] - x.data()[i]));
        in_box = in_box && xa.data()[i] >= 0.0 && xa.data()[i] <= 1.0;
      }
      out.checks.push_back({"eps-ball " + cond.key(), worst <= spec.eps && in_box,
                            "max |x'-x| = " + format_double(worst)});
    }

    const auto ops = sample_opinions(victim, xa);
    std::vector<std::vector<int>> member_pred(n, std::vector<int>(m));
    SelectionHistogram hist{cond.attack, cond.eps, std::vector<std::size_t>(m, 0)};
    double correct_members = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_h = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        member_pred[i][k] = argmax(predictive_mean(ops[i][k]));
        correct_members += member_pred[i][k] == y[i];
        const double h = dirichlet_entropy(ops[i][k]);
        if (k == 0 || h < best_h) {
          best = k;
          best_h = h;
        }
      }
      ++hist.counts[best];
    }
    const double proportion = correct_members / static_cast<double>(n);

    std::vector<std::vector<std::pair<std::string, int>>> policy_pred(cfg.per_sample_log ? n : 0);
    for (const auto& p : cfg.policies) {
      RngStream prng = root.split(fnv1a("policy|" + p.name()));
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const int pred = policy_predict(ops[i], p, prng).predicted;
        hits += pred == y[i];
        if (cfg.per_sample_log) policy_pred[i].emplace_back(p.name(), pred);
      }
      const double acc = static_cast<double>(hits) / static_cast<double>(n);
      out.table.rows.push_back({p.name(), cond.attack, cond.eps, acc, proportion});
    }
    out.checks.push_back({"histogram-total " + cond.key(), hist.total() == n, std::to_string(hist.total())});
    out.histograms.push_back(std::move(hist));
    if (cfg.per_sample_log) {
      for (std::size_t i = 0; i < n; ++i) {
        out.samples.push_back({cond.attack, cond.eps, i, y[i], member_pred[i], policy_pred[i]});
      }
    }
  }
  bool ranges = true;
  for (const auto& r : out.table.rows) {
    ranges = ranges && r.accuracy >= 0.0 && r.accuracy <= 1.0 && r.proportion >= 0.0 &&
             r.proportion <= static_cast<double>(m);
  }
  out.checks.push_back({"metric ranges", ranges, "accuracy in [0,1], proportion in [0,M]"});
  if (cfg.per_sample_log) {
    const bool same = metrics_from_samples(out.samples, m) == out.table;
    out.checks.push_back({"per-sample recomputation", same, "aggregates rebuilt from samples.csv records"});
  }
  return out;
}

std::vector<SelectionHistogram> run_dynamics_report(const EnsembleNet& victim, const Dataset& test,
                                                    const ExperimentConfig& cfg, const EnsembleNet* surrogate,
                                                    AdversarialCache* cache) {
  ExperimentConfig c = cfg;
  c.per_sample_log = false;
  return run_attack_eval(victim, test, c, surrogate, cache).histograms;
}

// ---------------------------------------------------------------------------
// serialisation

json metrics_to_json(const MetricsTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"policy", r.policy}, {"attack", r.attack}, {"eps", r.eps}, {"accuracy", r.accuracy},
                    {"proportion", r.proportion}});
  }
  return {{"members", t.members}, {"rows", rows}};
}

MetricsTable metrics_from_json(const json& j) {
  MetricsTable t;
  t.members = j.at("members").get<std::size_t>();
  for (const auto& r : j.at("rows")) {
    t.rows.push_back({r.at("policy").get<std::string>(), r.at("attack").get<std::string>(), r.at("eps").get<double>(),
                      r.at("accuracy").get<double>(), r.at("proportion").get<double>()});
  }
  return t;
}

json histograms_to_json(const std::vector<SelectionHistogram>& h) {
  json out = json::array();
  for (const auto& s : h) out.push_back({{"attack", s.attack}, {"eps", s.eps}, {"counts", s.counts}});
  return out;
}

std::vector<SelectionHistogram> histograms_from_json(const json& j) {
  std::vector<SelectionHistogram> out;
  for (const auto& s : j) {
    out.push_back({s.at("attack").get<std::string>(), s.at("eps").get<double>(),
                   s.at("counts").get<std::vector<std::size_t>>()});
  }
  return out;
}

json history_to_json(const FitResult& fit) {
  auto rec = [](const EpochRecord& r) {
    return json{{"epoch", r.epoch},
                {"mean_loss", r.mean_loss},
                {"policy_accuracy", r.policy_accuracy},
                {"benign_entropy", r.benign_entropy},
                {"adv_entropy", r.adv_entropy},
                {"entropy_gap", r.entropy_gap},
                {"factor_distance_min", r.factor_distance.min},
                {"factor_distance_mean", r.factor_distance.mean}};
  };
  json h = json::array();
  for (const auto& r : fit.history) h.push_back(rec(r));
  return {{"initial", rec(fit.initial)}, {"epochs", h}};
}

std::string metrics_csv(const MetricsTable& t) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : t.rows) {
    out += r.policy + "," + r.attack + "," + format_double(r.eps) + "," + format_double(r.accuracy) + "," +
           format_double(r.proportion) + "\n";
  }
  return out;
}

std::string samples_csv(const std::vector<SampleRecord>& s) {
  std::string out = "attack,eps,index,label,policy,predicted,correct_members\n";
  for (const auto& r : s) {
    std::size_t correct = 0;
    for (int p : r.member_predictions) correct += p == r.label;
    for (const auto& [policy, pred] : r.policy_predictions) {
      out += r.attack + "," + format_double(r.eps) + "," + std::to_string(r.index) + "," + std::to_string(r.label) + "," +
             policy + "," + std::to_string(pred) + "," + std::to_string(correct) + "\n";
    }
  }
  return out;
}

MetricsTable metrics_from_samples(const std::vector<SampleRecord>& s, std::size_t members) {
  MetricsTable t;
  t.members = members;
  struct Acc {
    std::size_t hits = 0, n = 0;
    double correct = 0.0;
  };
  std::vector<std::pair<std::string, Acc>> cells;
  auto cell = [&](const std::string& key) -> Acc& {
    for (auto& c : cells)
      if (c.first == key) return c.second;
    cells.push_back({key, {}});
    return cells.back().second;
  };
  std::vector<std::tuple<std::string, std::string, double, std::string>> order;
  for (const auto& r : s) {
    std::size_t correct = 0;
    for (int p : r.member_predictions) correct += p == r.label;
    for (const auto& [policy, pred] : r.policy_predictions) {
      const std::string key = r.attack + "@" + format_double(r.eps) + "/" + policy;
      Acc& a = cell(key);
      if (a.n == 0) order.emplace_back(r.attack, policy, r.eps, key);
      a.hits += pred == r.label;
      a.correct += static_cast<double>(correct);
      ++a.n;
    }
  }
  for (const auto& [attack, policy, eps, key] : order) {
    const Acc& a = cell(key);
    t.rows.push_back({policy, attack, eps, static_cast<double>(a.hits) / static_cast<double>(a.n),
                      a.correct / static_cast<double>(a.n)});
  }
  return t;
}

ReportPaths emit_report(const EvalOutput& eval, const ExperimentConfig& cfg, const std::string& out_dir,
                        const std::optional<FitResult>& fit) {
  if (eval.table.rows.empty()) throw ContractError("emit_report: empty metrics table");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw FormatError("cannot create output directory " + out_dir + ": " + ec.message());
  ReportPaths paths{(fs::path(out_dir) / "metrics.csv").string(), (fs::path(out_dir) / "report.json").string(), ""};
  write_file(paths.csv, metrics_csv(eval.table));
  json checks = json::array();
  for (const auto& c : eval.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  json j{{"format", "udes-report"},
         {"version", 1},
         {"seed", cfg.seed},
         {"config", cfg.echo()},
         {"metrics", metrics_to_json(eval.table)},
         {"selection_histograms", histograms_to_json(eval.histograms)},
         {"checks", checks}};
  if (fit) j["history"] = history_to_json(*fit);
  write_file(paths.json, j.dump(2) + "\n");
  if (cfg.per_sample_log) {
    paths.samples = (fs::path(out_dir) / "samples.csv").string();
    write_file(paths.samples, samples_csv(eval.samples));
  }
  return paths;
}

// ---------------------------------------------------------------------------
// pipeline

PretrainResult pretrain_for(const ExperimentConfig& cfg, const DataSplits& data, bool surrogate) {
  RngStream rng = RngStream(cfg.seed).split(surrogate ? kSurrogateStream : kBaselineStream);
  return pretrain_baseline(make_architecture(cfg, data.train), data.train, cfg.pretrain_epochs, cfg.pretrain_lr, rng,
                           cfg.pretrain_momentum, cfg.pretrain_batch);
}

EnsembleNet init_victim(const ExperimentConfig& cfg, const PlainNet& baseline) {
  RngStream rng = RngStream(cfg.seed).split(kVictimInitStream);
  return init_from_pretrained(baseline, cfg.train.members, cfg.train.rank, rng, cfg.train.init_scale);
}

std::vector<SelfCheck> history_checks(const FitResult& fit, const TrainConfig& cfg) {
  std::vector<SelfCheck> out;
  out.push_back({"history length", fit.history.size() == cfg.epochs, std::to_string(fit.history.size())});
  bool finite = true, bounded = true;
  for (const auto& r : fit.history) {
    finite = finite && std::isfinite(r.mean_loss) && std::isfinite(r.entropy_gap);
    bounded = bounded && r.entropy_gap >= 0.0;
    for (const auto& [k, v] : r.policy_accuracy) bounded = bounded && v >= 0.0 && v <= 1.0;
  }
  out.push_back({"history finite", finite, ""});
  out.push_back({"history ranges", bounded, ""});
  return out;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  PipelineResult r;
  r.data = make_data(cfg);
  r.baseline = pretrain_for(cfg, r.data, false);
  r.victim = init_victim(cfg, r.baseline.net);
  r.fit = fit(r.victim, r.data.train, cfg.train);
  std::optional<EnsembleNet> surrogate;
  if (cfg.mode == EvalMode::transfer) {
    r.surrogate_net = pretrain_for(cfg, r.data, true);
    surrogate = as_single_member(r.surrogate_net.net, Head::softmax);
  }
  r.eval = run_attack_eval(r.victim, r.data.test, cfg, surrogate ? &*surrogate : nullptr);
  for (auto& c : history_checks(r.fit, cfg.train)) r.eval.checks.push_back(std::move(c));
  return r;
}

}  // namespace udes
