#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "udes/config.hpp"
#include "udes/data.hpp"
#include "udes/ensemble.hpp"
#include "udes/training.hpp"

namespace udes {

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Seeded train/test data for the configured dataset.
DataSplits make_data(const ExperimentConfig& cfg);
Architecture make_architecture(const ExperimentConfig& cfg, const Dataset& data);

struct MetricsRow {
  std::string policy;
  std::string attack;
  double eps = 0.0;
  double accuracy = 0.0;
  double proportion = 0.0;
  bool operator==(const MetricsRow&) const = default;
};

struct MetricsTable {
  std::size_t members = 0;
  std::vector<MetricsRow> rows;
  const MetricsRow& at(const std::string& policy, const std::string& attack, double eps) const;
  bool operator==(const MetricsTable&) const = default;
};

struct SelectionHistogram {
  std::string attack;
  double eps = 0.0;
  std::vector<std::size_t> counts;
  std::size_t total() const;
  bool operator==(const SelectionHistogram&) const = default;
};

/// Half the L1 distance between the normalised histograms.
double total_variation(const SelectionHistogram& a, const SelectionHistogram& b);

/// One evaluated test sample under one condition.
struct SampleRecord {
  std::string attack;
  double eps = 0.0;
  std::size_t index = 0;
  int label = 0;
  std::vector<int> member_predictions;
  /// In configured policy order.
  std::vector<std::pair<std::string, int>> policy_predictions;
};

struct SelfCheck {
  std::string name;
  bool passed = true;
  std::string detail;
};

/// Benign condition first ("none", eps 0), then every attack x eps.
struct Condition {
  std::string attack;
  double eps = 0.0;
  std::optional<AttackSpec> spec;
  std::string key() const;
};
std::vector<Condition> conditions(const ExperimentConfig& cfg);

/// Adversarial sets keyed by mode, attacked model identity and attack spec.
class AdversarialCache {
 public:
  static std::string key(EvalMode mode, std::uint64_t model_id, const AttackSpec& spec, std::uint64_t seed);
  const Tensor* find(const std::string& key) const;
  void insert(const std::string& key, Tensor x);
  std::size_t size() const { return sets_.size(); }
  std::vector<std::string> keys() const;

 private:
  std::map<std::string, Tensor> sets_;
};

struct EvalOutput {
  MetricsTable table;
  std::vector<SelectionHistogram> histograms;
  std::vector<SampleRecord> samples;
  std::vector<SelfCheck> checks;
  bool all_checks_pass() const;
};

/// Adversarial test sets for every condition: crafted against the surrogate in
/// transfer mode, against the victim readout in white-box mode.
EvalOutput run_attack_eval(const EnsembleNet& victim, const Dataset& test, const ExperimentConfig& cfg,
                           const EnsembleNet* surrogate, AdversarialCache* cache = nullptr);

/// Argmin-entropy member counts per condition.
std::vector<SelectionHistogram> run_dynamics_report(const EnsembleNet& victim, const Dataset& test,
                                                    const ExperimentConfig& cfg, const EnsembleNet* surrogate,
                                                    AdversarialCache* cache = nullptr);

nlohmann::json metrics_to_json(const MetricsTable& t);
MetricsTable metrics_from_json(const nlohmann::json& j);
nlohmann::json histograms_to_json(const std::vector<SelectionHistogram>& h);
std::vector<SelectionHistogram> histograms_from_json(const nlohmann::json& j);
nlohmann::json history_to_json(const FitResult& fit);

constexpr const char* kCsvHeader = "policy,attack,eps,accuracy,proportion";
std::string metrics_csv(const MetricsTable& t);
std::string samples_csv(const std::vector<SampleRecord>& s);
/// Recompute accuracies from per-sample records.
MetricsTable metrics_from_samples(const std::vector<SampleRecord>& s, std::size_t members);

struct ReportPaths {
  std::string csv;
  std::string json;
  std::string samples;
};

/// Writes metrics.csv and report.json (plus samples.csv when per-sample
/// logging is on) into out_dir.
ReportPaths emit_report(const EvalOutput& eval, const ExperimentConfig& cfg, const std::string& out_dir,
                        const std::optional<FitResult>& fit = std::nullopt);

/// Seeded stages of a full run.
struct PipelineResult {
  DataSplits data;
  PretrainResult baseline;
  PretrainResult surrogate_net;
  EnsembleNet victim;
  FitResult fit;
  EvalOutput eval;
};

PretrainResult pretrain_for(const ExperimentConfig& cfg, const DataSplits& data, bool surrogate);
EnsembleNet init_victim(const ExperimentConfig& cfg, const PlainNet& baseline);
PipelineResult run_pipeline(const ExperimentConfig& cfg);

/// Invariant checks on a fit history.
std::vector<SelfCheck> history_checks(const FitResult& fit, const TrainConfig& cfg);

}  // namespace udes
