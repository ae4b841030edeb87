#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hint/attacks/attacks.hpp"
#include "hint/defenses/defenses.hpp"
#include "hint/harness/config.hpp"

namespace hint::harness {

struct Splits {
  data::LabeledSet train;
  data::LabeledSet val;
  data::LabeledSet test;
};

Splits load_splits(const DatasetConfig& cfg);

// A targeted-attack goal: test row `test_row` should be classified as
// adversarial_class by a model trained on the poisoned set.
struct TargetRecord {
  std::size_t test_row = 0;
  int true_class = 0;
  int adversarial_class = 0;
  std::vector<std::size_t> base_rows;  // poisoned training rows

  bool operator==(const TargetRecord&) const = default;
};

std::string format_targets(const std::vector<TargetRecord>& targets);
std::vector<TargetRecord> parse_targets(std::string_view text);
std::vector<attacks::TargetSpec> resolve_targets(const std::vector<TargetRecord>& targets,
                                                 const data::LabeledSet& test);

struct PoisonedData {
  data::LabeledSet train;
  std::vector<attacks::ManifestRecord> manifest;  // one per training row
  std::vector<TargetRecord> targets;              // targeted mode only
  // Transfer mode: the pretrained network whose feature extractor is frozen.
  std::optional<nn::ParamVector> extractor;
};

// Seeded stream for one named stage of an experiment.
Rng stage_rng(std::uint64_t seed, std::string_view stage);

// Trains clean victims (one per attack type), crafts the poisons named by the
// plan and splices them into the clean training set.
PoisonedData build_poisoned(const ExperimentConfig& cfg, const Splits& splits);

struct TrainOutcome {
  nn::ParamVector params;
  std::optional<defenses::HintTrace> trace;
  double seconds = 0.0;
};

// Trains the configured defense for one trial seed. Transfer mode starts
// from the extractor with a freshly initialized head and trains only the head.
TrainOutcome run_defense(const ExperimentConfig& cfg, const PoisonedData& poisoned, const Splits& splits,
                         std::uint64_t seed);

struct SeedRecord {
  std::string defense;
  double axis_value = 0.0;  // rho, or the swept hyperparameter
  std::uint64_t seed = 0;
  double test_acc = 0.0;
  std::optional<double> asr;
  double seconds = 0.0;
  std::string data_hash;
  std::string params_hash;
};

struct Aggregate {
  std::string defense;
  double axis_value = 0.0;
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single record
};

// Groups by (defense, axis value) in first-appearance order.
std::vector<Aggregate> aggregate(const std::vector<SeedRecord>& records);

// defense,rho_or_axis,seed,test_acc,asr,seconds
std::string format_records_csv(const std::vector<SeedRecord>& records);
// <axis>,mean,std, one row per swept value.
std::string format_sweep_csv(const std::string& axis, const std::vector<Aggregate>& rows);
std::string format_report_json(const std::string& config_echo, const std::vector<SeedRecord>& records,
                               const std::vector<std::string>& notes);
// Records of a JSON report; aggregates are recomputed, never read back.
std::vector<SeedRecord> parse_report_json(std::string_view text);

std::string format_number(double v);

}  // namespace hint::harness
