#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hint/harness/config.hpp"
#include "hint/harness/experiment.hpp"

namespace hint::harness {

// Output directory layout:
//   objects/<git blob hash>.<ext>   immutable content-addressed artifacts
//   poison/<poison key>.json        which objects make up one poisoned dataset
//   runs/<run key>.{csv,json}       per-seed records of one train invocation
//   report.{csv,json}, summary.csv  merged view written by `report`
//   sweep-<axis>-<defense>.{csv,json} sweep tables
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path object_path(const std::string& hash, const std::string& ext) const;

  // Writes bytes under their own hash; an existing object is left untouched.
  std::string put(std::string_view bytes, const std::string& ext) const;
  // Moves a finished temporary file into the store.
  std::string put_file(const std::filesystem::path& tmp, const std::string& ext) const;
  // Throws ArtifactError if missing, IntegrityError if the content no longer
  // matches the hash in its name.
  std::filesystem::path verified(const std::string& hash, const std::string& ext) const;
  std::filesystem::path temp_path(const std::string& stem) const;

 private:
  std::filesystem::path root_;
};

// Throws IntegrityError unless the file's content hash equals its file name stem.
void verify_content_address(const std::filesystem::path& path);

struct PoisonIndex {
  std::string key;
  std::string train_hash;
  std::string val_hash;
  std::string test_hash;
  std::string manifest_hash;
  std::string targets_hash;    // empty when untargeted
  std::string extractor_hash;  // empty unless transfer mode
};

std::filesystem::path poison_index_path(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Builds and stores the poisoned dataset unless an index for the same
// settings already exists.
PoisonIndex cmd_poison(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);

struct LoadedPoison {
  PoisonIndex index;
  Splits splits;  // train holds the poisoned rows
  PoisonedData data;
};

// Reads the stored poisoned dataset for cfg, checking every hash.
LoadedPoison load_poison(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Trains the configured defense once per seed and records the metrics.
// axis_value defaults to rho. Reruns of the same settings reuse the stored records.
std::vector<SeedRecord> cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log,
                                  std::optional<double> axis_value = std::nullopt);

struct EvalRecord {
  double accuracy = 0.0;
  std::optional<double> asr;
  std::string params_hash;
  std::string dataset_hash;
};

// Accuracy of stored params on a stored dataset, plus ASR for a targets file
// whose rows index that dataset. Appends a line to out/eval.csv if out is set.
EvalRecord cmd_eval(const std::filesystem::path& params_path, const std::filesystem::path& dataset_path,
                    const std::optional<std::filesystem::path>& targets_path,
                    const std::optional<std::filesystem::path>& out);

// One poison + train per axis value; writes the sweep table and returns the
// per-seed records.
std::vector<SeedRecord> cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);

// Sets the swept hyperparameter on a copy of cfg.
ExperimentConfig with_axis(const ExperimentConfig& cfg, const std::string& axis, double value);

// Merges every runs/*.json record into report.csv, report.json and summary.csv.
std::vector<SeedRecord> cmd_report(const std::filesystem::path& out, std::ostream& log);

}  // namespace hint::harness
