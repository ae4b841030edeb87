#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hint/data/dataset.hpp"
#include "hint/defenses/defenses.hpp"
#include "hint/nn/mlp.hpp"

namespace hint::harness {

struct DatasetConfig {
  std::string source = "mnist";  // "mnist" or "blobs"
  std::filesystem::path data_dir;  // holds the IDX pair for mnist
  std::string images = "mnist10k-images-idx3-ubyte";
  std::string labels = "mnist10k-labels-idx1-ubyte";
  std::size_t train = 5000;
  std::size_t val = 500;
  std::size_t test = 1000;
  // blobs only
  int blob_dim = 20;
  int blob_classes = 4;
  double blob_spread = 0.2;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  std::vector<int> widths = {784, 64, 10};
  nn::Activation activation = nn::Activation::kRelu;
  int top_layers = 1;

  nn::ModelSpec spec() const { return {widths, activation, top_layers}; }
};

enum class PoisonMode { kUntargeted, kTargeted };

struct PoisonConfig {
  PoisonMode mode = PoisonMode::kUntargeted;
  double rho = 1.0;
  std::vector<data::Provenance> attacks = {data::Provenance::kPgd, data::Provenance::kDap,
                                           data::Provenance::kDurp};
  double xi = 0.3;
  int steps = 40;
  double step_size = -1.0;  // negative: xi / 4
  int victim_epochs = 30;
  std::uint64_t seed = 7;

  // Targeted mode.
  data::Provenance targeted_attack = data::Provenance::kFc;
  int targets = 5;
  int poisons_per_target = 50;
  bool transfer = true;  // freeze the feature extractor, retrain the head
  int targeted_victim_epochs = 80;
  int fc_iterations = 1000;
  double fc_step_size = 0.01;
  double fc_proximity = -1.0;  // negative: 0.25 * (feature_dim / input_dim)^2
  double fc_xi = -1.0;         // negative: unbounded
  int gm_iterations = 250;
  double gm_xi = 0.062;
  double gm_step_size = 0.01;

  attacks::AttackBudget budget() const {
    return {xi, steps, step_size < 0.0 ? xi / 4.0 : step_size};
  }
};

struct ReportConfig {
  // Wall-clock seconds make reports differ run to run; off by default so a
  // rerun reproduces the CSV byte for byte.
  bool wall_clock = false;
};

struct SweepConfig {
  std::string axis;  // "r", "beta" or "rho"; empty when not sweeping
  std::vector<double> values;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  PoisonConfig poison;
  std::string defense = "hint";
  defenses::SgdConfig sgd;
  defenses::HintConfig hint;
  defenses::FriendsConfig friends;
  defenses::AtdaConfig atda;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  SweepConfig sweep;
  ReportConfig report;

  // Copies the shared SGD settings into each defense config.
  defenses::HintConfig hint_config() const;
  defenses::FriendsConfig friends_config() const;
  defenses::AtdaConfig atda_config() const;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

const std::vector<std::string>& known_defenses();

// Flat key = value text with [sections]. Unknown sections or keys are
// rejected so typos cannot silently fall back to defaults.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

// Every field, defaults included, in the same format parse_config reads.
std::string echo_config(const ExperimentConfig& cfg);

// Fingerprint of the settings that determine the poisoned dataset.
std::string poison_key(const ExperimentConfig& cfg);

}  // namespace hint::harness
