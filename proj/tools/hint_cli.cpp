#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hint/error.hpp"
#include "hint/harness/commands.hpp"
#include "hint/io.hpp"

namespace fs = std::filesystem;
using namespace hint;
using namespace hint::harness;

namespace {

enum Exit { kOk = 0, kConfig = 1, kArtifact = 2, kCheck = 3 };

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::optional<double> rho, ratio, beta, gamma;
  std::optional<std::string> defense;
  std::vector<std::string> attacks;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "config file (sections with key = value)");
  cmd->add_option("--seed", o.seeds, "trial seed; repeat for several");
  cmd->add_option("--rho", o.rho, "poison ratio, relative to the clean training set");
  cmd->add_option("--defense", o.defense, "none, hint, friends or atda");
  cmd->add_option("--attack", o.attacks, "pgd, dap, durp (untargeted) or fc, gm (targeted); repeatable");
  cmd->add_option("--r", o.ratio, "fraction of training rows that receive healthy noise");
  cmd->add_option("--beta", o.beta, "noise bound");
  cmd->add_option("--gamma", o.gamma, "noise step size");
  cmd->add_option("--out", o.out, "output directory");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (cfg.dataset.data_dir.empty()) cfg.dataset.data_dir = HINT_DEFAULT_DATA_DIR;
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.rho) cfg.poison.rho = *o.rho;
  if (o.defense) cfg.defense = *o.defense;
  if (o.ratio) cfg.hint.ratio = *o.ratio;
  if (o.beta) cfg.hint.beta = *o.beta;
  if (o.gamma) cfg.hint.gamma = *o.gamma;
  if (!o.attacks.empty()) {
    std::vector<data::Provenance> untargeted;
    std::optional<data::Provenance> targeted;
    for (const auto& name : o.attacks) {
      data::Provenance p;
      try {
        p = data::parse_provenance(name);
      } catch (const Error&) {
        throw ConfigError("--attack: unknown attack '" + name + "'");
      }
      if (p == data::Provenance::kFc || p == data::Provenance::kGm) {
        if (targeted && *targeted != p) throw ConfigError("--attack: only one targeted attack per run");
        targeted = p;
      } else if (p == data::Provenance::kClean) {
        throw ConfigError("--attack: 'clean' is not an attack");
      } else {
        untargeted.push_back(p);
      }
    }
    if (targeted && !untargeted.empty()) throw ConfigError("--attack: cannot mix targeted and untargeted attacks");
    if (targeted) {
      cfg.poison.mode = PoisonMode::kTargeted;
      cfg.poison.targeted_attack = *targeted;
    } else {
      cfg.poison.mode = PoisonMode::kUntargeted;
      cfg.poison.attacks = untargeted;
    }
  }
  cfg.validate();
  return cfg;
}

void print_records(const std::vector<SeedRecord>& records) { std::cout << format_records_csv(records); }

// Small end-to-end run on synthetic blobs: determinism, aggregate
// recomputation, noise invariants and artifact integrity.
int self_test(const fs::path& scratch) {
  int failures = 0;
  const auto check = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "PASS " : "FAIL ") << what << "\n";
    if (!ok) ++failures;
  };
  ExperimentConfig cfg;
  cfg.dataset.source = "blobs";
  cfg.dataset.train = 300;
  cfg.dataset.val = 60;
  cfg.dataset.test = 120;
  cfg.model.widths = {20, 12, 4};
  cfg.poison.victim_epochs = 4;
  cfg.poison.steps = 5;
  cfg.sgd.epochs = 8;
  cfg.hint.pretrain_epochs = 2;
  cfg.hint.schedule = {3, 6};
  cfg.hint.gamma = 1.0;
  cfg.seeds = {0, 1, 2};
  cfg.validate();

  fs::remove_all(scratch);
  std::ostringstream log;
  std::vector<std::string> csvs;
  std::vector<SeedRecord> records;
  for (const char* run : {"a", "b"}) {
    const auto out = scratch / run;
    cmd_poison(cfg, out, log);
    records = cmd_train(cfg, out, log);
    csvs.push_back(format_records_csv(records));
  }
  check(csvs[0] == csvs[1], "identical config and seeds give byte-identical CSV");

  double mean = 0.0;
  for (const auto& r : records) mean += r.test_acc;
  mean /= static_cast<double>(records.size());
  const auto agg = aggregate(records);
  check(agg.size() == 1 && std::abs(agg[0].mean - mean) <= 1e-12, "aggregate equals recomputation from records");

  const auto loaded = load_poison(cfg, scratch / "a");
  const auto outcome = run_defense(cfg, loaded.data, loaded.splits, 0);
  bool bounded = outcome.trace && !outcome.trace->rounds.empty();
  if (outcome.trace) {
    for (const auto& r : outcome.trace->rounds) {
      bounded = bounded && r.max_abs_delta <= cfg.hint.beta && r.min_pixel >= 0.0 && r.max_pixel <= 1.0;
    }
  }
  check(bounded, "every noise round stays within beta and the pixel range");

  const auto index = loaded.index;
  const auto victim = ArtifactStore(scratch / "a").object_path(index.train_hash, ".set");
  auto bytes = io::read_file(victim);
  bytes[bytes.size() / 2] ^= 1;
  io::write_file(victim, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  bool caught = false;
  try {
    load_poison(cfg, scratch / "a");
  } catch (const IntegrityError&) {
    caught = true;
  }
  check(caught, "tampered artifact is rejected");
  fs::remove_all(scratch);
  return failures == 0 ? kOk : kCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poisoning attacks and the healthy-influence-noise defense"};
  app.require_subcommand(1);
  Overrides o;

  auto* poison = app.add_subcommand("poison", "craft and store the poisoned training set");
  auto* train = app.add_subcommand("train", "train the defense once per seed and record metrics");
  auto* sweep = app.add_subcommand("sweep", "train over a range of one hyperparameter");
  auto* echo = app.add_subcommand("echo", "print the resolved config, defaults included");
  for (auto* cmd : {poison, train, sweep, echo}) add_common(cmd, o);

  std::string axis;
  std::vector<double> values;
  sweep->add_option("--axis", axis, "r, beta or rho (default: from config)");
  sweep->add_option("--values", values, "axis values (default: from config)");

  auto* report = app.add_subcommand("report", "merge all recorded runs");
  report->add_option("--out", o.out, "output directory");

  std::string params_path, dataset_path, targets_path;
  auto* eval = app.add_subcommand("eval", "evaluate stored parameters on a stored dataset");
  eval->add_option("--params", params_path, "params object")->required();
  eval->add_option("--dataset", dataset_path, "dataset object")->required();
  eval->add_option("--targets", targets_path, "targets object; adds attack success rate");
  eval->add_option("--out", o.out, "output directory for eval.csv");

  std::string scratch = (fs::temp_directory_path() / "hint-self-test").string();
  auto* selftest = app.add_subcommand("self-test", "quick end-to-end checks; exit code 3 on failure");
  selftest->add_option("--out", scratch, "scratch directory (removed afterwards)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*selftest) return self_test(scratch);
    if (*report) {
      print_records(cmd_report(o.out, std::cerr));
      return kOk;
    }
    if (*eval) {
      std::optional<fs::path> targets;
      if (!targets_path.empty()) targets = targets_path;
      const auto rec = cmd_eval(params_path, dataset_path, targets, fs::path(o.out));
      std::cout << "accuracy," << format_number(rec.accuracy) << "\n";
      if (rec.asr) std::cout << "asr," << format_number(*rec.asr) << "\n";
      return kOk;
    }
    auto cfg = resolve(o);
    if (*echo) {
      std::cout << echo_config(cfg);
    } else if (*poison) {
      const auto index = cmd_poison(cfg, o.out, std::cerr);
      std::cout << poison_index_path(cfg, o.out).string() << "\n";
      (void)index;
    } else if (*train) {
      print_records(cmd_train(cfg, o.out, std::cerr));
    } else if (*sweep) {
      if (!axis.empty()) cfg.sweep.axis = axis;
      if (!values.empty()) cfg.sweep.values = values;
      const auto records = cmd_sweep(cfg, o.out, std::cerr);
      std::cout << format_sweep_csv(cfg.sweep.axis, aggregate(records));
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InvalidInputError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const Error& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kArtifact;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kArtifact;
  }
}
