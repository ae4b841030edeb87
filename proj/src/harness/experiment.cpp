#include "hint/harness/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <sstream>

#include "hint/error.hpp"

namespace hint::harness {
namespace {

using data::Provenance;

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

nn::ParamVector train_victim(const nn::Mlp& model, const ExperimentConfig& cfg, const data::LabeledSet& clean,
                             std::string_view stage, int epochs) {
  Rng rng = stage_rng(cfg.poison.seed, stage);
  defenses::SgdConfig sgd = cfg.sgd;
  sgd.epochs = epochs;
  sgd.trainable.reset();
  return defenses::train_plain(model, model.init_params(rng), clean, sgd, rng);
}

std::vector<attacks::ManifestRecord> manifest_for(const data::LabeledSet& set, const ExperimentConfig& cfg) {
  std::vector<attacks::ManifestRecord> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto p = set.provenance()[i];
    double xi = 0.0;
    if (p == Provenance::kPgd || p == Provenance::kDap || p == Provenance::kDurp) xi = cfg.poison.xi;
    if (p == Provenance::kGm) xi = cfg.poison.gm_xi;
    if (p == Provenance::kFc) xi = cfg.poison.fc_xi < 0.0 ? 1.0 : cfg.poison.fc_xi;
    out.push_back({set.origin_index()[i], p, xi, cfg.poison.seed});
  }
  return out;
}

PoisonedData untargeted(const ExperimentConfig& cfg, const Splits& splits) {
  const nn::Mlp model(cfg.model.spec());
  const data::PoisonPlan plan{cfg.poison.rho, cfg.poison.attacks};
  Rng rng = stage_rng(cfg.poison.seed, "assignment");
  auto assignment = data::plan_assignment(plan, splits.train.size(), rng);
  const auto budget = cfg.poison.budget();
  for (auto& share : assignment) {
    if (share.rows.empty()) {
      share.features = data::FeatureMatrix(0, splits.train.dim());
      continue;
    }
    const std::string name(data::to_string(share.attack));
    switch (share.attack) {
      case Provenance::kPgd: {
        const auto victim = train_victim(model, cfg, splits.train, "victim-" + name, cfg.poison.victim_epochs);
        share.features = attacks::pgd_untargeted(model, victim, splits.train, share.rows, budget);
        break;
      }
      case Provenance::kDap: {
        const auto victim = train_victim(model, cfg, splits.train, "victim-" + name, cfg.poison.victim_epochs);
        share.features = attacks::dap(model, victim, splits.train, share.rows, budget);
        break;
      }
      case Provenance::kDurp: {
        Rng durp_rng = stage_rng(cfg.poison.seed, "durp");
        share.features = attacks::durp(splits.train, share.rows, cfg.poison.xi, durp_rng);
        break;
      }
      default:
        throw ConfigError("attack '" + name + "' is not an untargeted attack");
    }
  }
  PoisonedData out;
  out.train = data::assemble_poisoned(splits.train, plan, assignment);
  out.manifest = manifest_for(out.train, cfg);
  return out;
}

PoisonedData targeted(const ExperimentConfig& cfg, const Splits& splits) {
  const nn::Mlp model(cfg.model.spec());
  const auto victim = train_victim(model, cfg, splits.train, "victim-targeted", cfg.poison.targeted_victim_epochs);
  const int classes = splits.train.num_classes();
  Rng rng = stage_rng(cfg.poison.seed, "targets");

  // Targets are test rows the victim gets right, so a flip is the attack's doing.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < splits.test.size(); ++i) {
    Eigen::Index pred = 0;
    model.forward(victim, splits.test.row(i)).maxCoeff(&pred);
    if (pred == splits.test.labels()[i]) candidates.push_back(i);
  }
  if (candidates.size() < static_cast<std::size_t>(cfg.poison.targets)) {
    throw ConfigError("poison.targets: only " + std::to_string(candidates.size()) + " usable test rows");
  }
  shuffle(std::span(candidates), rng);

  std::vector<std::size_t> order = data::all_rows(splits.train);
  shuffle(std::span(order), rng);
  std::vector<bool> used(splits.train.size(), false);

  PoisonedData out;
  out.train = splits.train;
  for (int t = 0; t < cfg.poison.targets; ++t) {
    TargetRecord rec;
    rec.test_row = candidates[static_cast<std::size_t>(t)];
    rec.true_class = splits.test.labels()[rec.test_row];
    rec.adversarial_class =
        (rec.true_class + 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(classes - 1)))) %
        classes;
    for (auto i : order) {
      if (rec.base_rows.size() == static_cast<std::size_t>(cfg.poison.poisons_per_target)) break;
      if (!used[i] && splits.train.labels()[i] == rec.adversarial_class) {
        used[i] = true;
        rec.base_rows.push_back(i);
      }
    }
    if (rec.base_rows.size() < static_cast<std::size_t>(cfg.poison.poisons_per_target)) {
      throw ConfigError("poison.poisons_per_target: not enough training rows of class " +
                        std::to_string(rec.adversarial_class));
    }
    const nn::Example target = splits.test.example(rec.test_row);
    if (cfg.poison.targeted_attack == Provenance::kFc) {
      attacks::FeatureCollisionConfig fc{cfg.poison.fc_iterations, cfg.poison.fc_step_size, cfg.poison.fc_proximity,
                                         {}};
      if (cfg.poison.fc_xi >= 0.0) fc.xi = cfg.poison.fc_xi;
      for (auto i : rec.base_rows) {
        const auto poison = attacks::feature_collision(model, victim, splits.train.example(i), target.x, fc);
        out.train.set_row(i, poison.x, Provenance::kFc);
      }
    } else {
      const attacks::TargetSpec spec{target, rec.adversarial_class, rec.base_rows};
      const auto result = attacks::gradient_matching(
          model, victim, splits.train, spec,
          attacks::AttackBudget{cfg.poison.gm_xi, cfg.poison.gm_iterations, cfg.poison.gm_step_size});
      for (std::size_t k = 0; k < rec.base_rows.size(); ++k) {
        out.train.set_row(rec.base_rows[k], result.rows.row(static_cast<Eigen::Index>(k)).transpose(),
                          Provenance::kGm);
      }
    }
    out.targets.push_back(std::move(rec));
  }
  out.manifest = manifest_for(out.train, cfg);
  if (cfg.poison.transfer) out.extractor = victim;
  return out;
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string();
}

}  // namespace

Rng stage_rng(std::uint64_t seed, std::string_view stage) {
  return Rng(derive_seed(seed, fnv1a(stage)));
}

Splits load_splits(const DatasetConfig& cfg) {
  Rng rng(cfg.seed);
  data::LabeledSet all;
  if (cfg.source == "mnist") {
    all = data::load_idx(cfg.data_dir / cfg.images, cfg.data_dir / cfg.labels);
  } else if (cfg.source == "blobs") {
    Rng blob_rng = stage_rng(cfg.seed, "blobs");
    all = data::synthetic_blobs(cfg.train + cfg.val + cfg.test, cfg.blob_dim, cfg.blob_classes, cfg.blob_spread,
                                blob_rng);
  } else {
    throw ConfigError("dataset.source: unknown source '" + cfg.source + "'");
  }
  auto parts = data::split(all, cfg.train, cfg.val, cfg.test, rng);
  return {std::move(parts.train), std::move(parts.val), std::move(parts.test)};
}

std::string format_targets(const std::vector<TargetRecord>& targets) {
  std::string out = "test_row,true_class,adversarial_class,base_rows\n";
  for (const auto& t : targets) {
    out += std::to_string(t.test_row) + ',' + std::to_string(t.true_class) + ',' +
           std::to_string(t.adversarial_class) + ',';
    for (std::size_t k = 0; k < t.base_rows.size(); ++k) {
      if (k > 0) out += ' ';
      out += std::to_string(t.base_rows[k]);
    }
    out += '\n';
  }
  return out;
}

std::vector<TargetRecord> parse_targets(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "test_row,true_class,adversarial_class,base_rows") {
    throw FormatError("targets: unexpected header");
  }
  std::vector<TargetRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) fields.push_back(cell);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() != 4) throw FormatError("targets line " + std::to_string(line_no) + ": expected 4 fields");
    TargetRecord t;
    try {
      t.test_row = std::stoull(fields[0]);
      t.true_class = std::stoi(fields[1]);
      t.adversarial_class = std::stoi(fields[2]);
      std::istringstream rows(fields[3]);
      for (std::size_t r; rows >> r;) t.base_rows.push_back(r);
    } catch (const std::exception& e) {
      throw FormatError("targets line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<attacks::TargetSpec> resolve_targets(const std::vector<TargetRecord>& targets,
                                                 const data::LabeledSet& test) {
  std::vector<attacks::TargetSpec> out;
  for (const auto& t : targets) {
    if (t.test_row >= test.size()) throw FormatError("target test row out of range");
    if (test.labels()[t.test_row] != t.true_class) {
      throw IntegrityError("target row " + std::to_string(t.test_row) + " does not match the test split");
    }
    out.push_back({test.example(t.test_row), t.adversarial_class, t.base_rows});
  }
  return out;
}

PoisonedData build_poisoned(const ExperimentConfig& cfg, const Splits& splits) {
  cfg.validate();
  return cfg.poison.mode == PoisonMode::kUntargeted ? untargeted(cfg, splits) : targeted(cfg, splits);
}

TrainOutcome run_defense(const ExperimentConfig& cfg, const PoisonedData& poisoned, const Splits& splits,
                         std::uint64_t seed) {
  const nn::Mlp model(cfg.model.spec());
  Rng rng = stage_rng(seed, "trial");
  defenses::SgdConfig sgd = cfg.sgd;
  nn::ParamVector init;
  if (poisoned.extractor) {
    init = *poisoned.extractor;
    model.reinit_top(init, cfg.model.top_layers, rng);
    sgd.trainable = model.top_mask();
  } else {
    init = model.init_params(rng);
  }

  TrainOutcome out;
  const auto start = std::chrono::steady_clock::now();
  if (cfg.defense == "none") {
    out.params = defenses::train_plain(model, std::move(init), poisoned.train, sgd, rng);
  } else if (cfg.defense == "hint") {
    auto hc = cfg.hint_config();
    hc.sgd = sgd;
    defenses::HintTrace trace;
    out.params = defenses::hint_train(model, hc, poisoned.train, splits.val, std::move(init), rng, &trace);
    out.trace = std::move(trace);
  } else if (cfg.defense == "friends") {
    auto fc = cfg.friends_config();
    fc.sgd = sgd;
    out.params = defenses::friends_train(model, fc, poisoned.train, std::move(init), rng);
  } else if (cfg.defense == "atda") {
    auto ac = cfg.atda_config();
    ac.sgd = sgd;
    out.params = defenses::atda_train(model, ac, poisoned.train, std::move(init), rng);
  } else {
    throw ConfigError("train.defense: unknown defense '" + cfg.defense + "'");
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::vector<Aggregate> aggregate(const std::vector<SeedRecord>& records) {
  std::vector<Aggregate> out;
  std::vector<std::vector<double>> values;
  for (const auto& r : records) {
    auto it = std::find_if(out.begin(), out.end(), [&](const Aggregate& a) {
      return a.defense == r.defense && a.axis_value == r.axis_value;
    });
    if (it == out.end()) {
      out.push_back({r.defense, r.axis_value, 0, 0.0, 0.0});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(r.test_acc);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    const auto& v = values[g];
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[g].count = v.size();
    out[g].mean = mean;
    out[g].std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

// Shortest text that reads back to the same double.
std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_records_csv(const std::vector<SeedRecord>& records) {
  std::string out = "defense,rho_or_axis,seed,test_acc,asr,seconds\n";
  for (const auto& r : records) {
    out += r.defense + ',' + format_number(r.axis_value) + ',' + std::to_string(r.seed) + ',' +
           format_number(r.test_acc) + ',' + format_optional(r.asr) + ',' + format_number(r.seconds) + '\n';
  }
  return out;
}

std::string format_sweep_csv(const std::string& axis, const std::vector<Aggregate>& rows) {
  std::string out = axis + ",mean,std\n";
  for (const auto& a : rows) {
    out += format_number(a.axis_value) + ',' + format_number(a.mean) + ',' + format_number(a.std) + '\n';
  }
  return out;
}

std::string format_report_json(const std::string& config_echo, const std::vector<SeedRecord>& records,
                               const std::vector<std::string>& notes) {
  nlohmann::ordered_json doc;
  doc["config"] = config_echo;
  doc["notes"] = notes;
  auto& recs = doc["records"] = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["defense"] = r.defense;
    j["rho_or_axis"] = r.axis_value;
    j["seed"] = r.seed;
    j["test_acc"] = r.test_acc;
    j["asr"] = r.asr ? nlohmann::ordered_json(*r.asr) : nlohmann::ordered_json(nullptr);
    j["seconds"] = r.seconds;
    j["data_hash"] = r.data_hash;
    j["params_hash"] = r.params_hash;
    recs.push_back(std::move(j));
  }
  auto& aggs = doc["aggregates"] = nlohmann::ordered_json::array();
  for (const auto& a : aggregate(records)) {
    aggs.push_back({{"defense", a.defense},
                    {"rho_or_axis", a.axis_value},
                    {"count", a.count},
                    {"mean", a.mean},
                    {"std", a.std}});
  }
  return doc.dump(2) + "\n";
}

std::vector<SeedRecord> parse_report_json(std::string_view text) {
  std::vector<SeedRecord> out;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& j : doc.at("records")) {
      SeedRecord r;
      r.defense = j.at("defense").get<std::string>();
      r.axis_value = j.at("rho_or_axis").get<double>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.test_acc = j.at("test_acc").get<double>();
      if (!j.at("asr").is_null()) r.asr = j.at("asr").get<double>();
      r.seconds = j.at("seconds").get<double>();
      r.data_hash = j.at("data_hash").get<std::string>();
      r.params_hash = j.at("params_hash").get<std::string>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report json: ") + e.what());
  }
  return out;
}

}  // namespace hint::harness
