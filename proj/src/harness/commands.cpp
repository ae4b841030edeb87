#include "hint/harness/commands.hpp"

#include <json.hpp>

#include <algorithm>

#include "hint/error.hpp"
#include "hint/io.hpp"

namespace hint::harness {
namespace fs = std::filesystem;

namespace {

const char* kSharedPoisonNote =
    "one poisoned dataset is shared by every seed; seeds vary model initialization and batch order";

std::string run_key(const ExperimentConfig& cfg, double axis_value) {
  return io::git_blob_hash(echo_config(cfg) + "axis_value=" + format_number(axis_value) + "\n");
}

nlohmann::ordered_json read_json(const fs::path& path) {
  try {
    return nlohmann::ordered_json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

fs::path ArtifactStore::object_path(const std::string& hash, const std::string& ext) const {
  return root_ / "objects" / (hash + ext);
}

fs::path ArtifactStore::temp_path(const std::string& stem) const {
  fs::create_directories(root_ / "tmp");
  return root_ / "tmp" / stem;
}

std::string ArtifactStore::put(std::string_view bytes, const std::string& ext) const {
  const auto hash = io::git_blob_hash(bytes);
  const auto path = object_path(hash, ext);
  if (!fs::exists(path)) {
    const auto tmp = temp_path(hash + ext);
    io::write_file(tmp, bytes);
    fs::create_directories(path.parent_path());
    fs::rename(tmp, path);
  }
  return hash;
}

std::string ArtifactStore::put_file(const fs::path& tmp, const std::string& ext) const {
  const auto hash = io::git_blob_hash_file(tmp);
  const auto path = object_path(hash, ext);
  if (fs::exists(path)) {
    fs::remove(tmp);
  } else {
    fs::create_directories(path.parent_path());
    fs::rename(tmp, path);
  }
  return hash;
}

fs::path ArtifactStore::verified(const std::string& hash, const std::string& ext) const {
  const auto path = object_path(hash, ext);
  if (!fs::exists(path)) throw ArtifactError("missing artifact: expected " + path.string());
  if (io::git_blob_hash_file(path) != hash) {
    throw IntegrityError(path.string() + ": content does not match its hash");
  }
  return path;
}

void verify_content_address(const fs::path& path) {
  if (!fs::exists(path)) throw ArtifactError("missing artifact: expected " + path.string());
  auto stem = path.filename().string();
  stem = stem.substr(0, stem.find('.'));
  const auto actual = io::git_blob_hash_file(path);
  if (actual != stem) {
    throw IntegrityError(path.string() + ": content hash " + actual + " does not match the file name");
  }
}

fs::path poison_index_path(const ExperimentConfig& cfg, const fs::path& out) {
  return out / "poison" / (poison_key(cfg) + ".json");
}

PoisonIndex cmd_poison(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  const auto index_path = poison_index_path(cfg, out);
  if (fs::exists(index_path)) {
    log << "poison: reusing " << index_path.string() << "\n";
    return load_poison(cfg, out).index;
  }
  const ArtifactStore store(out);
  const auto splits = load_splits(cfg.dataset);
  log << "poison: crafting " << (cfg.poison.mode == PoisonMode::kUntargeted ? "untargeted" : "targeted")
      << " poisons (rho " << format_number(cfg.poison.rho) << ")\n";
  const auto poisoned = build_poisoned(cfg, splits);

  PoisonIndex index;
  index.key = poison_key(cfg);
  const auto save = [&](const data::LabeledSet& set, const std::string& name) {
    const auto tmp = store.temp_path(index.key + "." + name);
    data::save_set(set, tmp);
    return store.put_file(tmp, ".set");
  };
  index.train_hash = save(poisoned.train, "train");
  index.val_hash = save(splits.val, "val");
  index.test_hash = save(splits.test, "test");
  index.manifest_hash = store.put(attacks::format_manifest(poisoned.manifest), ".manifest.csv");
  if (!poisoned.targets.empty()) index.targets_hash = store.put(format_targets(poisoned.targets), ".targets.csv");
  if (poisoned.extractor) {
    const auto tmp = store.temp_path(index.key + ".extractor");
    defenses::save_params(tmp, cfg.model.spec(), *poisoned.extractor);
    index.extractor_hash = store.put_file(tmp, ".params");
  }

  nlohmann::ordered_json doc;
  doc["key"] = index.key;
  doc["config"] = echo_config(cfg);
  doc["train"] = index.train_hash;
  doc["val"] = index.val_hash;
  doc["test"] = index.test_hash;
  doc["manifest"] = index.manifest_hash;
  doc["targets"] = index.targets_hash;
  doc["extractor"] = index.extractor_hash;
  io::write_file(index_path, doc.dump(2) + "\n");
  log << "poison: wrote " << index_path.string() << "\n";
  return index;
}

LoadedPoison load_poison(const ExperimentConfig& cfg, const fs::path& out) {
  const auto index_path = poison_index_path(cfg, out);
  if (!fs::exists(index_path)) {
    throw ArtifactError("missing poisoned dataset: expected " + index_path.string() +
                        " (run `poison` with the same config first)");
  }
  const auto doc = read_json(index_path);
  LoadedPoison out_data;
  auto& index = out_data.index;
  try {
    index.key = doc.at("key").get<std::string>();
    index.train_hash = doc.at("train").get<std::string>();
    index.val_hash = doc.at("val").get<std::string>();
    index.test_hash = doc.at("test").get<std::string>();
    index.manifest_hash = doc.at("manifest").get<std::string>();
    index.targets_hash = doc.at("targets").get<std::string>();
    index.extractor_hash = doc.at("extractor").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  const ArtifactStore store(out);
  out_data.splits.train = data::load_set(store.verified(index.train_hash, ".set"));
  out_data.splits.val = data::load_set(store.verified(index.val_hash, ".set"));
  out_data.splits.test = data::load_set(store.verified(index.test_hash, ".set"));
  out_data.data.train = out_data.splits.train;
  out_data.data.manifest =
      attacks::parse_manifest(io::read_text(store.verified(index.manifest_hash, ".manifest.csv")));
  if (out_data.data.manifest.size() != out_data.data.train.size()) {
    throw IntegrityError("manifest row count does not match the poisoned dataset");
  }
  if (!index.targets_hash.empty()) {
    out_data.data.targets = parse_targets(io::read_text(store.verified(index.targets_hash, ".targets.csv")));
  }
  if (!index.extractor_hash.empty()) {
    auto [spec, params] = defenses::load_params(store.verified(index.extractor_hash, ".params"));
    if (spec != cfg.model.spec()) throw IntegrityError("stored feature extractor has a different model spec");
    out_data.data.extractor = std::move(params);
  }
  return out_data;
}

std::vector<SeedRecord> cmd_train(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log,
                                  std::optional<double> axis_value) {
  cfg.validate();
  const double axis = axis_value.value_or(cfg.poison.rho);
  const auto key = run_key(cfg, axis);
  const auto json_path = out / "runs" / (key + ".json");
  if (fs::exists(json_path)) {
    log << "train: reusing " << json_path.string() << "\n";
    return parse_report_json(io::read_text(json_path));
  }
  const auto loaded = load_poison(cfg, out);
  const ArtifactStore store(out);
  const nn::Mlp model(cfg.model.spec());
  const auto targets = resolve_targets(loaded.data.targets, loaded.splits.test);

  std::vector<SeedRecord> records;
  std::vector<std::string> notes = {kSharedPoisonNote};
  for (auto seed : cfg.seeds) {
    const auto outcome = run_defense(cfg, loaded.data, loaded.splits, seed);
    const auto tmp = store.temp_path(key + ".params");
    defenses::save_params(tmp, cfg.model.spec(), outcome.params);
    SeedRecord r;
    r.defense = cfg.defense;
    r.axis_value = axis;
    r.seed = seed;
    r.test_acc = defenses::evaluate_accuracy(model, outcome.params, loaded.splits.test);
    if (!targets.empty()) r.asr = defenses::evaluate_asr(model, outcome.params, targets);
    r.seconds = cfg.report.wall_clock ? outcome.seconds : 0.0;
    r.data_hash = loaded.index.train_hash;
    r.params_hash = store.put_file(tmp, ".params");
    log << "train: " << r.defense << " seed " << seed << " test_acc " << format_number(r.test_acc);
    if (r.asr) log << " asr " << format_number(*r.asr);
    log << " (" << format_number(outcome.seconds) << " s)\n";
    if (outcome.trace) {
      for (const auto& round : outcome.trace->rounds) {
        notes.push_back("seed " + std::to_string(seed) + " noise round at epoch " + std::to_string(round.epoch) +
                        ": max |delta| " + format_number(round.max_abs_delta) + ", mean |step| " +
                        format_number(round.mean_abs_step));
      }
    }
    records.push_back(std::move(r));
  }
  io::write_file(out / "runs" / (key + ".csv"), format_records_csv(records));
  io::write_file(json_path, format_report_json(echo_config(cfg), records, notes));
  return records;
}

EvalRecord cmd_eval(const fs::path& params_path, const fs::path& dataset_path,
                    const std::optional<fs::path>& targets_path, const std::optional<fs::path>& out) {
  verify_content_address(params_path);
  verify_content_address(dataset_path);
  const auto [spec, params] = defenses::load_params(params_path);
  const nn::Mlp model(spec);
  const auto set = data::load_set(dataset_path);
  if (set.dim() != spec.input_dim()) throw IntegrityError("dataset dimension does not match the model");
  EvalRecord rec;
  rec.accuracy = defenses::evaluate_accuracy(model, params, set);
  rec.params_hash = io::git_blob_hash_file(params_path);
  rec.dataset_hash = io::git_blob_hash_file(dataset_path);
  if (targets_path) {
    verify_content_address(*targets_path);
    const auto targets = resolve_targets(parse_targets(io::read_text(*targets_path)), set);
    rec.asr = defenses::evaluate_asr(model, params, targets);
  }
  if (out) {
    const auto path = *out / "eval.csv";
    std::string text = fs::exists(path) ? io::read_text(path) : "params_hash,dataset_hash,accuracy,asr\n";
    text += rec.params_hash + ',' + rec.dataset_hash + ',' + format_number(rec.accuracy) + ',' +
            (rec.asr ? format_number(*rec.asr) : "") + '\n';
    io::write_file(path, text);
  }
  return rec;
}

ExperimentConfig with_axis(const ExperimentConfig& cfg, const std::string& axis, double value) {
  ExperimentConfig c = cfg;
  if (axis == "r") {
    c.hint.ratio = value;
  } else if (axis == "beta") {
    c.hint.beta = value;
  } else if (axis == "rho") {
    c.poison.rho = value;
  } else {
    throw ConfigError("sweep.axis: must be r, beta or rho");
  }
  c.sweep = {};
  c.validate();
  return c;
}

std::vector<SeedRecord> cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  if (cfg.sweep.axis.empty()) throw ConfigError("sweep.axis: no axis given");
  std::vector<SeedRecord> records;
  for (double v : cfg.sweep.values) {
    const auto c = with_axis(cfg, cfg.sweep.axis, v);
    log << "sweep: " << cfg.sweep.axis << " = " << format_number(v) << "\n";
    cmd_poison(c, out, log);
    const auto rs = cmd_train(c, out, log, v);
    records.insert(records.end(), rs.begin(), rs.end());
  }
  const auto stem = "sweep-" + cfg.sweep.axis + "-" + cfg.defense;
  io::write_file(out / (stem + ".csv"), format_sweep_csv(cfg.sweep.axis, aggregate(records)));
  io::write_file(out / (stem + "-records.csv"), format_records_csv(records));
  io::write_file(out / (stem + ".json"), format_report_json(echo_config(cfg), records, {kSharedPoisonNote}));
  return records;
}

std::vector<SeedRecord> cmd_report(const fs::path& out, std::ostream& log) {
  const auto runs = out / "runs";
  if (!fs::exists(runs)) throw ArtifactError("no runs to report: expected " + runs.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(runs)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SeedRecord> records;
  nlohmann::ordered_json configs = nlohmann::ordered_json::array();
  for (const auto& f : files) {
    const auto doc = read_json(f);
    const auto rs = parse_report_json(doc.dump());
    records.insert(records.end(), rs.begin(), rs.end());
    configs.push_back({{"run", f.stem().string()}, {"config", doc.at("config")}});
  }
  io::write_file(out / "report.csv", format_records_csv(records));
  auto doc = nlohmann::ordered_json::parse(format_report_json("", records, {kSharedPoisonNote}));
  doc["config"] = configs;
  io::write_file(out / "report.json", doc.dump(2) + "\n");
  std::string summary = "defense,rho_or_axis,count,mean,std\n";
  for (const auto& a : aggregate(records)) {
    summary += a.defense + ',' + format_number(a.axis_value) + ',' + std::to_string(a.count) + ',' +
               format_number(a.mean) + ',' + format_number(a.std) + '\n';
  }
  io::write_file(out / "summary.csv", summary);
  log << "report: " << records.size() << " records from " << files.size() << " runs\n";
  return records;
}

}  // namespace hint::harness
