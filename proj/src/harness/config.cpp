#include "hint/harness/config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "hint/error.hpp"
#include "hint/io.hpp"

namespace hint::harness {
namespace {

using Values = std::vector<std::string>;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ", ";
    out += fmt(items[i]);
  }
  return out;
}

const std::string& single(const Values& v, const std::string& key) {
  if (v.size() != 1) throw ConfigError(key + ": expected a single value");
  return v.front();
}

double to_double(const std::string& s, const std::string& key) {
  double out = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": '" + s + "' is not a number");
  }
  return out;
}

template <typename Int>
Int to_int(const std::string& s, const std::string& key) {
  Int out = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": '" + s + "' is not an integer");
  }
  return out;
}

bool to_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

data::Provenance to_attack(const std::string& s, const std::string& key) {
  try {
    const auto p = data::parse_provenance(s);
    if (p == data::Provenance::kClean) throw ConfigError(key + ": 'clean' is not an attack");
    return p;
  } catch (const FormatError&) {
    throw ConfigError(key + ": unknown attack '" + s + "'");
  }
}

influence::IhvpMethod to_method(const std::string& s, const std::string& key) {
  if (s == "lissa") return influence::IhvpMethod::kLissa;
  if (s == "exact") return influence::IhvpMethod::kExact;
  throw ConfigError(key + ": unknown inverse-HVP method '" + s + "'");
}

std::string method_name(influence::IhvpMethod m) {
  return m == influence::IhvpMethod::kLissa ? "lissa" : "exact";
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const Values&, const std::string& name)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// Field table builders for the common value kinds.
template <typename Ref>
Field number(std::string section, std::string key, Ref ref) {
  return {section, key,
          [ref](ExperimentConfig& c, const Values& v, const std::string& name) {
            auto& slot = ref(c);
            using T = std::remove_reference_t<decltype(slot)>;
            if constexpr (std::is_floating_point_v<T>) {
              slot = to_double(single(v, name), name);
            } else {
              slot = to_int<T>(single(v, name), name);
            }
          },
          [ref](const ExperimentConfig& c) {
            const auto& slot = ref(const_cast<ExperimentConfig&>(c));
            using T = std::remove_cvref_t<decltype(slot)>;
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(slot);
            } else {
              return std::to_string(slot);
            }
          }};
}

template <typename Ref>
Field flag(std::string section, std::string key, Ref ref) {
  return {section, key,
          [ref](ExperimentConfig& c, const Values& v, const std::string& name) {
            ref(c) = to_bool(single(v, name), name);
          },
          [ref](const ExperimentConfig& c) {
            return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

template <typename Ref>
Field text(std::string section, std::string key, Ref ref) {
  return {section, key,
          [ref](ExperimentConfig& c, const Values& v, const std::string& name) { ref(c) = single(v, name); },
          [ref](const ExperimentConfig& c) { return std::string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
Field int_list(std::string section, std::string key, Ref ref) {
  return {section, key,
          [ref](ExperimentConfig& c, const Values& v, const std::string& name) {
            auto& slot = ref(c);
            using T = typename std::remove_reference_t<decltype(slot)>::value_type;
            slot.clear();
            for (const auto& s : v) {
              if (!s.empty()) slot.push_back(to_int<T>(s, name));
            }
          },
          [ref](const ExperimentConfig& c) {
            const auto& slot = ref(const_cast<ExperimentConfig&>(c));
            using T = typename std::remove_cvref_t<decltype(slot)>::value_type;
            return join<T>(slot, [](const T& x) { return std::to_string(x); });
          }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      text("dataset", "source", [](C& c) -> auto& { return c.dataset.source; }),
      {"dataset", "data_dir",
       [](C& c, const Values& v, const std::string& name) { c.dataset.data_dir = single(v, name); },
       [](const C& c) { return c.dataset.data_dir.string(); }},
      text("dataset", "images", [](C& c) -> auto& { return c.dataset.images; }),
      text("dataset", "labels", [](C& c) -> auto& { return c.dataset.labels; }),
      number("dataset", "train", [](C& c) -> auto& { return c.dataset.train; }),
      number("dataset", "val", [](C& c) -> auto& { return c.dataset.val; }),
      number("dataset", "test", [](C& c) -> auto& { return c.dataset.test; }),
      number("dataset", "blob_dim", [](C& c) -> auto& { return c.dataset.blob_dim; }),
      number("dataset", "blob_classes", [](C& c) -> auto& { return c.dataset.blob_classes; }),
      number("dataset", "blob_spread", [](C& c) -> auto& { return c.dataset.blob_spread; }),
      number("dataset", "seed", [](C& c) -> auto& { return c.dataset.seed; }),

      int_list("model", "widths", [](C& c) -> auto& { return c.model.widths; }),
      {"model", "activation",
       [](C& c, const Values& v, const std::string& name) {
         const auto& s = single(v, name);
         if (s == "relu") {
           c.model.activation = nn::Activation::kRelu;
         } else if (s == "tanh") {
           c.model.activation = nn::Activation::kTanh;
         } else {
           throw ConfigError(name + ": unknown activation '" + s + "'");
         }
       },
       [](const C& c) { return std::string(nn::to_string(c.model.activation)); }},
      number("model", "top_layers", [](C& c) -> auto& { return c.model.top_layers; }),

      {"poison", "mode",
       [](C& c, const Values& v, const std::string& name) {
         const auto& s = single(v, name);
         if (s == "untargeted") {
           c.poison.mode = PoisonMode::kUntargeted;
         } else if (s == "targeted") {
           c.poison.mode = PoisonMode::kTargeted;
         } else {
           throw ConfigError(name + ": unknown mode '" + s + "'");
         }
       },
       [](const C& c) {
         return std::string(c.poison.mode == PoisonMode::kUntargeted ? "untargeted" : "targeted");
       }},
      number("poison", "rho", [](C& c) -> auto& { return c.poison.rho; }),
      {"poison", "attacks",
       [](C& c, const Values& v, const std::string& name) {
         c.poison.attacks.clear();
         for (const auto& s : v) {
           if (!s.empty()) c.poison.attacks.push_back(to_attack(s, name));
         }
       },
       [](const C& c) {
         return join<data::Provenance>(c.poison.attacks,
                                       [](const data::Provenance& p) { return std::string(data::to_string(p)); });
       }},
      number("poison", "xi", [](C& c) -> auto& { return c.poison.xi; }),
      number("poison", "steps", [](C& c) -> auto& { return c.poison.steps; }),
      number("poison", "step_size", [](C& c) -> auto& { return c.poison.step_size; }),
      number("poison", "victim_epochs", [](C& c) -> auto& { return c.poison.victim_epochs; }),
      number("poison", "targeted_victim_epochs", [](C& c) -> auto& { return c.poison.targeted_victim_epochs; }),
      number("poison", "seed", [](C& c) -> auto& { return c.poison.seed; }),
      {"poison", "targeted_attack",
       [](C& c, const Values& v, const std::string& name) {
         const auto p = to_attack(single(v, name), name);
         if (p != data::Provenance::kFc && p != data::Provenance::kGm) {
           throw ConfigError(name + ": targeted attack must be fc or gm");
         }
         c.poison.targeted_attack = p;
       },
       [](const C& c) { return std::string(data::to_string(c.poison.targeted_attack)); }},
      number("poison", "targets", [](C& c) -> auto& { return c.poison.targets; }),
      number("poison", "poisons_per_target", [](C& c) -> auto& { return c.poison.poisons_per_target; }),
      flag("poison", "transfer", [](C& c) -> auto& { return c.poison.transfer; }),
      number("poison", "fc_iterations", [](C& c) -> auto& { return c.poison.fc_iterations; }),
      number("poison", "fc_step_size", [](C& c) -> auto& { return c.poison.fc_step_size; }),
      number("poison", "fc_proximity", [](C& c) -> auto& { return c.poison.fc_proximity; }),
      number("poison", "fc_xi", [](C& c) -> auto& { return c.poison.fc_xi; }),
      number("poison", "gm_iterations", [](C& c) -> auto& { return c.poison.gm_iterations; }),
      number("poison", "gm_xi", [](C& c) -> auto& { return c.poison.gm_xi; }),
      number("poison", "gm_step_size", [](C& c) -> auto& { return c.poison.gm_step_size; }),

      text("train", "defense", [](C& c) -> auto& { return c.defense; }),
      number("train", "epochs", [](C& c) -> auto& { return c.sgd.epochs; }),
      number("train", "learning_rate", [](C& c) -> auto& { return c.sgd.learning_rate; }),
      number("train", "batch_size", [](C& c) -> auto& { return c.sgd.batch_size; }),
      int_list("train", "seeds", [](C& c) -> auto& { return c.seeds; }),

      number("hint", "pretrain_epochs", [](C& c) -> auto& { return c.hint.pretrain_epochs; }),
      number("hint", "gamma", [](C& c) -> auto& { return c.hint.gamma; }),
      number("hint", "beta", [](C& c) -> auto& { return c.hint.beta; }),
      number("hint", "ratio", [](C& c) -> auto& { return c.hint.ratio; }),
      int_list("hint", "schedule", [](C& c) -> auto& { return c.hint.schedule; }),
      flag("hint", "noise_top_layers", [](C& c) -> auto& { return c.hint.noise_top_layers; }),
      {"hint", "method",
       [](C& c, const Values& v, const std::string& name) {
         const auto m = to_method(single(v, name), name);
         c.hint.selection_influence.method = m;
         c.hint.noise_influence.method = m;
       },
       [](const C& c) { return method_name(c.hint.noise_influence.method); }},
      number("hint", "lissa_depth", [](C& c) -> auto& { return c.hint.noise_influence.lissa.depth; }),
      number("hint", "lissa_repetitions", [](C& c) -> auto& { return c.hint.noise_influence.lissa.repetitions; }),
      number("hint", "lissa_scale", [](C& c) -> auto& { return c.hint.noise_influence.lissa.scale; }),
      number("hint", "lissa_damping", [](C& c) -> auto& { return c.hint.noise_influence.lissa.damping; }),
      number("hint", "lissa_batch_size", [](C& c) -> auto& { return c.hint.noise_influence.lissa.batch_size; }),
      number("hint", "exact_damping", [](C& c) -> auto& { return c.hint.noise_influence.damping; }),

      number("friends", "warmup_epochs", [](C& c) -> auto& { return c.friends.warmup_epochs; }),
      number("friends", "beta", [](C& c) -> auto& { return c.friends.beta; }),
      number("friends", "lambda", [](C& c) -> auto& { return c.friends.lambda; }),
      number("friends", "bernoulli", [](C& c) -> auto& { return c.friends.bernoulli; }),
      number("friends", "noise_steps", [](C& c) -> auto& { return c.friends.noise_steps; }),
      number("friends", "noise_step_size", [](C& c) -> auto& { return c.friends.noise_step_size; }),

      number("atda", "beta", [](C& c) -> auto& { return c.atda.beta; }),
      number("atda", "tau", [](C& c) -> auto& { return c.atda.tau; }),
      number("atda", "inner_steps", [](C& c) -> auto& { return c.atda.inner_steps; }),
      number("atda", "inner_step_size", [](C& c) -> auto& { return c.atda.inner_step_size; }),

      text("sweep", "axis", [](C& c) -> auto& { return c.sweep.axis; }),
      {"sweep", "values",
       [](C& c, const Values& v, const std::string& name) {
         c.sweep.values.clear();
         for (const auto& s : v) {
           if (!s.empty()) c.sweep.values.push_back(to_double(s, name));
         }
       },
       [](const C& c) { return join<double>(c.sweep.values, format_double); }},

      flag("report", "wall_clock", [](C& c) -> auto& { return c.report.wall_clock; }),
  };
  return table;
}

// Selection uses the same LiSSA settings as the noise rounds.
void sync_influence(ExperimentConfig& c) {
  c.hint.selection_influence.lissa = c.hint.noise_influence.lissa;
  c.hint.selection_influence.damping = c.hint.noise_influence.damping;
}

}  // namespace

const std::vector<std::string>& known_defenses() {
  static const std::vector<std::string> names = {"none", "hint", "friends", "atda"};
  return names;
}

defenses::HintConfig ExperimentConfig::hint_config() const {
  auto out = hint;
  out.sgd = sgd;
  return out;
}

defenses::FriendsConfig ExperimentConfig::friends_config() const {
  auto out = friends;
  out.sgd = sgd;
  return out;
}

defenses::AtdaConfig ExperimentConfig::atda_config() const {
  auto out = atda;
  out.sgd = sgd;
  return out;
}

void ExperimentConfig::validate() const {
  if (dataset.source != "mnist" && dataset.source != "blobs") {
    throw ConfigError("dataset.source: unknown source '" + dataset.source + "'");
  }
  if (dataset.train == 0 || dataset.val == 0 || dataset.test == 0) {
    throw ConfigError("dataset: split sizes must be positive");
  }
  try {
    model.spec().validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (std::find(known_defenses().begin(), known_defenses().end(), defense) == known_defenses().end()) {
    throw ConfigError("train.defense: unknown defense '" + defense + "'");
  }
  if (seeds.empty()) throw ConfigError("train.seeds: at least one seed is required");
  if (!(poison.rho >= 0.0 && poison.rho <= 1.0)) throw ConfigError("poison.rho must lie in [0, 1]");
  if (poison.mode == PoisonMode::kUntargeted && poison.rho > 0.0 && poison.attacks.empty()) {
    throw ConfigError("poison.attacks: a positive rho needs at least one attack");
  }
  for (auto a : poison.attacks) {
    if (a == data::Provenance::kFc || a == data::Provenance::kGm) {
      throw ConfigError("poison.attacks: fc and gm are targeted; set poison.mode = targeted");
    }
  }
  if (poison.mode == PoisonMode::kTargeted && (poison.targets < 1 || poison.poisons_per_target < 1)) {
    throw ConfigError("poison: targeted mode needs at least one target and one poison per target");
  }
  if (poison.victim_epochs < 0) throw ConfigError("poison.victim_epochs must be non-negative");
  if (poison.targeted_victim_epochs < 0) throw ConfigError("poison.targeted_victim_epochs must be non-negative");
  try {
    poison.budget().validate();
    hint_config().validate();
    friends_config().validate();
    atda_config().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!sweep.axis.empty()) {
    if (sweep.axis != "r" && sweep.axis != "beta" && sweep.axis != "rho") {
      throw ConfigError("sweep.axis: must be r, beta or rho");
    }
    if (sweep.values.empty()) throw ConfigError("sweep.values: empty sweep");
  }
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  ExperimentConfig cfg;
  std::istringstream in{std::string(text)};
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string(source) + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.parents.size() != 1) {
      throw ConfigError(std::string(source) + ": key '" + item.fullname() + "' must sit in one [section]");
    }
    const auto& section = item.parents.front();
    const auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) {
      return f.section == section && f.key == item.name;
    });
    if (it == fields().end()) {
      throw ConfigError(std::string(source) + ": unknown key '" + section + "." + item.name + "'");
    }
    it->set(cfg, item.inputs, section + "." + item.name);
  }
  sync_influence(cfg);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const ArtifactError&) {
    throw ConfigError("config file not found: " + path.string());
  }
  return parse_config(text, path.string());
}

std::string echo_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::string poison_key(const ExperimentConfig& cfg) {
  std::string key;
  for (const auto& f : fields()) {
    if (f.section == "dataset" || f.section == "model" || f.section == "poison") {
      key += f.section + "." + f.key + "=" + f.get(cfg) + "\n";
    }
  }
  // The transfer feature extractor is trained with the shared SGD settings.
  key += "train.learning_rate=" + format_double(cfg.sgd.learning_rate) + "\n";
  key += "train.batch_size=" + std::to_string(cfg.sgd.batch_size) + "\n";
  return io::git_blob_hash(key);
}

}  // namespace hint::harness
