#include "hint/defenses/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "hint/error.hpp"
#include "hint/io.hpp"

namespace hint::defenses {
namespace {

constexpr std::size_t kChunk = 256;
constexpr std::uint64_t kInfluenceStream = 0x1f1;
constexpr std::uint64_t kNoiseStream = 0x2f2;

// A generator for auxiliary randomness (influence sampling, noise draws)
// seeded from a copy of the training stream, so the training stream itself
// is not advanced and shuffles match plain SGD under the same seed.
Rng side_stream(const Rng& rng, std::uint64_t salt) {
  Rng copy = rng;
  return Rng(derive_seed(copy(), salt));
}

template <typename F>
void for_chunks(std::size_t n, F&& body) {
  for (std::size_t begin = 0; begin < n; begin += kChunk) body(begin, std::min(n, begin + kChunk));
}

// original + delta, clipped to [0,1] and nudged so that the stored
// difference never exceeds beta after rounding.
double bounded_pixel(double original, double delta, double beta) {
  double x = std::clamp(original + delta, 0.0, 1.0);
  while (std::abs(x - original) > beta) x = std::nextafter(x, original);
  return x;
}

}  // namespace

void SgdConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
}

ParamVector sgd_epoch(const nn::Mlp& model, ParamVector params, const LabeledSet& set,
                      const SgdConfig& cfg, Rng& rng, const BatchTransform& transform) {
  auto order = data::all_rows(set);
  shuffle(std::span(order), rng);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t begin = 0; begin < order.size(); begin += batch) {
    const std::span<const std::size_t> rows(order.data() + begin, std::min(batch, order.size() - begin));
    data::BatchData data(set, rows);
    if (transform) transform(params, data.xs, data.ys);
    params = model.sgd_step(params, data.view(), cfg.learning_rate, cfg.trainable);
  }
  return params;
}

ParamVector train_plain(const nn::Mlp& model, ParamVector params, const LabeledSet& set,
                        const SgdConfig& cfg, Rng& rng) {
  cfg.validate();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) params = sgd_epoch(model, std::move(params), set, cfg, rng);
  return params;
}

ParamVector pretrain(const nn::Mlp& model, ParamVector params, const LabeledSet& set, int epochs,
                     const SgdConfig& cfg, Rng& rng) {
  if (epochs < 0) throw ConfigError("pretrain epochs must be non-negative");
  for (int epoch = 0; epoch < epochs; ++epoch) params = sgd_epoch(model, std::move(params), set, cfg, rng);
  return params;
}

void HintConfig::validate() const {
  sgd.validate();
  if (pretrain_epochs < 0 || pretrain_epochs > sgd.epochs) {
    throw ConfigError("pretrain epochs must lie in [0, epochs]");
  }
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("selection ratio r must lie in (0, 1]");
  if (!(beta > 0.0)) throw ConfigError("healthy noise bound beta must be positive");
  // gamma = 0 is accepted: it is the degenerate no-noise configuration.
  if (!(gamma >= 0.0)) throw ConfigError("scaling factor gamma must be non-negative");
  if (!std::is_sorted(schedule.begin(), schedule.end()) ||
      std::adjacent_find(schedule.begin(), schedule.end()) != schedule.end()) {
    throw ConfigError("noise schedule must be strictly increasing");
  }
  if (!schedule.empty() && (schedule.front() <= pretrain_epochs || schedule.back() > sgd.epochs)) {
    throw ConfigError("noise schedule epochs must lie in (pretrain_epochs, epochs]");
  }
  selection_influence.lissa.validate();
  noise_influence.lissa.validate();
}

std::size_t selection_size(double ratio, std::size_t n) {
  // The epsilon keeps 0.5 * 100 from rounding up to 51.
  return std::min(n, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9)));
}

Selection select_by_scores(std::span<const double> scores, std::span<const std::int64_t> origin_index,
                           double ratio) {
  if (scores.size() != origin_index.size()) throw InvalidInputError("scores and origins differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = std::abs(scores[a]);
    const double sb = std::abs(scores[b]);
    if (sa != sb) return sa > sb;
    return origin_index[a] < origin_index[b];
  });
  Selection out;
  const std::size_t k = selection_size(ratio, scores.size());
  out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  out.unselected.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(out.unselected.begin(), out.unselected.end());
  out.scores.assign(scores.begin(), scores.end());
  return out;
}

Selection secinf(const nn::Mlp& model, const ParamVector& params, const LabeledSet& train,
                 const LabeledSet& val, double ratio, ParamMask mask,
                 const influence::InfluenceOptions& options, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidInputError("selection ratio must lie in (0, 1]");
  const auto s = influence::compute_influence_vector(model, params, train, val, mask, options, rng);
  const auto scores = influence::influence_up_loss_all(model, train, s, params);
  return select_by_scores(scores, train.origin_index(), ratio);
}

NoisyTrainState NoisyTrainState::start(const LabeledSet& original, std::vector<std::size_t> selected) {
  for (auto i : selected) {
    if (i >= original.size()) throw InvalidInputError("selected row out of range");
  }
  NoisyTrainState state{original, std::move(selected), {}};
  state.deltas = FeatureMatrix::Zero(static_cast<Eigen::Index>(state.selected.size()), original.dim());
  return state;
}

void NoisyTrainState::check(const LabeledSet& original, double beta) const {
  if (noisy.size() != original.size() || deltas.rows() != static_cast<Eigen::Index>(selected.size())) {
    throw InvalidInputError("noise state does not match the training set");
  }
  std::vector<bool> is_selected(original.size(), false);
  for (std::size_t k = 0; k < selected.size(); ++k) {
    const auto i = selected[k];
    if (is_selected[i]) throw InvalidInputError("row selected twice");
    is_selected[i] = true;
    const auto r = static_cast<Eigen::Index>(i);
    const auto x = original.features().row(r);
    const auto xh = noisy.features().row(r);
    if (deltas.row(static_cast<Eigen::Index>(k)) != xh - x) {
      throw InvalidInputError("stored noise differs from noisy - original on row " + std::to_string(i));
    }
    if (deltas.row(static_cast<Eigen::Index>(k)).cwiseAbs().maxCoeff() > beta) {
      throw InvalidInputError("noise exceeds beta on row " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < original.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!is_selected[i] && noisy.features().row(r) != original.features().row(r)) {
      throw InvalidInputError("unselected row " + std::to_string(i) + " was modified");
    }
  }
  if (noisy.labels() != original.labels()) throw InvalidInputError("labels changed");
}

NoiseRoundStats addnoise(NoisyTrainState& state, const LabeledSet& original, const nn::Mlp& model,
                         const ParamVector& params, const influence::InfluenceVector& s,
                         double gamma, double beta) {
  s.check_fresh(params);
  NoiseRoundStats stats;
  double step_total = 0.0;
  for_chunks(state.selected.size(), [&](std::size_t begin, std::size_t end) {
    const std::span<const std::size_t> rows(state.selected.data() + begin, end - begin);
    const data::BatchData batch(state.noisy, rows);
    // Perturbation influence of every noisy row in the chunk, one column each.
    const Eigen::MatrixXd pert = -model.mixed_grad(params, batch.view(), s.s);
    for (std::size_t k = begin; k < end; ++k) {
      const auto row = static_cast<Eigen::Index>(state.selected[k]);
      const Eigen::VectorXd x = original.features().row(row).transpose();
      const Eigen::VectorXd step = gamma * pert.col(static_cast<Eigen::Index>(k - begin));
      const Eigen::VectorXd delta =
          (state.noisy.features().row(row).transpose() - x - step).cwiseMax(-beta).cwiseMin(beta);
      Eigen::VectorXd noisy(x.size());
      for (Eigen::Index j = 0; j < x.size(); ++j) noisy[j] = bounded_pixel(x[j], delta[j], beta);
      state.noisy.set_row(state.selected[k], noisy, state.noisy.provenance()[state.selected[k]]);
      state.deltas.row(static_cast<Eigen::Index>(k)) = (noisy - x).transpose();
      step_total += step.cwiseAbs().sum();
    }
  });
  if (!state.selected.empty()) {
    stats.max_abs_delta = state.deltas.cwiseAbs().maxCoeff();
    stats.mean_abs_step = step_total / static_cast<double>(state.deltas.size());
  }
  stats.min_pixel = state.noisy.features().minCoeff();
  stats.max_pixel = state.noisy.features().maxCoeff();
  return stats;
}

ParamVector hint_train(const nn::Mlp& model, const HintConfig& cfg, const LabeledSet& train,
                       const LabeledSet& val, ParamVector params, Rng& rng, HintTrace* trace) {
  cfg.validate();
  Rng influence_rng = side_stream(rng, kInfluenceStream);
  const ParamMask noise_mask =
      cfg.noise_top_layers ? model.top_mask() : cfg.sgd.trainable.value_or(model.full_mask());

  params = pretrain(model, std::move(params), train, cfg.pretrain_epochs, cfg.sgd, rng);
  Selection selection = secinf(model, params, train, val, cfg.ratio, model.top_mask(),
                               cfg.selection_influence, influence_rng);
  NoisyTrainState state = NoisyTrainState::start(train, selection.selected);
  std::vector<NoiseRoundStats> rounds;
  for (int epoch = cfg.pretrain_epochs + 1; epoch <= cfg.sgd.epochs; ++epoch) {
    if (std::binary_search(cfg.schedule.begin(), cfg.schedule.end(), epoch)) {
      const auto s = influence::compute_influence_vector(model, params, state.noisy, val, noise_mask,
                                                         cfg.noise_influence, influence_rng);
      auto stats = addnoise(state, train, model, params, s, cfg.gamma, cfg.beta);
      stats.epoch = epoch;
      state.check(train, cfg.beta);
      rounds.push_back(stats);
    }
    params = sgd_epoch(model, std::move(params), state.noisy, cfg.sgd, rng);
  }
  if (trace != nullptr) {
    trace->selection = std::move(selection);
    trace->rounds = std::move(rounds);
    trace->final_state = std::move(state);
  }
  return params;
}

void FriendsConfig::validate() const {
  sgd.validate();
  if (warmup_epochs < 0 || warmup_epochs > sgd.epochs) throw ConfigError("warmup epochs must lie in [0, epochs]");
  if (!(beta >= 0.0) || !(lambda >= 0.0) || !(bernoulli >= 0.0)) {
    throw ConfigError("FRIENDS beta, lambda and Bernoulli magnitude must be non-negative");
  }
  if (noise_steps < 0 || !(noise_step_size >= 0.0)) throw ConfigError("invalid friendly-noise schedule");
}

double output_kl(const nn::Mlp& model, const ParamVector& params, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& noise) {
  const Eigen::VectorXd p0 = nn::softmax(model.forward(params, x));
  const Eigen::VectorXd p = nn::softmax(model.forward(params, x + noise));
  double kl = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(p0[j]));
  }
  return kl;
}

namespace {

Eigen::MatrixXd softmax_cols(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) p.col(j) = nn::softmax(z.col(j));
  return p;
}

// Keeps e within the beta ball and x + e within [0,1].
void project_noise(Eigen::MatrixXd& e, const Eigen::MatrixXd& x, double beta) {
  e = e.array().max(-beta).min(beta).max(-x.array()).min(1.0 - x.array()).matrix();
}

}  // namespace

FeatureMatrix friendly_noise(const nn::Mlp& model, const ParamVector& params, const LabeledSet& set,
                             const FriendsConfig& cfg, Rng& rng) {
  cfg.validate();
  FeatureMatrix out = FeatureMatrix::Zero(static_cast<Eigen::Index>(set.size()), set.dim());
  if (cfg.noise_steps == 0 || cfg.beta == 0.0) return out;
  const auto rows = data::all_rows(set);
  for_chunks(set.size(), [&](std::size_t begin, std::size_t end) {
    const std::span<const std::size_t> chunk(rows.data() + begin, end - begin);
    const Eigen::MatrixXd x = set.gather_columns(chunk);
    const Eigen::MatrixXd log_p0 = softmax_cols(model.forward(params, nn::Batch{x, set.gather_labels(chunk)}))
                                       .array()
                                       .log()
                                       .matrix();
    Eigen::MatrixXd e(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = uniform(rng, -cfg.beta, cfg.beta);
    project_noise(e, x, cfg.beta);
    const std::vector<int> dummy(chunk.size(), 0);
    for (int step = 0; step < cfg.noise_steps; ++step) {
      const Eigen::MatrixXd xe = x + e;
      const Eigen::MatrixXd p = softmax_cols(model.forward(params, nn::Batch{xe, dummy}));
      // d KL(p || p0) / d logits = p * (log p - log p0) - p * KL, per column.
      Eigen::MatrixXd cot(p.rows(), p.cols());
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const Eigen::ArrayXd log_ratio = p.col(j).array().max(1e-300).log() - log_p0.col(j).array();
        const double kl = (p.col(j).array() * log_ratio).sum();
        cot.col(j) = (p.col(j).array() * (log_ratio - kl)).matrix();
      }
      Eigen::MatrixXd grad = model.logits_vjp(params, xe, cot);
      // Linearly decaying so the iterates settle instead of orbiting the optimum.
      const double decay = 1.0 - static_cast<double>(step) / cfg.noise_steps;
      const double rms_step = decay * cfg.noise_step_size * std::sqrt(static_cast<double>(e.rows()));
      for (Eigen::Index j = 0; j < e.cols(); ++j) {
        const double norm = e.col(j).norm();
        if (norm > 0.0) grad.col(j) -= cfg.lambda * e.col(j) / norm;
        // Normalized step: the per-pixel root-mean-square move is noise_step_size.
        const double gnorm = grad.col(j).norm();
        if (gnorm > 0.0) e.col(j) -= rms_step * grad.col(j) / gnorm;
      }
      project_noise(e, x, cfg.beta);
    }
    for (std::size_t k = begin; k < end; ++k) {
      out.row(static_cast<Eigen::Index>(k)) = e.col(static_cast<Eigen::Index>(k - begin)).transpose();
    }
  });
  return out;
}

ParamVector friends_train(const nn::Mlp& model, const FriendsConfig& cfg, const LabeledSet& train,
                          ParamVector params, Rng& rng) {
  cfg.validate();
  Rng noise_rng = side_stream(rng, kNoiseStream);
  params = pretrain(model, std::move(params), train, cfg.warmup_epochs, cfg.sgd, rng);
  const FeatureMatrix friendly = friendly_noise(model, params, train, cfg, noise_rng);
  const LabeledSet noisy(train.features() + friendly, train.labels(), train.num_classes(), train.provenance(),
                         train.origin_index());
  const BatchTransform bernoulli = [&](const ParamVector&, Eigen::MatrixXd& xs, std::span<const int>) {
    if (cfg.bernoulli == 0.0) return;
    for (Eigen::Index i = 0; i < xs.size(); ++i) {
      const double flip = uniform01(noise_rng) < 0.5 ? -cfg.bernoulli : cfg.bernoulli;
      xs.data()[i] = std::clamp(xs.data()[i] + flip, 0.0, 1.0);
    }
  };
  for (int epoch = cfg.warmup_epochs; epoch < cfg.sgd.epochs; ++epoch) {
    params = sgd_epoch(model, std::move(params), noisy, cfg.sgd, rng, bernoulli);
  }
  return params;
}

void AtdaConfig::validate() const {
  sgd.validate();
  if (!(beta >= 0.0)) throw ConfigError("ATDA beta must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("ATDA margin tau must be positive");
  if (inner_steps < 0 || !(inner_step_size >= 0.0)) throw ConfigError("invalid ATDA inner schedule");
}

ParamVector atda_train(const nn::Mlp& model, const AtdaConfig& cfg, const LabeledSet& train,
                       ParamVector params, Rng& rng, AtdaStats* stats) {
  cfg.validate();
  AtdaStats counts;
  const BatchTransform adversarial = [&](const ParamVector& current, Eigen::MatrixXd& xs,
                                          std::span<const int> ys) {
    if (cfg.inner_steps == 0) return;
    const Eigen::MatrixXd start = xs;
    std::vector<bool> active(ys.size(), true);
    counts.inner_loops += ys.size();
    for (int step = 0; step < cfg.inner_steps; ++step) {
      const Eigen::MatrixXd logits = model.forward(current, nn::Batch{xs, ys});
      bool any = false;
      for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        if (!active[j]) continue;
        // l(y) - min_y' l(y') equals max logit - logit of y.
        if (logits.col(j).maxCoeff() - logits(ys[j], j) >= cfg.tau) {
          active[j] = false;
          ++counts.early_stops;
        } else {
          any = true;
        }
      }
      if (!any) break;
      const Eigen::MatrixXd g = model.grad_input(current, nn::Batch{xs, ys});
      for (Eigen::Index j = 0; j < xs.cols(); ++j) {
        if (active[j]) xs.col(j).array() += cfg.inner_step_size * g.col(j).array().sign();
      }
      xs = xs.array().max(start.array() - cfg.beta).min(start.array() + cfg.beta).max(0.0).min(1.0).matrix();
    }
  };
  for (int epoch = 0; epoch < cfg.sgd.epochs; ++epoch) {
    params = sgd_epoch(model, std::move(params), train, cfg.sgd, rng, adversarial);
  }
  if (stats != nullptr) *stats = counts;
  return params;
}

double evaluate_accuracy(const nn::Mlp& model, const ParamVector& params, const LabeledSet& set) {
  if (set.empty()) throw InvalidInputError("cannot evaluate accuracy on an empty set");
  std::size_t correct = 0;
  const auto rows = data::all_rows(set);
  for_chunks(set.size(), [&](std::size_t begin, std::size_t end) {
    const data::BatchData batch(set, std::span(rows.data() + begin, end - begin));
    const Eigen::MatrixXd logits = model.forward(params, batch.view());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      Eigen::Index pred = 0;
      logits.col(j).maxCoeff(&pred);
      if (pred == batch.ys[static_cast<std::size_t>(j)]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

double evaluate_asr(const nn::Mlp& model, const ParamVector& params,
                    std::span<const attacks::TargetSpec> targets) {
  if (targets.empty()) throw InvalidInputError("cannot evaluate attack success without targets");
  std::size_t hits = 0;
  for (const auto& t : targets) {
    Eigen::Index pred = 0;
    model.forward(params, t.target.x).maxCoeff(&pred);
    if (pred == t.adversarial_class) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

namespace {
constexpr std::string_view kParamsMagic = "HINTPARAMS1\n";
constexpr std::string_view kParamsEnd = "end\n";
constexpr char kNoiseMagic[8] = {'H', 'I', 'N', 'T', 'N', 'O', 'I', 'S'};
}  // namespace

void save_params(const std::filesystem::path& path, const nn::ModelSpec& spec, const ParamVector& params) {
  if (params.size() != nn::ParamLayout(spec).size()) {
    throw InvalidInputError("parameter vector does not match the model spec");
  }
  std::string bytes(kParamsMagic);
  bytes += spec.to_text();
  bytes += kParamsEnd;
  bytes.append(reinterpret_cast<const char*>(params.values().data()),
               static_cast<std::size_t>(params.size()) * sizeof(double));
  io::write_file(path, bytes);
}

std::pair<nn::ModelSpec, ParamVector> load_params(const std::filesystem::path& path) {
  const auto raw = io::read_file(path);
  const std::string_view bytes(reinterpret_cast<const char*>(raw.data()), raw.size());
  if (bytes.substr(0, kParamsMagic.size()) != kParamsMagic) {
    throw FormatError(path.string() + ": bad magic at byte offset 0");
  }
  const auto end = bytes.find(kParamsEnd, kParamsMagic.size());
  if (end == std::string_view::npos) throw FormatError(path.string() + ": missing end of header");
  const auto spec = nn::ModelSpec::from_text(bytes.substr(kParamsMagic.size(), end - kParamsMagic.size()));
  const nn::ParamLayout layout(spec);
  const std::size_t offset = end + kParamsEnd.size();
  const std::size_t expected = static_cast<std::size_t>(layout.size()) * sizeof(double);
  if (bytes.size() - offset != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) +
                      " bytes of parameters at byte offset " + std::to_string(offset) + ", found " +
                      std::to_string(bytes.size() - offset));
  }
  Eigen::VectorXd values(layout.size());
  std::memcpy(values.data(), raw.data() + offset, expected);
  return {spec, ParamVector(layout, std::move(values))};
}

void save_noise_state(const std::filesystem::path& path, const NoisyTrainState& state) {
  std::string bytes(kNoiseMagic, sizeof(kNoiseMagic));
  io::put<std::uint64_t>(bytes, state.selected.size());
  io::put<std::uint64_t>(bytes, static_cast<std::uint64_t>(state.noisy.dim()));
  for (auto i : state.selected) io::put<std::uint64_t>(bytes, i);
  for (auto i : state.selected) {
    const Eigen::VectorXd row = state.noisy.row(i);
    bytes.append(reinterpret_cast<const char*>(row.data()), static_cast<std::size_t>(row.size()) * sizeof(double));
  }
  io::write_file(path, bytes);
}

NoisyTrainState load_noise_state(const std::filesystem::path& path, const LabeledSet& original) {
  const auto raw = io::read_file(path);
  io::Reader in(raw.data(), raw.size(), path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!std::equal(magic, magic + 8, kNoiseMagic)) throw FormatError(path.string() + ": bad magic at byte offset 0");
  const auto k = in.get<std::uint64_t>();
  const auto d = in.get<std::uint64_t>();
  if (d != static_cast<std::uint64_t>(original.dim())) {
    throw FormatError(path.string() + ": dimension does not match the training set");
  }
  std::vector<std::size_t> selected(k);
  for (auto& i : selected) i = in.get<std::uint64_t>();
  auto state = NoisyTrainState::start(original, selected);
  for (std::size_t r = 0; r < k; ++r) {
    Eigen::VectorXd row(static_cast<Eigen::Index>(d));
    in.read(row.data(), d * sizeof(double));
    state.noisy.set_row(selected[r], row, original.provenance()[selected[r]]);
    state.deltas.row(static_cast<Eigen::Index>(r)) = (row - original.row(selected[r])).transpose();
  }
  if (in.remaining() != 0) throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(in.pos()));
  return state;
}

}  // namespace hint::defenses
