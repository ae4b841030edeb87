#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hint/attacks/attacks.hpp"
#include "hint/data/dataset.hpp"
#include "hint/influence/influence.hpp"
#include "hint/nn/mlp.hpp"
#include "hint/rng.hpp"

namespace hint::defenses {

using data::FeatureMatrix;
using data::LabeledSet;
using nn::ParamMask;
using nn::ParamVector;

// Minibatch SGD settings shared by every trainer. `trainable` freezes
// everything outside the mask (transfer learning trains only the head).
struct SgdConfig {
  int epochs = 30;
  double learning_rate = 0.1;
  int batch_size = 128;
  std::optional<ParamMask> trainable;

  void validate() const;
};

// Rewrites a gathered minibatch (columns are examples) before the step,
// seeing the parameters the step will start from.
using BatchTransform =
    std::function<void(const ParamVector& params, Eigen::MatrixXd& xs, std::span<const int> ys)>;

// One epoch: rows reshuffled from rng, consecutive minibatches (the last one
// may be short), one SGD step each.
ParamVector sgd_epoch(const nn::Mlp& model, ParamVector params, const LabeledSet& set,
                      const SgdConfig& cfg, Rng& rng, const BatchTransform& transform = {});

// Undefended training: cfg.epochs epochs on the set as given.
ParamVector train_plain(const nn::Mlp& model, ParamVector params, const LabeledSet& set,
                        const SgdConfig& cfg, Rng& rng);

// Warm-up epochs on the raw training set; zero epochs returns params unchanged.
ParamVector pretrain(const nn::Mlp& model, ParamVector params, const LabeledSet& set, int epochs,
                     const SgdConfig& cfg, Rng& rng);

inline influence::InfluenceOptions deep_lissa() {
  influence::InfluenceOptions o;
  o.lissa.depth = 5000;
  o.lissa.repetitions = 1;
  return o;
}

struct HintConfig {
  SgdConfig sgd;  // sgd.epochs is the total epoch count T
  int pretrain_epochs = 4;
  double gamma = 0.1;
  double beta = 0.062;
  double ratio = 0.5;
  std::vector<int> schedule = {5, 15};
  influence::InfluenceOptions selection_influence = deep_lissa();
  influence::InfluenceOptions noise_influence = deep_lissa();
  // Restricts the noise-round s to the top layers; the input derivative of
  // the noise still runs through the whole network.
  bool noise_top_layers = true;

  void validate() const;
};

struct Selection {
  std::vector<std::size_t> selected;    // rows of D_trn, most influential first
  std::vector<std::size_t> unselected;  // ascending
  std::vector<double> scores;           // upweighting influence of every row
};

// Number of rows taken for a ratio: ceil(ratio * n).
std::size_t selection_size(double ratio, std::size_t n);

// Orders rows by |score| descending, ties by ascending origin index, and
// keeps the first selection_size(ratio, n).
Selection select_by_scores(std::span<const double> scores, std::span<const std::int64_t> origin_index,
                           double ratio);

// Scores every training row against one inverse-HVP over `mask` and selects.
Selection secinf(const nn::Mlp& model, const ParamVector& params, const LabeledSet& train,
                 const LabeledSet& val, double ratio, ParamMask mask,
                 const influence::InfluenceOptions& options, Rng& rng);

// Current noisy training set plus the accumulated noise of the selected rows.
// deltas row k belongs to training row selected[k] and always equals
// noisy - original on that row exactly.
struct NoisyTrainState {
  LabeledSet noisy;
  std::vector<std::size_t> selected;
  FeatureMatrix deltas;

  static NoisyTrainState start(const LabeledSet& original, std::vector<std::size_t> selected);
  // Throws InvalidInputError if any invariant is violated.
  void check(const LabeledSet& original, double beta) const;
};

struct NoiseRoundStats {
  int epoch = 0;
  double max_abs_delta = 0.0;
  double mean_abs_step = 0.0;
  double min_pixel = 0.0;
  double max_pixel = 0.0;
};

// One healthy-noise round against a fresh influence vector s (which must
// match params): delta <- clip_beta(delta - gamma * I_pert(noisy row)),
// noisy row <- clip01(original + delta).
NoiseRoundStats addnoise(NoisyTrainState& state, const LabeledSet& original, const nn::Mlp& model,
                         const ParamVector& params, const influence::InfluenceVector& s,
                         double gamma, double beta);

struct HintTrace {
  Selection selection;
  std::vector<NoiseRoundStats> rounds;
  std::optional<NoisyTrainState> final_state;
};

// Pretrain, select once, then per epoch: noise round if the epoch is
// scheduled, SGD epoch on the noisy set. The noise influence covers the top
// layers, or else the trainable block (the full network by default).
ParamVector hint_train(const nn::Mlp& model, const HintConfig& cfg, const LabeledSet& train,
                       const LabeledSet& val, ParamVector params, Rng& rng, HintTrace* trace = nullptr);

struct FriendsConfig {
  SgdConfig sgd;
  int warmup_epochs = 4;
  double beta = 0.062;
  double lambda = 1.0;
  double bernoulli = 0.031;  // +-b per pixel, fresh every epoch
  int noise_steps = 20;
  double noise_step_size = 0.01;

  void validate() const;
};

// Friendly noise for each row: projected normalized gradient steps minimizing
// KL(f(x+e) || f(x)) - lambda ||e||_2 over ||e||_inf <= beta. Zero steps
// give zero noise.
FeatureMatrix friendly_noise(const nn::Mlp& model, const ParamVector& params, const LabeledSet& set,
                             const FriendsConfig& cfg, Rng& rng);
double output_kl(const nn::Mlp& model, const ParamVector& params, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& noise);

ParamVector friends_train(const nn::Mlp& model, const FriendsConfig& cfg, const LabeledSet& train,
                          ParamVector params, Rng& rng);

struct AtdaConfig {
  SgdConfig sgd;
  double beta = 0.25;
  double tau = 0.5;
  int inner_steps = 10;
  double inner_step_size = 0.0625;

  void validate() const;
};

struct AtdaStats {
  std::size_t inner_loops = 0;
  std::size_t early_stops = 0;
};

// Adversarial training: each minibatch is replaced by sign-ascent iterates
// within the beta ball; an example stops once some other class beats its
// label's loss by tau.
ParamVector atda_train(const nn::Mlp& model, const AtdaConfig& cfg, const LabeledSet& train,
                       ParamVector params, Rng& rng, AtdaStats* stats = nullptr);

double evaluate_accuracy(const nn::Mlp& model, const ParamVector& params, const LabeledSet& set);
// Fraction of targets predicted exactly as their adversarial class.
double evaluate_asr(const nn::Mlp& model, const ParamVector& params,
                    std::span<const attacks::TargetSpec> targets);

// "HINTPARAMS1\n", the model spec text, "end\n", then float64 values.
void save_params(const std::filesystem::path& path, const nn::ModelSpec& spec, const ParamVector& params);
std::pair<nn::ModelSpec, ParamVector> load_params(const std::filesystem::path& path);

void save_noise_state(const std::filesystem::path& path, const NoisyTrainState& state);
NoisyTrainState load_noise_state(const std::filesystem::path& path, const LabeledSet& original);

}  // namespace hint::defenses
