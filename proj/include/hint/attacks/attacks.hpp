#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hint/data/dataset.hpp"
#include "hint/nn/mlp.hpp"
#include "hint/rng.hpp"

namespace hint::attacks {

using data::FeatureMatrix;
using Eigen::VectorXd;

// l-infinity budget xi plus an iteration schedule. A zero budget or zero
// steps leaves inputs untouched.
struct AttackBudget {
  double xi = 0.3;
  int steps = 40;
  double step_size = 0.075;

  // steps 40, step size xi / 4.
  static AttackBudget standard(double xi) { return {xi, 40, xi / 4.0}; }
  void validate() const;
};

// Clips x into [0,1] and into the xi-ball around center, in place.
void project(Eigen::Ref<VectorXd> x, const VectorXd& center, double xi);

// Sign-gradient ascent on the victim's loss at the true label.
nn::Example pgd_untargeted(const nn::Mlp& model, const nn::ParamVector& victim, const nn::Example& z,
                           const AttackBudget& budget);
FeatureMatrix pgd_untargeted(const nn::Mlp& model, const nn::ParamVector& victim,
                             const data::LabeledSet& set, std::span<const std::size_t> rows,
                             const AttackBudget& budget);

// Class with the smallest victim logit (hence probability) at x.
int least_probable_class(const nn::Mlp& model, const nn::ParamVector& victim, const VectorXd& x);

// Sign-gradient descent on the loss toward the least-probable class; the
// label of the returned example is still the true one.
nn::Example dap(const nn::Mlp& model, const nn::ParamVector& victim, const nn::Example& z,
                const AttackBudget& budget);
FeatureMatrix dap(const nn::Mlp& model, const nn::ParamVector& victim, const data::LabeledSet& set,
                  std::span<const std::size_t> rows, const AttackBudget& budget);

// One uniform[-xi, xi]^d perturbation per class, shared by every row of
// that class, then clipped.
FeatureMatrix durp(const data::LabeledSet& set, std::span<const std::size_t> rows, double xi, Rng& rng);

struct FeatureCollisionConfig {
  int iterations = 1000;
  double step_size = 0.01;
  // Weight of ||x - x_base||^2. Negative asks for 0.25 * (feature_dim / input_dim)^2.
  double proximity = -1.0;
  // Optional l-infinity bound around the base.
  std::optional<double> xi;

  double resolved_proximity(const nn::ModelSpec& spec) const;
};

// Minimizes ||phi(x) - phi(x_t)||^2 + proximity ||x - x_base||^2 from x_base by
// forward-backward splitting: a gradient step on the feature term, then the
// closed-form proximal step for the quadratic term, then projection. phi is
// the penultimate layer. Throws DivergenceError on a non-finite objective.
nn::Example feature_collision(const nn::Mlp& model, const nn::ParamVector& victim,
                              const nn::Example& base, const VectorXd& target_x,
                              const FeatureCollisionConfig& cfg);
double feature_distance(const nn::Mlp& model, const nn::ParamVector& victim, const VectorXd& a,
                        const VectorXd& b);

// A targeted attack instance: make `target` classify as adversarial_class by
// perturbing the training rows in base_indices.
struct TargetSpec {
  nn::Example target;
  int adversarial_class = 0;
  std::vector<std::size_t> base_indices;

  void validate(int num_classes) const;
};

// cos(grad_theta l(x_t, y_adv), mean_i grad_theta l(x_i, y_i)) over the columns of xs.
double gradient_alignment(const nn::Mlp& model, const nn::ParamVector& victim,
                          const Eigen::MatrixXd& xs, std::span<const int> ys, const TargetSpec& spec);

struct GradientMatchingResult {
  FeatureMatrix rows;  // perturbed bases, in base_indices order
  double initial_cosine = 0.0;
  double final_cosine = 0.0;
};

// Signed descent on 1 - alignment, jointly over all bases. Throws
// InvalidInputError when the adversarial gradient is zero.
GradientMatchingResult gradient_matching(const nn::Mlp& model, const nn::ParamVector& victim,
                                         const data::LabeledSet& train, const TargetSpec& spec,
                                         const AttackBudget& budget);

// Sidecar for a poisoned dataset: one record per row.
struct ManifestRecord {
  std::int64_t origin_index = 0;
  data::Provenance attack = data::Provenance::kClean;
  double xi = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const ManifestRecord&) const = default;
};

std::string format_manifest(std::span<const ManifestRecord> records);
std::vector<ManifestRecord> parse_manifest(std::string_view text);

}  // namespace hint::attacks
