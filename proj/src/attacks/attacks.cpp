#include "hint/attacks/attacks.hpp"

#include <cmath>
#include <sstream>

#include "hint/error.hpp"

namespace hint::attacks {
namespace {

Eigen::ArrayXXd sign(const Eigen::MatrixXd& g) {
  return g.array().sign();
}

void project_columns(Eigen::MatrixXd& xs, const Eigen::MatrixXd& centers, double xi) {
  xs = xs.array().max(centers.array() - xi).min(centers.array() + xi).max(0.0).min(1.0).matrix();
}

FeatureMatrix to_rows(const Eigen::MatrixXd& columns) {
  return columns.transpose();
}

// Shared sign-gradient loop: ascend (direction +1) or descend (-1) the loss
// at the given labels.
Eigen::MatrixXd sign_steps(const nn::Mlp& model, const nn::ParamVector& victim, Eigen::MatrixXd xs,
                           std::span<const int> labels, const AttackBudget& budget, double direction) {
  budget.validate();
  const Eigen::MatrixXd start = xs;
  for (int step = 0; step < budget.steps && budget.xi > 0.0; ++step) {
    const Eigen::MatrixXd g = model.grad_input(victim, nn::Batch{xs, labels});
    xs.array() += direction * budget.step_size * sign(g);
    project_columns(xs, start, budget.xi);
  }
  return xs;
}

}  // namespace

void AttackBudget::validate() const {
  if (!(xi >= 0.0)) throw InvalidInputError("attack budget xi must be non-negative");
  if (steps < 0) throw InvalidInputError("attack steps must be non-negative");
  if (!(step_size >= 0.0)) throw InvalidInputError("attack step size must be non-negative");
}

void project(Eigen::Ref<VectorXd> x, const VectorXd& center, double xi) {
  x = x.array().max(center.array() - xi).min(center.array() + xi).max(0.0).min(1.0).matrix();
}

FeatureMatrix pgd_untargeted(const nn::Mlp& model, const nn::ParamVector& victim,
                             const data::LabeledSet& set, std::span<const std::size_t> rows,
                             const AttackBudget& budget) {
  const auto labels = set.gather_labels(rows);
  return to_rows(sign_steps(model, victim, set.gather_columns(rows), labels, budget, +1.0));
}

nn::Example pgd_untargeted(const nn::Mlp& model, const nn::ParamVector& victim, const nn::Example& z,
                           const AttackBudget& budget) {
  const int labels[] = {z.y};
  return {sign_steps(model, victim, z.x, labels, budget, +1.0).col(0), z.y};
}

int least_probable_class(const nn::Mlp& model, const nn::ParamVector& victim, const VectorXd& x) {
  Eigen::Index t = 0;
  model.forward(victim, x).minCoeff(&t);
  return static_cast<int>(t);
}

FeatureMatrix dap(const nn::Mlp& model, const nn::ParamVector& victim, const data::LabeledSet& set,
                  std::span<const std::size_t> rows, const AttackBudget& budget) {
  const Eigen::MatrixXd xs = set.gather_columns(rows);
  std::vector<int> targets(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    targets[k] = least_probable_class(model, victim, xs.col(static_cast<Eigen::Index>(k)));
  }
  return to_rows(sign_steps(model, victim, xs, targets, budget, -1.0));
}

nn::Example dap(const nn::Mlp& model, const nn::ParamVector& victim, const nn::Example& z,
                const AttackBudget& budget) {
  const int targets[] = {least_probable_class(model, victim, z.x)};
  return {sign_steps(model, victim, z.x, targets, budget, -1.0).col(0), z.y};
}

FeatureMatrix durp(const data::LabeledSet& set, std::span<const std::size_t> rows, double xi, Rng& rng) {
  if (!(xi >= 0.0)) throw InvalidInputError("DURP budget must be non-negative");
  Eigen::MatrixXd mu(set.num_classes(), set.dim());
  for (Eigen::Index i = 0; i < mu.size(); ++i) mu.data()[i] = uniform(rng, -xi, xi);
  FeatureMatrix out(static_cast<Eigen::Index>(rows.size()), set.dim());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    out.row(r) = set.features().row(static_cast<Eigen::Index>(rows[k])) + mu.row(set.labels()[rows[k]]);
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

double FeatureCollisionConfig::resolved_proximity(const nn::ModelSpec& spec) const {
  if (proximity >= 0.0) return proximity;
  const int feature_dim = spec.layer_widths[spec.layer_widths.size() - 2];
  const double ratio = static_cast<double>(feature_dim) / spec.input_dim();
  return 0.25 * ratio * ratio;
}

double feature_distance(const nn::Mlp& model, const nn::ParamVector& victim, const VectorXd& a,
                        const VectorXd& b) {
  return (model.features(victim, a) - model.features(victim, b)).norm();
}

nn::Example feature_collision(const nn::Mlp& model, const nn::ParamVector& victim,
                              const nn::Example& base, const VectorXd& target_x,
                              const FeatureCollisionConfig& cfg) {
  if (cfg.iterations < 0 || !(cfg.step_size >= 0.0)) {
    throw InvalidInputError("feature collision needs non-negative iterations and step size");
  }
  const double proximity = cfg.resolved_proximity(model.spec());
  const VectorXd target_features = model.features(victim, target_x);
  const double shrink = 1.0 + 2.0 * cfg.step_size * proximity;
  VectorXd x = base.x;
  for (int it = 0; it < cfg.iterations; ++it) {
    const VectorXd gap = model.features(victim, x) - target_features;
    const double objective = gap.squaredNorm() + proximity * (x - base.x).squaredNorm();
    if (!std::isfinite(objective)) {
      throw DivergenceError("feature collision objective became non-finite at iteration " +
                            std::to_string(it) + "; lower the step size");
    }
    const VectorXd forward = x - cfg.step_size * 2.0 * model.features_vjp(victim, x, gap);
    x = (forward + 2.0 * cfg.step_size * proximity * base.x) / shrink;
    project(x, base.x, cfg.xi.value_or(1.0));
  }
  return {x, base.y};
}

void TargetSpec::validate(int num_classes) const {
  if (adversarial_class < 0 || adversarial_class >= num_classes) {
    throw InvalidInputError("adversarial class out of range");
  }
  if (adversarial_class == target.y) {
    throw InvalidInputError("adversarial class must differ from the target's true class");
  }
}

namespace {

struct Alignment {
  double cosine;
  VectorXd direction;  // d cos / d g, where g is the mean base gradient
};

Alignment alignment(const VectorXd& target_grad, const VectorXd& g) {
  const double tn = target_grad.norm();
  const double gn = g.norm();
  if (gn == 0.0) return {0.0, VectorXd::Zero(target_grad.size())};
  const double cos = target_grad.dot(g) / (tn * gn);
  return {cos, target_grad / (tn * gn) - cos * g / (gn * gn)};
}

VectorXd adversarial_gradient(const nn::Mlp& model, const nn::ParamVector& victim, const TargetSpec& spec) {
  const VectorXd t = model.grad_params(victim, spec.target.x, spec.adversarial_class);
  if (t.norm() == 0.0) {
    throw InvalidInputError("adversarial gradient is zero; the target is degenerate");
  }
  return t;
}

}  // namespace

double gradient_alignment(const nn::Mlp& model, const nn::ParamVector& victim,
                          const Eigen::MatrixXd& xs, std::span<const int> ys, const TargetSpec& spec) {
  const VectorXd t = adversarial_gradient(model, victim, spec);
  return alignment(t, model.mean_grad_params(victim, nn::Batch{xs, ys})).cosine;
}

GradientMatchingResult gradient_matching(const nn::Mlp& model, const nn::ParamVector& victim,
                                         const data::LabeledSet& train, const TargetSpec& spec,
                                         const AttackBudget& budget) {
  budget.validate();
  spec.validate(train.num_classes());
  if (spec.base_indices.empty()) throw InvalidInputError("gradient matching needs base rows");
  const VectorXd t = adversarial_gradient(model, victim, spec);
  const Eigen::MatrixXd start = train.gather_columns(spec.base_indices);
  const auto ys = train.gather_labels(spec.base_indices);
  const double inv_n = 1.0 / static_cast<double>(ys.size());

  Eigen::MatrixXd xs = start;
  GradientMatchingResult out;
  out.initial_cosine = alignment(t, model.mean_grad_params(victim, nn::Batch{xs, ys})).cosine;
  for (int it = 0; it < budget.steps && budget.xi > 0.0; ++it) {
    const auto a = alignment(t, model.mean_grad_params(victim, nn::Batch{xs, ys}));
    // d(1 - cos)/dx_i = -(1/n) grad_x (a.direction . grad_theta l(x_i, y_i)).
    const Eigen::MatrixXd ascent = inv_n * model.mixed_grad(victim, nn::Batch{xs, ys}, a.direction);
    xs.array() += budget.step_size * sign(ascent);
    project_columns(xs, start, budget.xi);
  }
  out.final_cosine = alignment(t, model.mean_grad_params(victim, nn::Batch{xs, ys})).cosine;
  out.rows = to_rows(xs);
  return out;
}

std::string format_manifest(std::span<const ManifestRecord> records) {
  std::ostringstream out;
  out.precision(17);
  out << "origin_index,attack,xi,seed\n";
  for (const auto& r : records) {
    out << r.origin_index << ',' << data::to_string(r.attack) << ',' << r.xi << ',' << r.seed << '\n';
  }
  return out.str();
}

std::vector<ManifestRecord> parse_manifest(std::string_view text) {
  std::vector<ManifestRecord> records;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "origin_index,attack,xi,seed") throw FormatError("manifest: unexpected header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) fields.push_back(cell);
    if (fields.size() != 4) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    ManifestRecord r;
    try {
      r.origin_index = std::stoll(fields[0]);
      r.attack = data::parse_provenance(fields[1]);
      r.xi = std::stod(fields[2]);
      r.seed = std::stoull(fields[3]);
    } catch (const std::exception& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(r);
  }
  if (line_no == 0) throw FormatError("manifest: empty file");
  return records;
}

}  // namespace hint::attacks
