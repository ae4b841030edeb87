#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hint/data/dataset.hpp"
#include "hint/nn/mlp.hpp"
#include "hint/rng.hpp"

namespace hint::influence {

using Eigen::Index;
using Eigen::VectorXd;
using nn::ParamMask;

// Stochastic inverse-Hessian-vector product settings. depth is the recursion
// length, repetitions the number of independent recursions averaged, scale
// the divisor that keeps (I - H/scale) a contraction. A scale of 0 asks for
// the automatic choice max(1, 4 x power-iteration estimate of ||H||).
struct LissaConfig {
  int depth = 500;
  int repetitions = 4;
  double scale = 0.0;
  double damping = 0.01;
  int batch_size = 8;

  void validate() const;
};

// Hessian of a training objective, available only through products. The
// mask names the coordinates the Hessian is restricted to; products are zero
// outside it.
class CurvatureOperator {
 public:
  virtual ~CurvatureOperator() = default;
  virtual Index dim() const = 0;
  virtual std::size_t num_examples() const = 0;
  virtual ParamMask mask() const = 0;
  // Mean Hessian over the given example rows applied to v.
  virtual VectorXd apply(std::span<const std::size_t> rows, const VectorXd& v) const = 0;

  VectorXd apply_all(const VectorXd& v) const;
};

// Cross-entropy Hessian of an MLP over a training set.
class MlpCurvature final : public CurvatureOperator {
 public:
  MlpCurvature(const nn::Mlp& model, const nn::ParamVector& params, const data::LabeledSet& train,
               ParamMask mask);

  Index dim() const override { return model_.param_count(); }
  std::size_t num_examples() const override { return train_.size(); }
  ParamMask mask() const override { return mask_; }
  VectorXd apply(std::span<const std::size_t> rows, const VectorXd& v) const override;

 private:
  const nn::Mlp& model_;
  const nn::ParamVector& params_;
  const data::LabeledSet& train_;
  ParamMask mask_;
};

// Loss 0.5 theta^T diag(d) theta: Hessian diag(d) regardless of the rows.
// A test hook with a known inverse.
class QuadraticCurvature final : public CurvatureOperator {
 public:
  explicit QuadraticCurvature(VectorXd diagonal) : diagonal_(std::move(diagonal)) {}

  Index dim() const override { return diagonal_.size(); }
  std::size_t num_examples() const override { return 1; }
  ParamMask mask() const override { return ParamMask::all(diagonal_.size()); }
  VectorXd apply(std::span<const std::size_t> rows, const VectorXd& v) const override;

 private:
  VectorXd diagonal_;
};

// Mean parameter gradient over the validation set.
VectorXd val_grad(const nn::Mlp& model, const nn::ParamVector& params, const data::LabeledSet& val,
                  const std::optional<ParamMask>& mask = std::nullopt);

// Dense solve of (H + damping I) s = v over the masked block. Throws
// NotInvertibleError when the damped block is not positive definite or the
// residual exceeds 1e-8 ||v||.
VectorXd ihvp_exact(const CurvatureOperator& op, const VectorXd& v, double damping);

// Largest Hessian eigenvalue magnitude by power iteration.
double estimate_hessian_norm(const CurvatureOperator& op, Rng& rng, int iterations = 30,
                             std::size_t max_rows = 1000);

// Resolves an automatic scale against op.
LissaConfig resolve_scale(LissaConfig cfg, const CurvatureOperator& op, Rng& rng);

// Per repetition: s_0 = v, s_t = v + (1 - damping/scale) s_{t-1} - H_batch s_{t-1} / scale,
// estimate s_depth / scale; the output is the mean over repetitions.
// Throws DivergenceError (with the norm trace) if ||s_t|| grows more than
// tenfold over any ten steps.
VectorXd ihvp_lissa(const CurvatureOperator& op, const VectorXd& v, LissaConfig cfg, Rng& rng);

// Same recursion, reporting the repetition-mean estimate after each listed
// depth (ascending; the last must equal cfg.depth).
std::vector<VectorXd> ihvp_lissa_checkpoints(const CurvatureOperator& op, const VectorXd& v,
                                             LissaConfig cfg, Rng& rng,
                                             std::span<const int> checkpoints);

// Cached H^{-1} grad L(D_val) tied to the parameters it was computed with.
struct InfluenceVector {
  VectorXd s;
  std::uint64_t snapshot = 0;
  ParamMask mask;

  void check_fresh(const nn::ParamVector& params) const;
};

enum class IhvpMethod { kLissa, kExact };

struct InfluenceOptions {
  IhvpMethod method = IhvpMethod::kLissa;
  LissaConfig lissa;
  // Used by the exact solve; LiSSA carries its own damping.
  double damping = 0.01;
};

InfluenceVector compute_influence_vector(const nn::Mlp& model, const nn::ParamVector& params,
                                         const data::LabeledSet& train,
                                         const data::LabeledSet& val, ParamMask mask,
                                         const InfluenceOptions& options, Rng& rng);

// Upweighting influence on the validation loss: -s . grad_theta l(z).
double influence_up_loss(const nn::Mlp& model, const nn::Example& z, const InfluenceVector& s,
                         const nn::ParamVector& params);
// Scores every row of `set`, checking freshness once. Row i of the result is
// exactly influence_up_loss(set.example(i)).
std::vector<double> influence_up_loss_all(const nn::Mlp& model, const data::LabeledSet& set,
                                          const InfluenceVector& s, const nn::ParamVector& params);

// Perturbation influence on the validation loss, one value per input
// coordinate: -grad_x (s . grad_theta l(z)).
VectorXd influence_pert_loss(const nn::Mlp& model, const nn::Example& z, const InfluenceVector& s,
                             const nn::ParamVector& params);

// First-order prediction of L(D_val, theta_{-z}) - L(D_val, theta) from an
// upweighting score: removing z is upweighting it by -1/n.
inline double predicted_removal_change(double up_loss_score, std::size_t n) {
  return -up_loss_score / static_cast<double>(n);
}

// Minimizes mean cross-entropy + (l2/2)||theta||^2 by damped Newton steps
// with a dense Hessian. Meant for convex (no hidden layer) models. Throws
// ConvergenceError if the gradient norm is not below tol within max_iters.
nn::ParamVector fit_convex(const nn::Mlp& model, nn::ParamVector init, const data::LabeledSet& train,
                           double l2, int max_iters, double tol = 1e-7);

// Brute-force leave-one-out: retrains with and without row `removed` of
// `train` and returns L(D_val, theta_{-z}) - L(D_val, theta). With no row
// removed both fits are identical and the result is exactly zero.
struct RetrainBudget {
  double l2 = 0.01;
  int max_iters = 100;
  double tol = 1e-7;
};

double loo_retrain_oracle(const nn::Mlp& model, const nn::ParamVector& params_init,
                          const data::LabeledSet& train, std::optional<std::size_t> removed,
                          const data::LabeledSet& val, const RetrainBudget& budget);

}  // namespace hint::influence
