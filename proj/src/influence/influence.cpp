#include "hint/influence/influence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hint/error.hpp"

namespace hint::influence {
namespace {

VectorXd restricted(VectorXd v, const ParamMask& mask) {
  mask.apply(v);
  return v;
}

std::vector<std::size_t> sample_rows(std::size_t n, int count, Rng& rng) {
  std::vector<std::size_t> rows(static_cast<std::size_t>(count));
  for (auto& r : rows) r = uniform_index(rng, n);
  return rows;
}

}  // namespace

void LissaConfig::validate() const {
  if (depth < 1) throw InvalidInputError("LiSSA depth must be >= 1");
  if (repetitions < 1) throw InvalidInputError("LiSSA repetitions must be >= 1");
  if (!(scale >= 0.0)) throw InvalidInputError("LiSSA scale must be positive (or 0 for automatic)");
  if (!(damping >= 0.0)) throw InvalidInputError("LiSSA damping must be non-negative");
  if (batch_size < 1) throw InvalidInputError("LiSSA batch size must be >= 1");
}

VectorXd CurvatureOperator::apply_all(const VectorXd& v) const {
  std::vector<std::size_t> rows(num_examples());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return apply(rows, v);
}

MlpCurvature::MlpCurvature(const nn::Mlp& model, const nn::ParamVector& params,
                           const data::LabeledSet& train, ParamMask mask)
    : model_(model), params_(params), train_(train), mask_(mask) {
  if (train_.empty()) throw InvalidInputError("curvature needs a nonempty training set");
}

VectorXd MlpCurvature::apply(std::span<const std::size_t> rows, const VectorXd& v) const {
  const data::BatchData batch(train_, rows);
  return model_.hvp(params_, batch.view(), v, mask_);
}

VectorXd QuadraticCurvature::apply(std::span<const std::size_t>, const VectorXd& v) const {
  return diagonal_.cwiseProduct(v);
}

VectorXd val_grad(const nn::Mlp& model, const nn::ParamVector& params, const data::LabeledSet& val,
                  const std::optional<ParamMask>& mask) {
  if (val.empty()) throw InvalidInputError("validation set is empty");
  const auto batch = data::full_batch(val);
  return model.mean_grad_params(params, batch.view(), mask);
}

VectorXd ihvp_exact(const CurvatureOperator& op, const VectorXd& v, double damping) {
  if (v.size() != op.dim()) throw InvalidInputError("vector length does not match the operator");
  const ParamMask mask = op.mask();
  const Index m = mask.size();
  if (m > 2000) throw InvalidInputError("exact inverse limited to 2000 active parameters");

  Eigen::MatrixXd h(m, m);
  VectorXd basis = VectorXd::Zero(op.dim());
  for (Index j = 0; j < m; ++j) {
    basis[mask.begin + j] = 1.0;
    h.col(j) = op.apply_all(basis).segment(mask.begin, m);
    basis[mask.begin + j] = 0.0;
  }
  h = 0.5 * (h + h.transpose()).eval();
  h.diagonal().array() += damping;

  const VectorXd rhs = v.segment(mask.begin, m);
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) {
    throw NotInvertibleError("damped Hessian is not positive definite (damping " +
                             std::to_string(damping) + "); raise the damping");
  }
  VectorXd sol = llt.solve(rhs);
  // One round of refinement tightens ill-conditioned solves.
  sol += llt.solve(rhs - h * sol);
  const double residual = (h * sol - rhs).norm();
  if (!(residual <= 1e-8 * std::max(rhs.norm(), 1e-300)) && rhs.norm() > 0.0) {
    throw NotInvertibleError("exact solve residual " + std::to_string(residual) +
                             " exceeds tolerance; raise the damping");
  }
  VectorXd out = VectorXd::Zero(op.dim());
  out.segment(mask.begin, m) = sol;
  return out;
}

double estimate_hessian_norm(const CurvatureOperator& op, Rng& rng, int iterations,
                             std::size_t max_rows) {
  const ParamMask mask = op.mask();
  std::vector<std::size_t> rows(op.num_examples());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  if (rows.size() > max_rows) {
    shuffle(std::span(rows), rng);
    rows.resize(max_rows);
    std::sort(rows.begin(), rows.end());
  }
  VectorXd x = VectorXd::Zero(op.dim());
  for (Index i = mask.begin; i < mask.end; ++i) x[i] = uniform(rng, -1.0, 1.0);
  x.normalize();
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    VectorXd y = op.apply(rows, x);
    lambda = y.norm();
    if (lambda == 0.0) break;
    x = y / lambda;
  }
  return lambda;
}

LissaConfig resolve_scale(LissaConfig cfg, const CurvatureOperator& op, Rng& rng) {
  cfg.validate();
  if (cfg.scale == 0.0) cfg.scale = std::max(1.0, 4.0 * estimate_hessian_norm(op, rng));
  return cfg;
}

std::vector<VectorXd> ihvp_lissa_checkpoints(const CurvatureOperator& op, const VectorXd& v,
                                             LissaConfig cfg, Rng& rng,
                                             std::span<const int> checkpoints) {
  cfg = resolve_scale(cfg, op, rng);
  if (v.size() != op.dim()) throw InvalidInputError("vector length does not match the operator");
  if (op.num_examples() == 0) throw InvalidInputError("LiSSA needs a nonempty training set");
  if (checkpoints.empty() || checkpoints.back() != cfg.depth ||
      !std::is_sorted(checkpoints.begin(), checkpoints.end()) || checkpoints.front() < 1) {
    throw InvalidInputError("checkpoints must be ascending, >= 1, and end at the depth");
  }
  const ParamMask mask = op.mask();
  const VectorXd rhs = restricted(v, mask);
  const double keep = 1.0 - cfg.damping / cfg.scale;

  std::vector<VectorXd> sums(checkpoints.size(), VectorXd::Zero(op.dim()));
  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    VectorXd s = rhs;
    std::vector<double> norms{s.norm()};
    std::size_t next = 0;
    for (int t = 1; t <= cfg.depth; ++t) {
      const auto rows = sample_rows(op.num_examples(), cfg.batch_size, rng);
      VectorXd hs = op.apply(rows, s);
      s = rhs + keep * s - hs / cfg.scale;
      norms.push_back(s.norm());
      // The first window is skipped: from s_0 = v a near-singular H grows
      // s linearly to about 11 v, which is not divergence.
      const bool blown = !std::isfinite(norms.back()) ||
                         (t >= 20 && norms.back() > 10.0 * norms[t - 10]);
      if (blown) {
        std::ostringstream trace;
        trace << "LiSSA diverged at step " << t << " of repetition " << rep << " (scale "
              << cfg.scale << " too small); norm trace:";
        for (std::size_t k = norms.size() > 20 ? norms.size() - 20 : 0; k < norms.size(); ++k) {
          trace << ' ' << norms[k];
        }
        throw DivergenceError(trace.str());
      }
      while (next < checkpoints.size() && checkpoints[next] == t) {
        sums[next] += s / cfg.scale;
        ++next;
      }
    }
  }
  for (auto& est : sums) est /= static_cast<double>(cfg.repetitions);
  return sums;
}

VectorXd ihvp_lissa(const CurvatureOperator& op, const VectorXd& v, LissaConfig cfg, Rng& rng) {
  cfg.validate();
  const int depth[] = {cfg.depth};
  return ihvp_lissa_checkpoints(op, v, cfg, rng, depth).front();
}

void InfluenceVector::check_fresh(const nn::ParamVector& params) const {
  if (params.size() != s.size() || params.fingerprint() != snapshot) {
    throw StaleInfluenceError("influence vector was computed against different parameters");
  }
}

InfluenceVector compute_influence_vector(const nn::Mlp& model, const nn::ParamVector& params,
                                         const data::LabeledSet& train,
                                         const data::LabeledSet& val, ParamMask mask,
                                         const InfluenceOptions& options, Rng& rng) {
  const VectorXd g = val_grad(model, params, val, mask);
  const MlpCurvature curvature(model, params, train, mask);
  VectorXd s = options.method == IhvpMethod::kExact
                   ? ihvp_exact(curvature, g, options.damping)
                   : ihvp_lissa(curvature, g, options.lissa, rng);
  return {std::move(s), params.fingerprint(), mask};
}

namespace {

double up_loss_unchecked(const nn::Mlp& model, const nn::Example& z, const InfluenceVector& s,
                         const nn::ParamVector& params) {
  return -s.s.dot(model.grad_params(params, z.x, z.y, s.mask));
}

}  // namespace

double influence_up_loss(const nn::Mlp& model, const nn::Example& z, const InfluenceVector& s,
                         const nn::ParamVector& params) {
  s.check_fresh(params);
  return up_loss_unchecked(model, z, s, params);
}

std::vector<double> influence_up_loss_all(const nn::Mlp& model, const data::LabeledSet& set,
                                          const InfluenceVector& s, const nn::ParamVector& params) {
  s.check_fresh(params);
  std::vector<double> scores(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    scores[i] = up_loss_unchecked(model, set.example(i), s, params);
  }
  return scores;
}

VectorXd influence_pert_loss(const nn::Mlp& model, const nn::Example& z, const InfluenceVector& s,
                             const nn::ParamVector& params) {
  s.check_fresh(params);
  return -model.mixed_grad(params, z.x, z.y, s.s);
}

nn::ParamVector fit_convex(const nn::Mlp& model, nn::ParamVector init, const data::LabeledSet& train,
                           double l2, int max_iters, double tol) {
  if (train.empty()) throw InvalidInputError("cannot fit on an empty set");
  const auto batch = data::full_batch(train);
  const Index p = model.param_count();
  auto objective = [&](const nn::ParamVector& theta) {
    return model.mean_loss(theta, batch.view()) + 0.5 * l2 * theta.values().squaredNorm();
  };
  nn::ParamVector theta = std::move(init);
  double value = objective(theta);
  for (int it = 0; it <= max_iters; ++it) {
    const VectorXd grad = model.mean_grad_params(theta, batch.view()) + l2 * theta.values();
    if (grad.norm() <= tol) return theta;
    if (it == max_iters) break;
    Eigen::MatrixXd h(p, p);
    VectorXd basis = VectorXd::Zero(p);
    for (Index j = 0; j < p; ++j) {
      basis[j] = 1.0;
      h.col(j) = model.hvp(theta, batch.view(), basis);
      basis[j] = 0.0;
    }
    h = 0.5 * (h + h.transpose()).eval();
    h.diagonal().array() += l2;
    const VectorXd step = h.ldlt().solve(grad);
    // Backtracking keeps early iterations from overshooting.
    double t = 1.0;
    nn::ParamVector candidate = theta;
    for (int k = 0; k < 40; ++k) {
      candidate.values() = theta.values() - t * step;
      const double next = objective(candidate);
      if (next <= value - 1e-4 * t * grad.dot(step) || t < 1e-6) {
        value = next;
        break;
      }
      t *= 0.5;
    }
    theta = candidate;
  }
  throw ConvergenceError("convex fit did not reach gradient norm " + std::to_string(tol) +
                         " within " + std::to_string(max_iters) + " Newton steps");
}

double loo_retrain_oracle(const nn::Mlp& model, const nn::ParamVector& params_init,
                          const data::LabeledSet& train, std::optional<std::size_t> removed,
                          const data::LabeledSet& val, const RetrainBudget& budget) {
  if (val.empty()) throw InvalidInputError("validation set is empty");
  const auto val_batch = data::full_batch(val);
  const auto full = fit_convex(model, params_init, train, budget.l2, budget.max_iters, budget.tol);
  nn::ParamVector reduced;
  if (removed) {
    if (*removed >= train.size()) throw InvalidInputError("removed row out of range");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (i != *removed) keep.push_back(i);
    }
    reduced = fit_convex(model, full, train.subset(keep), budget.l2, budget.max_iters, budget.tol);
  } else {
    reduced = fit_convex(model, params_init, train, budget.l2, budget.max_iters, budget.tol);
  }
  return model.mean_loss(reduced, val_batch.view()) - model.mean_loss(full, val_batch.view());
}

}  // namespace hint::influence
