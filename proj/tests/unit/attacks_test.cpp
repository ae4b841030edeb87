#include "hint/attacks/attacks.hpp"

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "hint/defenses/defenses.hpp"
#include "hint/error.hpp"
#include "test_support.hpp"

namespace hint::attacks {
namespace {

using Eigen::MatrixXd;

std::vector<std::size_t> range(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

struct Victim {
  nn::Mlp model;
  data::LabeledSet set;
  nn::ParamVector params;
};

// Small tanh network trained a few epochs on four Gaussian blobs.
Victim victim(std::uint64_t seed, std::size_t n = 400) {
  Rng rng(seed);
  nn::Mlp model(nn::ModelSpec{{20, 16, 4}, nn::Activation::kTanh, 1});
  auto set = data::synthetic_blobs(n, 20, 4, 0.2, rng);
  defenses::SgdConfig sgd;
  sgd.epochs = 10;
  sgd.batch_size = 32;
  auto params = defenses::train_plain(model, model.init_params(rng), set, sgd, rng);
  return {std::move(model), std::move(set), std::move(params)};
}

void expect_within_budget(const data::FeatureMatrix& out, const data::LabeledSet& set,
                          std::span<const std::size_t> rows, double xi) {
  ASSERT_EQ(out.rows(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const auto diff = (out.row(r) - set.features().row(static_cast<Eigen::Index>(rows[k]))).cwiseAbs();
    EXPECT_LE(diff.maxCoeff(), xi + 1e-12) << "row " << k;
    EXPECT_GE(out.row(r).minCoeff(), 0.0);
    EXPECT_LE(out.row(r).maxCoeff(), 1.0);
  }
}

TEST(AttackBudgetTest, StandardScheduleAndValidation) {
  const auto b = AttackBudget::standard(0.3);
  EXPECT_EQ(b.steps, 40);
  EXPECT_DOUBLE_EQ(b.step_size, 0.075);
  EXPECT_THROW((AttackBudget{-0.1, 40, 0.1}.validate()), InvalidInputError);
  EXPECT_THROW((AttackBudget{0.1, -1, 0.1}.validate()), InvalidInputError);
}

TEST(ProjectTest, ClipsToBallAndPixelRange) {
  Eigen::VectorXd x(4);
  x << -0.5, 0.2, 0.9, 2.0;
  const Eigen::VectorXd center = Eigen::VectorXd::Constant(4, 0.5);
  project(x, center, 0.3);
  Eigen::VectorXd expected(4);
  expected << 0.2, 0.2, 0.8, 0.8;
  EXPECT_TRUE(x.isApprox(expected));
}

TEST(PgdTest, ZeroStepsOrZeroBudgetLeaveInputs) {
  const auto v = victim(1, 60);
  const auto rows = range(20);
  const auto a = pgd_untargeted(v.model, v.params, v.set, rows, AttackBudget{0.3, 0, 0.075});
  const auto b = pgd_untargeted(v.model, v.params, v.set, rows, AttackBudget{0.0, 40, 0.075});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(a.row(static_cast<Eigen::Index>(k)), v.set.features().row(static_cast<Eigen::Index>(k)));
    EXPECT_EQ(b.row(static_cast<Eigen::Index>(k)), v.set.features().row(static_cast<Eigen::Index>(k)));
  }
}

TEST(PgdTest, RaisesVictimLossWithinBudget) {
  const auto v = victim(2);
  const auto rows = range(200);
  const auto budget = AttackBudget::standard(0.1);
  const auto out = pgd_untargeted(v.model, v.params, v.set, rows, budget);
  expect_within_budget(out, v.set, rows, budget.xi);
  int raised = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto z = v.set.example(k);
    const Eigen::VectorXd adv = out.row(static_cast<Eigen::Index>(k)).transpose();
    if (v.model.loss(v.params, adv, z.y) > v.model.loss(v.params, z.x, z.y)) ++raised;
  }
  EXPECT_GE(raised, 190);
}

TEST(PgdTest, SingleMatchesBatch) {
  const auto v = victim(3, 60);
  const auto rows = range(5);
  const auto budget = AttackBudget::standard(0.2);
  const auto batch = pgd_untargeted(v.model, v.params, v.set, rows, budget);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto single = pgd_untargeted(v.model, v.params, v.set.example(k), budget);
    EXPECT_TRUE(single.x.isApprox(batch.row(static_cast<Eigen::Index>(k)).transpose(), 1e-12));
  }
}

TEST(DapTest, RaisesLeastProbableClassProbability) {
  const auto v = victim(4);
  const auto rows = range(200);
  const auto budget = AttackBudget::standard(0.1);
  const auto out = dap(v.model, v.params, v.set, rows, budget);
  expect_within_budget(out, v.set, rows, budget.xi);
  int raised = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto z = v.set.example(k);
    const int t = least_probable_class(v.model, v.params, z.x);
    const Eigen::VectorXd adv = out.row(static_cast<Eigen::Index>(k)).transpose();
    const double before = nn::softmax(v.model.forward(v.params, z.x))[t];
    const double after = nn::softmax(v.model.forward(v.params, adv))[t];
    if (after > before) ++raised;
  }
  EXPECT_GE(raised, 180);
}

TEST(DapTest, LeastProbableClassIsArgminLogit) {
  const auto v = victim(5, 60);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto x = v.set.example(i).x;
    const auto p = nn::softmax(v.model.forward(v.params, x));
    Eigen::Index expected = 0;
    p.minCoeff(&expected);
    EXPECT_EQ(least_probable_class(v.model, v.params, x), expected);
  }
}

TEST(DurpTest, SameClassRowsShareOnePerturbation) {
  Rng rng(6);
  data::FeatureMatrix x = data::FeatureMatrix::Constant(6, 5, 0.5);
  const auto set = data::LabeledSet::clean(x, {0, 1, 0, 1, 2, 0}, 3);
  const auto rows = range(6);
  const auto out = durp(set, rows, 0.2, rng);
  EXPECT_EQ(out.row(0), out.row(2));
  EXPECT_EQ(out.row(0), out.row(5));
  EXPECT_EQ(out.row(1), out.row(3));
  EXPECT_NE(out.row(0), out.row(1));
  expect_within_budget(out, set, rows, 0.2);
}

TEST(DurpTest, ZeroBudgetIsIdentity) {
  Rng rng(7);
  Rng data_rng(8);
  const auto set = hint::testing::random_set(30, 6, 3, data_rng);
  const auto rows = range(30);
  const auto out = durp(set, rows, 0.0, rng);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(out.row(static_cast<Eigen::Index>(k)), set.features().row(static_cast<Eigen::Index>(k)));
  }
}

TEST(DurpTest, OffsetsAreUniformOnTheBudget) {
  // 10 classes x 1000 pixels at 0.5: no clipping, so each class offset is
  // exactly its uniform[-xi, xi] draw.
  const double xi = 0.3;
  const int classes = 10;
  const int dim = 1000;
  data::FeatureMatrix x = data::FeatureMatrix::Constant(classes, dim, 0.5);
  std::vector<int> labels(classes);
  for (int c = 0; c < classes; ++c) labels[c] = c;
  const auto set = data::LabeledSet::clean(x, labels, classes);
  Rng rng(9);
  const auto out = durp(set, range(classes), xi, rng);
  std::vector<double> u;
  for (Eigen::Index i = 0; i < out.size(); ++i) u.push_back((out.data()[i] - 0.5 + xi) / (2 * xi));
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double ks = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    ks = std::max({ks, (static_cast<double>(i) + 1) / n - u[i], u[i] - static_cast<double>(i) / n});
  }
  EXPECT_LT(ks, 1.63 / std::sqrt(n));
}

TEST(FeatureCollisionTest, BaseEqualToTargetStaysPut) {
  const auto v = victim(10, 60);
  const auto base = v.set.example(0);
  const auto out = feature_collision(v.model, v.params, base, base.x, FeatureCollisionConfig{200, 0.01, -1.0, {}});
  EXPECT_LE((out.x - base.x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(out.y, base.y);
}

TEST(FeatureCollisionTest, FeatureDistanceDecreases) {
  const auto v = victim(11, 200);
  int decreased = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto base = v.set.example(i);
    std::size_t t = i + 1;
    while (v.set.labels()[t] == base.y) ++t;
    const auto target = v.set.example(t);
    const auto out = feature_collision(v.model, v.params, base, target.x, FeatureCollisionConfig{});
    EXPECT_GE(out.x.minCoeff(), 0.0);
    EXPECT_LE(out.x.maxCoeff(), 1.0);
    if (feature_distance(v.model, v.params, out.x, target.x) <
        feature_distance(v.model, v.params, base.x, target.x)) {
      ++decreased;
    }
  }
  EXPECT_EQ(decreased, 5);
}

TEST(FeatureCollisionTest, HugeProximityPinsTheBase) {
  const auto v = victim(12, 60);
  const auto base = v.set.example(0);
  const auto target = v.set.example(1);
  const auto out = feature_collision(v.model, v.params, base, target.x, FeatureCollisionConfig{100, 0.01, 1e6, {}});
  EXPECT_LE((out.x - base.x).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(FeatureCollisionTest, RespectsOptionalBudget) {
  const auto v = victim(13, 60);
  const auto base = v.set.example(0);
  const auto out = feature_collision(v.model, v.params, base, v.set.example(3).x,
                                     FeatureCollisionConfig{300, 0.05, 0.0, 0.05});
  EXPECT_LE((out.x - base.x).cwiseAbs().maxCoeff(), 0.05 + 1e-12);
}

TEST(FeatureCollisionTest, ResolvedProximityScalesWithDimensions) {
  const nn::ModelSpec spec{{784, 64, 10}, nn::Activation::kRelu, 1};
  EXPECT_DOUBLE_EQ(FeatureCollisionConfig{}.resolved_proximity(spec), 0.25 * (64.0 / 784) * (64.0 / 784));
  EXPECT_DOUBLE_EQ((FeatureCollisionConfig{1, 0.1, 2.5, {}}.resolved_proximity(spec)), 2.5);
}

TEST(FeatureCollisionTest, ExplodingStepThrows) {
  const auto v = victim(14, 60);
  FeatureCollisionConfig cfg{50, 1e300, 1e300, {}};
  EXPECT_THROW(feature_collision(v.model, v.params, v.set.example(0), v.set.example(1).x, cfg), DivergenceError);
}

TargetSpec target_for(const Victim& v, std::size_t target_row, std::size_t bases) {
  TargetSpec spec;
  spec.target = v.set.example(target_row);
  spec.adversarial_class = (spec.target.y + 1) % v.set.num_classes();
  for (std::size_t i = 0; i < v.set.size() && spec.base_indices.size() < bases; ++i) {
    if (v.set.labels()[i] == spec.adversarial_class) spec.base_indices.push_back(i);
  }
  return spec;
}

TEST(GradientMatchingTest, ZeroBudgetLeavesBases) {
  const auto v = victim(15, 120);
  const auto spec = target_for(v, 0, 5);
  const auto out = gradient_matching(v.model, v.params, v.set, spec, AttackBudget{0.0, 50, 0.01});
  for (std::size_t k = 0; k < spec.base_indices.size(); ++k) {
    EXPECT_EQ(out.rows.row(static_cast<Eigen::Index>(k)),
              v.set.features().row(static_cast<Eigen::Index>(spec.base_indices[k])));
  }
  EXPECT_EQ(out.initial_cosine, out.final_cosine);
}

TEST(GradientMatchingTest, AlignmentIncreasesOnMostSeeds) {
  int increased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto v = victim(100 + seed, 200);
    const auto spec = target_for(v, 0, 10);
    const auto out = gradient_matching(v.model, v.params, v.set, spec, AttackBudget{0.062, 250, 0.01});
    if (out.final_cosine > out.initial_cosine) ++increased;
    // The reported cosine is the one a fresh evaluation gives.
    const auto ys = v.set.gather_labels(spec.base_indices);
    const MatrixXd xs = out.rows.transpose();
    EXPECT_NEAR(gradient_alignment(v.model, v.params, xs, ys, spec), out.final_cosine, 1e-12);
    expect_within_budget(out.rows, v.set, spec.base_indices, 0.062);
  }
  EXPECT_GE(increased, 4);
}

TEST(GradientMatchingTest, ZeroAdversarialGradientThrows) {
  const nn::Mlp model(nn::ModelSpec{{4, 3}, nn::Activation::kRelu, 1});
  Rng rng(16);
  const auto set = hint::testing::random_set(10, 4, 3, rng);
  TargetSpec spec{set.example(0), (set.labels()[0] + 1) % 3, {1, 2}};
  // A saturated adversarial logit makes softmax exactly one-hot there.
  auto params = model.zero_params();
  params.bias(0)[spec.adversarial_class] = 1000.0;
  EXPECT_THROW(gradient_matching(model, params, set, spec, AttackBudget::standard(0.1)), InvalidInputError);
}

TEST(GradientMatchingTest, RejectsBadTargets) {
  const auto v = victim(17, 60);
  TargetSpec spec{v.set.example(0), v.set.labels()[0], {1}};
  EXPECT_THROW(gradient_matching(v.model, v.params, v.set, spec, AttackBudget::standard(0.1)), InvalidInputError);
  spec.adversarial_class = 7;
  EXPECT_THROW(gradient_matching(v.model, v.params, v.set, spec, AttackBudget::standard(0.1)), InvalidInputError);
}

TEST(ManifestTest, RoundTrip) {
  const std::vector<ManifestRecord> records = {
      {0, data::Provenance::kClean, 0.0, 1},
      {41, data::Provenance::kPgd, 0.3, 18446744073709551615ULL},
      {7, data::Provenance::kDurp, 0.1 + 0.2, 3},
  };
  const auto text = format_manifest(records);
  EXPECT_EQ(text.substr(0, text.find('\n')), "origin_index,attack,xi,seed");
  EXPECT_EQ(parse_manifest(text), records);
}

TEST(ManifestTest, MalformedInputThrows) {
  EXPECT_THROW(parse_manifest(""), FormatError);
  EXPECT_THROW(parse_manifest("index,attack\n"), FormatError);
  EXPECT_THROW(parse_manifest("origin_index,attack,xi,seed\n1,pgd,0.3\n"), FormatError);
  EXPECT_THROW(parse_manifest("origin_index,attack,xi,seed\n1,bogus,0.3,2\n"), FormatError);
}

}  // namespace
}  // namespace hint::attacks
