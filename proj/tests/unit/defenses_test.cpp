#include "hint/defenses/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "hint/error.hpp"
#include "hint/io.hpp"
#include "test_support.hpp"

namespace hint::defenses {
namespace {

using hint::testing::convex_instance;

struct Problem {
  nn::Mlp model;
  LabeledSet train;
  LabeledSet val;
  ParamVector init;
};

Problem problem(std::uint64_t seed, std::size_t n_train = 120, std::size_t n_val = 40, int dim = 12) {
  Rng rng(seed);
  nn::Mlp model(nn::ModelSpec{{dim, 8, 3}, nn::Activation::kTanh, 1});
  auto all = data::synthetic_blobs(n_train + n_val, dim, 3, 0.25, rng);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < n_train + n_val; ++i) (i < n_train ? tr : va).push_back(i);
  auto init = model.init_params(rng);
  return {std::move(model), all.subset(tr), all.subset(va), std::move(init)};
}

SgdConfig small_sgd(int epochs) {
  SgdConfig sgd;
  sgd.epochs = epochs;
  sgd.batch_size = 16;
  sgd.learning_rate = 0.1;
  return sgd;
}

HintConfig small_hint() {
  HintConfig cfg;
  cfg.sgd = small_sgd(8);
  cfg.pretrain_epochs = 2;
  cfg.schedule = {3, 6};
  cfg.selection_influence.method = influence::IhvpMethod::kExact;
  cfg.noise_influence.method = influence::IhvpMethod::kExact;
  // The tanh network is not convex; damping keeps the exact solve well posed.
  cfg.selection_influence.damping = 1.0;
  cfg.noise_influence.damping = 1.0;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hint_defenses_" + name);
}

TEST(SgdTest, ConfigValidation) {
  SgdConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SgdConfig{};
  cfg.epochs = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SgdTest, SingleFullBatchEpochIsOneGradientStep) {
  const auto p = problem(1, 20, 5);
  SgdConfig cfg = small_sgd(1);
  cfg.batch_size = 20;
  Rng rng(2);
  const auto trained = sgd_epoch(p.model, p.init, p.train, cfg, rng);
  const auto g = p.model.mean_grad_params(p.init, data::full_batch(p.train).view());
  EXPECT_TRUE(trained.values().isApprox(p.init.values() - 0.1 * g, 1e-12));
}

TEST(SgdTest, FrozenParametersStayPut) {
  const auto p = problem(3);
  SgdConfig cfg = small_sgd(2);
  cfg.trainable = p.model.top_mask();
  Rng rng(4);
  const auto trained = train_plain(p.model, p.init, p.train, cfg, rng);
  const auto mask = p.model.top_mask();
  EXPECT_EQ(trained.values().head(mask.begin), p.init.values().head(mask.begin));
  EXPECT_NE(trained.values().segment(mask.begin, mask.size()), p.init.values().segment(mask.begin, mask.size()));
}

TEST(PretrainTest, ZeroEpochsIsIdentity) {
  const auto p = problem(5);
  Rng rng(6);
  const auto out = pretrain(p.model, p.init, p.train, 0, small_sgd(5), rng);
  EXPECT_EQ(out.values(), p.init.values());
}

TEST(PretrainTest, LowersTrainingLossDeterministically) {
  const auto p = problem(7);
  Rng a(8), b(8);
  const auto pa = pretrain(p.model, p.init, p.train, 4, small_sgd(10), a);
  const auto pb = pretrain(p.model, p.init, p.train, 4, small_sgd(10), b);
  EXPECT_EQ(pa.values(), pb.values());
  const auto batch = data::full_batch(p.train);
  EXPECT_LT(p.model.mean_loss(pa, batch.view()), p.model.mean_loss(p.init, batch.view()));
}

TEST(HintConfigTest, Invariants) {
  auto cfg = small_hint();
  EXPECT_NO_THROW(cfg.validate());
  cfg.ratio = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.ratio = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.beta = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.schedule = {2, 5};  // not after pretraining
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.schedule = {3, 9};  // past the last epoch
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.schedule = {6, 3};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_hint();
  cfg.schedule = {};
  cfg.gamma = 0.0;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(SelectionTest, SizeIsCeiling) {
  EXPECT_EQ(selection_size(0.5, 101), 51u);
  EXPECT_EQ(selection_size(0.5, 100), 50u);
  EXPECT_EQ(selection_size(1.0, 37), 37u);
  EXPECT_EQ(selection_size(0.01, 10), 1u);
  EXPECT_EQ(selection_size(0.3, 10), 3u);
}

TEST(SelectionTest, OrdersByMagnitudeThenOrigin) {
  const std::vector<double> scores = {0.1, -0.5, 0.5, 0.0, -0.2};
  const std::vector<std::int64_t> origin = {10, 30, 20, 40, 50};
  const auto sel = select_by_scores(scores, origin, 0.6);
  EXPECT_EQ(sel.selected, (std::vector<std::size_t>{2, 1, 4}));
  EXPECT_EQ(sel.unselected, (std::vector<std::size_t>{0, 3}));
}

TEST(SelectionTest, FullRatioSelectsEverything) {
  const std::vector<double> scores = {3, 1, 2};
  const std::vector<std::int64_t> origin = {0, 1, 2};
  const auto sel = select_by_scores(scores, origin, 1.0);
  EXPECT_EQ(sel.selected.size(), 3u);
  EXPECT_TRUE(sel.unselected.empty());
}

TEST(SecinfTest, MatchesBruteForceRankingOnConvexModel) {
  Rng rng(9);
  const auto inst = convex_instance(30, 20, 4, rng);
  const auto params = influence::fit_convex(inst.model, inst.model.zero_params(), inst.train, 0.01, 100);
  influence::InfluenceOptions opts;
  opts.method = influence::IhvpMethod::kExact;
  opts.damping = 0.01;
  Rng srng(10);
  const auto sel = secinf(inst.model, params, inst.train, inst.val, 0.5, inst.model.full_mask(), opts, srng);

  // Oracle: a dense Hessian assembled from per-example finite-difference
  // gradients, solved directly, scored by the same sign convention.
  const auto n = static_cast<Eigen::Index>(params.size());
  const auto batch = data::full_batch(inst.train);
  Eigen::MatrixXd hessian(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = 1e-5;
    ParamVector up = params, down = params;
    up.values()[j] += h;
    down.values()[j] -= h;
    hessian.col(j) = (inst.model.mean_grad_params(up, batch.view()) - inst.model.mean_grad_params(down, batch.view())) /
                     (2 * h);
  }
  hessian = 0.5 * (hessian + hessian.transpose()) + 0.01 * Eigen::MatrixXd::Identity(n, n);
  const Eigen::VectorXd s = hessian.ldlt().solve(inst.model.mean_grad_params(params, data::full_batch(inst.val).view()));
  std::vector<double> scores(inst.train.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto z = inst.train.example(i);
    scores[i] = -s.dot(inst.model.grad_params(params, z.x, z.y));
  }
  for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_NEAR(sel.scores[i], scores[i], 1e-5 * (1 + std::abs(scores[i])));
  const auto oracle = select_by_scores(scores, inst.train.origin_index(), 0.5);
  EXPECT_EQ(std::set<std::size_t>(sel.selected.begin(), sel.selected.end()),
            std::set<std::size_t>(oracle.selected.begin(), oracle.selected.end()));
}

TEST(SecinfTest, PureAndPermutationStable) {
  Rng rng(11);
  const auto inst = convex_instance(40, 20, 4, rng);
  const auto params = influence::fit_convex(inst.model, inst.model.zero_params(), inst.train, 0.01, 100);
  influence::InfluenceOptions opts;
  opts.method = influence::IhvpMethod::kExact;
  Rng r1(1), r2(1);
  const auto a = secinf(inst.model, params, inst.train, inst.val, 0.25, inst.model.full_mask(), opts, r1);
  const auto b = secinf(inst.model, params, inst.train, inst.val, 0.25, inst.model.full_mask(), opts, r2);
  EXPECT_EQ(a.selected, b.selected);
  EXPECT_EQ(a.scores, b.scores);

  std::vector<std::size_t> perm(inst.train.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
  const auto shuffled = inst.train.subset(perm);
  Rng r3(1);
  const auto c = secinf(inst.model, params, shuffled, inst.val, 0.25, inst.model.full_mask(), opts, r3);
  std::set<std::int64_t> origins_a, origins_c;
  for (auto i : a.selected) origins_a.insert(inst.train.origin_index()[i]);
  for (auto i : c.selected) origins_c.insert(shuffled.origin_index()[i]);
  EXPECT_EQ(origins_a, origins_c);
}

TEST(NoisyStateTest, StartIsCleanAndChecks) {
  const auto p = problem(12, 20, 5);
  auto state = NoisyTrainState::start(p.train, {3, 1});
  EXPECT_NO_THROW(state.check(p.train, 0.062));
  EXPECT_EQ(state.deltas.rows(), 2);
  EXPECT_EQ(state.deltas.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(NoisyTrainState::start(p.train, {25}), InvalidInputError);

  Eigen::VectorXd row = p.train.row(0);
  row[0] = std::min(1.0, row[0] + 0.01);
  state.noisy.set_row(0, row, state.noisy.provenance()[0]);
  EXPECT_THROW(state.check(p.train, 0.062), InvalidInputError);  // unselected row changed
}

struct NoiseFixture {
  Problem p;
  ParamVector params;
  influence::InfluenceVector s;
};

NoiseFixture noise_fixture(std::uint64_t seed) {
  auto p = problem(seed);
  Rng rng(seed + 1);
  auto params = train_plain(p.model, p.init, p.train, small_sgd(3), rng);
  influence::InfluenceOptions opts;
  opts.method = influence::IhvpMethod::kExact;
  opts.damping = 1.0;
  auto s = influence::compute_influence_vector(p.model, params, p.train, p.val, p.model.full_mask(), opts, rng);
  return {std::move(p), std::move(params), std::move(s)};
}

TEST(AddNoiseTest, ZeroGammaChangesNothing) {
  const auto f = noise_fixture(13);
  std::vector<std::size_t> all(f.p.train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto state = NoisyTrainState::start(f.p.train, all);
  addnoise(state, f.p.train, f.p.model, f.params, f.s, 0.0, 0.062);
  EXPECT_EQ(state.noisy.features(), f.p.train.features());
  EXPECT_EQ(state.deltas.cwiseAbs().maxCoeff(), 0.0);
}

TEST(AddNoiseTest, InvariantsHoldOverRepeatedRounds) {
  const auto f = noise_fixture(14);
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < f.p.train.size(); i += 2) selected.push_back(i);
  auto state = NoisyTrainState::start(f.p.train, selected);
  for (int round = 0; round < 5; ++round) {
    // A large gamma drives many coordinates into the clip.
    const auto stats = addnoise(state, f.p.train, f.p.model, f.params, f.s, 1e4, 0.062);
    EXPECT_NO_THROW(state.check(f.p.train, 0.062));
    EXPECT_LE(stats.max_abs_delta, 0.062);
    EXPECT_GE(stats.min_pixel, 0.0);
    EXPECT_LE(stats.max_pixel, 1.0);
  }
  EXPECT_GT(state.deltas.cwiseAbs().maxCoeff(), 0.05);
}

TEST(AddNoiseTest, StaleInfluenceVectorThrows) {
  const auto f = noise_fixture(15);
  auto state = NoisyTrainState::start(f.p.train, {0});
  ParamVector moved = f.params;
  moved.values()[0] += 1e-3;
  EXPECT_THROW(addnoise(state, f.p.train, f.p.model, moved, f.s, 0.1, 0.062), StaleInfluenceError);
}

TEST(AddNoiseTest, SmallStepLowersPredictedValidationLoss) {
  // On a convex model, the first-order change in validation loss from
  // retraining on the perturbed row is -grad_x(s . grad_theta l) . step / n,
  // which the healthy-noise step makes non-positive.
  Rng rng(16);
  const auto inst = convex_instance(40, 20, 4, rng);
  const auto params = influence::fit_convex(inst.model, inst.model.zero_params(), inst.train, 0.01, 100);
  influence::InfluenceOptions opts;
  opts.method = influence::IhvpMethod::kExact;
  opts.damping = 0.01;
  const auto s = influence::compute_influence_vector(inst.model, params, inst.train, inst.val,
                                                     inst.model.full_mask(), opts, rng);
  int lowered = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    auto state = NoisyTrainState::start(inst.train, {i});
    addnoise(state, inst.train, inst.model, params, s, 1e-3, 0.062);
    const Eigen::VectorXd delta = state.deltas.row(0).transpose();
    const Eigen::VectorXd pert = influence::influence_pert_loss(inst.model, inst.train.example(i), s, params);
    if (pert.dot(delta) <= 0.0) ++lowered;
  }
  EXPECT_EQ(lowered, 10);
}

TEST(HintTrainTest, EmptyScheduleReproducesPlainSgd) {
  const auto p = problem(17);
  auto cfg = small_hint();
  cfg.schedule = {};
  Rng a(18), b(18);
  const auto hinted = hint_train(p.model, cfg, p.train, p.val, p.init, a);
  const auto plain = train_plain(p.model, p.init, p.train, cfg.sgd, b);
  EXPECT_LE((hinted.values() - plain.values()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(HintTrainTest, ZeroGammaReproducesPlainSgd) {
  const auto p = problem(19);
  auto cfg = small_hint();
  cfg.gamma = 0.0;
  cfg.ratio = 1.0;
  Rng a(20), b(20);
  HintTrace trace;
  const auto hinted = hint_train(p.model, cfg, p.train, p.val, p.init, a, &trace);
  const auto plain = train_plain(p.model, p.init, p.train, cfg.sgd, b);
  EXPECT_LE((hinted.values() - plain.values()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(trace.rounds.size(), 2u);
}

TEST(HintTrainTest, UnselectedRowsAreBitIdentical) {
  const auto p = problem(21);
  auto cfg = small_hint();
  cfg.gamma = 50.0;
  Rng rng(22);
  HintTrace trace;
  hint_train(p.model, cfg, p.train, p.val, p.init, rng, &trace);
  ASSERT_TRUE(trace.final_state.has_value());
  const auto& state = *trace.final_state;
  EXPECT_EQ(state.selected.size(), selection_size(cfg.ratio, p.train.size()));
  for (auto i : trace.selection.unselected) {
    EXPECT_EQ(state.noisy.features().row(static_cast<Eigen::Index>(i)),
              p.train.features().row(static_cast<Eigen::Index>(i)));
  }
  EXPECT_NO_THROW(state.check(p.train, cfg.beta));
  ASSERT_EQ(trace.rounds.size(), 2u);
  EXPECT_EQ(trace.rounds[0].epoch, 3);
  EXPECT_EQ(trace.rounds[1].epoch, 6);
  EXPECT_GT(state.deltas.cwiseAbs().maxCoeff(), 0.0);
}

TEST(HintTrainTest, DeterministicUnderSeed) {
  const auto p = problem(23);
  auto cfg = small_hint();
  cfg.selection_influence.method = influence::IhvpMethod::kLissa;
  cfg.selection_influence.lissa.depth = 50;
  Rng a(24), b(24);
  const auto pa = hint_train(p.model, cfg, p.train, p.val, p.init, a);
  const auto pb = hint_train(p.model, cfg, p.train, p.val, p.init, b);
  EXPECT_EQ(pa.values(), pb.values());
}

TEST(FriendsTest, ZeroStepsGiveZeroNoise) {
  const auto p = problem(25, 30, 5);
  FriendsConfig cfg;
  cfg.noise_steps = 0;
  Rng rng(26);
  EXPECT_EQ(friendly_noise(p.model, p.init, p.train, cfg, rng).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FriendsTest, NoiseIsBoundedAndFriendlierThanRandom) {
  // Wide inputs, as for images: most directions barely move the output.
  const auto p = problem(27, 60, 5, 100);
  Rng rng(28);
  const auto params = train_plain(p.model, p.init, p.train, small_sgd(5), rng);
  FriendsConfig cfg;
  cfg.lambda = 0.01;
  const auto noise = friendly_noise(p.model, params, p.train, cfg, rng);
  EXPECT_LE(noise.cwiseAbs().maxCoeff(), cfg.beta);
  const auto noisy = p.train.features() + noise;
  EXPECT_GE(noisy.minCoeff(), 0.0);
  EXPECT_LE(noisy.maxCoeff(), 1.0);
  int friendlier = 0;
  for (std::size_t i = 0; i < p.train.size(); ++i) {
    const Eigen::VectorXd x = p.train.row(i);
    const Eigen::VectorXd e = noise.row(static_cast<Eigen::Index>(i)).transpose();
    // Random sign noise of the same l2 norm, kept in range.
    Eigen::VectorXd r(x.size());
    for (Eigen::Index j = 0; j < r.size(); ++j) r[j] = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    r *= e.norm() / r.norm();
    r = ((x + r).cwiseMax(0.0).cwiseMin(1.0) - x).eval();
    if (output_kl(p.model, params, x, e) <= output_kl(p.model, params, x, r)) ++friendlier;
  }
  EXPECT_GE(friendlier, static_cast<int>(0.9 * static_cast<double>(p.train.size())));
}

TEST(FriendsTest, KlIsZeroForZeroNoise) {
  const auto p = problem(29, 10, 5);
  const Eigen::VectorXd x = p.train.row(0);
  EXPECT_EQ(output_kl(p.model, p.init, x, Eigen::VectorXd::Zero(x.size())), 0.0);
}

TEST(FriendsTest, NoNoiseAndNoBernoulliIsPlainSgd) {
  const auto p = problem(30);
  FriendsConfig cfg;
  cfg.sgd = small_sgd(5);
  cfg.warmup_epochs = 2;
  cfg.noise_steps = 0;
  cfg.lambda = 0.0;
  cfg.bernoulli = 0.0;
  Rng a(31), b(31);
  const auto friends = friends_train(p.model, cfg, p.train, p.init, a);
  const auto plain = train_plain(p.model, p.init, p.train, cfg.sgd, b);
  EXPECT_EQ(friends.values(), plain.values());
}

TEST(AtdaTest, ZeroInnerStepsIsPlainSgd) {
  const auto p = problem(32);
  AtdaConfig cfg;
  cfg.sgd = small_sgd(3);
  cfg.inner_steps = 0;
  Rng a(33), b(33);
  const auto atda = atda_train(p.model, cfg, p.train, p.init, a);
  const auto plain = train_plain(p.model, p.init, p.train, cfg.sgd, b);
  EXPECT_EQ(atda.values(), plain.values());
}

TEST(AtdaTest, StopsEarlyOnceMarginIsReached) {
  const auto p = problem(34);
  AtdaConfig cfg;
  cfg.sgd = small_sgd(3);
  cfg.tau = 0.1;
  AtdaStats stats;
  Rng rng(35);
  atda_train(p.model, cfg, p.train, p.init, rng, &stats);
  EXPECT_EQ(stats.inner_loops, 3 * p.train.size());
  EXPECT_GT(stats.early_stops, 0u);
  EXPECT_LE(stats.early_stops, stats.inner_loops);
}

TEST(AtdaTest, ConfigValidation) {
  AtdaConfig cfg;
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = AtdaConfig{};
  cfg.inner_steps = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(MetricsTest, AccuracyOnHandBuiltModel) {
  // A linear model whose logits are the inputs themselves.
  const nn::Mlp model(nn::ModelSpec{{3, 3}, nn::Activation::kRelu, 1});
  auto params = model.zero_params();
  params.weight(0) = Eigen::MatrixXd::Identity(3, 3);
  data::FeatureMatrix x(4, 3);
  x << 1, 0, 0,  //
      0, 1, 0,   //
      0, 0, 1,   //
      1, 0, 0;
  const auto set = LabeledSet::clean(x, {0, 1, 0, 2}, 3);
  EXPECT_DOUBLE_EQ(evaluate_accuracy(model, params, set), 0.5);
  EXPECT_THROW(evaluate_accuracy(model, params, LabeledSet::clean(data::FeatureMatrix(0, 3), {}, 3)),
               InvalidInputError);

  std::vector<attacks::TargetSpec> targets = {
      {{Eigen::Vector3d(1, 0, 0), 1}, 0, {}},
      {{Eigen::Vector3d(0, 1, 0), 2}, 0, {}},
  };
  EXPECT_DOUBLE_EQ(evaluate_asr(model, params, targets), 0.5);
  EXPECT_THROW(evaluate_asr(model, params, {}), InvalidInputError);
}

TEST(PersistenceTest, ParamsRoundTrip) {
  const auto p = problem(36, 10, 5);
  const auto path = temp_path("params.bin");
  save_params(path, p.model.spec(), p.init);
  const auto [spec, params] = load_params(path);
  EXPECT_EQ(spec, p.model.spec());
  EXPECT_EQ(params.values(), p.init.values());

  auto bytes = io::read_file(path);
  io::write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size() - 3));
  EXPECT_THROW(load_params(path), FormatError);
  io::write_file(path, "HINTPARAMX\n");
  EXPECT_THROW(load_params(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_params(path), ArtifactError);
}

TEST(PersistenceTest, NoiseStateRoundTrip) {
  const auto f = noise_fixture(37);
  auto state = NoisyTrainState::start(f.p.train, {5, 2, 9});
  addnoise(state, f.p.train, f.p.model, f.params, f.s, 1e3, 0.062);
  const auto path = temp_path("noise.bin");
  save_noise_state(path, state);
  const auto loaded = load_noise_state(path, f.p.train);
  EXPECT_EQ(loaded.selected, state.selected);
  EXPECT_EQ(loaded.deltas, state.deltas);
  EXPECT_EQ(loaded.noisy.features(), state.noisy.features());
  EXPECT_NO_THROW(loaded.check(f.p.train, 0.062));
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace hint::defenses
