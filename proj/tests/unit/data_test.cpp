#include "hint/data/dataset.hpp"

#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "hint/error.hpp"
#include "hint/io.hpp"
#include "test_support.hpp"

namespace hint::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("hint-data-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void append_be(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out += static_cast<char>((v >> shift) & 0xFF);
}

// Hand-built IDX pair: image i has pixel j equal to (7 i + j) mod 256.
struct Fixture {
  fs::path images;
  fs::path labels;
};

Fixture write_fixture(const std::string& name, std::uint32_t count, std::uint32_t label_count,
                      std::size_t drop_tail = 0) {
  const auto dir = scratch_dir(name);
  std::string img;
  append_be(img, 0x803);
  append_be(img, count);
  append_be(img, 28);
  append_be(img, 28);
  for (std::uint32_t i = 0; i < count; ++i) {
    for (int j = 0; j < 784; ++j) img += static_cast<char>((7 * i + static_cast<std::uint32_t>(j)) % 256);
  }
  img.resize(img.size() - drop_tail);
  std::string lab;
  append_be(lab, 0x801);
  append_be(lab, label_count);
  for (std::uint32_t i = 0; i < label_count; ++i) lab += static_cast<char>(i % 10);
  io::write_file(dir / "images", img);
  io::write_file(dir / "labels", lab);
  return {dir / "images", dir / "labels"};
}

TEST(LoadIdxTest, FourImageFixture) {
  const auto f = write_fixture("four", 4, 4);
  const auto set = load_idx(f.images, f.labels);
  ASSERT_EQ(set.size(), 4u);
  EXPECT_EQ(set.dim(), 784);
  EXPECT_EQ(set.num_classes(), 10);
  EXPECT_EQ(set.labels(), (std::vector<int>{0, 1, 2, 3}));
  // Checksum computed from the byte rule above.
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 784; ++j) expected += ((7 * i + j) % 256) / 255.0;
  }
  EXPECT_NEAR(set.features().sum(), expected, 1e-9);
  EXPECT_DOUBLE_EQ(set.features()(2, 5), 19 / 255.0);
  for (auto p : set.provenance()) EXPECT_EQ(p, Provenance::kClean);
}

TEST(LoadIdxTest, ZeroCountFileIsEmptySet) {
  const auto f = write_fixture("empty", 0, 0);
  const auto set = load_idx(f.images, f.labels);
  EXPECT_TRUE(set.empty());
}

TEST(LoadIdxTest, LabelsFileOnImagesPathIsFormatError) {
  const auto f = write_fixture("magic", 2, 2);
  EXPECT_THROW(load_idx(f.labels, f.labels), FormatError);
}

TEST(LoadIdxTest, TruncatedImagesNameOffset) {
  const auto f = write_fixture("trunc", 3, 3, 10);
  try {
    load_idx(f.images, f.labels);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 16"), std::string::npos) << e.what();
  }
}

TEST(LoadIdxTest, CountMismatchIsFormatError) {
  const auto f = write_fixture("count", 3, 2);
  EXPECT_THROW(load_idx(f.images, f.labels), FormatError);
}

TEST(LoadIdxTest, MissingFileIsArtifactError) {
  EXPECT_THROW(load_idx("/nonexistent/images", "/nonexistent/labels"), ArtifactError);
}

TEST(LoadIdxTest, WriteThenReadRoundTrips) {
  Rng rng(1);
  auto x = FeatureMatrix(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<double>(uniform_index(rng, 256)) / 255.0;
  const auto set = LabeledSet::clean(x, {0, 9, 3, 3, 1}, 10);
  const auto dir = scratch_dir("roundtrip");
  write_idx(set, 2, 2, dir / "i", dir / "l");
  EXPECT_EQ(load_idx(dir / "i", dir / "l"), set);
}

TEST(LabeledSetTest, ConstructorsEnforcePixelRange) {
  FeatureMatrix bad(1, 2);
  bad << 0.5, 1.0001;
  EXPECT_THROW(LabeledSet::clean(bad, {0}, 2), InvalidInputError);
  bad << -1e-9, 0.5;
  EXPECT_THROW(LabeledSet::clean(bad, {0}, 2), InvalidInputError);
  bad << 0.0, 1.0;
  auto ok = LabeledSet::clean(bad, {1}, 2);
  EXPECT_THROW(ok.set_row(0, Eigen::VectorXd{{0.5, 1.5}}, Provenance::kPgd), InvalidInputError);
  EXPECT_THROW(ok.set_row(0, Eigen::VectorXd{{0.5}}, Provenance::kPgd), InvalidInputError);
  EXPECT_THROW(LabeledSet(bad, {0}, 2, {}, {0}), InvalidInputError);
  EXPECT_THROW(LabeledSet::clean(bad, {2}, 2), InvalidInputError);
}

TEST(SplitTest, PaperScaleRowCounts) {
  Rng rng(2);
  const auto all = hint::testing::random_set(70000, 1, 10, rng);
  const auto parts = split(all, 59000, 1000, 10000, rng);
  EXPECT_EQ(parts.train.size(), 59000u);
  EXPECT_EQ(parts.val.size(), 1000u);
  EXPECT_EQ(parts.test.size(), 10000u);
}

TEST(SplitTest, DeskScaleDisjointAndStratified) {
  Rng rng(3);
  const auto all = synthetic_blobs(7000, 3, 10, 0.1, rng);
  Rng split_rng(4);
  const auto parts = split(all, 5000, 500, 1000, split_rng);
  std::set<std::int64_t> seen;
  for (const auto* part : {&parts.train, &parts.val, &parts.test}) {
    for (auto o : part->origin_index()) EXPECT_TRUE(seen.insert(o).second);
  }
  EXPECT_EQ(seen.size(), 6500u);
  // Balanced source: every class gets exactly its share.
  std::vector<int> val_counts(10), test_counts(10);
  for (int y : parts.val.labels()) ++val_counts[y];
  for (int y : parts.test.labels()) ++test_counts[y];
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(val_counts[c], 50);
    EXPECT_EQ(test_counts[c], 100);
  }
  // Rows keep their content.
  for (std::size_t i = 0; i < parts.val.size(); ++i) {
    EXPECT_EQ(parts.val.row(i), all.row(static_cast<std::size_t>(parts.val.origin_index()[i])));
  }
}

TEST(SplitTest, SameSeedSamePartition) {
  Rng data_rng(5);
  const auto all = synthetic_blobs(300, 2, 3, 0.1, data_rng);
  Rng a(9), b(9), c(10);
  const auto p1 = split(all, 200, 30, 50, a);
  const auto p2 = split(all, 200, 30, 50, b);
  const auto p3 = split(all, 200, 30, 50, c);
  EXPECT_EQ(p1.train, p2.train);
  EXPECT_EQ(p1.val, p2.val);
  EXPECT_EQ(p1.test, p2.test);
  EXPECT_NE(p1.train.origin_index(), p3.train.origin_index());
}

TEST(SplitTest, InsufficientRowsRejected) {
  Rng rng(6);
  const auto all = synthetic_blobs(10, 2, 2, 0.1, rng);
  EXPECT_THROW(split(all, 8, 2, 1, rng), InvalidInputError);
}

TEST(PoisonPlanTest, PaperWorkedExampleCounts) {
  const PoisonPlan plan{0.4, {Provenance::kPgd, Provenance::kDap, Provenance::kDurp, Provenance::kGm}};
  EXPECT_EQ(plan.total(49000), 19600u);
  EXPECT_EQ(plan.per_attack_counts(49000), (std::vector<std::size_t>{4900, 4900, 4900, 4900}));
}

TEST(PoisonPlanTest, RemainderRoundRobin) {
  const PoisonPlan plan{1.0, {Provenance::kPgd, Provenance::kDap, Provenance::kDurp}};
  EXPECT_EQ(plan.per_attack_counts(10), (std::vector<std::size_t>{4, 3, 3}));
}

TEST(PoisonPlanTest, InvalidPlansRejected) {
  EXPECT_THROW((PoisonPlan{1.5, {Provenance::kPgd}}.validate()), ConfigError);
  EXPECT_THROW((PoisonPlan{0.5, {}}.validate()), ConfigError);
  EXPECT_THROW((PoisonPlan{0.5, {Provenance::kClean}}.validate()), ConfigError);
  EXPECT_THROW(parse_provenance("bogus"), ConfigError);
  EXPECT_EQ(parse_provenance("durp"), Provenance::kDurp);
}

// Fills each planned share with a deterministic in-range perturbation.
std::vector<AttackedRows> fake_outputs(const LabeledSet& clean, std::vector<AttackedRows> shares) {
  for (auto& share : shares) {
    share.features = FeatureMatrix(static_cast<Eigen::Index>(share.rows.size()), clean.dim());
    for (std::size_t k = 0; k < share.rows.size(); ++k) {
      share.features.row(static_cast<Eigen::Index>(k)) =
          (1.0 - clean.features().row(static_cast<Eigen::Index>(share.rows[k])).array()).matrix();
    }
  }
  return shares;
}

TEST(AssemblePoisonedTest, ZeroRatioIsIdentity) {
  Rng rng(7);
  const auto clean = synthetic_blobs(40, 3, 2, 0.1, rng);
  const PoisonPlan plan{0.0, {Provenance::kPgd}};
  const auto outputs = fake_outputs(clean, plan_assignment(plan, clean.size(), rng));
  EXPECT_EQ(assemble_poisoned(clean, plan, outputs), clean);
}

TEST(AssemblePoisonedTest, PreservesCleanRowsAndPartitionsTags) {
  Rng rng(8);
  const auto clean = synthetic_blobs(103, 4, 3, 0.2, rng);
  const PoisonPlan plan{0.6, {Provenance::kPgd, Provenance::kDap, Provenance::kDurp}};
  const auto shares = plan_assignment(plan, clean.size(), rng);
  const auto out = assemble_poisoned(clean, plan, fake_outputs(clean, shares));
  ASSERT_EQ(out.size(), clean.size());
  EXPECT_EQ(out.dim(), clean.dim());
  EXPECT_EQ(out.labels(), clean.labels());
  EXPECT_EQ(out.origin_index(), clean.origin_index());
  std::vector<std::size_t> tag_counts(6, 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    ++tag_counts[static_cast<std::size_t>(out.provenance()[i])];
    if (out.provenance()[i] == Provenance::kClean) EXPECT_EQ(out.row(i), clean.row(i));
  }
  const auto counts = plan.per_attack_counts(clean.size());
  EXPECT_EQ(tag_counts[static_cast<std::size_t>(Provenance::kPgd)], counts[0]);
  EXPECT_EQ(tag_counts[static_cast<std::size_t>(Provenance::kDap)], counts[1]);
  EXPECT_EQ(tag_counts[static_cast<std::size_t>(Provenance::kDurp)], counts[2]);
  EXPECT_EQ(tag_counts[0], clean.size() - plan.total(clean.size()));
  EXPECT_GE(out.features().minCoeff(), 0.0);
  EXPECT_LE(out.features().maxCoeff(), 1.0);
}

TEST(AssemblePoisonedTest, RejectsBadOutputs) {
  Rng rng(9);
  const auto clean = synthetic_blobs(20, 3, 2, 0.1, rng);
  const PoisonPlan plan{0.5, {Provenance::kPgd}};
  auto outputs = fake_outputs(clean, plan_assignment(plan, clean.size(), rng));
  auto out_of_range = outputs;
  out_of_range[0].features(0, 0) = 1.2;
  EXPECT_THROW(assemble_poisoned(clean, plan, out_of_range), InvalidInputError);
  auto wrong_dim = outputs;
  wrong_dim[0].features = FeatureMatrix::Zero(static_cast<Eigen::Index>(wrong_dim[0].rows.size()), 2);
  EXPECT_THROW(assemble_poisoned(clean, plan, wrong_dim), InvalidInputError);
  auto short_share = outputs;
  short_share[0].rows.pop_back();
  EXPECT_THROW(assemble_poisoned(clean, plan, short_share), InvalidInputError);
}

TEST(ContainerTest, SaveLoadRoundTrip) {
  Rng rng(10);
  auto set = synthetic_blobs(17, 5, 3, 0.2, rng);
  set.set_row(3, Eigen::VectorXd::Constant(5, 0.25), Provenance::kFc);
  const auto dir = scratch_dir("container");
  save_set(set, dir / "s.lset");
  EXPECT_EQ(load_set(dir / "s.lset"), set);
}

TEST(ContainerTest, CorruptionDetected) {
  Rng rng(11);
  const auto set = synthetic_blobs(4, 2, 2, 0.2, rng);
  const auto dir = scratch_dir("corrupt");
  save_set(set, dir / "s.lset");
  const auto raw = io::read_file(dir / "s.lset");
  std::string bytes(raw.begin(), raw.end());
  io::write_file(dir / "trailing", bytes + "x");
  EXPECT_THROW(load_set(dir / "trailing"), FormatError);
  io::write_file(dir / "short", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_set(dir / "short"), FormatError);
  bytes[0] = 'X';
  io::write_file(dir / "magic", bytes);
  EXPECT_THROW(load_set(dir / "magic"), FormatError);
}

TEST(SyntheticBlobsTest, ShapeAndRange) {
  Rng rng(12);
  const auto set = synthetic_blobs(30, 16, 3, 0.3, rng);
  EXPECT_EQ(set.size(), 30u);
  EXPECT_EQ(set.dim(), 16);
  EXPECT_GE(set.features().minCoeff(), 0.0);
  EXPECT_LE(set.features().maxCoeff(), 1.0);
}

}  // namespace
}  // namespace hint::data
