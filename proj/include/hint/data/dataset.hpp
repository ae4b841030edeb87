#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "hint/nn/mlp.hpp"
#include "hint/rng.hpp"

namespace hint::data {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Where a training row came from: untouched, or the attack that produced it.
enum class Provenance : std::uint8_t { kClean = 0, kPgd, kDap, kDurp, kFc, kGm };

std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view name);

// Feature rows in [0,1]^d with labels, provenance tags and the index each row
// had in the set it was drawn from. The pixel-range invariant is enforced by
// every constructor and mutator.
class LabeledSet {
 public:
  LabeledSet() = default;
  LabeledSet(FeatureMatrix features, std::vector<int> labels, int num_classes,
             std::vector<Provenance> provenance, std::vector<std::int64_t> origin_index);

  // All rows clean, origin_index = 0..n-1.
  static LabeledSet clean(FeatureMatrix features, std::vector<int> labels, int num_classes);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  int dim() const { return static_cast<int>(features_.cols()); }
  int num_classes() const { return num_classes_; }

  const FeatureMatrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<Provenance>& provenance() const { return provenance_; }
  const std::vector<std::int64_t>& origin_index() const { return origin_index_; }

  Eigen::VectorXd row(std::size_t i) const { return features_.row(static_cast<Eigen::Index>(i)).transpose(); }
  nn::Example example(std::size_t i) const { return {row(i), labels_[i]}; }

  // Replaces one feature row (label unchanged) and retags it.
  void set_row(std::size_t i, const Eigen::VectorXd& x, Provenance tag);

  LabeledSet subset(std::span<const std::size_t> rows) const;
  static LabeledSet concat(const LabeledSet& a, const LabeledSet& b);

  // Column-per-example copy of the selected rows, for nn::Batch.
  Eigen::MatrixXd gather_columns(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;
  // Zero-copy d x n view of every row.
  auto all_columns() const { return features_.transpose(); }

  bool operator==(const LabeledSet&) const = default;

 private:
  FeatureMatrix features_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  std::vector<Provenance> provenance_;
  std::vector<std::int64_t> origin_index_;
};

// Owns a gathered minibatch so an nn::Batch view can point into it.
struct BatchData {
  Eigen::MatrixXd xs;
  std::vector<int> ys;

  BatchData(const LabeledSet& set, std::span<const std::size_t> rows)
      : xs(set.gather_columns(rows)), ys(set.gather_labels(rows)) {}
  nn::Batch view() const { return {xs, ys}; }
};

// Whole-set batch.
BatchData full_batch(const LabeledSet& set);
std::vector<std::size_t> all_rows(const LabeledSet& set);

// MNIST IDX files. Pixels are divided by 255; labels must lie in 0-9.
LabeledSet load_idx(const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path);
// Writes pixels as round(255 x) bytes; used for fixtures.
void write_idx(const LabeledSet& set, int rows, int cols,
               const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

struct Split {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
};

// Seeded shuffle partition. Validation and test draw per-class quotas
// proportional to the class frequencies; train takes the remaining rows in
// shuffled order.
Split split(const LabeledSet& set, std::size_t n_train, std::size_t n_val, std::size_t n_test,
            Rng& rng);

// Gaussian class blobs in [0,1]^dim (clipped), for fast tests without MNIST.
LabeledSet synthetic_blobs(std::size_t n, int dim, int num_classes, double spread, Rng& rng);

// Fraction rho of the rows, divided equally between the attacks.
struct PoisonPlan {
  double ratio = 0.0;
  std::vector<Provenance> attacks;

  void validate() const;
  std::size_t total(std::size_t n) const;
  // floor(total / k) per attack, remainder handed out round-robin from the
  // first attack.
  std::vector<std::size_t> per_attack_counts(std::size_t n) const;
};

// Rows of one attack's share and the attacked feature rows, in matching order.
struct AttackedRows {
  Provenance attack = Provenance::kClean;
  std::vector<std::size_t> rows;
  FeatureMatrix features;
};

// Seeded choice of which rows each attack poisons: a shuffled permutation cut
// into consecutive shares.
std::vector<AttackedRows> plan_assignment(const PoisonPlan& plan, std::size_t n, Rng& rng);

// Copies `clean` and overwrites the planned rows with attacked versions.
// Labels are kept; every attacked row is range- and shape-checked.
LabeledSet assemble_poisoned(const LabeledSet& clean, const PoisonPlan& plan,
                             std::span<const AttackedRows> outputs);

// Binary container (little endian): "HINTSET1", n, d, classes, features as
// float64, labels as int32, provenance bytes, origin indices as int64.
void save_set(const LabeledSet& set, const std::filesystem::path& path);
LabeledSet load_set(const std::filesystem::path& path);

}  // namespace hint::data
