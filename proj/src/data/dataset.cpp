#include "hint/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hint/error.hpp"
#include "hint/io.hpp"

namespace hint::data {
namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;
constexpr char kSetMagic[8] = {'H', 'I', 'N', 'T', 'S', 'E', 'T', '1'};

void check_range(const FeatureMatrix& x) {
  if (!x.allFinite() || (x.array() < 0.0).any() || (x.array() > 1.0).any()) {
    throw InvalidInputError("feature values must lie in [0,1]");
  }
}

void put_u32_be(std::string& out, std::uint32_t v) {
  out += static_cast<char>(v >> 24);
  out += static_cast<char>(v >> 16);
  out += static_cast<char>(v >> 8);
  out += static_cast<char>(v);
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kClean: return "clean";
    case Provenance::kPgd: return "pgd";
    case Provenance::kDap: return "dap";
    case Provenance::kDurp: return "durp";
    case Provenance::kFc: return "fc";
    case Provenance::kGm: return "gm";
  }
  return "unknown";
}

Provenance parse_provenance(std::string_view name) {
  for (auto p : {Provenance::kClean, Provenance::kPgd, Provenance::kDap, Provenance::kDurp,
                 Provenance::kFc, Provenance::kGm}) {
    if (to_string(p) == name) return p;
  }
  throw ConfigError("unknown attack name '" + std::string(name) + "'");
}

LabeledSet::LabeledSet(FeatureMatrix features, std::vector<int> labels, int num_classes,
                       std::vector<Provenance> provenance, std::vector<std::int64_t> origin_index)
    : features_(std::move(features)),
      labels_(std::move(labels)),
      num_classes_(num_classes),
      provenance_(std::move(provenance)),
      origin_index_(std::move(origin_index)) {
  const auto n = labels_.size();
  if (static_cast<std::size_t>(features_.rows()) != n || provenance_.size() != n ||
      origin_index_.size() != n) {
    throw InvalidInputError("labeled set columns have mismatched lengths");
  }
  if (num_classes_ < 2) throw InvalidInputError("labeled set needs at least two classes");
  for (int y : labels_) {
    if (y < 0 || y >= num_classes_) throw InvalidInputError("label out of range");
  }
  check_range(features_);
}

LabeledSet LabeledSet::clean(FeatureMatrix features, std::vector<int> labels, int num_classes) {
  const auto n = labels.size();
  std::vector<std::int64_t> origin(n);
  std::iota(origin.begin(), origin.end(), 0);
  return LabeledSet(std::move(features), std::move(labels), num_classes,
                    std::vector<Provenance>(n, Provenance::kClean), std::move(origin));
}

void LabeledSet::set_row(std::size_t i, const Eigen::VectorXd& x, Provenance tag) {
  if (i >= size()) throw InvalidInputError("row index out of range");
  if (x.size() != dim()) throw InvalidInputError("replacement row has wrong dimension");
  if (!x.allFinite() || (x.array() < 0.0).any() || (x.array() > 1.0).any()) {
    throw InvalidInputError("replacement row leaves [0,1]");
  }
  features_.row(static_cast<Eigen::Index>(i)) = x.transpose();
  provenance_[i] = tag;
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> rows) const {
  FeatureMatrix x(rows.size(), features_.cols());
  std::vector<int> y;
  std::vector<Provenance> prov;
  std::vector<std::int64_t> origin;
  y.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = rows[k];
    if (i >= size()) throw InvalidInputError("subset row out of range");
    x.row(static_cast<Eigen::Index>(k)) = features_.row(static_cast<Eigen::Index>(i));
    y.push_back(labels_[i]);
    prov.push_back(provenance_[i]);
    origin.push_back(origin_index_[i]);
  }
  return LabeledSet(std::move(x), std::move(y), num_classes_, std::move(prov), std::move(origin));
}

LabeledSet LabeledSet::concat(const LabeledSet& a, const LabeledSet& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.dim() != b.dim() || a.num_classes() != b.num_classes()) {
    throw InvalidInputError("cannot concatenate sets of different shape");
  }
  FeatureMatrix x(a.size() + b.size(), a.dim());
  x << a.features_, b.features_;
  auto cat = [](auto u, const auto& v) {
    u.insert(u.end(), v.begin(), v.end());
    return u;
  };
  return LabeledSet(std::move(x), cat(a.labels_, b.labels_), a.num_classes_,
                    cat(a.provenance_, b.provenance_), cat(a.origin_index_, b.origin_index_));
}

Eigen::MatrixXd LabeledSet::gather_columns(std::span<const std::size_t> rows) const {
  Eigen::MatrixXd out(features_.cols(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.col(static_cast<Eigen::Index>(k)) = features_.row(static_cast<Eigen::Index>(rows[k])).transpose();
  }
  return out;
}

std::vector<int> LabeledSet::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto i : rows) out.push_back(labels_.at(i));
  return out;
}

std::vector<std::size_t> all_rows(const LabeledSet& set) {
  std::vector<std::size_t> rows(set.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

BatchData full_batch(const LabeledSet& set) {
  const auto rows = all_rows(set);
  return BatchData(set, rows);
}

LabeledSet load_idx(const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path) {
  const auto image_bytes = io::read_file(images_path);
  const auto label_bytes = io::read_file(labels_path);
  io::Reader images(image_bytes.data(), image_bytes.size(), images_path.string());
  io::Reader labels(label_bytes.data(), label_bytes.size(), labels_path.string());

  const auto image_magic = images.get_u32_be();
  if (image_magic != kImagesMagic) {
    throw FormatError(images_path.string() + ": bad magic number at byte offset 0 (expected 0x00000803)");
  }
  const auto count = images.get_u32_be();
  const auto rows = images.get_u32_be();
  const auto cols = images.get_u32_be();
  const auto label_magic = labels.get_u32_be();
  if (label_magic != kLabelsMagic) {
    throw FormatError(labels_path.string() + ": bad magic number at byte offset 0 (expected 0x00000801)");
  }
  const auto label_count = labels.get_u32_be();
  if (label_count != count) {
    throw FormatError(labels_path.string() + ": label count at byte offset 4 is " +
                      std::to_string(label_count) + " but the image file holds " +
                      std::to_string(count));
  }
  const std::size_t d = std::size_t{rows} * cols;
  images.need(std::size_t{count} * d);
  labels.need(count);

  FeatureMatrix x(count, static_cast<Eigen::Index>(d));
  const unsigned char* pixels = images.cursor();
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pixels[i * d + j] / 255.0;
    }
  }
  std::vector<int> y(count);
  for (std::size_t i = 0; i < count; ++i) {
    y[i] = labels.cursor()[i];
    if (y[i] > 9) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(y[i]) +
                        " out of range at byte offset " + std::to_string(labels.pos() + i));
    }
  }
  return LabeledSet::clean(std::move(x), std::move(y), 10);
}

void write_idx(const LabeledSet& set, int rows, int cols, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (rows * cols != set.dim()) throw InvalidInputError("rows x cols must equal the feature dimension");
  std::string images;
  put_u32_be(images, kImagesMagic);
  put_u32_be(images, static_cast<std::uint32_t>(set.size()));
  put_u32_be(images, static_cast<std::uint32_t>(rows));
  put_u32_be(images, static_cast<std::uint32_t>(cols));
  for (Eigen::Index i = 0; i < set.features().rows(); ++i) {
    for (Eigen::Index j = 0; j < set.features().cols(); ++j) {
      images += static_cast<char>(static_cast<unsigned char>(std::lround(set.features()(i, j) * 255.0)));
    }
  }
  std::string labels;
  put_u32_be(labels, kLabelsMagic);
  put_u32_be(labels, static_cast<std::uint32_t>(set.size()));
  for (int y : set.labels()) labels += static_cast<char>(y);
  io::write_file(images_path, images);
  io::write_file(labels_path, labels);
}

namespace {

// Largest-remainder apportionment of `total` across classes in proportion
// to `available`, never exceeding what a class has.
std::vector<std::size_t> stratified_quota(const std::vector<std::size_t>& available,
                                          std::size_t total) {
  const std::size_t n = std::accumulate(available.begin(), available.end(), std::size_t{0});
  std::vector<std::size_t> quota(available.size(), 0);
  if (n == 0 || total == 0) return quota;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < available.size(); ++c) {
    const double exact = static_cast<double>(total) * static_cast<double>(available[c]) / static_cast<double>(n);
    quota[c] = std::min(available[c], static_cast<std::size_t>(std::floor(exact)));
    assigned += quota[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  while (assigned < total) {
    bool progressed = false;
    for (const auto& [frac, c] : remainders) {
      if (assigned == total) break;
      if (quota[c] < available[c]) {
        ++quota[c];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return quota;
}

}  // namespace

Split split(const LabeledSet& set, std::size_t n_train, std::size_t n_val, std::size_t n_test,
            Rng& rng) {
  if (n_train + n_val + n_test > set.size()) {
    throw InvalidInputError("split needs " + std::to_string(n_train + n_val + n_test) +
                            " rows but the set has " + std::to_string(set.size()));
  }
  auto order = all_rows(set);
  shuffle(std::span(order), rng);

  const int classes = set.num_classes();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (auto i : order) by_class[set.labels()[i]].push_back(i);

  std::vector<bool> taken(set.size(), false);
  auto draw = [&](std::size_t total) {
    std::vector<std::size_t> available(classes);
    for (int c = 0; c < classes; ++c) {
      available[c] = static_cast<std::size_t>(
          std::count_if(by_class[c].begin(), by_class[c].end(), [&](auto i) { return !taken[i]; }));
    }
    const auto quota = stratified_quota(available, total);
    std::vector<bool> chosen(set.size(), false);
    for (int c = 0; c < classes; ++c) {
      std::size_t need = quota[c];
      for (auto i : by_class[c]) {
        if (need == 0) break;
        if (taken[i]) continue;
        taken[i] = true;
        chosen[i] = true;
        --need;
      }
    }
    std::vector<std::size_t> ordered;
    for (auto i : order) {
      if (chosen[i]) ordered.push_back(i);
    }
    return ordered;
  };
  const auto val_rows = draw(n_val);
  const auto test_rows = draw(n_test);
  std::vector<std::size_t> train_rows;
  for (auto i : order) {
    if (train_rows.size() == n_train) break;
    if (!taken[i]) train_rows.push_back(i);
  }
  return {set.subset(train_rows), set.subset(val_rows), set.subset(test_rows)};
}

LabeledSet synthetic_blobs(std::size_t n, int dim, int num_classes, double spread, Rng& rng) {
  Eigen::MatrixXd centers(num_classes, dim);
  for (int c = 0; c < num_classes; ++c) {
    for (int j = 0; j < dim; ++j) centers(c, j) = uniform(rng, 0.2, 0.8);
  }
  FeatureMatrix x(static_cast<Eigen::Index>(n), dim);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    y[i] = c;
    for (int j = 0; j < dim; ++j) {
      // Box-Muller; one draw per coordinate keeps the stream easy to follow.
      const double u1 = 1.0 - uniform01(rng);
      const double u2 = uniform01(rng);
      const double g = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      x(static_cast<Eigen::Index>(i), j) = std::clamp(centers(c, j) + spread * g, 0.0, 1.0);
    }
  }
  return LabeledSet::clean(std::move(x), std::move(y), num_classes);
}

void PoisonPlan::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("poison ratio must lie in [0,1]");
  if (ratio > 0.0 && attacks.empty()) throw ConfigError("poison plan needs at least one attack");
  for (auto a : attacks) {
    if (a == Provenance::kClean) throw ConfigError("'clean' is not an attack");
  }
}

std::size_t PoisonPlan::total(std::size_t n) const {
  validate();
  // Guard against 0.4 * 49000 landing a hair below an integer.
  return std::min(n, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9)));
}

std::vector<std::size_t> PoisonPlan::per_attack_counts(std::size_t n) const {
  const std::size_t t = total(n);
  const std::size_t k = attacks.size();
  std::vector<std::size_t> counts(k, k == 0 ? 0 : t / k);
  for (std::size_t i = 0; k > 0 && i < t % k; ++i) ++counts[i];
  return counts;
}

std::vector<AttackedRows> plan_assignment(const PoisonPlan& plan, std::size_t n, Rng& rng) {
  const auto counts = plan.per_attack_counts(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(std::span(order), rng);
  std::vector<AttackedRows> out;
  std::size_t cursor = 0;
  for (std::size_t a = 0; a < plan.attacks.size(); ++a) {
    AttackedRows share;
    share.attack = plan.attacks[a];
    share.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                      order.begin() + static_cast<std::ptrdiff_t>(cursor + counts[a]));
    std::sort(share.rows.begin(), share.rows.end());
    cursor += counts[a];
    out.push_back(std::move(share));
  }
  return out;
}

LabeledSet assemble_poisoned(const LabeledSet& clean, const PoisonPlan& plan,
                             std::span<const AttackedRows> outputs) {
  const auto counts = plan.per_attack_counts(clean.size());
  LabeledSet out = clean;
  std::vector<bool> touched(clean.size(), false);
  for (std::size_t a = 0; a < plan.attacks.size(); ++a) {
    const auto it = std::find_if(outputs.begin(), outputs.end(),
                                 [&](const AttackedRows& r) { return r.attack == plan.attacks[a]; });
    if (it == outputs.end()) {
      if (counts[a] == 0) continue;
      throw InvalidInputError("no attack output for '" + std::string(to_string(plan.attacks[a])) + "'");
    }
    if (it->rows.size() != counts[a]) {
      throw InvalidInputError("attack '" + std::string(to_string(it->attack)) + "' covers " +
                              std::to_string(it->rows.size()) + " rows, plan wants " +
                              std::to_string(counts[a]));
    }
    if (it->features.rows() != static_cast<Eigen::Index>(it->rows.size()) ||
        it->features.cols() != clean.dim()) {
      throw InvalidInputError("attacked rows have the wrong dimension");
    }
    for (std::size_t k = 0; k < it->rows.size(); ++k) {
      const auto row = it->rows[k];
      if (row >= clean.size() || touched[row]) {
        throw InvalidInputError("attacked row index invalid or assigned twice");
      }
      touched[row] = true;
      out.set_row(row, it->features.row(static_cast<Eigen::Index>(k)).transpose(), it->attack);
    }
  }
  return out;
}

void save_set(const LabeledSet& set, const std::filesystem::path& path) {
  std::string bytes(kSetMagic, sizeof(kSetMagic));
  io::put<std::uint64_t>(bytes, set.size());
  io::put<std::uint64_t>(bytes, static_cast<std::uint64_t>(set.dim()));
  io::put<std::uint32_t>(bytes, static_cast<std::uint32_t>(set.num_classes()));
  bytes.append(reinterpret_cast<const char*>(set.features().data()),
               static_cast<std::size_t>(set.features().size()) * sizeof(double));
  for (int y : set.labels()) io::put<std::int32_t>(bytes, y);
  for (auto p : set.provenance()) bytes += static_cast<char>(p);
  for (auto o : set.origin_index()) io::put<std::int64_t>(bytes, o);
  io::write_file(path, bytes);
}

LabeledSet load_set(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes.data(), bytes.size(), path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!std::equal(magic, magic + 8, kSetMagic)) {
    throw FormatError(path.string() + ": bad magic at byte offset 0");
  }
  const auto n = in.get<std::uint64_t>();
  const auto d = in.get<std::uint64_t>();
  const auto classes = in.get<std::uint32_t>();
  in.need(n * d * sizeof(double));
  FeatureMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  in.read(x.data(), n * d * sizeof(double));
  std::vector<int> y(n);
  for (auto& v : y) v = in.get<std::int32_t>();
  std::vector<Provenance> prov(n);
  for (auto& p : prov) {
    const auto raw = in.get<std::uint8_t>();
    if (raw > static_cast<std::uint8_t>(Provenance::kGm)) {
      throw FormatError(path.string() + ": bad provenance tag at byte offset " + std::to_string(in.pos() - 1));
    }
    p = static_cast<Provenance>(raw);
  }
  std::vector<std::int64_t> origin(n);
  for (auto& o : origin) o = in.get<std::int64_t>();
  if (in.remaining() != 0) {
    throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(in.pos()));
  }
  return LabeledSet(std::move(x), std::move(y), static_cast<int>(classes), std::move(prov),
                    std::move(origin));
}

}  // namespace hint::data
