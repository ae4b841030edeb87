#include "hint/nn/mlp.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "hint/error.hpp"
#include "hint/rng.hpp"

namespace hint::nn {
namespace {

MatrixXd activate(Activation activation, const MatrixXd& pre) {
  if (activation == Activation::kRelu) return pre.cwiseMax(0.0);
  return pre.array().tanh().matrix();
}

// First derivative of the activation, from the pre-activation and the
// activation output. ReLU uses derivative 0 at the kink.
MatrixXd activation_slope(Activation activation, const MatrixXd& pre, const MatrixXd& out) {
  if (activation == Activation::kRelu) return (pre.array() > 0.0).cast<double>().matrix();
  return (1.0 - out.array().square()).matrix();
}

// Second derivative; identically zero for ReLU.
MatrixXd activation_curvature(Activation activation, const MatrixXd& out) {
  if (activation == Activation::kRelu) return MatrixXd::Zero(out.rows(), out.cols());
  return (-2.0 * out.array() * (1.0 - out.array().square())).matrix();
}

MatrixXd softmax_columns(const MatrixXd& logits) {
  MatrixXd p = logits;
  for (Index j = 0; j < p.cols(); ++j) {
    auto col = p.col(j);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  return p;
}

Eigen::Map<const MatrixXd> weight_of(const VectorXd& flat, const LayerSlot& slot) {
  return {flat.data() + slot.offset, slot.rows, slot.cols};
}

Eigen::Map<const VectorXd> bias_of(const VectorXd& flat, const LayerSlot& slot) {
  return {flat.data() + slot.bias_offset(), slot.rows};
}

}  // namespace

std::string_view to_string(Activation activation) {
  return activation == Activation::kRelu ? "relu" : "tanh";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw InvalidInputError("unknown activation '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (layer_widths.size() < 2) {
    throw InvalidInputError("model needs at least an input and an output width");
  }
  for (int w : layer_widths) {
    if (w <= 0) throw InvalidInputError("layer widths must be positive");
  }
  if (num_classes() < 2) throw InvalidInputError("model needs at least two classes");
  if (top_layer_count < 1 || top_layer_count > num_layers()) {
    throw InvalidInputError("top_layer_count must be in [1, number of affine layers]");
  }
}

std::string ModelSpec::to_text() const {
  std::ostringstream out;
  out << "layers";
  for (int w : layer_widths) out << ' ' << w;
  out << "\nactivation " << to_string(activation) << "\ntop_layers " << top_layer_count << '\n';
  return out.str();
}

ModelSpec ModelSpec::from_text(std::string_view text) {
  ModelSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string key;
    if (!(fields >> key)) continue;
    if (key == "layers") {
      int w = 0;
      while (fields >> w) spec.layer_widths.push_back(w);
    } else if (key == "activation") {
      std::string name;
      fields >> name;
      spec.activation = parse_activation(name);
    } else if (key == "top_layers") {
      fields >> spec.top_layer_count;
    } else {
      throw FormatError("unknown model spec key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

ParamLayout::ParamLayout(const ModelSpec& spec) {
  spec.validate();
  Index offset = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    LayerSlot slot{offset, spec.layer_widths[l + 1], spec.layer_widths[l]};
    layers_.push_back(slot);
    offset += slot.size();
  }
  size_ = offset;
}

Index ParamLayout::tail_offset(int count) const {
  if (count < 0 || count > static_cast<int>(layers_.size())) {
    throw InvalidInputError("layer count out of range");
  }
  if (count == 0) return size_;
  return layers_[layers_.size() - count].offset;
}

void ParamMask::apply(VectorXd& v) const {
  v.head(begin).setZero();
  v.tail(v.size() - end).setZero();
}

ParamVector::ParamVector(ParamLayout layout, VectorXd values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_.size()) {
    throw InvalidInputError("parameter count does not match layout");
  }
}

Eigen::Map<const MatrixXd> ParamVector::weight(int layer) const {
  return weight_of(values_, layout_.layers().at(layer));
}

Eigen::Map<MatrixXd> ParamVector::weight(int layer) {
  const auto& slot = layout_.layers().at(layer);
  return {values_.data() + slot.offset, slot.rows, slot.cols};
}

Eigen::Map<const VectorXd> ParamVector::bias(int layer) const {
  return bias_of(values_, layout_.layers().at(layer));
}

Eigen::Map<VectorXd> ParamVector::bias(int layer) {
  const auto& slot = layout_.layers().at(layer);
  return {values_.data() + slot.bias_offset(), slot.rows};
}

std::uint64_t ParamVector::fingerprint() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values_.data());
  const std::size_t n = static_cast<std::size_t>(values_.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void validate_example(const Example& z, int input_dim, int num_classes) {
  if (z.x.size() != input_dim) throw InvalidInputError("example has wrong feature dimension");
  if (z.y < 0 || z.y >= num_classes) throw InvalidInputError("example label out of range");
  if ((z.x.array() < 0.0).any() || (z.x.array() > 1.0).any() || !z.x.allFinite()) {
    throw InvalidInputError("example features must lie in [0,1]");
  }
}

VectorXd softmax(const VectorXd& logits) {
  VectorXd p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

double cross_entropy(const VectorXd& logits, int y) {
  Index top = 0;
  const double m = logits.maxCoeff(&top);
  // log1p keeps tiny losses from rounding to zero when one logit dominates.
  double rest = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    if (i != top) rest += std::exp(logits[i] - m);
  }
  return (m - logits[y]) + std::log1p(rest);
}

struct Mlp::Tape {
  std::vector<MatrixXd> act;  // act[0] = inputs, act[l] = output of layer l-1
  std::vector<MatrixXd> pre;  // pre[l] = W_l act[l] + b_l
};

Mlp::Mlp(ModelSpec spec) : spec_(std::move(spec)), layout_(spec_) {}

ParamMask Mlp::top_mask() const {
  return {layout_.tail_offset(spec_.top_layer_count), layout_.size()};
}

ParamVector Mlp::init_params(std::mt19937_64& rng) const {
  VectorXd values(layout_.size());
  for (const auto& slot : layout_.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(slot.cols));
    for (Index i = 0; i < slot.size(); ++i) values[slot.offset + i] = uniform(rng, -bound, bound);
  }
  return ParamVector(layout_, std::move(values));
}

ParamVector Mlp::zero_params() const {
  return ParamVector(layout_, VectorXd::Zero(layout_.size()));
}

void Mlp::reinit_top(ParamVector& params, int count, std::mt19937_64& rng) const {
  check_params(params);
  const auto& layers = layout_.layers();
  for (std::size_t l = layers.size() - count; l < layers.size(); ++l) {
    const auto& slot = layers[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(slot.cols));
    for (Index i = 0; i < slot.size(); ++i) {
      params.values()[slot.offset + i] = uniform(rng, -bound, bound);
    }
  }
}

void Mlp::check_params(const ParamVector& params) const {
  if (params.size() != layout_.size()) {
    throw InvalidInputError("parameter vector does not match the model layout");
  }
}

void Mlp::check_batch(const Batch& batch) const {
  if (batch.xs.rows() != spec_.input_dim()) {
    throw InvalidInputError("input dimension mismatch: expected " +
                            std::to_string(spec_.input_dim()) + ", got " +
                            std::to_string(batch.xs.rows()));
  }
  if (static_cast<Index>(batch.ys.size()) != batch.xs.cols()) {
    throw InvalidInputError("batch label count does not match example count");
  }
  for (int y : batch.ys) {
    if (y < 0 || y >= spec_.num_classes()) throw InvalidInputError("label out of range");
  }
}

Mlp::Tape Mlp::record(const ParamVector& params, Eigen::Ref<const MatrixXd> xs) const {
  check_params(params);
  if (xs.rows() != spec_.input_dim()) {
    throw InvalidInputError("input dimension mismatch: expected " +
                            std::to_string(spec_.input_dim()) + ", got " +
                            std::to_string(xs.rows()));
  }
  const int layers = spec_.num_layers();
  Tape tape;
  tape.act.reserve(layers);
  tape.pre.reserve(layers);
  tape.act.emplace_back(xs);
  for (int l = 0; l < layers; ++l) {
    MatrixXd z = params.weight(l) * tape.act[l];
    z.colwise() += params.bias(l);
    tape.pre.push_back(std::move(z));
    if (l + 1 < layers) tape.act.push_back(activate(spec_.activation, tape.pre[l]));
  }
  return tape;
}

MatrixXd Mlp::backward(const ParamVector& params, const Tape& tape, int layer, MatrixXd cotangent,
                       VectorXd* param_grad) const {
  const auto& slots = layout_.layers();
  for (int l = layer; l >= 0; --l) {
    if (param_grad != nullptr) {
      const auto& slot = slots[l];
      Eigen::Map<MatrixXd>(param_grad->data() + slot.offset, slot.rows, slot.cols).noalias() +=
          cotangent * tape.act[l].transpose();
      param_grad->segment(slot.bias_offset(), slot.rows) += cotangent.rowwise().sum();
    }
    MatrixXd upstream = params.weight(l).transpose() * cotangent;
    if (l == 0) return upstream;
    cotangent = upstream.cwiseProduct(activation_slope(spec_.activation, tape.pre[l - 1], tape.act[l]));
  }
  return {};
}

VectorXd Mlp::forward(const ParamVector& params, const VectorXd& x) const {
  return record(params, x).pre.back().col(0);
}

MatrixXd Mlp::forward(const ParamVector& params, const Batch& batch) const {
  return record(params, batch.xs).pre.back();
}

VectorXd Mlp::features(const ParamVector& params, const VectorXd& x) const {
  if (spec_.num_layers() < 2) throw InvalidInputError("features need at least one hidden layer");
  return record(params, x).act.back().col(0);
}

double Mlp::loss(const ParamVector& params, const VectorXd& x, int y) const {
  if (y < 0 || y >= spec_.num_classes()) throw InvalidInputError("label out of range");
  return cross_entropy(forward(params, x), y);
}

double Mlp::mean_loss(const ParamVector& params, const Batch& batch) const {
  check_batch(batch);
  const MatrixXd logits = forward(params, batch);
  double total = 0.0;
  for (Index j = 0; j < logits.cols(); ++j) total += cross_entropy(logits.col(j), batch.ys[j]);
  return total / static_cast<double>(logits.cols());
}

VectorXd Mlp::mean_grad_params(const ParamVector& params, const Batch& batch,
                               const std::optional<ParamMask>& mask) const {
  check_batch(batch);
  const Tape tape = record(params, batch.xs);
  MatrixXd cot = softmax_columns(tape.pre.back());
  for (Index j = 0; j < cot.cols(); ++j) cot(batch.ys[j], j) -= 1.0;
  cot /= static_cast<double>(cot.cols());
  VectorXd grad = VectorXd::Zero(layout_.size());
  backward(params, tape, spec_.num_layers() - 1, std::move(cot), &grad);
  if (mask) mask->apply(grad);
  return grad;
}

VectorXd Mlp::grad_params(const ParamVector& params, const VectorXd& x, int y,
                          const std::optional<ParamMask>& mask) const {
  const int ys[] = {y};
  return mean_grad_params(params, Batch{x, ys}, mask);
}

MatrixXd Mlp::grad_input(const ParamVector& params, const Batch& batch) const {
  check_batch(batch);
  const Tape tape = record(params, batch.xs);
  MatrixXd cot = softmax_columns(tape.pre.back());
  for (Index j = 0; j < cot.cols(); ++j) cot(batch.ys[j], j) -= 1.0;
  return backward(params, tape, spec_.num_layers() - 1, std::move(cot), nullptr);
}

VectorXd Mlp::grad_input(const ParamVector& params, const VectorXd& x, int y) const {
  const int ys[] = {y};
  return grad_input(params, Batch{x, ys}).col(0);
}

void Mlp::r_pass(const ParamVector& params, const Batch& batch, const VectorXd& v,
                 double example_weight, VectorXd* param_out, MatrixXd* input_out) const {
  check_batch(batch);
  if (v.size() != layout_.size()) throw InvalidInputError("direction has wrong length");
  const Tape tape = record(params, batch.xs);
  const auto& slots = layout_.layers();
  const int layers = spec_.num_layers();

  // Forward sweep: directional derivatives of pre-activations and activations.
  std::vector<MatrixXd> r_pre(layers);
  std::vector<MatrixXd> r_act(layers);
  for (int l = 0; l < layers; ++l) {
    MatrixXd rz = weight_of(v, slots[l]) * tape.act[l];
    if (l > 0) rz.noalias() += params.weight(l) * r_act[l];
    rz.colwise() += bias_of(v, slots[l]);
    if (l + 1 < layers) {
      r_act[l + 1] = rz.cwiseProduct(activation_slope(spec_.activation, tape.pre[l], tape.act[l + 1]));
    }
    r_pre[l] = std::move(rz);
  }

  // Loss cotangent on the logits and its directional derivative through the
  // softmax Jacobian diag(p) - p p^T.
  const MatrixXd probs = softmax_columns(tape.pre.back());
  MatrixXd cot = probs;
  for (Index j = 0; j < cot.cols(); ++j) cot(batch.ys[j], j) -= 1.0;
  cot *= example_weight;
  const MatrixXd pr = probs.cwiseProduct(r_pre.back());
  MatrixXd r_cot =
      example_weight * (pr - (probs.array().rowwise() * pr.colwise().sum().array()).matrix());

  if (param_out != nullptr) *param_out = VectorXd::Zero(layout_.size());
  for (int l = layers - 1; l >= 0; --l) {
    const auto& slot = slots[l];
    if (param_out != nullptr) {
      Eigen::Map<MatrixXd> rw(param_out->data() + slot.offset, slot.rows, slot.cols);
      rw.noalias() += r_cot * tape.act[l].transpose();
      if (l > 0) rw.noalias() += cot * r_act[l].transpose();
      param_out->segment(slot.bias_offset(), slot.rows) += r_cot.rowwise().sum();
    }
    MatrixXd upstream = params.weight(l).transpose() * cot;
    MatrixXd r_upstream = weight_of(v, slot).transpose() * cot;
    r_upstream.noalias() += params.weight(l).transpose() * r_cot;
    if (l == 0) {
      if (input_out != nullptr) *input_out = std::move(r_upstream);
      break;
    }
    const MatrixXd slope = activation_slope(spec_.activation, tape.pre[l - 1], tape.act[l]);
    MatrixXd next_r = r_upstream.cwiseProduct(slope);
    if (spec_.activation != Activation::kRelu) {
      next_r += upstream.cwiseProduct(activation_curvature(spec_.activation, tape.act[l]))
                    .cwiseProduct(r_pre[l - 1]);
    }
    cot = upstream.cwiseProduct(slope);
    r_cot = std::move(next_r);
  }
}

VectorXd Mlp::hvp(const ParamVector& params, const Batch& batch, const VectorXd& v,
                  const std::optional<ParamMask>& mask) const {
  if (batch.xs.cols() == 0) throw InvalidInputError("hvp needs a nonempty batch");
  VectorXd direction = v;
  if (mask) mask->apply(direction);
  VectorXd out;
  r_pass(params, batch, direction, 1.0 / static_cast<double>(batch.xs.cols()), &out, nullptr);
  if (mask) mask->apply(out);
  return out;
}

MatrixXd Mlp::mixed_grad(const ParamVector& params, const Batch& batch, const VectorXd& s) const {
  MatrixXd out;
  r_pass(params, batch, s, 1.0, nullptr, &out);
  return out;
}

VectorXd Mlp::mixed_grad(const ParamVector& params, const VectorXd& x, int y,
                         const VectorXd& s) const {
  const int ys[] = {y};
  return mixed_grad(params, Batch{x, ys}, s).col(0);
}

VectorXd Mlp::logits_vjp(const ParamVector& params, const VectorXd& x,
                         const VectorXd& cotangent) const {
  if (cotangent.size() != spec_.num_classes()) throw InvalidInputError("cotangent has wrong length");
  const Tape tape = record(params, x);
  return backward(params, tape, spec_.num_layers() - 1, cotangent, nullptr).col(0);
}

MatrixXd Mlp::logits_vjp(const ParamVector& params, Eigen::Ref<const MatrixXd> xs,
                         const MatrixXd& cotangents) const {
  if (cotangents.rows() != spec_.num_classes() || cotangents.cols() != xs.cols()) {
    throw InvalidInputError("cotangents have the wrong shape");
  }
  const Tape tape = record(params, xs);
  return backward(params, tape, spec_.num_layers() - 1, cotangents, nullptr);
}

VectorXd Mlp::features_vjp(const ParamVector& params, const VectorXd& x,
                           const VectorXd& cotangent) const {
  const int layers = spec_.num_layers();
  if (layers < 2) throw InvalidInputError("features need at least one hidden layer");
  if (cotangent.size() != spec_.layer_widths[layers - 1]) {
    throw InvalidInputError("cotangent has wrong length");
  }
  const Tape tape = record(params, x);
  MatrixXd cot = cotangent.cwiseProduct(
      activation_slope(spec_.activation, tape.pre[layers - 2], tape.act[layers - 1]).col(0));
  return backward(params, tape, layers - 2, std::move(cot), nullptr).col(0);
}

ParamVector Mlp::sgd_step(const ParamVector& params, const Batch& batch, double learning_rate,
                          const std::optional<ParamMask>& mask) const {
  if (!(learning_rate >= 0.0)) throw InvalidInputError("learning rate must be non-negative");
  ParamVector next = params;
  if (learning_rate == 0.0) return next;
  next.values() -= learning_rate * mean_grad_params(params, batch, mask);
  return next;
}

}  // namespace hint::nn
