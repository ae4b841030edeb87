#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace hint::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { kRelu, kTanh };

std::string_view to_string(Activation activation);
Activation parse_activation(std::string_view name);

// Shape of a feed-forward classifier. layer_widths = {d, h1, ..., C}; the
// trailing top_layer_count affine maps form the "top layers" (the classifier
// head), everything below is the feature extractor.
struct ModelSpec {
  std::vector<int> layer_widths;
  Activation activation = Activation::kRelu;
  int top_layer_count = 1;

  void validate() const;
  int num_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
  int input_dim() const { return layer_widths.front(); }
  int num_classes() const { return layer_widths.back(); }

  std::string to_text() const;
  static ModelSpec from_text(std::string_view text);
  bool operator==(const ModelSpec&) const = default;
};

// Weights of affine layer l are stored column-major (rows x cols) starting at
// offset, followed by the bias of length rows.
struct LayerSlot {
  Index offset = 0;
  int rows = 0;
  int cols = 0;

  Index weight_size() const { return Index{rows} * cols; }
  Index bias_offset() const { return offset + weight_size(); }
  Index size() const { return weight_size() + rows; }
  bool operator==(const LayerSlot&) const = default;
};

class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelSpec& spec);

  Index size() const { return size_; }
  const std::vector<LayerSlot>& layers() const { return layers_; }
  // First coordinate of the trailing `count` layers.
  Index tail_offset(int count) const;

  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<LayerSlot> layers_;
  Index size_ = 0;
};

// Contiguous coordinate range [begin, end) of the parameter vector. Masked
// gradients and Hessian products are exactly zero outside the range.
struct ParamMask {
  Index begin = 0;
  Index end = 0;

  static ParamMask all(Index size) { return {0, size}; }
  Index size() const { return end - begin; }
  bool contains(Index i) const { return i >= begin && i < end; }
  void apply(VectorXd& v) const;
  bool operator==(const ParamMask&) const = default;
};

class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(ParamLayout layout, VectorXd values);

  const ParamLayout& layout() const { return layout_; }
  const VectorXd& values() const { return values_; }
  VectorXd& values() { return values_; }
  Index size() const { return values_.size(); }

  Eigen::Map<const MatrixXd> weight(int layer) const;
  Eigen::Map<MatrixXd> weight(int layer);
  Eigen::Map<const VectorXd> bias(int layer) const;
  Eigen::Map<VectorXd> bias(int layer);

  // FNV-1a over the raw bytes; used to tie cached influence vectors to the
  // parameters they were computed against.
  std::uint64_t fingerprint() const;

 private:
  ParamLayout layout_;
  VectorXd values_;
};

struct Example {
  VectorXd x;
  int y = 0;
};

// Checks x in [0,1]^d and y in [0, num_classes).
void validate_example(const Example& z, int input_dim, int num_classes);

// A batch is a column-per-example feature matrix plus labels. Gradients with
// respect to parameters are means over the batch; per-example quantities
// (input gradients, mixed gradients) come back column-per-example.
struct Batch {
  Eigen::Ref<const MatrixXd> xs;
  std::span<const int> ys;
};

// Multilayer perceptron with cross-entropy loss and hand-derived first- and
// second-order derivatives. Second-order products use the R-operator pass
// (forward-mode differentiation of the reverse pass), so the Hessian is never
// materialized.
class Mlp {
 public:
  explicit Mlp(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  Index param_count() const { return layout_.size(); }
  ParamMask full_mask() const { return ParamMask::all(layout_.size()); }
  ParamMask top_mask() const;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  ParamVector init_params(std::mt19937_64& rng) const;
  ParamVector zero_params() const;
  // Re-draws the trailing `count` layers, leaving the rest untouched.
  void reinit_top(ParamVector& params, int count, std::mt19937_64& rng) const;

  VectorXd forward(const ParamVector& params, const VectorXd& x) const;
  MatrixXd forward(const ParamVector& params, const Batch& batch) const;
  // Penultimate-layer activations; requires at least one hidden layer.
  VectorXd features(const ParamVector& params, const VectorXd& x) const;

  double loss(const ParamVector& params, const VectorXd& x, int y) const;
  double mean_loss(const ParamVector& params, const Batch& batch) const;

  VectorXd grad_params(const ParamVector& params, const VectorXd& x, int y,
                       const std::optional<ParamMask>& mask = std::nullopt) const;
  VectorXd mean_grad_params(const ParamVector& params, const Batch& batch,
                            const std::optional<ParamMask>& mask = std::nullopt) const;

  VectorXd grad_input(const ParamVector& params, const VectorXd& x, int y) const;
  MatrixXd grad_input(const ParamVector& params, const Batch& batch) const;

  // Mean Hessian of the batch loss applied to v. With a mask, v is
  // restricted to the mask first and the product is zeroed outside it.
  VectorXd hvp(const ParamVector& params, const Batch& batch, const VectorXd& v,
               const std::optional<ParamMask>& mask = std::nullopt) const;

  // grad_x (s . grad_theta l(x, y)), one column per example.
  VectorXd mixed_grad(const ParamVector& params, const VectorXd& x, int y,
                      const VectorXd& s) const;
  MatrixXd mixed_grad(const ParamVector& params, const Batch& batch,
                      const VectorXd& s) const;

  // Input gradient of cotangent . logits(x) and cotangent . features(x).
  VectorXd logits_vjp(const ParamVector& params, const VectorXd& x,
                      const VectorXd& cotangent) const;
  // Column j: input gradient of cotangents.col(j) . logits(xs.col(j)).
  MatrixXd logits_vjp(const ParamVector& params, Eigen::Ref<const MatrixXd> xs,
                      const MatrixXd& cotangents) const;
  VectorXd features_vjp(const ParamVector& params, const VectorXd& x,
                        const VectorXd& cotangent) const;

  // params - learning_rate * mean gradient over the batch.
  ParamVector sgd_step(const ParamVector& params, const Batch& batch, double learning_rate,
                       const std::optional<ParamMask>& mask = std::nullopt) const;

 private:
  struct Tape;

  void check_params(const ParamVector& params) const;
  void check_batch(const Batch& batch) const;
  Tape record(const ParamVector& params, Eigen::Ref<const MatrixXd> xs) const;
  // Reverse pass from a cotangent on pre-activation `layer`. Accumulates the
  // parameter gradient (if requested) and returns the input gradient.
  MatrixXd backward(const ParamVector& params, const Tape& tape, int layer, MatrixXd cotangent,
                    VectorXd* param_grad) const;
  // Forward-mode derivative of the loss gradient along parameter direction v.
  // Fills the directional derivative of the parameter gradient (mean over
  // batch) and/or of the per-example input gradients.
  void r_pass(const ParamVector& params, const Batch& batch, const VectorXd& v,
              double example_weight, VectorXd* param_out, MatrixXd* input_out) const;

  ModelSpec spec_;
  ParamLayout layout_;
};

// Numerically stable softmax and cross-entropy on a logit vector.
VectorXd softmax(const VectorXd& logits);
double cross_entropy(const VectorXd& logits, int y);

}  // namespace hint::nn
