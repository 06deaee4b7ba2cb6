#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relalign/rng.hpp"
#include "relalign/types.hpp"

/// Tape-free reverse-mode automatic differentiation over dense row-major
/// double matrices. Every op allocates a Node holding its value and a
/// backward closure; parents are owned by children, so a graph lives exactly
/// as long as the Tensor handles that reach it.
///
/// Parameters are leaf nodes. Two modules that hold the same parameter Tensor
/// share storage: one optimizer update moves both.
namespace relalign::ad {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  Node& parent(std::size_t i) { return *parents[i]; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value);
  /// Leaf that accumulates gradients. Created regardless of grad mode.
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  /// Gradient, or an all-zero matrix of the value's shape if none arrived.
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  /// Seeds d(this)/d(this) = 1 and back-propagates. Requires a 1x1 tensor.
  void backward() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Ops executed while a guard is alive record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedParameter>;

std::size_t parameter_count(const ParameterList& params);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1 x n over rows
Tensor add_const(const Tensor& a, const Matrix& c);

// Pointwise
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Row-wise normalizations; -inf entries get probability exactly 0.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Shape
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor slice_cols(const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor gather_rows(const Tensor& a, std::span<const int> rows);
Tensor mean_rows(const Tensor& a);  // 1 x n column means

// Masking
/// Entries where mask != 0 become `value` and receive zero gradient.
Tensor masked_fill(const Tensor& a, const Matrix& mask, double value);
/// Row i scaled by factors[i]; factors are constants.
Tensor scale_rows(const Tensor& a, std::span<const double> factors);
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, Rng& rng);
/// Gradient-isolated copy: same value, no path back to `a`.
Tensor detach(const Tensor& a);

// Reductions and losses (all return 1 x 1)
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// sum_i w_i * -log softmax(logits_i)[label_i] / sum_i w_i. Rows with weight 0 are ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights = {});
/// Cross-entropy on probabilities with log floor, mean-reduced with optional weights.
Tensor prob_cross_entropy(const Tensor& probs, std::span<const int> labels, std::span<const double> weights = {},
                          double floor = 1e-12);
/// Mean over rows of KL(target_i || probs_i); target is a constant.
Tensor kl_rows(const Matrix& target, const Tensor& probs, double floor = 1e-12);
/// sum_i w_i * |pred_i - target_i|_1 / max(1, sum_i w_i).
Tensor l1_rows(const Tensor& pred, const Matrix& target, std::span<const double> weights);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace relalign::ad
