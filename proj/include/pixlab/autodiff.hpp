#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records operations in creation order; backward() walks
// them in reverse. Parameters are bound to tape leaves and their gradients
// are collected into a GradientMap, so forward passes never mutate a model.

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace pixlab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup {
  kMaskEmbed,  // the mask patch embedding; has its own learning rate
  kOther,
};

struct Parameter {
  std::string name;
  Matrix value;
  ParamGroup group = ParamGroup::kOther;
  bool decay = false;  // decoupled weight decay applies
};

using GradientMap = std::unordered_map<const Parameter*, Matrix>;

namespace autodiff {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the gradient of the node's output; adds into input gradients.
  using Backprop = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value);
  // Repeated calls with the same parameter return the same leaf.
  Var parameter(const Parameter& p);

  Var record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop);
  Var record(Matrix value, std::span<const Var> inputs, Backprop backprop);

  const Matrix& value(Var v) const { return nodes_[v.id_].value; }
  // Empty (0x0) if no gradient reached the node.
  const Matrix& grad(Var v) const { return nodes_[v.id_].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  void add_grad(Var v, const Matrix& g);
  template <typename Expr>
  void add_grad_expr(Var v, const Expr& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(Var output);  // output must be 1x1
  void backward(Var output, const Matrix& seed);

  // Adds every parameter leaf's gradient into `grads`.
  void accumulate(GradientMap& grads) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop);

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_ids_;
};

// Elementwise and linear-algebra ops. All operands must share a tape.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var operator+(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);           // broadcast 1xN over rows
Var add_tiled(Var a, Var block);       // add `block` to each consecutive row block of `a`
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_rows(Var a);
Var l2_normalize_rows(Var a);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::vector<Eigen::Index> rows);
// Scaled dot-product attention over `batch` consecutive row blocks of a
// (batch*T) x 3D packed [Q | K | V] input. Returns (batch*T) x D. When
// `probs` is non-null it receives the batch*heads attention matrices
// (sample-major).
Var multi_head_attention(Var qkv, int batch, int heads, std::vector<Matrix>* probs = nullptr);
// sum_i coeffs[i] * terms[i] for 1x1 terms.
Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs);

}  // namespace autodiff
}  // namespace pixlab
