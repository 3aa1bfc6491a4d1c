#pragma once

// Tape-free reverse-mode automatic differentiation over dense Eigen matrices.
//
// Every value is a 2-D matrix. Sequences are laid out time-major
// (rows = frames or phonemes, cols = channels); 2-D feature maps with C
// channels are flattened to (H*W) x C.  Graph nodes are reference counted and
// die with the last Var that points at them.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace megalab::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using IndexTable = Eigen::MatrixXi;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  [[nodiscard]] const Matrix& value() const { return node_->value; }
  [[nodiscard]] Matrix& mutable_value() { return node_->value; }
  [[nodiscard]] const Matrix& grad() const { return node_->grad; }
  [[nodiscard]] Eigen::Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return node_->value.cols(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] double scalar() const { return node_->value(0, 0); }
  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

[[nodiscard]] bool grad_enabled();

[[nodiscard]] Var constant(Matrix value);
[[nodiscard]] Var leaf(Matrix value);  // trainable leaf, accumulates grads
[[nodiscard]] Var scalar(double value);

// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates to leaves.
void backward(const Var& root);

// --- elementwise / linear ---
[[nodiscard]] Var matmul(const Var& a, const Var& b);
[[nodiscard]] Var add(const Var& a, const Var& b);
[[nodiscard]] Var sub(const Var& a, const Var& b);
[[nodiscard]] Var mul(const Var& a, const Var& b);
[[nodiscard]] Var scale(const Var& a, double s);
[[nodiscard]] Var add_scalar(const Var& a, double s);
[[nodiscard]] Var add_row(const Var& a, const Var& row);  // broadcast 1xC over rows
[[nodiscard]] Var transpose(const Var& a);
[[nodiscard]] Var left_multiply(const Matrix& p, const Var& x);  // constant P times x

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// --- nonlinearities ---
[[nodiscard]] Var relu(const Var& a);
[[nodiscard]] Var leaky_relu(const Var& a, double slope = 0.2);
[[nodiscard]] Var tanh(const Var& a);
[[nodiscard]] Var square(const Var& a);
[[nodiscard]] Var exp(const Var& a);

// --- reductions ---
[[nodiscard]] Var sum(const Var& a);
[[nodiscard]] Var mean(const Var& a);
[[nodiscard]] Var mean_rows(const Var& a);  // 1xC column means
[[nodiscard]] Var mse(const Var& a, const Var& b);

// --- normalization / probabilities ---
[[nodiscard]] Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
[[nodiscard]] Var softmax_rows(const Var& x);
[[nodiscard]] Var log_softmax_rows(const Var& x);
// Mean over rows of -log softmax(logits)[row, target[row]].
[[nodiscard]] Var cross_entropy(const Var& logits, std::span<const int> targets);

// --- structure ---
[[nodiscard]] Var detach(const Var& a);
// Value of `quantized`, gradient routed to `h` unchanged (straight-through).
[[nodiscard]] Var straight_through(const Var& h, const Matrix& quantized);
// out.row(i) = x.row(index[i]); index -1 yields a zero row.
[[nodiscard]] Var gather_rows(const Var& x, std::span<const int> index);
// out(m, j*C:(j+1)*C) = x.row(table(m, j)); -1 yields zeros.
[[nodiscard]] Var im2col(const Var& x, const IndexTable& table);
// Row-major reinterpretation.
[[nodiscard]] Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols);
[[nodiscard]] Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
[[nodiscard]] Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
[[nodiscard]] Var concat_rows(std::span<const Var> parts);
[[nodiscard]] Var concat_cols(std::span<const Var> parts);

}  // namespace megalab::ad
