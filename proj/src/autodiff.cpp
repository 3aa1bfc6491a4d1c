#include "megalab/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "megalab/error.hpp"

namespace megalab::ad {

namespace {

thread_local bool t_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
  }
}

Var make_result(Matrix value, std::initializer_list<Var> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!t_grad_enabled) {
    return Var(node);
  }
  bool any = false;
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      node->parents.push_back(in.node());
    }
    node->backward = std::move(bw);
  }
  return Var(node);
}

Var make_result(Matrix value, const std::vector<Var>& inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!t_grad_enabled) {
    return Var(node);
  }
  bool any = false;
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      node->parents.push_back(in.node());
    }
    node->backward = std::move(bw);
  }
  return Var(node);
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(node);
}

Var leaf(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(node);
}

Var scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ValidationError("backward: root must be a scalar");
  }
  if (!root.requires_grad()) {
    return;
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.contains(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) {
      node->backward(*node);
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ValidationError("matmul: inner dimension mismatch " + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()));
  }
  return make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad * bv.transpose());
    if (wants(self, 1)) self.parents[1]->accumulate(av.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[1]->value));
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_result(a.value().array() + s, {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ValidationError("add_row: expected 1x" + std::to_string(a.cols()) + " row");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a},
                     [](Node& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

Var left_multiply(const Matrix& p, const Var& x) {
  if (p.cols() != x.rows()) {
    throw ValidationError("left_multiply: dimension mismatch");
  }
  return make_result(p * x.value(), {x}, [p](Node& self) { self.parents[0]->accumulate(p.transpose() * self.grad); });
}

Var relu(const Var& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    self.parents[0]->accumulate((x.array() > 0.0).select(self.grad, 0.0));
  });
}

Var leaky_relu(const Var& a, double slope) {
  Matrix out = (a.value().array() > 0.0).select(a.value(), a.value() * slope);
  return make_result(std::move(out), {a}, [slope](Node& self) {
    const Matrix& x = self.parents[0]->value;
    self.parents[0]->accumulate((x.array() > 0.0).select(self.grad, self.grad * slope));
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_result(out, {a}, [out](Node& self) {
    self.parents[0]->accumulate((self.grad.array() * (1.0 - out.array().square())).matrix());
  });
}

Var square(const Var& a) {
  return make_result(a.value().array().square().matrix(), {a}, [](Node& self) {
    self.parents[0]->accumulate((2.0 * self.grad.array() * self.parents[0]->value.array()).matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_result(out, {a},
                     [out](Node& self) { self.parents[0]->accumulate(self.grad.cwiseProduct(out)); });
}

Var sum(const Var& a) {
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    const auto& x = self.parents[0]->value;
    self.parents[0]->accumulate(Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_result(Matrix::Constant(1, 1, a.value().sum() / n), {a}, [n](Node& self) {
    const auto& x = self.parents[0]->value;
    self.parents[0]->accumulate(Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0) / n));
  });
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) {
    throw ValidationError("mean_rows: empty input");
  }
  const double n = static_cast<double>(a.rows());
  Matrix out = a.value().colwise().mean();
  return make_result(std::move(out), {a}, [n](Node& self) {
    const auto rows = self.parents[0]->value.rows();
    self.parents[0]->accumulate((self.grad / n).replicate(rows, 1));
  });
}

Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  Matrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
    const Matrix& g = self.grad;
    const RowVector gam = self.parents[1]->value.row(0);
    if (wants(self, 0)) {
      const auto c2 = static_cast<double>(xhat.cols());
      Matrix dxhat = g.array().rowwise() * gam.array();
      Matrix dx(xhat.rows(), xhat.cols());
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).dot(xhat.row(i)) / c2;
        dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
      }
      self.parents[0]->accumulate(dx);
    }
    if (wants(self, 1)) self.parents[1]->accumulate(g.cwiseProduct(xhat).colwise().sum());
    if (wants(self, 2)) self.parents[2]->accumulate(g.colwise().sum());
  });
}

Var softmax_rows(const Var& x) {
  Matrix out = x.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return make_result(out, {x}, [out](Node& self) {
    Matrix dx(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double dot = self.grad.row(i).dot(out.row(i));
      dx.row(i) = out.row(i).array() * (self.grad.row(i).array() - dot);
    }
    self.parents[0]->accumulate(dx);
  });
}

Var log_softmax_rows(const Var& x) {
  Matrix out = x.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    const double lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return make_result(out, {x}, [out](Node& self) {
    Matrix dx(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double gs = self.grad.row(i).sum();
      dx.row(i) = self.grad.row(i).array() - out.row(i).array().exp() * gs;
    }
    self.parents[0]->accumulate(dx);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n || n == 0) {
    throw ValidationError("cross_entropy: target count must equal logit rows");
  }
  Matrix prob(n, logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) {
      throw ValidationError("cross_entropy: target out of range");
    }
    const double mx = logits.value().row(i).maxCoeff();
    prob.row(i) = (logits.value().row(i).array() - mx).exp();
    const double z = prob.row(i).sum();
    prob.row(i) /= z;
    loss += -(logits.value()(i, t) - mx - std::log(z));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(Matrix::Constant(1, 1, loss / static_cast<double>(n)), {logits},
                     [prob, tg](Node& self) {
                       Matrix d = prob;
                       for (std::size_t i = 0; i < tg.size(); ++i) {
                         d(static_cast<Eigen::Index>(i), tg[i]) -= 1.0;
                       }
                       self.parents[0]->accumulate(d * (self.grad(0, 0) / static_cast<double>(tg.size())));
                     });
}

Var detach(const Var& a) { return constant(a.value()); }

Var straight_through(const Var& h, const Matrix& quantized) {
  if (h.rows() != quantized.rows() || h.cols() != quantized.cols()) {
    throw ValidationError("straight_through: shape mismatch");
  }
  return make_result(quantized, {h}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var gather_rows(const Var& x, std::span<const int> index) {
  IndexTable table(static_cast<Eigen::Index>(index.size()), 1);
  for (std::size_t i = 0; i < index.size(); ++i) {
    table(static_cast<Eigen::Index>(i), 0) = index[i];
  }
  return im2col(x, table);
}

Var im2col(const Var& x, const IndexTable& table) {
  const Eigen::Index c = x.cols();
  const Eigen::Index k = table.cols();
  Matrix out = Matrix::Zero(table.rows(), k * c);
  for (Eigen::Index m = 0; m < table.rows(); ++m) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const int r = table(m, j);
      if (r >= 0) {
        if (r >= x.rows()) {
          throw ValidationError("im2col: row index out of range");
        }
        out.block(m, j * c, 1, c) = x.value().row(r);
      }
    }
  }
  return make_result(std::move(out), {x}, [table, c](Node& self) {
    const auto& xv = self.parents[0]->value;
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    for (Eigen::Index m = 0; m < table.rows(); ++m) {
      for (Eigen::Index j = 0; j < table.cols(); ++j) {
        const int r = table(m, j);
        if (r >= 0) dx.row(r) += self.grad.block(m, j * c, 1, c);
      }
    }
    self.parents[0]->accumulate(dx);
  });
}

Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.value().size()) {
    throw ValidationError("reshape: element count mismatch");
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor src = x.value();
  Matrix out = Eigen::Map<RowMajor>(src.data(), rows, cols);
  const Eigen::Index in_rows = x.rows();
  const Eigen::Index in_cols = x.cols();
  return make_result(std::move(out), {x}, [in_rows, in_cols](Node& self) {
    RowMajor g = self.grad;
    self.parents[0]->accumulate(Matrix(Eigen::Map<RowMajor>(g.data(), in_rows, in_cols)));
  });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw ValidationError("slice_rows: range out of bounds");
  }
  return make_result(x.value().middleRows(start, count), {x}, [start, count](Node& self) {
    const auto& xv = self.parents[0]->value;
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    dx.middleRows(start, count) = self.grad;
    self.parents[0]->accumulate(dx);
  });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw ValidationError("slice_cols: range out of bounds");
  }
  return make_result(x.value().middleCols(start, count), {x}, [start, count](Node& self) {
    const auto& xv = self.parents[0]->value;
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    dx.middleCols(start, count) = self.grad;
    self.parents[0]->accumulate(dx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ValidationError("concat_rows: no inputs");
  }
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants(self, i)) {
        self.parents[i]->accumulate(self.grad.middleRows(offsets[i], self.parents[i]->value.rows()));
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ValidationError("concat_cols: no inputs");
  }
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants(self, i)) {
        self.parents[i]->accumulate(self.grad.middleCols(offsets[i], self.parents[i]->value.cols()));
      }
    }
  });
}

}  // namespace megalab::ad
