#include "relalign/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace relalign::ad {

namespace {

thread_local bool g_grad_enabled = true;

using Backward = std::function<void(Node&)>;

Tensor make_op(Matrix value, std::initializer_list<const Tensor*> inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->parents.push_back(t->node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_op_n(Matrix value, std::span<const Tensor> inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

void push(Node& parent, const Matrix& g) {
  if (parent.requires_grad) parent.accumulate(g);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

std::vector<double> uniform_weights(std::span<const double> weights, Eigen::Index n) {
  if (weights.empty()) return std::vector<double>(std::size_t(n), 1.0);
  if (static_cast<Eigen::Index>(weights.size()) != n) throw std::invalid_argument("weights length mismatch");
  return {weights.begin(), weights.end()};
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

Tensor Tensor::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Matrix Tensor::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(node_->value.rows(), node_->value.cols());
  return node_->grad;
}

double Tensor::item() const {
  if (node_->value.size() != 1) throw std::logic_error("item() on a non-scalar tensor");
  return node_->value(0, 0);
}

void Tensor::backward() const {
  if (node_->value.size() != 1) throw std::logic_error("backward() needs a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.size() == 0) continue;
    n->backward(*n);
    n->grad.resize(0, 0);  // interior gradients are not needed after propagation
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += std::size_t(p.tensor.value().size());
  return n;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return make_op(a.value() * b.value(), {&a, &b}, [](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_bt: inner dimension mismatch");
  return make_op(a.value() * b.value().transpose(), {&a, &b}, [](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(self.grad.transpose() * pa.value);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {&a, &b}, [](Node& self) {
    push(self.parent(0), self.grad);
    push(self.parent(1), self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {&a, &b}, [](Node& self) {
    push(self.parent(0), self.grad);
    if (self.parent(1).requires_grad) self.parent(1).accumulate(-self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_op(a.value() * s, {&a}, [s](Node& self) { self.parent(0).accumulate(self.grad * s); });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bad row shape");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(std::move(out), {&a, &row}, [](Node& self) {
    push(self.parent(0), self.grad);
    if (self.parent(1).requires_grad) self.parent(1).accumulate(self.grad.colwise().sum());
  });
}

Tensor add_const(const Tensor& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("add_const: shape mismatch");
  return make_op(a.value() + c, {&a}, [](Node& self) { self.parent(0).accumulate(self.grad); });
}

Tensor relu(const Tensor& a) {
  return make_op(a.value().cwiseMax(0.0), {&a}, [](Node& self) {
    const Matrix& x = self.parent(0).value;
    self.parent(0).accumulate((x.array() > 0.0).select(self.grad, 0.0));
  });
}

Tensor tanh(const Tensor& a) {
  return make_op(a.value().array().tanh().matrix(), {&a}, [](Node& self) {
    self.parent(0).accumulate((self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op(std::move(y), {&a}, [](Node& self) {
    self.parent(0).accumulate((self.grad.array() * self.value.array() * (1.0 - self.value.array())).matrix());
  });
}

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) throw std::domain_error("softmax over a row without finite entries");
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  return make_op(softmax_value(a.value()), {&a}, [](Node& self) {
    const Matrix& y = self.value;
    const Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dots;
    self.parent(0).accumulate(g.cwiseProduct(y));
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    if (!std::isfinite(m)) throw std::domain_error("log_softmax over a row without finite entries");
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    y.row(i) = x.row(i).array() - lse;
  }
  return make_op(std::move(y), {&a}, [](Node& self) {
    const Matrix p = self.value.array().exp().matrix();
    const Eigen::VectorXd sums = self.grad.rowwise().sum();
    Matrix g = self.grad;
    for (Eigen::Index i = 0; i < g.rows(); ++i) g.row(i) -= sums[i] * p.row(i);
    self.parent(0).accumulate(g);
  });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw std::invalid_argument("layer_norm: parameter width mismatch");
  auto xhat = std::make_shared<Matrix>(x.rows(), n);
  auto inv_std = std::make_shared<Eigen::VectorXd>(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    (*inv_std)[i] = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (x.row(i).array() - mu) * (*inv_std)[i];
  }
  Matrix y = *xhat;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    y.row(i) = y.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  return make_op(std::move(y), {&a, &gamma, &beta}, [xhat, inv_std](Node& self) {
    Node& px = self.parent(0);
    Node& pg = self.parent(1);
    Node& pb = self.parent(2);
    if (pg.requires_grad) pg.accumulate(self.grad.cwiseProduct(*xhat).colwise().sum());
    if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
    if (px.requires_grad) {
      Matrix dxhat = self.grad;
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) dxhat.row(i) = dxhat.row(i).cwiseProduct(pg.value.row(0));
      Matrix dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
        dx.row(i) = ((dxhat.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv_std)[i]).matrix();
      }
      px.accumulate(dx);
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Tensor& t : parts) {
    if (t.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += t.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(c);
    out.middleCols(c, t.cols()) = t.value();
    c += t.cols();
  }
  return make_op_n(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = self.parent(i);
      if (p.requires_grad) p.accumulate(self.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Tensor& t : parts) {
    if (t.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += t.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(r);
    out.middleRows(r, t.rows()) = t.value();
    r += t.rows();
  }
  return make_op_n(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = self.parent(i);
      if (p.requires_grad) p.accumulate(self.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw std::out_of_range("slice_rows");
  return make_op(a.value().middleRows(begin, count), {&a}, [begin](Node& self) {
    Node& p = self.parent(0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(begin, self.grad.rows()) = self.grad;
    p.accumulate(g);
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw std::out_of_range("slice_cols");
  return make_op(a.value().middleCols(begin, count), {&a}, [begin](Node& self) {
    Node& p = self.parent(0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(begin, self.grad.cols()) = self.grad;
    p.accumulate(g);
  });
}

Tensor gather_rows(const Tensor& a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows");
    out.row(Eigen::Index(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {&a}, [idx = std::move(idx)](Node& self) {
    Node& p = self.parent(0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(Eigen::Index(i));
    p.accumulate(g);
  });
}

Tensor mean_rows(const Tensor& a) {
  const double n = static_cast<double>(a.rows());
  return make_op(a.value().colwise().mean(), {&a}, [n](Node& self) {
    Node& p = self.parent(0);
    Matrix g(p.value.rows(), p.value.cols());
    g.rowwise() = self.grad.row(0) / n;
    p.accumulate(g);
  });
}

Tensor masked_fill(const Tensor& a, const Matrix& mask, double value) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw std::invalid_argument("masked_fill: shape");
  Matrix out = (mask.array() != 0.0).select(Matrix::Constant(a.rows(), a.cols(), value), a.value());
  return make_op(std::move(out), {&a}, [mask](Node& self) {
    self.parent(0).accumulate((mask.array() != 0.0).select(0.0, self.grad));
  });
}

Tensor scale_rows(const Tensor& a, std::span<const double> factors) {
  if (static_cast<Eigen::Index>(factors.size()) != a.rows()) throw std::invalid_argument("scale_rows: length");
  const Eigen::VectorXd f = Eigen::Map<const Eigen::VectorXd>(factors.data(), Eigen::Index(factors.size()));
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) *= f[i];
  return make_op(std::move(out), {&a}, [f](Node& self) {
    Matrix g = self.grad;
    for (Eigen::Index i = 0; i < g.rows(); ++i) g.row(i) *= f[i];
    self.parent(0).accumulate(g);
  });
}

Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) return make_op(Matrix::Zero(a.rows(), a.cols()), {&a}, [](Node&) {});
  Matrix keep(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.bernoulli(p) ? 0.0 : s;
  return make_op(a.value().cwiseProduct(keep), {&a},
                 [keep](Node& self) { self.parent(0).accumulate(self.grad.cwiseProduct(keep)); });
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

Tensor sum(const Tensor& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {&a}, [](Node& self) {
    Node& p = self.parent(0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.value().size());
  return make_op(Matrix::Constant(1, 1, a.value().sum() / n), {&a}, [n](Node& self) {
    Node& p = self.parent(0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0) / n));
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights) {
  const Matrix& x = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw std::invalid_argument("cross_entropy: labels");
  const std::vector<double> w = uniform_weights(weights, x.rows());
  auto probs = std::make_shared<Matrix>(x.rows(), x.cols());
  double total = 0.0;
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || y >= x.cols()) throw std::out_of_range("cross_entropy: label out of range");
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    probs->row(i) = (x.row(i).array() - lse).exp().matrix();
    total += w[std::size_t(i)] * (lse - x(i, y));
    wsum += w[std::size_t(i)];
  }
  const double norm = wsum > 0.0 ? wsum : 1.0;
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op(Matrix::Constant(1, 1, total / norm), {&logits}, [probs, ys, w, norm](Node& self) {
    Matrix g = *probs;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      g(i, ys[std::size_t(i)]) -= 1.0;
      g.row(i) *= w[std::size_t(i)] / norm;
    }
    self.parent(0).accumulate(g * self.grad(0, 0));
  });
}

Tensor prob_cross_entropy(const Tensor& probs, std::span<const int> labels, std::span<const double> weights,
                          double floor) {
  const Matrix& p = probs.value();
  if (static_cast<Eigen::Index>(labels.size()) != p.rows()) throw std::invalid_argument("prob_cross_entropy: labels");
  const std::vector<double> w = uniform_weights(weights, p.rows());
  double total = 0.0;
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int y = labels[std::size_t(i)];
    if (y < 0 || y >= p.cols()) throw std::out_of_range("prob_cross_entropy: label out of range");
    total -= w[std::size_t(i)] * std::log(std::max(p(i, y), floor));
    wsum += w[std::size_t(i)];
  }
  const double norm = wsum > 0.0 ? wsum : 1.0;
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op(Matrix::Constant(1, 1, total / norm), {&probs}, [ys, w, norm, floor](Node& self) {
    const Matrix& pv = self.parent(0).value;
    Matrix g = Matrix::Zero(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double py = pv(i, ys[std::size_t(i)]);
      if (py > floor) g(i, ys[std::size_t(i)]) = -w[std::size_t(i)] / (norm * py);
    }
    self.parent(0).accumulate(g * self.grad(0, 0));
  });
}

Tensor kl_rows(const Matrix& target, const Tensor& probs, double floor) {
  const Matrix& m = probs.value();
  if (target.rows() != m.rows() || target.cols() != m.cols()) throw std::invalid_argument("kl_rows: shape mismatch");
  if (m.rows() == 0) throw std::invalid_argument("kl_rows: empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      const double t = target(i, k);
      if (t > 0.0) total += t * (std::log(t) - std::log(std::max(m(i, k), floor)));
    }
  const double n = static_cast<double>(m.rows());
  return make_op(Matrix::Constant(1, 1, total / n), {&probs}, [target, n, floor](Node& self) {
    const Matrix& mv = self.parent(0).value;
    Matrix g = Matrix::Zero(mv.rows(), mv.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index k = 0; k < g.cols(); ++k)
        if (target(i, k) > 0.0 && mv(i, k) > floor) g(i, k) = -target(i, k) / (mv(i, k) * n);
    self.parent(0).accumulate(g * self.grad(0, 0));
  });
}

Tensor l1_rows(const Tensor& pred, const Matrix& target, std::span<const double> weights) {
  const Matrix& p = pred.value();
  if (target.rows() != p.rows() || target.cols() != p.cols()) throw std::invalid_argument("l1_rows: shape mismatch");
  const std::vector<double> w = uniform_weights(weights, p.rows());
  double total = 0.0;
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    total += w[std::size_t(i)] * (p.row(i) - target.row(i)).cwiseAbs().sum();
    wsum += w[std::size_t(i)];
  }
  const double norm = std::max(1.0, wsum);
  return make_op(Matrix::Constant(1, 1, total / norm), {&pred}, [target, w, norm](Node& self) {
    const Matrix& pv = self.parent(0).value;
    Matrix g(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index k = 0; k < g.cols(); ++k) {
        const double d = pv(i, k) - target(i, k);
        g(i, k) = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * w[std::size_t(i)] / norm;
      }
    self.parent(0).accumulate(g * self.grad(0, 0));
  });
}

}  // namespace relalign::ad
