#include "feddeo/numerics.hpp"

#include <cmath>
#include <sstream>

namespace feddeo {

std::string dims_string(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(op, "operand dims " + dims_string(a.rows(), a.cols()) + " vs " +
                             dims_string(b.rows(), b.cols()));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const Graph::Node& Graph::node(Var v, const char* op) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::logic_error(std::string(op) + ": variable does not belong to this graph");
  return nodes_[v.id];
}

const Matrix& Graph::value(Var v) const {
  const Node& n = node(v, "value");
  return n.leaf ? n.leaf->value : n.value;
}

double Graph::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw ShapeError("scalar", "expected 1x1, got " + dims_string(m.rows(), m.cols()));
  return m(0, 0);
}

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Graph::any_needs_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs)
    if (nodes_[v.id].needs_grad) return true;
  return false;
}

Var Graph::param(const Tensor& t) {
  if (auto it = leaf_ids_.find(&t); it != leaf_ids_.end()) return Var{it->second};
  Node n{Op::Leaf, {}, {}, &t, {}, 0.0, {}, t.requires_grad};
  Var v = push(std::move(n));
  leaf_ids_.emplace(&t, v.id);
  return v;
}

Var Graph::constant(Matrix value) {
  return push(Node{Op::Constant, {}, std::move(value), nullptr, {}, 0.0, {}, false});
}

Var Graph::add(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require_same_shape("add", x, y);
  return push(Node{Op::Add, {a.id, b.id}, x + y, nullptr, {}, 0.0, {}, any_needs_grad({a, b})});
}

Var Graph::sub(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require_same_shape("sub", x, y);
  return push(Node{Op::Sub, {a.id, b.id}, x - y, nullptr, {}, 0.0, {}, any_needs_grad({a, b})});
}

Var Graph::mul(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  require_same_shape("mul", x, y);
  return push(Node{Op::Mul, {a.id, b.id}, x.cwiseProduct(y), nullptr, {}, 0.0, {},
                   any_needs_grad({a, b})});
}

Var Graph::scale(Var a, double s) {
  return push(Node{Op::Scale, {a.id}, value(a) * s, nullptr, {}, s, {}, any_needs_grad({a})});
}

Var Graph::matmul(Var a, Var b) {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  if (x.cols() != y.rows())
    throw ShapeError("matmul", "lhs " + dims_string(x.rows(), x.cols()) + " vs rhs " +
                                   dims_string(y.rows(), y.cols()));
  Matrix out = x * y;
  return push(Node{Op::MatMul, {a.id, b.id}, std::move(out), nullptr, {}, 0.0, {},
                   any_needs_grad({a, b})});
}

Var Graph::affine(Var x, Var w, Var b) {
  const Matrix& in = value(x);
  const Matrix& weight = value(w);
  const Matrix& bias = value(b);
  if (in.cols() != weight.rows())
    throw ShapeError("affine", "input " + dims_string(in.rows(), in.cols()) + " vs weight " +
                                   dims_string(weight.rows(), weight.cols()));
  if (bias.rows() != 1 || bias.cols() != weight.cols())
    throw ShapeError("affine", "bias " + dims_string(bias.rows(), bias.cols()) +
                                   " vs weight " + dims_string(weight.rows(), weight.cols()));
  Matrix out = in * weight;
  out.rowwise() += bias.row(0);
  return push(Node{Op::Affine, {x.id, w.id, b.id}, std::move(out), nullptr, {}, 0.0, {},
                   any_needs_grad({x, w, b})});
}

Var Graph::silu(Var a) {
  Matrix out = value(a).unaryExpr([](double v) { return v * sigmoid(v); });
  return push(Node{Op::Silu, {a.id}, std::move(out), nullptr, {}, 0.0, {}, any_needs_grad({a})});
}

Var Graph::tanh(Var a) {
  Matrix out = value(a).array().tanh().matrix();
  return push(Node{Op::Tanh, {a.id}, std::move(out), nullptr, {}, 0.0, {}, any_needs_grad({a})});
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat", "no operands");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool grad = false;
  std::vector<int> ids;
  for (Var p : parts) {
    const Matrix& m = value(p);
    if (m.rows() != rows)
      throw ShapeError("concat", "row count " + std::to_string(m.rows()) + " vs " +
                                     std::to_string(rows));
    cols += m.cols();
    grad = grad || nodes_[p.id].needs_grad;
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    const Matrix& m = value(p);
    out.middleCols(offset, m.cols()) = m;
    offset += m.cols();
  }
  return push(Node{Op::Concat, std::move(ids), std::move(out), nullptr, {}, 0.0, {}, grad});
}

Var Graph::embedding(Var table, std::vector<int> ids) {
  const Matrix& t = value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows())
      throw ShapeError("embedding", "row id " + std::to_string(ids[i]) + " outside table " +
                                        dims_string(t.rows(), t.cols()));
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  return push(Node{Op::Embedding, {table.id}, std::move(out), nullptr, std::move(ids), 0.0, {},
                   any_needs_grad({table})});
}

Var Graph::mse(Var pred, Var target) {
  const Matrix& p = value(pred);
  const Matrix& t = value(target);
  require_same_shape("mse", p, t);
  if (p.size() == 0) throw ShapeError("mse", "empty operands");
  Matrix out(1, 1);
  out(0, 0) = (p - t).squaredNorm() / static_cast<double>(p.size());
  return push(Node{Op::Mse, {pred.id, target.id}, std::move(out), nullptr, {}, 0.0, {},
                   any_needs_grad({pred, target})});
}

Var Graph::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  const Matrix& z = value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.rows() || z.rows() == 0)
    throw ShapeError("softmax_cross_entropy", "logits " + dims_string(z.rows(), z.cols()) +
                                                  " vs " + std::to_string(labels.size()) + " labels");
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols())
      throw ShapeError("softmax_cross_entropy", "label " + std::to_string(y) + " outside " +
                                                    std::to_string(z.cols()) + " classes");
    const double m = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - m).exp().matrix();
    const double s = probs.row(i).sum();
    probs.row(i) /= s;
    loss += -(z(i, y) - m - std::log(s));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(z.rows());
  return push(Node{Op::SoftmaxCE, {logits.id}, std::move(out), nullptr, std::move(labels), 0.0,
                   std::move(probs), any_needs_grad({logits})});
}

Var Graph::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(Node{Op::Sum, {a.id}, std::move(out), nullptr, {}, 0.0, {}, any_needs_grad({a})});
}

GradientMap Graph::backward(Var loss) {
  if (loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
    throw std::logic_error("backward: loss was not produced by a forward pass on this graph");
  if (differentiated_) throw std::logic_error("backward: graph already differentiated; rebuild it");
  const Matrix& lv = value(loss);
  if (lv.size() != 1)
    throw ShapeError("backward", "loss must be scalar, got " + dims_string(lv.rows(), lv.cols()));
  differentiated_ = true;

  std::vector<Matrix> adj(nodes_.size());
  auto accumulate = [&](int id, const auto& g) {
    if (!nodes_[id].needs_grad) return;
    if (adj[id].size() == 0)
      adj[id] = g;
    else
      adj[id] += g;
  };
  adj[loss.id] = Matrix::Ones(1, 1);

  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || adj[i].size() == 0 || n.op == Op::Leaf) continue;
    const Matrix& g = adj[i];
    const auto& in = n.inputs;
    switch (n.op) {
      case Op::Add:
        accumulate(in[0], g);
        accumulate(in[1], g);
        break;
      case Op::Sub:
        accumulate(in[0], g);
        accumulate(in[1], -g);
        break;
      case Op::Mul:
        if (nodes_[in[0]].needs_grad) accumulate(in[0], g.cwiseProduct(value(Var{in[1]})));
        if (nodes_[in[1]].needs_grad) accumulate(in[1], g.cwiseProduct(value(Var{in[0]})));
        break;
      case Op::Scale:
        accumulate(in[0], g * n.scalar);
        break;
      case Op::MatMul:
        if (nodes_[in[0]].needs_grad) accumulate(in[0], g * value(Var{in[1]}).transpose());
        if (nodes_[in[1]].needs_grad) accumulate(in[1], value(Var{in[0]}).transpose() * g);
        break;
      case Op::Affine:
        if (nodes_[in[0]].needs_grad) accumulate(in[0], g * value(Var{in[1]}).transpose());
        if (nodes_[in[1]].needs_grad) accumulate(in[1], value(Var{in[0]}).transpose() * g);
        if (nodes_[in[2]].needs_grad) accumulate(in[2], g.colwise().sum());
        break;
      case Op::Silu: {
        const Matrix& x = value(Var{in[0]});
        Matrix d = x.unaryExpr([](double v) {
          const double s = sigmoid(v);
          return s * (1.0 + v * (1.0 - s));
        });
        accumulate(in[0], g.cwiseProduct(d));
        break;
      }
      case Op::Tanh:
        accumulate(in[0], g.cwiseProduct((1.0 - n.value.array().square()).matrix()));
        break;
      case Op::Concat: {
        Eigen::Index offset = 0;
        for (int id : in) {
          const Eigen::Index c = value(Var{id}).cols();
          if (nodes_[id].needs_grad) accumulate(id, Matrix(g.middleCols(offset, c)));
          offset += c;
        }
        break;
      }
      case Op::Embedding: {
        const Matrix& table = value(Var{in[0]});
        Matrix d = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t r = 0; r < n.ids.size(); ++r)
          d.row(n.ids[r]) += g.row(static_cast<Eigen::Index>(r));
        accumulate(in[0], d);
        break;
      }
      case Op::Mse: {
        const Matrix& p = value(Var{in[0]});
        const Matrix& t = value(Var{in[1]});
        const double k = 2.0 * g(0, 0) / static_cast<double>(p.size());
        Matrix d = (p - t) * k;
        if (nodes_[in[0]].needs_grad) accumulate(in[0], d);
        if (nodes_[in[1]].needs_grad) accumulate(in[1], -d);
        break;
      }
      case Op::SoftmaxCE: {
        Matrix d = n.aux;
        for (std::size_t r = 0; r < n.ids.size(); ++r) d(static_cast<Eigen::Index>(r), n.ids[r]) -= 1.0;
        d *= g(0, 0) / static_cast<double>(d.rows());
        accumulate(in[0], d);
        break;
      }
      case Op::Sum: {
        const Matrix& x = value(Var{in[0]});
        accumulate(in[0], Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case Op::Leaf:
      case Op::Constant:
        break;
    }
  }

  GradientMap grads;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Op::Leaf || !n.leaf->requires_grad) continue;
    if (adj[i].size() == 0)
      grads.emplace(n.leaf, Matrix::Zero(n.leaf->value.rows(), n.leaf->value.cols()));
    else
      grads.emplace(n.leaf, std::move(adj[i]));
  }
  return grads;
}

void AdamState::step(std::span<Tensor* const> params, GradientMap& grads) {
  for (const Tensor* p : params)
    if (!grads.contains(p)) throw std::invalid_argument("adam_step: no gradient for parameter '" + p->name + "'");

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (Tensor* p : params) {
    const Matrix& g = grads.at(p);
    if (g.rows() != p->value.rows() || g.cols() != p->value.cols())
      throw ShapeError("adam_step", "gradient " + dims_string(g.rows(), g.cols()) + " for '" +
                                        p->name + "' of " + dims_string(p->value.rows(), p->value.cols()));
    auto [it, inserted] = moments_.try_emplace(p);
    Moments& m = it->second;
    if (inserted) {
      m.first = Matrix::Zero(g.rows(), g.cols());
      m.second = Matrix::Zero(g.rows(), g.cols());
    }
    m.first = config_.beta1 * m.first + (1.0 - config_.beta1) * g;
    m.second = config_.beta2 * m.second + (1.0 - config_.beta2) * g.cwiseAbs2();
    p->value.array() -= config_.learning_rate * (m.first.array() / c1) /
                        ((m.second.array() / c2).sqrt() + config_.epsilon);
  }
  grads.clear();
}

GradientCheckReport gradient_check(const std::function<Var(Graph&)>& build,
                                   std::span<Tensor* const> params, double tolerance, double h) {
  GradientMap analytic;
  {
    Graph g;
    Var loss = build(g);
    analytic = g.backward(loss);
  }
  auto evaluate = [&] {
    Graph g;
    return g.scalar(build(g));
  };

  GradientCheckReport report;
  for (Tensor* p : params) {
    auto it = analytic.find(p);
    const Matrix grad = it != analytic.end() ? it->second : Matrix::Zero(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return evaluate();
      };
      const double near = at(h) - at(-h);
      const double far = at(2 * h) - at(-2 * h);
      x = saved;
      const double fd = (8.0 * near - far) / (12.0 * h);
      const double abs_err = std::abs(grad.data()[i] - fd);
      const double rel_err = abs_err / (std::abs(grad.data()[i]) + 1e-8);
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      if (rel_err > report.max_relative_error) {
        report.max_relative_error = rel_err;
        report.worst_parameter = p->name;
      }
      ++report.entries_checked;
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace feddeo
