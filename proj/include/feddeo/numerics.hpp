#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace feddeo {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Raised by any graph op whose operands have incompatible dimensions.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

std::string dims_string(Eigen::Index rows, Eigen::Index cols);

/// Named dense array. Rank is 1 or 2; vectors are stored as 1 x n rows so
/// that every op sees the same row-major layout.
struct Tensor {
  std::string name;
  Matrix value;
  bool requires_grad = true;

  Tensor() = default;
  Tensor(std::string n, Matrix v, bool grad = true)
      : name(std::move(n)), value(std::move(v)), requires_grad(grad) {}

  std::vector<Eigen::Index> shape() const { return {value.rows(), value.cols()}; }
  Eigen::Index size() const { return value.size(); }
};

using GradientMap = std::unordered_map<const Tensor*, Matrix>;

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode tape. Each op evaluates eagerly and records
/// what backward() needs. Parameter leaves reference their Tensor without
/// copying, so the Tensor must outlive the graph and stay unmodified until
/// backward() returns.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(const Tensor& t);
  Var constant(Matrix value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);
  /// x * W + b, with b a single row added to every row.
  Var affine(Var x, Var w, Var b);
  Var silu(Var a);
  Var tanh(Var a);
  /// Column-wise concatenation; all parts share a row count.
  Var concat(std::span<const Var> parts);
  /// Gathers rows of `table` by index.
  Var embedding(Var table, std::vector<int> ids);
  /// Mean of squared differences over all elements; 1 x 1.
  Var mse(Var pred, Var target);
  /// Mean over rows of softmax cross-entropy against integer labels; 1 x 1.
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);
  /// Sum of all elements; 1 x 1.
  Var sum(Var a);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns d loss / d t for every
  /// parameter leaf with requires_grad; disconnected parameters get zeros.
  /// A graph may be differentiated once.
  GradientMap backward(Var loss);

 private:
  enum class Op {
    Leaf, Constant, Add, Sub, Mul, Scale, MatMul, Affine, Silu, Tanh,
    Concat, Embedding, Mse, SoftmaxCE, Sum
  };

  struct Node {
    Op op;
    std::vector<int> inputs;
    Matrix value;                  // empty for parameter leaves
    const Tensor* leaf = nullptr;  // parameter leaves only
    std::vector<int> ids;          // embedding rows / class labels
    double scalar = 0.0;
    Matrix aux;                    // cached softmax probabilities
    bool needs_grad = false;
  };

  const Node& node(Var v, const char* op) const;
  Var push(Node n);
  bool any_needs_grad(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> leaf_ids_;
  bool differentiated_ = false;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moments are tracked per parameter identity.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  /// Applies one update to every tensor in `params` and clears `grads`.
  /// Throws if a parameter has no gradient entry.
  void step(std::span<Tensor* const> params, GradientMap& grads);

  long step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  struct Moments {
    Matrix first;
    Matrix second;
  };
  AdamConfig config_;
  long step_count_ = 0;
  std::unordered_map<const Tensor*, Moments> moments_;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::string worst_parameter;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Compares autodiff gradients of the scalar built by `build` against
/// five-point central finite differences with step `h`. Relative error of
/// one entry is |g - fd| / (|g| + 1e-8).
GradientCheckReport gradient_check(const std::function<Var(Graph&)>& build,
                                   std::span<Tensor* const> params, double tolerance,
                                   double h = 1e-3);

}  // namespace feddeo
