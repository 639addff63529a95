#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pm25/common.hpp"
#include "pm25/rng.hpp"

/// Minimal reverse-mode automatic differentiation over dense row-major
/// double tensors. Each op records its parents and a backward rule; calling
/// `backward()` on a scalar walks the graph once in reverse topological
/// order and accumulates gradients into every leaf that requires them.
namespace pm25::ad {

using Shape = std::vector<Index>;

std::string shape_str(const Shape& s);
Index numel(const Shape& s);

struct Node {
  std::string op;
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // consumes this->grad, accumulates into parents

  Eigen::ArrayXd& grad_buffer() {
    if (grad.size() != value.size()) grad = Eigen::ArrayXd::Zero(value.size());
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, Eigen::ArrayXd value);
  static Tensor parameter(Shape shape, Eigen::ArrayXd value);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index numel() const { return node_->value.size(); }
  const std::string& op() const { return node_->op; }

  const Eigen::ArrayXd& value() const { return node_->value; }
  /// Leaf values only; optimizers and gradient checks update parameters in place.
  Eigen::ArrayXd& mutable_value();
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient, or zeros when nothing has been accumulated yet.
  Eigen::ArrayXd grad() const;
  Eigen::ArrayXd& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0); }

  /// Populates gradients of every reachable leaf; throws NonScalarLoss.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Elementwise binary ops broadcast when one shape is a trailing suffix of the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// [n, k] x [k, m] -> [n, m]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor concat(const std::vector<Tensor>& parts, Index axis);
Tensor reshape(const Tensor& a, Shape shape);
/// Rows [begin, end) along axis 0.
Tensor slice(const Tensor& a, Index begin, Index end);
Tensor permute(const Tensor& a, const std::vector<Index>& axes);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor selu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log1p(const Tensor& a);

inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;

/// Valid padding, stride 1. input [N, C, H, W] or [C, H, W]; kernel
/// [O, C, kh, kw]; bias [O] or undefined. Output [N, O, H-kh+1, W-kw+1].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {});

/// Identity unless `train`; otherwise zeroes each element with probability p
/// and scales survivors by 1/(1-p).
Tensor dropout(const Tensor& a, double p, bool train, CounterRng* rng);

/// Zero-mean unit-variance normalization along `axis` (negative counts from the end).
Tensor layer_norm(const Tensor& a, Index axis = -1, double eps = 1e-5);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  Index worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares analytic gradients of the scalar `f` against central differences
/// for every element of every leaf; relative error |a-n| / max(floor, |a|+|n|).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps = 1e-5,
                           double floor = 1e-8);

}  // namespace pm25::ad
