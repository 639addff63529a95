#include "pm25/autodiff.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace pm25::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;
// Row-major [outer, inner] data viewed column-major as [inner, outer].
using ColArrMap = Eigen::Map<Eigen::ArrayXXd>;
using ConstColArrMap = Eigen::Map<const Eigen::ArrayXXd>;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(Errc::shape_mismatch, op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b),
              {{"op", op}, {"lhs", a}, {"rhs", b}});
}

Tensor make_node(std::string op, Shape shape, Eigen::ArrayXd value, std::vector<std::shared_ptr<Node>> parents,
                 std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Index normalize_axis(Index axis, Index rank, const std::string& op) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw Error(Errc::shape_mismatch, op + ": axis out of range", {{"op", op}, {"axis", axis}, {"rank", rank}});
  }
  return a;
}

// Product of extents before/after `axis`.
std::pair<Index, Index> outer_inner(const Shape& s, Index axis) {
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) inner *= s[static_cast<std::size_t>(i)];
  return {outer, inner};
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind) {
  static const char* names[] = {"add", "sub", "mul"};
  const std::string op = names[static_cast<int>(kind)];
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  // `big` keeps the full shape, `small` broadcasts along the leading axes.
  const bool a_big = is_suffix(sb, sa);
  if (!a_big && !is_suffix(sa, sb)) shape_error(op, sa, sb);
  const Index inner = a_big ? b.numel() : a.numel();
  const Index outer = a_big ? a.numel() / std::max<Index>(inner, 1) : b.numel() / std::max<Index>(inner, 1);
  const Shape out_shape = a_big ? sa : sb;

  Eigen::ArrayXd out(outer * inner);
  ColArrMap o(out.data(), inner, outer);
  const ConstColArrMap av(a.value().data(), inner, a_big ? outer : 1);
  const ConstColArrMap bv(b.value().data(), inner, a_big ? 1 : outer);
  switch (kind) {
    case BinOp::add:
      if (a_big) o = av.colwise() + bv.col(0); else o = bv.colwise() + av.col(0);
      break;
    case BinOp::sub:
      if (a_big) o = av.colwise() - bv.col(0); else o = (-bv).colwise() + av.col(0);
      break;
    case BinOp::mul:
      if (a_big) o = av.colwise() * bv.col(0); else o = bv.colwise() * av.col(0);
      break;
  }

  auto pa = a.node();
  auto pb = b.node();
  return make_node(op, out_shape, std::move(out), {pa, pb}, [pa, pb, kind, a_big, inner, outer](Node& self) {
    const ConstColArrMap g(self.grad.data(), inner, outer);
    // Reduce a full-size gradient onto an operand, summing broadcast columns.
    auto accumulate = [&](Node& target, bool full, const auto& expr) {
      if (!target.requires_grad) return;
      auto& tg = target.grad_buffer();
      if (full) {
        ColArrMap(tg.data(), inner, outer) += expr;
      } else {
        tg += expr.rowwise().sum();
      }
    };
    switch (kind) {
      case BinOp::add:
        accumulate(*pa, a_big, g);
        accumulate(*pb, !a_big, g);
        break;
      case BinOp::sub:
        accumulate(*pa, a_big, g);
        accumulate(*pb, !a_big, -g);
        break;
      case BinOp::mul: {
        const ConstColArrMap av(pa->value.data(), inner, a_big ? outer : 1);
        const ConstColArrMap bv(pb->value.data(), inner, a_big ? 1 : outer);
        if (a_big) {
          accumulate(*pa, true, g.colwise() * bv.col(0));
          accumulate(*pb, false, g * av);
        } else {
          accumulate(*pa, false, g * bv);
          accumulate(*pb, true, g.colwise() * av.col(0));
        }
        break;
      }
    }
  });
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, const std::string& op, Fwd fwd, Bwd bwd) {
  Eigen::ArrayXd out = fwd(a.value());
  auto pa = a.node();
  return make_node(op, a.shape(), std::move(out), {pa}, [pa, bwd](Node& self) {
    pa->grad_buffer() += bwd(self.grad, pa->value, self.value);
  });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

Tensor Tensor::constant(Shape shape, Eigen::ArrayXd value) {
  if (ad::numel(shape) != value.size()) {
    throw Error(Errc::shape_mismatch, "constant: data length does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, Eigen::ArrayXd value) {
  Tensor t = constant(std::move(shape), std::move(value));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = ad::numel(shape);
  Tensor t = constant(std::move(shape), Eigen::ArrayXd::Zero(n));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v) { return constant({}, Eigen::ArrayXd::Constant(1, v)); }

Index Tensor::dim(Index axis) const {
  return shape()[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

Eigen::ArrayXd& Tensor::mutable_value() {
  if (!node_->parents.empty() || node_->backward) {
    throw Error(Errc::shape_mismatch, "only leaf tensors may be modified in place");
  }
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw Error(Errc::non_scalar_loss, "item() requires a single-element tensor", {{"shape", shape()}});
  return node_->value(0);
}

Eigen::ArrayXd Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Eigen::ArrayXd::Zero(numel());
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw Error(Errc::non_scalar_loss, "backward() requires a scalar loss", {{"shape", shape()}});
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Interior gradients restart from zero; leaves keep accumulating.
  for (Node* n : order) {
    if (n->backward) n->grad = Eigen::ArrayXd::Zero(n->value.size());
  }
  node_->grad_buffer() += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x * factor; },
      [factor](const Eigen::ArrayXd& g, const Eigen::ArrayXd&, const Eigen::ArrayXd&) -> Eigen::ArrayXd { return g * factor; });
}

Tensor shift(const Tensor& a, double offset) {
  return unary(
      a, "shift", [offset](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x + offset; },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd&, const Eigen::ArrayXd&) -> Eigen::ArrayXd { return g; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Eigen::ArrayXd out(n * m);
  RowMap(out.data(), n, m).noalias() = ConstRowMap(a.value().data(), n, k) * ConstRowMap(b.value().data(), k, m);
  auto pa = a.node();
  auto pb = b.node();
  return make_node("matmul", {n, m}, std::move(out), {pa, pb}, [pa, pb, n, k, m](Node& self) {
    const ConstRowMap g(self.grad.data(), n, m);
    if (pa->requires_grad) {
      RowMap(pa->grad_buffer().data(), n, k).noalias() += g * ConstRowMap(pb->value.data(), k, m).transpose();
    }
    if (pb->requires_grad) {
      RowMap(pb->grad_buffer().data(), k, m).noalias() += ConstRowMap(pa->value.data(), n, k).transpose() * g;
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, Index axis) {
  if (parts.empty()) throw Error(Errc::shape_mismatch, "concat: no inputs", {{"op", "concat"}});
  const Shape& s0 = parts.front().shape();
  const Index ax = normalize_axis(axis, static_cast<Index>(s0.size()), "concat");
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) shape_error("concat", s0, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<Index>(d) != ax && s[d] != s0[d]) shape_error("concat", s0, s);
    }
    out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
  }
  const auto [outer, inner] = outer_inner(s0, ax);
  const Index out_row = out_shape[static_cast<std::size_t>(ax)] * inner;
  Eigen::ArrayXd out(outer * out_row);
  std::vector<Index> widths;
  std::vector<std::shared_ptr<Node>> parents;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.shape()[static_cast<std::size_t>(ax)] * inner;
    for (Index o = 0; o < outer; ++o) out.segment(o * out_row + offset, w) = p.value().segment(o * w, w);
    widths.push_back(w);
    parents.push_back(p.node());
    offset += w;
  }
  auto ps = parents;
  return make_node("concat", out_shape, std::move(out), std::move(parents), [ps, widths, outer, out_row](Node& self) {
    Index off = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Index w = widths[i];
      if (ps[i]->requires_grad) {
        auto& g = ps[i]->grad_buffer();
        for (Index o = 0; o < outer; ++o) g.segment(o * w, w) += self.grad.segment(o * out_row + off, w);
      }
      off += w;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  auto pa = a.node();
  return make_node("reshape", std::move(shape), a.value(), {pa}, [pa](Node& self) { pa->grad_buffer() += self.grad; });
}

Tensor slice(const Tensor& a, Index begin, Index end) {
  if (a.rank() < 1 || begin < 0 || end > a.dim(0) || begin >= end) {
    throw Error(Errc::shape_mismatch, "slice: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                                          ") out of range for " + shape_str(a.shape()),
                {{"op", "slice"}, {"shape", a.shape()}});
  }
  const Index inner = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = end - begin;
  auto pa = a.node();
  const Index off = begin * inner;
  const Index len = (end - begin) * inner;
  return make_node("slice", std::move(out_shape), a.value().segment(off, len), {pa},
                   [pa, off, len](Node& self) { pa->grad_buffer().segment(off, len) += self.grad; });
}

Tensor permute(const Tensor& a, const std::vector<Index>& axes) {
  const Index r = a.rank();
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  if (static_cast<Index>(axes.size()) != r) shape_error("permute", a.shape(), Shape(axes.begin(), axes.end()));
  for (const Index ax : axes) {
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)]) shape_error("permute", a.shape(), Shape(axes.begin(), axes.end()));
    seen[static_cast<std::size_t>(ax)] = true;
  }
  const Shape& in = a.shape();
  Shape out_shape(static_cast<std::size_t>(r));
  for (Index d = 0; d < r; ++d) out_shape[static_cast<std::size_t>(d)] = in[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
  std::vector<Index> in_strides(static_cast<std::size_t>(r), 1);
  for (Index d = r - 2; d >= 0; --d) {
    in_strides[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(d + 1)] * in[static_cast<std::size_t>(d + 1)];
  }
  // gather[i] = flat input index feeding flat output index i.
  const Index n = a.numel();
  auto gather = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  for (Index i = 0; i < n; ++i) {
    Index src = 0;
    for (Index d = 0; d < r; ++d) src += idx[static_cast<std::size_t>(d)] * in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
    (*gather)[static_cast<std::size_t>(i)] = src;
    for (Index d = r - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  Eigen::ArrayXd out(n);
  for (Index i = 0; i < n; ++i) out(i) = a.value()((*gather)[static_cast<std::size_t>(i)]);
  auto pa = a.node();
  return make_node("permute", std::move(out_shape), std::move(out), {pa}, [pa, gather](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < gather->size(); ++i) g((*gather)[i]) += self.grad(static_cast<Index>(i));
  });
}

Tensor sum(const Tensor& a) {
  auto pa = a.node();
  return make_node("sum", {}, Eigen::ArrayXd::Constant(1, a.value().sum()), {pa},
                   [pa](Node& self) { pa->grad_buffer() += self.grad(0); });
}

Tensor mean(const Tensor& a) {
  auto pa = a.node();
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_node("mean", {}, Eigen::ArrayXd::Constant(1, a.value().sum() * inv), {pa},
                   [pa, inv](Node& self) { pa->grad_buffer() += self.grad(0) * inv; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return 1.0 / (1.0 + (-x).exp()); },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd&, const Eigen::ArrayXd& y) -> Eigen::ArrayXd { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.tanh(); },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd&, const Eigen::ArrayXd& y) -> Eigen::ArrayXd { return g * (1.0 - y.square()); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.max(0.0); },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
        return (x > 0.0).select(g, 0.0);
      });
}

Tensor selu(const Tensor& a) {
  return unary(
      a, "selu",
      [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd {
        return kSeluLambda * (x > 0.0).select(x, kSeluAlpha * (x.exp() - 1.0));
      },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd& x, const Eigen::ArrayXd& y) -> Eigen::ArrayXd {
        return g * (x > 0.0).select(Eigen::ArrayXd::Constant(x.size(), kSeluLambda), y + kSeluLambda * kSeluAlpha);
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.exp(); },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd&, const Eigen::ArrayXd& y) -> Eigen::ArrayXd { return g * y; });
}

Tensor log1p(const Tensor& a) {
  return unary(
      a, "log1p", [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.log1p(); },
      [](const Eigen::ArrayXd& g, const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd { return g / (1.0 + x); });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const bool batched = input.rank() == 4;
  if ((input.rank() != 3 && !batched) || kernel.rank() != 4) shape_error("conv2d", input.shape(), kernel.shape());
  const Index n = batched ? input.dim(0) : 1;
  const Index c = input.dim(-3), h = input.dim(-2), w = input.dim(-1);
  const Index o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c || kh > h || kw > w) shape_error("conv2d", input.shape(), kernel.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) shape_error("conv2d", kernel.shape(), bias.shape());
  const Index ho = h - kh + 1, wo = w - kw + 1;
  const Index p = ho * wo;        // output positions per sample
  const Index patch = c * kh * kw;

  // im2col: cols(patch_index, sample * p + position)
  auto cols = std::make_shared<Eigen::MatrixXd>(patch, n * p);
  const double* x = input.value().data();
  for (Index s = 0; s < n; ++s) {
    for (Index ci = 0; ci < c; ++ci) {
      for (Index u = 0; u < kh; ++u) {
        for (Index v = 0; v < kw; ++v) {
          const Index row = (ci * kh + u) * kw + v;
          for (Index i = 0; i < ho; ++i) {
            const double* src = x + ((s * c + ci) * h + i + u) * w + v;
            for (Index j = 0; j < wo; ++j) (*cols)(row, s * p + i * wo + j) = src[j];
          }
        }
      }
    }
  }
  const ConstRowMap k_mat(kernel.value().data(), o, patch);
  Eigen::MatrixXd y = k_mat * (*cols);  // [o, n*p]
  if (bias.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), o);

  Eigen::ArrayXd out(n * o * p);
  for (Index s = 0; s < n; ++s) {
    for (Index oc = 0; oc < o; ++oc) {
      for (Index q = 0; q < p; ++q) out((s * o + oc) * p + q) = y(oc, s * p + q);
    }
  }
  Shape out_shape = batched ? Shape{n, o, ho, wo} : Shape{o, ho, wo};
  auto pin = input.node();
  auto pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<std::shared_ptr<Node>> parents{pin, pk};
  if (pb) parents.push_back(pb);
  return make_node("conv2d", std::move(out_shape), std::move(out), std::move(parents),
                   [pin, pk, pb, cols, n, c, h, w, o, kh, kw, ho, wo, p, patch](Node& self) {
                     Eigen::MatrixXd g(o, n * p);
                     for (Index s = 0; s < n; ++s) {
                       for (Index oc = 0; oc < o; ++oc) {
                         for (Index q = 0; q < p; ++q) g(oc, s * p + q) = self.grad((s * o + oc) * p + q);
                       }
                     }
                     if (pk->requires_grad) RowMap(pk->grad_buffer().data(), o, patch).noalias() += g * cols->transpose();
                     if (pb && pb->requires_grad) pb->grad_buffer() += g.rowwise().sum().array();
                     if (pin->requires_grad) {
                       const Eigen::MatrixXd dcols = ConstRowMap(pk->value.data(), o, patch).transpose() * g;
                       double* dx = pin->grad_buffer().data();
                       for (Index s = 0; s < n; ++s) {
                         for (Index ci = 0; ci < c; ++ci) {
                           for (Index u = 0; u < kh; ++u) {
                             for (Index v = 0; v < kw; ++v) {
                               const Index row = (ci * kh + u) * kw + v;
                               for (Index i = 0; i < ho; ++i) {
                                 double* dst = dx + ((s * c + ci) * h + i + u) * w + v;
                                 for (Index j = 0; j < wo; ++j) dst[j] += dcols(row, s * p + i * wo + j);
                               }
                             }
                           }
                         }
                       }
                     }
                   });
}

Tensor dropout(const Tensor& a, double p, bool train, CounterRng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw Error(Errc::config_invalid, "dropout probability must lie in [0, 1)");
  if (!train || p == 0.0) return a;
  if (rng == nullptr) throw Error(Errc::config_invalid, "train-mode dropout requires an rng");
  Eigen::ArrayXd mask(a.numel());
  const double keep_scale = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask.size(); ++i) mask(i) = rng->uniform() < p ? 0.0 : keep_scale;
  auto pa = a.node();
  Eigen::ArrayXd out = a.value() * mask;
  return make_node("dropout", a.shape(), std::move(out), {pa},
                   [pa, mask = std::move(mask)](Node& self) { pa->grad_buffer() += self.grad * mask; });
}

Tensor layer_norm(const Tensor& a, Index axis, double eps) {
  const Index ax = normalize_axis(axis, a.rank(), "layer_norm");
  const auto [outer, inner] = outer_inner(a.shape(), ax);
  const Index len = a.shape()[static_cast<std::size_t>(ax)];
  const Index n = a.numel();
  Eigen::ArrayXd xhat(n);
  auto inv_std = std::make_shared<Eigen::ArrayXd>(outer * inner);
  const double* x = a.value().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      double mu = 0.0;
      for (Index k = 0; k < len; ++k) mu += x[base + k * inner];
      mu /= static_cast<double>(len);
      double var = 0.0;
      for (Index k = 0; k < len; ++k) var += (x[base + k * inner] - mu) * (x[base + k * inner] - mu);
      var /= static_cast<double>(len);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)(o * inner + i) = is;
      for (Index k = 0; k < len; ++k) xhat(base + k * inner) = (x[base + k * inner] - mu) * is;
    }
  }
  auto pa = a.node();
  return make_node("layer_norm", a.shape(), xhat, {pa}, [pa, inv_std, outer, inner, len](Node& self) {
    auto& dx = pa->grad_buffer();
    const double inv_len = 1.0 / static_cast<double>(len);
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        double g_mean = 0.0, gx_mean = 0.0;
        for (Index k = 0; k < len; ++k) {
          g_mean += self.grad(base + k * inner);
          gx_mean += self.grad(base + k * inner) * self.value(base + k * inner);
        }
        g_mean *= inv_len;
        gx_mean *= inv_len;
        const double is = (*inv_std)(o * inner + i);
        for (Index k = 0; k < len; ++k) {
          const Index idx = base + k * inner;
          dx(idx) += is * (self.grad(idx) - g_mean - self.value(idx) * gx_mean);
        }
      }
    }
  });
}

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps, double floor) {
  for (auto& leaf : leaves) leaf.zero_grad();
  f().backward();
  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& values = leaves[l].mutable_value();
    for (Index i = 0; i < values.size(); ++i) {
      const double orig = values(i);
      values(i) = orig + eps;
      const double fp = f().item();
      values(i) = orig - eps;
      const double fm = f().item();
      values(i) = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[l](i);
      const double rel = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
      if (rel > result.max_rel_error) {
        result = {rel, l, i, a, numeric};
      }
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

}  // namespace pm25::ad
