#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dialclip/errors.hpp"
#include "dialclip/rng.hpp"

namespace dialclip {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  // Set on leaves reached by the most recent backward pass.
  bool touched = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Shape-checked float64 array that participates in reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage. Leaves created
/// with requires_grad accumulate gradient across backward passes until
/// zero_grad(); intermediate results carry a backward closure and references
/// to their inputs, so the graph lives as long as its outputs do.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape.empty()) throw ShapeError("tensor needs at least one dimension");
    if (shape_size(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.normal() * stddev;
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> values() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_values() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    node_->grad.clear();
    node_->touched = false;
  }
  // True when the last backward pass reached this leaf.
  bool touched() const { return node_->touched; }

  // Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach(bool requires_grad = false) const {
    return from(shape(), node_->value, requires_grad);
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                               std::function<void(detail::Node&)>);
};

// Builds an op output and, if any input needs a gradient, links the backward
// closure. The closure receives the output node and must push its grad into
// the inputs that require one.
inline Tensor make_op_result(Shape shape, std::vector<double> values,
                             const std::vector<Tensor>& inputs,
                             std::function<void(detail::Node&)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  if (detail::grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

/// Topologically ordered list of the graph nodes that lead to a root.
/// Inputs always precede the nodes that consume them.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; graphs can be thousands of nodes deep.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    if (!root.requires_grad()) return tape;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<detail::Node*>& nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Reverse-mode accumulation from a scalar loss. Leaf gradients accumulate;
/// leaves that require grad but are not on a path from the loss keep
/// whatever they had (zero after zero_grad()).
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  const Tape tape = Tape::record(loss);
  for (auto* n : tape.nodes())
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  loss.node()->ensure_grad()[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) {
      n->ensure_grad();
      n->touched = true;
    } else if (n->backward) {
      n->backward(*n);
    }
  }
}

namespace ops {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatRM>;
using MutMap = Eigen::Map<MatRM>;

namespace detail_ops {

inline ConstMap mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_2d(const Tensor& a, const char* op) {
  if (a.dim() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline bool needs(const detail::Node* n) { return n->requires_grad; }

}  // namespace detail_ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using namespace detail_ops;
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
  std::vector<double> out(p * r);
  mat(out, p, r).noalias() = mat(a.node()->value, p, q) * mat(b.node()->value, q, r);
  auto* an = a.node();
  auto* bn = b.node();
  return make_op_result({p, r}, std::move(out), {a, b}, [an, bn, p, q, r](detail::Node& self) {
    auto dy = mat(self.grad, p, r);
    if (needs(an)) mat(an->ensure_grad(), p, q).noalias() += dy * mat(bn->value, q, r).transpose();
    if (needs(bn)) mat(bn->ensure_grad(), q, r).noalias() += mat(an->value, p, q).transpose() * dy;
  });
}

// a · bᵀ for a [p×k], b [q×k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  using namespace detail_ops;
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.cols())
    throw ShapeError("matmul_nt: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const std::size_t p = a.rows(), k = a.cols(), q = b.rows();
  std::vector<double> out(p * q);
  mat(out, p, q).noalias() = mat(a.node()->value, p, k) * mat(b.node()->value, q, k).transpose();
  auto* an = a.node();
  auto* bn = b.node();
  return make_op_result({p, q}, std::move(out), {a, b}, [an, bn, p, k, q](detail::Node& self) {
    auto dy = mat(self.grad, p, q);
    if (needs(an)) mat(an->ensure_grad(), p, k).noalias() += dy * mat(bn->value, q, k);
    if (needs(bn)) mat(bn->ensure_grad(), q, k).noalias() += dy.transpose() * mat(an->value, p, k);
  });
}

/// x·Wᵀ + b. x is [n×in] or a vector [in]; W is [out×in]; b is [out] or
/// undefined. A vector input yields a vector output.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  using namespace detail_ops;
  require_2d(w, "linear weight");
  const bool vec_in = x.dim() == 1;
  const std::size_t n = vec_in ? 1 : x.rows();
  const std::size_t in = x.cols(), out_dim = w.rows();
  if (x.dim() > 2 || w.cols() != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  if (b.defined() && (b.dim() != 1 || b.numel() != out_dim))
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  std::vector<double> out(n * out_dim);
  auto y = mat(out, n, out_dim);
  y.noalias() = mat(x.node()->value, n, in) * mat(w.node()->value, out_dim, in).transpose();
  if (b.defined()) y.rowwise() += mat(b.node()->value, 1, out_dim).row(0);
  Shape shape = vec_in ? Shape{out_dim} : Shape{n, out_dim};
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.defined() ? b.node() : nullptr;
  auto fn = [xn, wn, bn, n, in, out_dim](detail::Node& self) {
    auto dy = mat(self.grad, n, out_dim);
    if (needs(xn)) mat(xn->ensure_grad(), n, in).noalias() += dy * mat(wn->value, out_dim, in);
    if (needs(wn)) mat(wn->ensure_grad(), out_dim, in).noalias() += dy.transpose() * mat(xn->value, n, in);
    if (bn && needs(bn)) mat(bn->ensure_grad(), 1, out_dim) += dy.colwise().sum();
  };
  if (b.defined()) return make_op_result(std::move(shape), std::move(out), {x, w, b}, fn);
  return make_op_result(std::move(shape), std::move(out), {x, w}, fn);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail_ops::require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto* an = a.node();
  auto* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    for (auto* in : {an, bn}) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail_ops::require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto* an = a.node();
  auto* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail_ops::require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto* an = a.node();
  auto* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    // an and bn may alias (x*x); each contributes its own term.
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  auto* an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an, s](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  auto* an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (an->value[i] > 0.0) g[i] += self.grad[i];
  });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto* an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

namespace detail_ops {

inline void softmax_row(const double* in, double* out, std::size_t q) {
  double mx = in[0];
  for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < q; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < q; ++j) out[j] /= z;
}

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail_ops

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  detail_ops::check_finite(a.values(), "softmax_rows");
  const std::size_t p = a.rows(), q = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < p; ++i)
    detail_ops::softmax_row(a.values().data() + i * q, out.data() + i * q, q);
  auto* an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an, p, q](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < p; ++i) {
      const double* y = self.value.data() + i * q;
      const double* dy = self.grad.data() + i * q;
      double dot = 0.0;
      for (std::size_t j = 0; j < q; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < q; ++j) g[i * q + j] += y[j] * (dy[j] - dot);
    }
  });
}

/// Normalizes the last axis to zero mean and unit (population) variance, then
/// applies gamma and beta.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = a.cols();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " vs input " + shape_str(a.shape()));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = a.numel() / d;
  std::vector<double> out(a.numel()), xhat(a.numel()), rstd(n);
  const auto& x = a.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xi[j] - mean) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  auto* an = a.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  return make_op_result(
      a.shape(), std::move(out), {a, gamma, beta},
      [an, gn, bn, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const auto& dy = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          auto* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
          auto* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) gg[j] += dy[i * d + j] * xhat[i * d + j];
              if (gb) gb[j] += dy[i * d + j];
            }
        }
        if (!an->requires_grad) return;
        auto& gx = an->ensure_grad();
        const auto& gv = gn->value;
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < n; ++i) {
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[i * d + j] * gv[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[i * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[i * d + j] * gv[j];
            gx[i * d + j] += rstd[i] * (dxh - inv_d * sum_dxh - xhat[i * d + j] * inv_d * sum_dxh_xh);
          }
        }
      });
}

/// Segment boundaries used by mean_pool_segments: `len` contiguous segments
/// over `n` rows whose sizes differ by at most one, longer segments first.
inline std::vector<std::size_t> segment_sizes(std::size_t n, std::size_t len) {
  std::vector<std::size_t> sizes(len, n / len);
  for (std::size_t i = 0; i < n % len; ++i) ++sizes[i];
  return sizes;
}

inline Tensor mean_pool_segments(const Tensor& h, std::size_t len) {
  detail_ops::require_2d(h, "mean_pool_segments");
  const std::size_t n = h.rows(), d = h.cols();
  if (len < 1) throw LengthError("mean_pool_segments: output length must be at least 1");
  if (len > n)
    throw LengthError("mean_pool_segments: cannot pool " + std::to_string(n) + " rows into " +
                      std::to_string(len));
  const auto sizes = segment_sizes(n, len);
  std::vector<double> out(len * d, 0.0);
  std::size_t r = 0;
  for (std::size_t s = 0; s < len; ++s) {
    for (std::size_t k = 0; k < sizes[s]; ++k, ++r)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += h.values()[r * d + j];
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= static_cast<double>(sizes[s]);
  }
  auto* hn = h.node();
  return make_op_result({len, d}, std::move(out), {h}, [hn, sizes, d](detail::Node& self) {
    auto& g = hn->ensure_grad();
    std::size_t r = 0;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      const double w = 1.0 / static_cast<double>(sizes[s]);
      for (std::size_t k = 0; k < sizes[s]; ++k, ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[s * d + j] * w;
    }
  });
}

/// Stacks matrices (or vectors, as single rows) vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.dim() > 2 || p.cols() != d)
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  return make_op_result({n, d}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t m = in->value.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) g[i] += self.grad[off + i];
      }
      off += m;
    }
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  detail_ops::require_2d(a, "slice_rows");
  if (count == 0 || begin + count > a.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(a.shape()));
  const std::size_t d = a.cols();
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                          a.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  auto* an = a.node();
  return make_op_result({count, d}, std::move(out), {a}, [an, begin, d](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  auto* an = a.node();
  return make_op_result(std::move(shape), std::move(out), {a}, [an](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Row i of a matrix as a vector.
inline Tensor row(const Tensor& a, std::size_t i) {
  return reshape(slice_rows(a, i, 1), {a.cols()});
}

/// Embedding lookup: rows of `table` selected by `ids`.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  detail_ops::require_2d(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows())
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                       shape_str(table.shape()));
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto* tn = table.node();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return make_op_result({ids.size(), d}, std::move(out), {table},
                        [tn, idv = std::move(idv), d](detail::Node& self) {
                          auto& g = tn->ensure_grad();
                          for (std::size_t i = 0; i < idv.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += self.grad[i * d + j];
                        });
}

/// Bidirectional multi-head scaled dot-product attention over already
/// projected queries [nq×d], keys [nk×d] and values [nk×d]. Heads split the
/// width evenly; the head outputs are concatenated back to [nq×d].
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t n_heads) {
  using namespace detail_ops;
  require_2d(q, "attention q");
  require_2d(k, "attention k");
  require_2d(v, "attention v");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != nk)
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  if (n_heads == 0 || d % n_heads != 0)
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Q = mat(q.node()->value, nq, d);
  const auto K = mat(k.node()->value, nk, d);
  const auto V = mat(v.node()->value, nk, d);
  std::vector<double> out(nq * d);
  auto O = mat(out, nq, d);
  std::vector<MatRM> probs(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    const auto w = static_cast<Eigen::Index>(dh);
    MatRM s = (Q.middleCols(c0, w) * K.middleCols(c0, w).transpose()) * inv_scale;
    for (Eigen::Index i = 0; i < s.rows(); ++i) softmax_row(s.row(i).data(), s.row(i).data(), nk);
    O.middleCols(c0, w).noalias() = s * V.middleCols(c0, w);
    probs[h] = std::move(s);
  }
  auto* qn = q.node();
  auto* kn = k.node();
  auto* vn = v.node();
  return make_op_result(
      {nq, d}, std::move(out), {q, k, v},
      [qn, kn, vn, nq, nk, d, dh, n_heads, inv_scale, probs = std::move(probs)](detail::Node& self) {
        const auto dO = mat(self.grad, nq, d);
        const auto Q = mat(qn->value, nq, d);
        const auto K = mat(kn->value, nk, d);
        const auto V = mat(vn->value, nk, d);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto c0 = static_cast<Eigen::Index>(h * dh);
          const auto w = static_cast<Eigen::Index>(dh);
          const MatRM& P = probs[h];
          if (vn->requires_grad)
            mat(vn->ensure_grad(), nk, d).middleCols(c0, w).noalias() += P.transpose() * dO.middleCols(c0, w);
          if (!qn->requires_grad && !kn->requires_grad) continue;
          MatRM dP = dO.middleCols(c0, w) * V.middleCols(c0, w).transpose();
          const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
          MatRM dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * inv_scale;
          if (qn->requires_grad)
            mat(qn->ensure_grad(), nq, d).middleCols(c0, w).noalias() += dS * K.middleCols(c0, w);
          if (kn->requires_grad)
            mat(kn->ensure_grad(), nk, d).middleCols(c0, w).noalias() += dS.transpose() * Q.middleCols(c0, w);
        }
      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto* an = a.node();
  return make_op_result({1}, {s}, {a}, [an](detail::Node& self) {
    auto& g = an->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.dim() != 1 || b.dim() != 1 || a.numel() != b.numel())
    throw ShapeError("dot: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  return sum(mul(a, b));
}

/// Mean over rows of −log softmax(scores)[target]. Log-sum-exp stable.
inline Tensor softmax_cross_entropy(const Tensor& scores, std::span<const std::size_t> targets) {
  detail_ops::require_2d(scores, "softmax_cross_entropy");
  const std::size_t p = scores.rows(), q = scores.cols();
  if (targets.size() != p)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(p) + " rows");
  detail_ops::check_finite(scores.values(), "softmax_cross_entropy");
  std::vector<double> probs(p * q);
  double loss = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    if (targets[i] >= q) throw ShapeError("softmax_cross_entropy: target out of range");
    const double* s = scores.values().data() + i * q;
    double mx = s[0];
    for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, s[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < q; ++j) z += std::exp(s[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - s[targets[i]];
    for (std::size_t j = 0; j < q; ++j) probs[i * q + j] = std::exp(s[j] - lse);
  }
  loss /= static_cast<double>(p);
  auto* sn = scores.node();
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return make_op_result({1}, {loss}, {scores},
                        [sn, p, q, probs = std::move(probs), tv = std::move(tv)](detail::Node& self) {
                          auto& g = sn->ensure_grad();
                          const double w = self.grad[0] / static_cast<double>(p);
                          for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t j = 0; j < q; ++j)
                              g[i * q + j] += w * (probs[i * q + j] - (j == tv[i] ? 1.0 : 0.0));
                        });
}

}  // namespace ops
}  // namespace dialclip
