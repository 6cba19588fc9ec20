#pragma once

// Tape-free reverse-mode automatic differentiation over flat Eigen arrays.
//
// Every op records its parents and a backward rule written in terms of other
// ops, so gradients are themselves differentiable when `create_graph` is set.
// The discriminator's gradient penalty relies on that second-order path.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "idinv/error.hpp"

namespace idinv::ad {

using Shape = std::vector<int>;

inline Eigen::Index shape_size(const Shape& shape) {
  Eigen::Index n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
inline bool& recording_flag() {
  thread_local bool recording = true;
  return recording;
}
}  // namespace detail

inline bool is_recording() { return detail::recording_flag(); }

class RecordingGuard {
 public:
  explicit RecordingGuard(bool on) : previous_(detail::recording_flag()) { detail::recording_flag() = on; }
  ~RecordingGuard() { detail::recording_flag() = previous_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  bool previous_;
};

/// Disables graph construction for the enclosing scope.
class NoGrad : public RecordingGuard {
 public:
  NoGrad() : RecordingGuard(false) {}
};

template <typename Scalar>
class Var;

template <typename Scalar>
using BackwardFn =
    std::function<std::vector<Var<Scalar>>(const Var<Scalar>& grad, const std::vector<bool>& needed)>;

template <typename Scalar>
struct Node {
  Buffer<Scalar> value;
  Shape shape;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<Scalar> backward;
};

template <typename Scalar>
class Var {
 public:
  Var() = default;

  static Var constant(Buffer<Scalar> value, Shape shape) { return make(std::move(value), std::move(shape), false); }

  /// A trainable leaf; gradients may be requested for it.
  static Var leaf(Buffer<Scalar> value, Shape shape) { return make(std::move(value), std::move(shape), true); }

  static Var zeros(const Shape& shape) { return constant(Buffer<Scalar>::Zero(shape_size(shape)), shape); }

  static Var full(const Shape& shape, Scalar v) { return constant(Buffer<Scalar>::Constant(shape_size(shape), v), shape); }

  bool defined() const { return node_ != nullptr; }
  const Buffer<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  Eigen::Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  Scalar item() const {
    IDINV_REQUIRE(size() == 1, "item() on non-scalar " + shape_string(shape()));
    return node_->value(0);
  }

  /// In-place access for optimizers; only leaves may be mutated.
  Buffer<Scalar>& mutable_value() {
    IDINV_REQUIRE(node_->is_leaf, "only leaf values are mutable");
    return node_->value;
  }
  void set_requires_grad(bool on) {
    IDINV_REQUIRE(node_->is_leaf, "requires_grad is fixed for interior nodes");
    node_->requires_grad = on;
  }

  Var detach() const { return constant(node_->value, node_->shape); }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& handle() const { return node_; }

  template <typename S>
  friend Var<S> record(Buffer<S> value, Shape shape, const std::vector<Var<S>>& parents, BackwardFn<S> backward);

 private:
  static Var make(Buffer<Scalar> value, Shape shape, bool requires_grad) {
    IDINV_REQUIRE(shape_size(shape) == value.size(),
                  "buffer of " + std::to_string(value.size()) + " does not match shape " + shape_string(shape));
    Var v;
    v.node_ = std::make_shared<Node<Scalar>>();
    v.node_->value = std::move(value);
    v.node_->shape = std::move(shape);
    v.node_->requires_grad = requires_grad;
    return v;
  }

  std::shared_ptr<Node<Scalar>> node_;
};

template <typename Scalar>
Var<Scalar> record(Buffer<Scalar> value, Shape shape, const std::vector<Var<Scalar>>& parents,
                   BackwardFn<Scalar> backward) {
  Var<Scalar> out = Var<Scalar>::constant(std::move(value), std::move(shape));
  if (!is_recording()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->is_leaf = false;
  for (const auto& p : parents) out.node_->parents.push_back(p.handle());
  out.node_->backward = std::move(backward);
  return out;
}

namespace detail {
template <typename Scalar>
void require_same_size(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  IDINV_REQUIRE(a.size() == b.size(),
                std::string(op) + ": size mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Product of trailing dims after the first `lead`.
inline int trailing(const Shape& s, std::size_t lead) {
  int n = 1;
  for (std::size_t i = lead; i < s.size(); ++i) n *= s[i];
  return n;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_size(a, b, "add");
  return record<Scalar>(a.value() + b.value(), a.shape(), {a, b},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{g, g}; });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar c) {
  return record<Scalar>(a.value() * c, a.shape(), {a}, [c](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{scale(g, c)};
  });
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& a) {
  return scale(a, Scalar(-1));
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_size(a, b, "sub");
  return record<Scalar>(a.value() - b.value(), a.shape(), {a, b},
                        [](const Var<Scalar>& g, const std::vector<bool>& need) {
                          return std::vector<Var<Scalar>>{g, need[1] ? neg(g) : Var<Scalar>()};
                        });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_size(a, b, "mul");
  return record<Scalar>(a.value() * b.value(), a.shape(), {a, b},
                        [a, b](const Var<Scalar>& g, const std::vector<bool>& need) {
                          return std::vector<Var<Scalar>>{need[0] ? mul(g, b) : Var<Scalar>(),
                                                          need[1] ? mul(g, a) : Var<Scalar>()};
                        });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar c) {
  return record<Scalar>(a.value() + c, a.shape(), {a},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{g}; });
}

template <typename Scalar>
Var<Scalar> pow_scalar(const Var<Scalar>& a, Scalar p) {
  return record<Scalar>(a.value().pow(p), a.shape(), {a}, [a, p](const Var<Scalar>& g, const std::vector<bool>&) {
    if (p == Scalar(1)) return std::vector<Var<Scalar>>{g};
    return std::vector<Var<Scalar>>{mul(g, scale(pow_scalar(a, p - Scalar(1)), p))};
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return mul(a, a);
}

/// 1/a with 1/0 := 0.
template <typename Scalar>
Var<Scalar> safe_reciprocal(const Var<Scalar>& a) {
  Buffer<Scalar> v = (a.value() != Scalar(0)).select(a.value().inverse(), Scalar(0));
  return record<Scalar>(std::move(v), a.shape(), {a}, [a](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{mul(g, neg(square(safe_reciprocal(a))))};
  });
}

/// sqrt(max(a, 0)); the derivative at zero is taken as zero.
template <typename Scalar>
Var<Scalar> safe_sqrt(const Var<Scalar>& a) {
  return record<Scalar>(a.value().max(Scalar(0)).sqrt(), a.shape(), {a},
                        [a](const Var<Scalar>& g, const std::vector<bool>&) {
                          return std::vector<Var<Scalar>>{mul(g, scale(safe_reciprocal(safe_sqrt(a)), Scalar(0.5)))};
                        });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope = Scalar(0.2)) {
  Buffer<Scalar> mask = (a.value() > Scalar(0)).select(Buffer<Scalar>::Ones(a.size()), slope);
  Buffer<Scalar> v = a.value() * mask;
  auto gate = Var<Scalar>::constant(std::move(mask), a.shape());
  return record<Scalar>(std::move(v), a.shape(), {a}, [gate](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{mul(g, gate)};
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  return record<Scalar>(a.value().tanh(), a.shape(), {a}, [a](const Var<Scalar>& g, const std::vector<bool>&) {
    auto t = tanh(a);
    return std::vector<Var<Scalar>>{mul(g, add_scalar(neg(square(t)), Scalar(1)))};
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Buffer<Scalar> v = (Scalar(1) + (-a.value()).exp()).inverse();
  return record<Scalar>(std::move(v), a.shape(), {a}, [a](const Var<Scalar>& g, const std::vector<bool>&) {
    auto s = sigmoid(a);
    return std::vector<Var<Scalar>>{mul(g, mul(s, add_scalar(neg(s), Scalar(1))))};
  });
}

/// log(1 + exp(a)), evaluated without overflow.
template <typename Scalar>
Var<Scalar> softplus(const Var<Scalar>& a) {
  Buffer<Scalar> v = a.value().max(Scalar(0)) + (-a.value().abs()).exp().log1p();
  return record<Scalar>(std::move(v), a.shape(), {a}, [a](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{mul(g, sigmoid(a))};
  });
}

// ---------------------------------------------------------------------------
// Shape and reductions

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  IDINV_REQUIRE(shape_size(shape) == a.size(), "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  Shape original = a.shape();
  return record<Scalar>(a.value(), std::move(shape), {a},
                        [original](const Var<Scalar>& g, const std::vector<bool>&) {
                          return std::vector<Var<Scalar>>{reshape(g, original)};
                        });
}

template <typename Scalar>
Var<Scalar> expand_scalar(const Var<Scalar>& s, const Shape& shape);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Buffer<Scalar> v(1);
  v(0) = a.value().sum();
  Shape original = a.shape();
  return record<Scalar>(std::move(v), Shape{1}, {a}, [original](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{expand_scalar(g, original)};
  });
}

template <typename Scalar>
Var<Scalar> expand_scalar(const Var<Scalar>& s, const Shape& shape) {
  IDINV_REQUIRE(s.size() == 1, "expand_scalar expects a scalar");
  return record<Scalar>(Buffer<Scalar>::Constant(shape_size(shape), s.value()(0)), shape, {s},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{sum(g)}; });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

template <typename Scalar>
Var<Scalar> expand_per_sample(const Var<Scalar>& v, const Shape& shape);

/// [N, ...] -> [N]
template <typename Scalar>
Var<Scalar> sum_per_sample(const Var<Scalar>& a) {
  const int n = a.dim(0);
  const int inner = detail::trailing(a.shape(), 1);
  Eigen::Map<const RowMatrix<Scalar>> m(a.value().data(), n, inner);
  Buffer<Scalar> v = m.rowwise().sum().array();
  Shape original = a.shape();
  return record<Scalar>(std::move(v), Shape{n}, {a}, [original](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{expand_per_sample(g, original)};
  });
}

/// [N] -> [N, ...], repeating each entry across its sample.
template <typename Scalar>
Var<Scalar> expand_per_sample(const Var<Scalar>& v, const Shape& shape) {
  const int n = shape.at(0);
  IDINV_REQUIRE(v.size() == n, "expand_per_sample: batch mismatch");
  const int inner = detail::trailing(shape, 1);
  Buffer<Scalar> out(shape_size(shape));
  Eigen::Map<RowMatrix<Scalar>> m(out.data(), n, inner);
  m = v.value().matrix().replicate(1, inner);
  return record<Scalar>(std::move(out), shape, {v},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{sum_per_sample(g)}; });
}

/// Per-sample L2 norm of the flattened trailing dims: [N, ...] -> [N].
template <typename Scalar>
Var<Scalar> norm_per_sample(const Var<Scalar>& a) {
  return safe_sqrt(sum_per_sample(square(a)));
}

template <typename Scalar>
Var<Scalar> expand_channels(const Var<Scalar>& v, const Shape& shape);

/// [N, C, ...] -> [N, C] (per_sample) or [C].
template <typename Scalar>
Var<Scalar> reduce_channels(const Var<Scalar>& a, bool per_sample) {
  const int n = a.dim(0), c = a.dim(1);
  const int spatial = detail::trailing(a.shape(), 2);
  Eigen::Map<const RowMatrix<Scalar>> m(a.value().data(), n * c, spatial);
  Buffer<Scalar> per = m.rowwise().sum().array();
  Buffer<Scalar> v;
  Shape out_shape;
  if (per_sample) {
    v = std::move(per);
    out_shape = {n, c};
  } else {
    Eigen::Map<const RowMatrix<Scalar>> pm(per.data(), n, c);
    v = pm.colwise().sum().transpose().array();
    out_shape = {c};
  }
  Shape original = a.shape();
  return record<Scalar>(std::move(v), out_shape, {a}, [original](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{expand_channels(g, original)};
  });
}

/// Broadcast [C] or [N, C] over a [N, C, ...] shape.
template <typename Scalar>
Var<Scalar> expand_channels(const Var<Scalar>& v, const Shape& shape) {
  const int n = shape.at(0), c = shape.at(1);
  const int spatial = detail::trailing(shape, 2);
  const bool per_sample = v.rank() == 2;
  IDINV_REQUIRE(per_sample ? (v.dim(0) == n && v.dim(1) == c) : v.size() == c,
                "expand_channels: " + shape_string(v.shape()) + " vs " + shape_string(shape));
  Buffer<Scalar> out(shape_size(shape));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const Scalar x = per_sample ? v.value()(i * c + j) : v.value()(j);
      out.segment((static_cast<Eigen::Index>(i) * c + j) * spatial, spatial).setConstant(x);
    }
  }
  return record<Scalar>(std::move(out), shape, {v}, [per_sample](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{reduce_channels(g, per_sample)};
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// op(a) * op(b) for rank-2 operands, op = transpose when the flag is set.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b, bool ta = false, bool tb = false) {
  IDINV_REQUIRE(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  Eigen::Map<const RowMatrix<Scalar>> am(a.value().data(), a.dim(0), a.dim(1));
  Eigen::Map<const RowMatrix<Scalar>> bm(b.value().data(), b.dim(0), b.dim(1));
  const int rows = ta ? a.dim(1) : a.dim(0);
  const int inner_a = ta ? a.dim(0) : a.dim(1);
  const int inner_b = tb ? b.dim(1) : b.dim(0);
  const int cols = tb ? b.dim(0) : b.dim(1);
  IDINV_REQUIRE(inner_a == inner_b, "matmul inner mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Buffer<Scalar> out(static_cast<Eigen::Index>(rows) * cols);
  Eigen::Map<RowMatrix<Scalar>> om(out.data(), rows, cols);
  if (!ta && !tb) om.noalias() = am * bm;
  else if (ta && !tb) om.noalias() = am.transpose() * bm;
  else if (!ta && tb) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  return record<Scalar>(std::move(out), Shape{rows, cols}, {a, b},
                        [a, b, ta, tb](const Var<Scalar>& g, const std::vector<bool>& need) {
                          Var<Scalar> da, db;
                          if (need[0]) da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                          if (need[1]) db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                          return std::vector<Var<Scalar>>{da, db};
                        });
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, odd square kernel, zero "same" padding)

namespace detail {

// cols: [ci*k*k, h*w] for one sample.
template <typename Scalar>
void im2col(const Scalar* x, int ci, int h, int w, int k, RowMatrix<Scalar>& cols) {
  const int pad = k / 2;
  cols.resize(static_cast<Eigen::Index>(ci) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < ci; ++c) {
    const Scalar* plane = x + static_cast<Eigen::Index>(c) * h * w;
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        Scalar* row = cols.data() + ((static_cast<Eigen::Index>(c) * k + a) * k + b) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + a - pad;
          Scalar* dst = row + static_cast<Eigen::Index>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + static_cast<Eigen::Index>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + b - pad;
            dst[xx] = (sx < 0 || sx >= w) ? Scalar(0) : src[sx];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> flip_transpose(const Var<Scalar>& w);
template <typename Scalar>
Var<Scalar> conv2d_weight_grad(const Var<Scalar>& x, const Var<Scalar>& g, int k);

/// x [N, Ci, H, W] * w [Co, Ci, k, k] -> [N, Co, H, W]
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w) {
  IDINV_REQUIRE(x.rank() == 4 && w.rank() == 4, "conv2d expects rank-4 input and kernel");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  IDINV_REQUIRE(w.dim(1) == ci, "conv2d channel mismatch " + shape_string(x.shape()) + " vs " + shape_string(w.shape()));
  IDINV_REQUIRE(k % 2 == 1 && w.dim(3) == k, "conv2d expects an odd square kernel");
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * wd;
  Buffer<Scalar> out(static_cast<Eigen::Index>(n) * co * hw);
  Eigen::Map<const RowMatrix<Scalar>> wm(w.value().data(), co, static_cast<Eigen::Index>(ci) * k * k);
  RowMatrix<Scalar> cols;
  for (int i = 0; i < n; ++i) {
    Eigen::Map<RowMatrix<Scalar>> om(out.data() + i * co * hw, co, hw);
    if (k == 1) {
      Eigen::Map<const RowMatrix<Scalar>> xm(x.value().data() + i * ci * hw, ci, hw);
      om.noalias() = wm * xm;
    } else {
      detail::im2col(x.value().data() + i * ci * hw, ci, h, wd, k, cols);
      om.noalias() = wm * cols;
    }
  }
  return record<Scalar>(std::move(out), Shape{n, co, h, wd}, {x, w},
                        [x, w, k](const Var<Scalar>& g, const std::vector<bool>& need) {
                          Var<Scalar> dx, dw;
                          if (need[0]) dx = conv2d(g, flip_transpose(w));
                          if (need[1]) dw = conv2d_weight_grad(x, g, k);
                          return std::vector<Var<Scalar>>{dx, dw};
                        });
}

/// [Co, Ci, k, k] -> [Ci, Co, k, k] with both spatial axes reversed.
template <typename Scalar>
Var<Scalar> flip_transpose(const Var<Scalar>& w) {
  const int co = w.dim(0), ci = w.dim(1), k = w.dim(2);
  Buffer<Scalar> out(w.size());
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < ci; ++i)
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b)
          out(((static_cast<Eigen::Index>(i) * co + o) * k + a) * k + b) =
              w.value()(((static_cast<Eigen::Index>(o) * ci + i) * k + (k - 1 - a)) * k + (k - 1 - b));
  return record<Scalar>(std::move(out), Shape{ci, co, k, k}, {w},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{flip_transpose(g)}; });
}

/// Gradient of conv2d with respect to its kernel: -> [Co, Ci, k, k].
template <typename Scalar>
Var<Scalar> conv2d_weight_grad(const Var<Scalar>& x, const Var<Scalar>& g, int k) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = g.dim(1);
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * wd;
  const Eigen::Index kk = static_cast<Eigen::Index>(ci) * k * k;
  Buffer<Scalar> out = Buffer<Scalar>::Zero(co * kk);
  Eigen::Map<RowMatrix<Scalar>> om(out.data(), co, kk);
  RowMatrix<Scalar> cols;
  for (int i = 0; i < n; ++i) {
    Eigen::Map<const RowMatrix<Scalar>> gm(g.value().data() + i * co * hw, co, hw);
    if (k == 1) {
      Eigen::Map<const RowMatrix<Scalar>> xm(x.value().data() + i * ci * hw, ci, hw);
      om.noalias() += gm * xm.transpose();
    } else {
      detail::im2col(x.value().data() + i * ci * hw, ci, h, wd, k, cols);
      om.noalias() += gm * cols.transpose();
    }
  }
  return record<Scalar>(std::move(out), Shape{co, ci, k, k}, {x, g},
                        [x, g](const Var<Scalar>& gg, const std::vector<bool>& need) {
                          Var<Scalar> dx, dg;
                          if (need[0]) dx = conv2d(g, flip_transpose(gg));
                          if (need[1]) dg = conv2d(x, gg);
                          return std::vector<Var<Scalar>>{dx, dg};
                        });
}

// ---------------------------------------------------------------------------
// Resampling

template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x);

/// 2x2 mean pooling: [N, C, H, W] -> [N, C, H/2, W/2]
template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  IDINV_REQUIRE(h % 2 == 0 && w % 2 == 0, "avg_pool2 expects even spatial dims");
  const int oh = h / 2, ow = w / 2;
  Buffer<Scalar> out(static_cast<Eigen::Index>(n) * c * oh * ow);
  const Scalar* src = x.value().data();
  for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(n) * c; ++p) {
    const Scalar* plane = src + p * h * w;
    Scalar* dst = out.data() + p * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        dst[y * ow + xx] = Scalar(0.25) * (plane[(2 * y) * w + 2 * xx] + plane[(2 * y) * w + 2 * xx + 1] +
                                           plane[(2 * y + 1) * w + 2 * xx] + plane[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return record<Scalar>(std::move(out), Shape{n, c, oh, ow}, {x}, [](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{scale(upsample2(g), Scalar(0.25))};
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  Buffer<Scalar> out(static_cast<Eigen::Index>(n) * c * oh * ow);
  const Scalar* src = x.value().data();
  for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(n) * c; ++p) {
    const Scalar* plane = src + p * h * w;
    Scalar* dst = out.data() + p * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
  }
  return record<Scalar>(std::move(out), Shape{n, c, oh, ow}, {x}, [](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{scale(avg_pool2(g), Scalar(4))};
  });
}

// ---------------------------------------------------------------------------
// Layer-wise code rows

template <typename Scalar>
Var<Scalar> place_row(const Var<Scalar>& v, int row, int rows);

/// [N, L, d] -> [N, d]
template <typename Scalar>
Var<Scalar> select_row(const Var<Scalar>& x, int row) {
  const int n = x.dim(0), rows = x.dim(1), d = x.dim(2);
  IDINV_REQUIRE(row >= 0 && row < rows, "select_row out of range");
  Buffer<Scalar> out(static_cast<Eigen::Index>(n) * d);
  for (int i = 0; i < n; ++i)
    out.segment(static_cast<Eigen::Index>(i) * d, d) =
        x.value().segment((static_cast<Eigen::Index>(i) * rows + row) * d, d);
  return record<Scalar>(std::move(out), Shape{n, d}, {x}, [row, rows](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{place_row(g, row, rows)};
  });
}

/// [N, d] -> [N, L, d], zero except at `row`.
template <typename Scalar>
Var<Scalar> place_row(const Var<Scalar>& v, int row, int rows) {
  const int n = v.dim(0), d = v.dim(1);
  Buffer<Scalar> out = Buffer<Scalar>::Zero(static_cast<Eigen::Index>(n) * rows * d);
  for (int i = 0; i < n; ++i)
    out.segment((static_cast<Eigen::Index>(i) * rows + row) * d, d) = v.value().segment(static_cast<Eigen::Index>(i) * d, d);
  return record<Scalar>(std::move(out), Shape{n, rows, d}, {v}, [row](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{select_row(g, row)};
  });
}

template <typename Scalar>
Var<Scalar> sum_rows(const Var<Scalar>& x);

/// [N, d] -> [N, L, d], every row a copy of the input row.
template <typename Scalar>
Var<Scalar> broadcast_rows(const Var<Scalar>& v, int rows) {
  IDINV_REQUIRE(v.rank() == 2 && rows >= 1, "broadcast_rows expects [N, d] and a positive row count");
  const int n = v.dim(0), d = v.dim(1);
  Buffer<Scalar> out(static_cast<Eigen::Index>(n) * rows * d);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < rows; ++r)
      out.segment((static_cast<Eigen::Index>(i) * rows + r) * d, d) = v.value().segment(static_cast<Eigen::Index>(i) * d, d);
  return record<Scalar>(std::move(out), Shape{n, rows, d}, {v},
                        [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{sum_rows(g)}; });
}

/// [N, L, d] -> [N, d]
template <typename Scalar>
Var<Scalar> sum_rows(const Var<Scalar>& x) {
  const int n = x.dim(0), rows = x.dim(1), d = x.dim(2);
  Buffer<Scalar> out = Buffer<Scalar>::Zero(static_cast<Eigen::Index>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < rows; ++r)
      out.segment(static_cast<Eigen::Index>(i) * d, d) += x.value().segment((static_cast<Eigen::Index>(i) * rows + r) * d, d);
  return record<Scalar>(std::move(out), Shape{n, d}, {x}, [rows](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{broadcast_rows(g, rows)};
  });
}

// ---------------------------------------------------------------------------
// Gradient computation

/// Gradients of `output` (seeded with ones, or with `seed` when given) with
/// respect to each of `inputs`. Inputs unreachable from the output receive
/// zeros. With `create_graph` the returned gradients are differentiable.
template <typename Scalar>
std::vector<Var<Scalar>> grad(const Var<Scalar>& output, const std::vector<Var<Scalar>>& inputs,
                              bool create_graph = false, const Var<Scalar>& seed = Var<Scalar>()) {
  using NodeT = Node<Scalar>;
  std::unordered_set<const NodeT*> targets;
  for (const auto& in : inputs) targets.insert(in.node());

  // Post-order over the requires-grad subgraph; parents precede children.
  std::vector<NodeT*> order;
  std::unordered_map<const NodeT*, bool> needed;
  if (output.requires_grad()) {
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    std::unordered_set<const NodeT*> visited;
    stack.emplace_back(output.node(), 0);
    visited.insert(output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodeT* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        continue;
      }
      bool need = targets.count(node) > 0;
      for (const auto& p : node->parents) {
        auto it = needed.find(p.get());
        need = need || (it != needed.end() && it->second);
      }
      needed[node] = need;
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const NodeT*, Var<Scalar>> grads;
  {
    RecordingGuard guard(create_graph);
    if (!order.empty() && needed[output.node()]) {
      grads[output.node()] = seed.defined() ? seed : Var<Scalar>::full(output.shape(), Scalar(1));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* node = *it;
      auto git = grads.find(node);
      if (git == grads.end() || !needed[node] || !node->backward) continue;
      std::vector<bool> need(node->parents.size());
      for (std::size_t i = 0; i < need.size(); ++i) {
        auto nit = needed.find(node->parents[i].get());
        need[i] = nit != needed.end() && nit->second;
      }
      std::vector<Var<Scalar>> parent_grads = node->backward(git->second, need);
      for (std::size_t i = 0; i < need.size(); ++i) {
        if (!need[i] || !parent_grads[i].defined()) continue;
        const NodeT* p = node->parents[i].get();
        auto pit = grads.find(p);
        if (pit == grads.end()) {
          grads.emplace(p, parent_grads[i]);
        } else {
          pit->second = add(pit->second, parent_grads[i]);
        }
      }
      if (!targets.count(node)) grads.erase(node);
    }
  }

  std::vector<Var<Scalar>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node());
    if (it == grads.end()) {
      result.push_back(Var<Scalar>::zeros(in.shape()));
    } else {
      // Gradients keep the input's shape even when an op reshaped them.
      result.push_back(it->second.shape() == in.shape() ? it->second : reshape(it->second, in.shape()));
    }
  }
  return result;
}

}  // namespace idinv::ad
