#pragma once

// Reverse-mode differentiation over image tensors.
//
// A Tape records every operation of a forward pass together with a closure that
// pushes the output gradient back to the operation's inputs. Gradients are only
// allocated for nodes that depend on a trainable leaf.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rawdn/errors.hpp"
#include "rawdn/tensor.hpp"

namespace rawdn::ad {

struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
  bool operator==(const Var&) const = default;
};

template <typename T>
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, int)>;

  /// With `record` false, no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor<T> value, std::string label = "const") {
    return push(std::move(value), false, {}, std::move(label));
  }

  /// Trainable input; its gradient is kept after backward().
  Var leaf(Tensor<T> value, std::string label) {
    return push(std::move(value), record_, {}, std::move(label));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  const std::string& label(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].label; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target; zeros if none reached this node.
  Tensor<T>& grad(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v.id)].grad.empty(); }

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn, std::string label) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && record_;
    if (n.requires_grad) n.backward = std::move(fn);
    n.label = scope_.empty() ? std::move(label) : scope_ + "/" + label;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  /// Seeds d(target)/d(target) = 1 for a scalar target and runs every closure in reverse.
  void backward(Var target) {
    if (!record_) throw usage_error("no_tape", "backward() on a non-recording tape");
    if (value(target).size() != 1) throw usage_error("bad_shape", "backward target must be scalar");
    grad(target)[0] = T(1);
    for (int id = target.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  /// Label of the first recorded value that is not finite, or empty.
  std::string first_non_finite() const {
    for (const auto& n : nodes_) {
      if (!n.value.all_finite()) return n.label;
    }
    return {};
  }

  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const noexcept { return scope_; }

  /// When set, piecewise-linear ops append one byte per element recording which
  /// branch was taken. Finite-difference checks compare these to detect kinks.
  std::vector<std::uint8_t>* branch_log = nullptr;

  void log_branch(std::uint8_t b) {
    if (branch_log) branch_log->push_back(b);
  }

private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::string label;
  };

  bool record_;
  std::string scope_;
  std::vector<Node> nodes_;
};

/// RAII scope label for tape nodes.
template <typename T>
class Scope {
public:
  Scope(Tape<T>& tape, const std::string& name) : tape_(tape), saved_(tape.scope()) {
    tape_.set_scope(saved_.empty() ? name : saved_ + "/" + name);
  }
  ~Scope() { tape_.set_scope(saved_); }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

private:
  Tape<T>& tape_;
  std::string saved_;
};

// ---------------------------------------------------------------------------
// Dense kernels

namespace kernel {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (m x n) += A (m x k) * B (k x n), all row-major.
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c) {
  Eigen::Map<RowMajor<T>>(c, m, n).noalias() +=
      Eigen::Map<const RowMajor<T>>(a, m, k) * Eigen::Map<const RowMajor<T>>(b, k, n);
}

/// C (m x n) += A (m x k) * B^T where B is (n x k), row-major.
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c) {
  Eigen::Map<RowMajor<T>>(c, m, n).noalias() +=
      Eigen::Map<const RowMajor<T>>(a, m, k) * Eigen::Map<const RowMajor<T>>(b, n, k).transpose();
}

/// C (m x n) += A^T * B where A is (k x m), row-major.
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c) {
  Eigen::Map<RowMajor<T>>(c, m, n).noalias() +=
      Eigen::Map<const RowMajor<T>>(a, k, m).transpose() * Eigen::Map<const RowMajor<T>>(b, k, n);
}

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

/// (C, H, W) -> (C*9, H*W) patch matrix for a 3x3 window with reflect padding.
template <typename T>
void im2col3(const Tensor<T>& x, std::vector<T>& col) {
  const int c = x.channels(), h = x.height(), w = x.width();
  col.resize(static_cast<std::size_t>(c) * 9 * h * w);
  T* out = col.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        for (int y = 0; y < h; ++y) {
          const int sy = reflect(y + ky - 1, h);
          const T* src = &x.at(ci, sy, 0);
          *out++ = src[reflect(kx - 1, w)];
          const int inner_end = w - 1;
          const int off = kx - 1;
          for (int xx = 1; xx < inner_end; ++xx) *out++ = src[xx + off];
          if (w > 1) *out++ = src[reflect(w - 1 + off, w)];
        }
      }
    }
  }
}

/// Adjoint of im2col3: scatters patch gradients back onto the (C, H, W) input gradient.
template <typename T>
void col2im3(const std::vector<T>& col, Tensor<T>& dx) {
  const int c = dx.channels(), h = dx.height(), w = dx.width();
  const T* in = col.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        for (int y = 0; y < h; ++y) {
          const int sy = reflect(y + ky - 1, h);
          T* dst = &dx.at(ci, sy, 0);
          const int off = kx - 1;
          dst[reflect(off, w)] += *in++;
          for (int xx = 1; xx < w - 1; ++xx) dst[xx + off] += *in++;
          if (w > 1) dst[reflect(w - 1 + off, w)] += *in++;
        }
      }
    }
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <typename T>
void accumulate(Tape<T>& t, Var v, const Tensor<T>& g) {
  if (!t.requires_grad(v)) return;
  auto& dst = t.grad(v);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T, typename Fn>
Var unary(Tape<T>& t, Var x, Tensor<T> out, const char* name, Fn dfdx) {
  const bool rg = t.requires_grad(x);
  return t.push(std::move(out), rg,
                [x, dfdx](Tape<T>& tp, int self) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad(Var{self});
                  const auto& xv = tp.value(x);
                  const auto& yv = tp.value(Var{self});
                  auto& dx = tp.grad(x);
                  for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], yv[i]);
                },
                name);
}

}  // namespace detail

/// 3x3 convolution, stride 1, reflect padding. kernel: (Cout, Cin, 3, 3), bias: (Cout).
template <typename T>
Var conv3x3(Tape<T>& t, Var x, Var kernel, Var bias) {
  const auto& xv = t.value(x);
  const auto& kv = t.value(kernel);
  const auto& bv = t.value(bias);
  const int cin = xv.channels(), h = xv.height(), w = xv.width();
  const int cout = kv.dim(0);
  if (kv.rank() != 4 || kv.dim(1) != cin || kv.dim(2) != 3 || kv.dim(3) != 3 ||
      bv.size() != static_cast<std::size_t>(cout)) {
    throw usage_error("shape_mismatch", "conv3x3: kernel " + shape_string(kv.shape()) +
                                            " does not fit input " + shape_string(xv.shape()));
  }
  if (h < 2 || w < 2) throw usage_error("bad_shape", "conv3x3 needs at least 2x2 inputs");
  const int hw = h * w, kdim = cin * 9;
  std::vector<T> col;
  kernel::im2col3(xv, col);
  Tensor<T> out(cout, h, w);
  for (int co = 0; co < cout; ++co) std::fill_n(out.data() + co * hw, hw, bv[co]);
  kernel::gemm_nn(cout, hw, kdim, kv.data(), col.data(), out.data());

  const bool rg = t.requires_grad(x) || t.requires_grad(kernel) || t.requires_grad(bias);
  return t.push(std::move(out), rg,
                [x, kernel, bias, cin, cout, h, w](Tape<T>& tp, int self) {
                  const int hw = h * w, kdim = cin * 9;
                  const auto& g = tp.grad(Var{self});
                  if (tp.requires_grad(bias)) {
                    auto& db = tp.grad(bias);
                    for (int co = 0; co < cout; ++co) {
                      T s = 0;
                      for (int p = 0; p < hw; ++p) s += g[static_cast<std::size_t>(co) * hw + p];
                      db[co] += s;
                    }
                  }
                  const bool need_k = tp.requires_grad(kernel), need_x = tp.requires_grad(x);
                  if (!need_k && !need_x) return;
                  std::vector<T> col;
                  if (need_k) {
                    kernel::im2col3(tp.value(x), col);
                    kernel::gemm_nt(cout, kdim, hw, g.data(), col.data(), tp.grad(kernel).data());
                  }
                  if (need_x) {
                    col.assign(static_cast<std::size_t>(kdim) * hw, T(0));
                    kernel::gemm_tn(kdim, hw, cout, tp.value(kernel).data(), g.data(), col.data());
                    kernel::col2im3(col, tp.grad(x));
                  }
                },
                "conv3x3");
}

template <typename T>
Var relu(Tape<T>& t, Var x) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) {
    t.log_branch(v > T(0));
    v = v > T(0) ? v : T(0);
  }
  return detail::unary(t, x, std::move(out), "relu",
                       [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var sigmoid(Tape<T>& t, Var x) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) v = sigmoid_scalar(v);
  return detail::unary(t, x, std::move(out), "sigmoid", [](T, T y) { return y * (T(1) - y); });
}

/// |x| with subgradient 0 at 0.
template <typename T>
Var abs(Tape<T>& t, Var x) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) {
    t.log_branch(static_cast<std::uint8_t>((v > T(0)) + 2 * (v < T(0))));
    v = std::abs(v);
  }
  return detail::unary(t, x, std::move(out), "abs", [](T xv, T) {
    return xv > T(0) ? T(1) : (xv < T(0) ? T(-1) : T(0));
  });
}

template <typename T>
Var square(Tape<T>& t, Var x) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) v = v * v;
  return detail::unary(t, x, std::move(out), "square", [](T xv, T) { return T(2) * xv; });
}

/// c - x
template <typename T>
Var rsub_scalar(Tape<T>& t, T c, Var x) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) v = c - v;
  return detail::unary(t, x, std::move(out), "rsub", [](T, T) { return T(-1); });
}

template <typename T>
Var scale(Tape<T>& t, Var x, T s) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) v *= s;
  return detail::unary(t, x, std::move(out), "scale", [s](T, T) { return s; });
}

/// max(x, lo); gradient passes where x > lo.
template <typename T>
Var floor_at(Tape<T>& t, Var x, T lo) {
  Tensor<T> out = t.value(x);
  for (auto& v : out) {
    t.log_branch(v > lo);
    v = v > lo ? v : lo;
  }
  return detail::unary(t, x, std::move(out), "floor",
                       [lo](T xv, T) { return xv > lo ? T(1) : T(0); });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                [a, b](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  detail::accumulate(tp, a, g);
                  detail::accumulate(tp, b, g);
                },
                "add");
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                [a, b](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  detail::accumulate(tp, a, g);
                  if (tp.requires_grad(b)) {
                    auto& db = tp.grad(b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                  }
                },
                "sub");
}

/// Elementwise product of equal shapes.
template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                [a, b](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  if (tp.requires_grad(a)) {
                    auto& da = tp.grad(a);
                    const auto& bv = tp.value(b);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
                  }
                  if (tp.requires_grad(b)) {
                    auto& db = tp.grad(b);
                    const auto& av = tp.value(a);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
                  }
                },
                "mul");
}

/// Single-channel map (1, H, W) broadcast over every channel of x (C, H, W).
template <typename T>
Var broadcast_mul(Tape<T>& t, Var map, Var x) {
  const auto& mv = t.value(map);
  const auto& xv = t.value(x);
  if (mv.channels() != 1 || mv.height() != xv.height() || mv.width() != xv.width()) {
    throw usage_error("shape_mismatch", "broadcast_mul: map " + shape_string(mv.shape()) +
                                            " vs image " + shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t hw = xv.plane_size();
  for (int c = 0; c < xv.channels(); ++c)
    for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] *= mv[p];
  return t.push(std::move(out), t.requires_grad(map) || t.requires_grad(x),
                [map, x](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  const auto& mv = tp.value(map);
                  const auto& xv = tp.value(x);
                  const std::size_t hw = xv.plane_size();
                  const int cs = xv.channels();
                  if (tp.requires_grad(x)) {
                    auto& dx = tp.grad(x);
                    for (int c = 0; c < cs; ++c)
                      for (std::size_t p = 0; p < hw; ++p) dx[c * hw + p] += g[c * hw + p] * mv[p];
                  }
                  if (tp.requires_grad(map)) {
                    auto& dm = tp.grad(map);
                    for (int c = 0; c < cs; ++c)
                      for (std::size_t p = 0; p < hw; ++p) dm[p] += g[c * hw + p] * xv[c * hw + p];
                  }
                },
                "broadcast_mul");
}

/// Channel concatenation of images sharing H and W.
template <typename T>
Var concat(Tape<T>& t, const std::vector<Var>& parts) {
  int c = 0;
  const auto& first = t.value(parts.front());
  bool rg = false;
  for (Var p : parts) {
    const auto& v = t.value(p);
    if (v.height() != first.height() || v.width() != first.width()) {
      throw usage_error("shape_mismatch", "concat: spatial sizes differ");
    }
    c += v.channels();
    rg = rg || t.requires_grad(p);
  }
  Tensor<T> out(c, first.height(), first.width());
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& v = t.value(p);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return t.push(std::move(out), rg,
                [parts](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  std::size_t off = 0;
                  for (Var p : parts) {
                    const std::size_t n = tp.value(p).size();
                    if (tp.requires_grad(p)) {
                      auto& d = tp.grad(p);
                      for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
                    }
                    off += n;
                  }
                },
                "concat");
}

/// Per-pixel matrix product: y[c] = sum_k m[c][k] * x[k]. m is (C_out, C_in).
template <typename T>
Var channel_matmul(Tape<T>& t, Var m, Var x) {
  const auto& mv = t.value(m);
  const auto& xv = t.value(x);
  if (mv.rank() != 2 || mv.dim(1) != xv.channels()) {
    throw usage_error("shape_mismatch", "channel_matmul: matrix " + shape_string(mv.shape()) +
                                            " vs image " + shape_string(xv.shape()));
  }
  const int co = mv.dim(0), ci = mv.dim(1);
  const std::size_t hw = xv.plane_size();
  Tensor<T> out(co, xv.height(), xv.width());
  for (int r = 0; r < co; ++r) {
    T* dst = out.data() + r * hw;
    for (int k = 0; k < ci; ++k) {
      const T coef = mv[static_cast<std::size_t>(r) * ci + k];
      const T* src = xv.data() + k * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += coef * src[p];
    }
  }
  return t.push(std::move(out), t.requires_grad(m) || t.requires_grad(x),
                [m, x, co, ci, hw](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  const auto& mv = tp.value(m);
                  const auto& xv = tp.value(x);
                  if (tp.requires_grad(x)) {
                    auto& dx = tp.grad(x);
                    for (int r = 0; r < co; ++r)
                      for (int k = 0; k < ci; ++k) {
                        const T coef = mv[static_cast<std::size_t>(r) * ci + k];
                        for (std::size_t p = 0; p < hw; ++p) dx[k * hw + p] += coef * g[r * hw + p];
                      }
                  }
                  if (tp.requires_grad(m)) {
                    auto& dm = tp.grad(m);
                    for (int r = 0; r < co; ++r)
                      for (int k = 0; k < ci; ++k) {
                        T s = 0;
                        for (std::size_t p = 0; p < hw; ++p) s += g[r * hw + p] * xv[k * hw + p];
                        dm[static_cast<std::size_t>(r) * ci + k] += s;
                      }
                  }
                },
                "channel_matmul");
}

/// Condition number (1-norm) above which a matrix is treated as singular.
inline constexpr double kMaxConditionNumber = 1e8;

/// Gauss-Jordan inverse of a square matrix with partial pivoting.
template <typename T>
Tensor<T> invert_matrix(const Tensor<T>& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw usage_error("bad_shape", "matrix inverse needs a square matrix");
  }
  const int n = m.dim(0);
  std::vector<double> a(m.begin(), m.end());
  std::vector<double> inv(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) inv[static_cast<std::size_t>(i) * n + i] = 1.0;
  auto at = [n](std::vector<double>& v, int r, int c) -> double& {
    return v[static_cast<std::size_t>(r) * n + c];
  };
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(at(a, r, col)) > std::abs(at(a, piv, col))) piv = r;
    if (at(a, piv, col) == 0.0) throw numeric_error("singular", "matrix is singular");
    if (piv != col) {
      for (int c = 0; c < n; ++c) {
        std::swap(at(a, piv, c), at(a, col, c));
        std::swap(at(inv, piv, c), at(inv, col, c));
      }
    }
    const double d = at(a, col, col);
    for (int c = 0; c < n; ++c) {
      at(a, col, c) /= d;
      at(inv, col, c) /= d;
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = at(a, r, col);
      if (f == 0.0) continue;
      for (int c = 0; c < n; ++c) {
        at(a, r, c) -= f * at(a, col, c);
        at(inv, r, c) -= f * at(inv, col, c);
      }
    }
  }
  auto norm1 = [n](const auto& v) {
    double best = 0.0;
    for (int c = 0; c < n; ++c) {
      double s = 0.0;
      for (int r = 0; r < n; ++r) s += std::abs(static_cast<double>(v[static_cast<std::size_t>(r) * n + c]));
      best = std::max(best, s);
    }
    return best;
  };
  const double cond = norm1(m) * norm1(inv);
  if (!(cond <= kMaxConditionNumber)) {
    throw numeric_error("singular", "matrix condition number " + std::to_string(cond) +
                                        " exceeds 1e8");
  }
  Tensor<T> out(m.shape());
  for (std::size_t i = 0; i < inv.size(); ++i) out[i] = static_cast<T>(inv[i]);
  return out;
}

/// Matrix inverse node; d(M^-1) = -M^-1 dM M^-1.
template <typename T>
Var inverse(Tape<T>& t, Var m) {
  Tensor<T> inv = invert_matrix(t.value(m));
  return t.push(std::move(inv), t.requires_grad(m),
                [m](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  const auto& iv = tp.value(Var{self});
                  const int n = iv.dim(0);
                  auto& dm = tp.grad(m);
                  // dM = -(inv^T) G (inv^T)
                  std::vector<T> tmp(static_cast<std::size_t>(n) * n, T(0));
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                      T s = 0;
                      for (int k = 0; k < n; ++k) s += iv[k * n + i] * g[k * n + j];
                      tmp[i * n + j] = s;
                    }
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                      T s = 0;
                      for (int k = 0; k < n; ++k) s += tmp[i * n + k] * iv[j * n + k];
                      dm[i * n + j] -= s;
                    }
                },
                "inverse");
}

/// 2x2 box mean, halving height and width.
template <typename T>
Var downsample2(Tape<T>& t, Var x) {
  const auto& xv = t.value(x);
  const int c = xv.channels(), h = xv.height() / 2, w = xv.width() / 2;
  if (xv.height() % 2 || xv.width() % 2) throw usage_error("bad_shape", "downsample2 needs even sizes");
  Tensor<T> out(c, h, w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = T(0.25) * (xv.at(ch, 2 * y, 2 * xx) + xv.at(ch, 2 * y, 2 * xx + 1) +
                                       xv.at(ch, 2 * y + 1, 2 * xx) + xv.at(ch, 2 * y + 1, 2 * xx + 1));
  return t.push(std::move(out), t.requires_grad(x),
                [x](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  auto& dx = tp.grad(x);
                  for (int ch = 0; ch < g.channels(); ++ch)
                    for (int y = 0; y < g.height(); ++y)
                      for (int xx = 0; xx < g.width(); ++xx) {
                        const T v = T(0.25) * g.at(ch, y, xx);
                        dx.at(ch, 2 * y, 2 * xx) += v;
                        dx.at(ch, 2 * y, 2 * xx + 1) += v;
                        dx.at(ch, 2 * y + 1, 2 * xx) += v;
                        dx.at(ch, 2 * y + 1, 2 * xx + 1) += v;
                      }
                },
                "downsample2");
}

namespace detail {

/// Two-tap bilinear weights for doubling a 1-D axis with half-pixel centres.
/// Output index o samples input position o/2 - 1/4, clamped at the borders.
struct UpTaps {
  int i0, i1;
  double w0, w1;
};

inline UpTaps up_taps(int o, int n) {
  const int i = o / 2;
  const int j = (o % 2 == 0) ? std::max(i - 1, 0) : std::min(i + 1, n - 1);
  return {i, j, 0.75, 0.25};
}

}  // namespace detail

/// Bilinear 2x upsampling (half-pixel centres, edge clamp). Exact on constant images.
template <typename T>
Var upsample2(Tape<T>& t, Var x) {
  const auto& xv = t.value(x);
  const int c = xv.channels(), h = xv.height(), w = xv.width();
  Tensor<T> out(c, 2 * h, 2 * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y) {
      const auto ty = detail::up_taps(y, h);
      for (int xx = 0; xx < 2 * w; ++xx) {
        const auto tx = detail::up_taps(xx, w);
        out.at(ch, y, xx) = static_cast<T>(
            ty.w0 * (tx.w0 * xv.at(ch, ty.i0, tx.i0) + tx.w1 * xv.at(ch, ty.i0, tx.i1)) +
            ty.w1 * (tx.w0 * xv.at(ch, ty.i1, tx.i0) + tx.w1 * xv.at(ch, ty.i1, tx.i1)));
      }
    }
  return t.push(std::move(out), t.requires_grad(x),
                [x](Tape<T>& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  auto& dx = tp.grad(x);
                  const int h = dx.height(), w = dx.width();
                  for (int ch = 0; ch < g.channels(); ++ch)
                    for (int y = 0; y < 2 * h; ++y) {
                      const auto ty = detail::up_taps(y, h);
                      for (int xx = 0; xx < 2 * w; ++xx) {
                        const auto tx = detail::up_taps(xx, w);
                        const T gv = g.at(ch, y, xx);
                        dx.at(ch, ty.i0, tx.i0) += static_cast<T>(ty.w0 * tx.w0) * gv;
                        dx.at(ch, ty.i0, tx.i1) += static_cast<T>(ty.w0 * tx.w1) * gv;
                        dx.at(ch, ty.i1, tx.i0) += static_cast<T>(ty.w1 * tx.w0) * gv;
                        dx.at(ch, ty.i1, tx.i1) += static_cast<T>(ty.w1 * tx.w1) * gv;
                      }
                    }
                },
                "upsample2");
}

/// Scalar mean of |x - target|.
template <typename T>
Var mean_abs_diff(Tape<T>& t, Var x, Var target) {
  const auto& xv = t.value(x);
  const auto& tv = t.value(target);
  require_same_shape(xv, tv, "mean_abs_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T d = xv[i] - tv[i];
    t.log_branch(static_cast<std::uint8_t>((d > T(0)) + 2 * (d < T(0))));
    s += std::abs(static_cast<double>(d));
  }
  Tensor<T> out(std::vector<int>{1}, static_cast<T>(s / static_cast<double>(xv.size())));
  return t.push(std::move(out), t.requires_grad(x) || t.requires_grad(target),
                [x, target](Tape<T>& tp, int self) {
                  const T g = tp.grad(Var{self})[0];
                  const auto& xv = tp.value(x);
                  const auto& tv = tp.value(target);
                  const T k = g / static_cast<T>(xv.size());
                  auto sgn = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
                  if (tp.requires_grad(x)) {
                    auto& dx = tp.grad(x);
                    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += k * sgn(xv[i] - tv[i]);
                  }
                  if (tp.requires_grad(target)) {
                    auto& dt = tp.grad(target);
                    for (std::size_t i = 0; i < xv.size(); ++i) dt[i] -= k * sgn(xv[i] - tv[i]);
                  }
                },
                "mean_abs_diff");
}

/// Frobenius norm of (M M^T - I). Gradient 2 (M M^T - I) M / norm, zero at norm 0.
template <typename T>
Var orthonormality(Tape<T>& t, Var m) {
  const auto& mv = t.value(m);
  if (mv.rank() != 2 || mv.dim(0) != mv.dim(1)) {
    throw usage_error("bad_shape", "orthonormality needs a square matrix");
  }
  const int n = mv.dim(0);
  auto residual = [n](const Tensor<T>& mm) {
    std::vector<double> r(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int k = 0; k < n; ++k) s += static_cast<double>(mm[i * n + k]) * mm[j * n + k];
        r[static_cast<std::size_t>(i) * n + j] = s - (i == j ? 1.0 : 0.0);
      }
    return r;
  };
  const auto r = residual(mv);
  double ss = 0;
  for (double v : r) ss += v * v;
  Tensor<T> out(std::vector<int>{1}, static_cast<T>(std::sqrt(ss)));
  return t.push(std::move(out), t.requires_grad(m),
                [m, n, residual](Tape<T>& tp, int self) {
                  const T g = tp.grad(Var{self})[0];
                  const T f = tp.value(Var{self})[0];
                  if (!(f > T(0))) return;
                  const auto& mv = tp.value(m);
                  const auto r = residual(mv);
                  auto& dm = tp.grad(m);
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                      double s = 0;
                      for (int k = 0; k < n; ++k) s += r[static_cast<std::size_t>(i) * n + k] * mv[k * n + j];
                      dm[i * n + j] += static_cast<T>(2.0 * s) * g / f;
                    }
                },
                "orthonormality");
}

}  // namespace rawdn::ad
