#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evoprompt/errors.hpp"
#include "evoprompt/tensor.hpp"

namespace evoprompt {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  inline bool tracks_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive operations. backward() replays the record
/// in reverse, visiting each node once, and accumulates into the grad
/// buffers of the parameter tensors that were registered with param().
class Tape {
 public:
  /// Receives the output gradient of node `self` and pushes it to inputs.
  using Backward = std::function<void(Tape&, std::size_t self, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node& n = push();
    n.owned = std::move(value);
    check_finite(n.owned, "constant");
    return {this, nodes_.size() - 1};
  }

  /// Borrows `t` without copying. `t` must outlive the tape.
  Var constant_ref(const Tensor& t) {
    Node& n = push();
    n.ref = &t;
    return {this, nodes_.size() - 1};
  }

  /// Borrows a parameter. Gradients flow into t.grad() when t.requires_grad().
  Var param(Tensor& t) {
    Node& n = push();
    n.ref = &t;
    if (t.requires_grad()) {
      n.param = &t;
      n.needs_grad = true;
    }
    return {this, nodes_.size() - 1};
  }

  /// Records an operation result. Inputs that do not track gradients are
  /// skipped by the backward rule through grad_sink().
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn, const char* op) {
    return record_span(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn), op);
  }

  Var record_span(Tensor value, std::span<const Var> inputs, Backward fn, const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw ContractError(std::string(op) + ": operand from another tape");
      needs = needs || nodes_[v.id()].needs_grad;
    }
    Node& n = push();
    n.owned = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(fn);
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  bool tracks_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of an input node, allocated on first use; empty when
  /// the node does not track gradients.
  std::span<double> grad_sink(const Var& v) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return {};
    if (n.grad.empty()) n.grad.assign(value(v.id()).size(), 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Number of backward rules run by the most recent backward() call.
  std::size_t last_backward_visits() const { return visits_; }

  void backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss recorded on another tape");
    if (!value(loss.id()).is_scalar()) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) {
      n.grad.clear();
    }
    visits_ = 0;
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad.assign(1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        ++visits_;
        n.backward(*this, i, n.grad);
      }
      if (n.param) {
        auto dst = n.param->grad();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* param = nullptr;
    bool needs_grad = false;
    Backward backward;
    std::vector<double> grad;
  };

  Node& push() { return nodes_.emplace_back(); }

  static void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  }

  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::tracks_grad() const { return tape_->tracks_grad(id_); }

namespace kernel {

// C (n x m) += A (n x k) * B (k x m)
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (n x m) += A (n x k) * B^T, B is (m x k)
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] += s;
    }
  }
}

// C (k x m) += A^T * B, A is (n x k), B is (n x m)
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace kernel

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_scalar(const Tensor& a, const char* op) {
  if (!a.is_scalar()) throw DimensionError(std::string(op) + ": expected scalar, got " + shape_str(a.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  kernel::gemm_nn(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable primitives.

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out = matmul(A, B);
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        const Tensor& A = a.value();
        const Tensor& B = b.value();
        const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
        if (auto da = t.grad_sink(a); !da.empty()) kernel::gemm_nt(g.data(), B.data(), da.data(), n, m, k);
        if (auto db = t.grad_sink(b); !db.empty()) kernel::gemm_tn(A.data(), g.data(), db.data(), n, k, m);
      },
      "matmul");
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(A.rows(), B.rows());
  kernel::gemm_nt(A.data(), B.data(), out.data(), A.rows(), A.cols(), B.rows());
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        const Tensor& A = a.value();
        const Tensor& B = b.value();
        const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
        if (auto da = t.grad_sink(a); !da.empty()) kernel::gemm_nn(g.data(), B.data(), da.data(), n, m, k);
        if (auto db = t.grad_sink(b); !db.empty()) kernel::gemm_tn(g.data(), A.data(), db.data(), n, m, k);
      },
      "matmul_nt");
}

inline Var transpose(const Var& a) {
  return a.tape().record(transpose(a.value()), {a},
      [a](Tape& t, std::size_t, std::span<const double> g) {
        auto da = t.grad_sink(a);
        const std::size_t r = a.rows(), c = a.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
      },
      "transpose");
}

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        for (const Var& v : {a, b}) {
          auto d = t.grad_sink(v);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
      },
      "add");
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        if (auto d = t.grad_sink(a); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        if (auto d = t.grad_sink(b); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
      },
      "sub");
}

/// Element-wise product.
inline Var hadamard(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        if (auto d = t.grad_sink(a); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b.value()[i];
        if (auto d = t.grad_sink(b); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a.value()[i];
      },
      "hadamard");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

/// a + 1 r, with r a 1 x n row broadcast over the rows of a.
inline Var add_row(const Var& a, const Var& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) {
    throw DimensionError("add_row: " + shape_str(a.value().shape()) + " + " + shape_str(r.value().shape()));
  }
  Tensor out = a.value();
  const std::size_t c = out.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += r.value()[i % c];
  return a.tape().record(std::move(out), {a, r},
      [a, r](Tape& t, std::size_t, std::span<const double> g) {
        if (auto d = t.grad_sink(a); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        if (auto d = t.grad_sink(r); !d.empty()) {
          const std::size_t c = d.size();
          for (std::size_t i = 0; i < g.size(); ++i) d[i % c] += g[i];
        }
      },
      "add_row");
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return a.tape().record(std::move(out), {a},
      [a, c](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += c * g[i];
      },
      "scale");
}

inline Var operator*(double c, const Var& a) { return scale(a, c); }

inline Var add_const(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += c;
  return a.tape().record(std::move(out), {a},
      [a](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      },
      "add_const");
}

/// s * a for a 1 x 1 tensor s.
inline Var scalar_mul(const Var& s, const Var& a) {
  require_scalar(s.value(), "scalar_mul");
  const double sv = s.item();
  Tensor out = a.value();
  for (auto& v : out.values()) v *= sv;
  return a.tape().record(std::move(out), {s, a},
      [s, a](Tape& t, std::size_t, std::span<const double> g) {
        if (auto d = t.grad_sink(s); !d.empty()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
          d[0] += acc;
        }
        if (auto d = t.grad_sink(a); !d.empty()) {
          const double sv = s.item();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += sv * g[i];
        }
      },
      "scalar_mul");
}

/// a / s for a 1 x 1 tensor s (quotient rule in both operands).
inline Var div_scalar(const Var& a, const Var& s) {
  require_scalar(s.value(), "div_scalar");
  const double sv = s.item();
  if (sv == 0.0) throw NumericError("div_scalar: division by zero");
  Tensor out = a.value();
  for (auto& v : out.values()) v /= sv;
  return a.tape().record(std::move(out), {a, s},
      [a, s](Tape& t, std::size_t, std::span<const double> g) {
        const double sv = s.item();
        if (auto d = t.grad_sink(a); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] / sv;
        if (auto d = t.grad_sink(s); !d.empty()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
          d[0] -= acc / (sv * sv);
        }
      },
      "div_scalar");
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a},
      [a](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        for (auto& v : d) v += g[0];
      },
      "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Column means as a 1 x n row.
inline Var mean_rows(const Var& a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += A(i, j);
  for (auto& v : out.values()) v /= static_cast<double>(r);
  return a.tape().record(std::move(out), {a},
      [a](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        const std::size_t r = a.rows(), c = a.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j] / static_cast<double>(r);
      },
      "mean_rows");
}

/// a - 1 r, the row-broadcast subtraction.
inline Var sub_row(const Var& a, const Var& r) { return add_row(a, scale(r, -1.0)); }

inline Var trace(const Var& a) {
  const Tensor& A = a.value();
  if (A.rows() != A.cols()) throw DimensionError("trace: non-square " + shape_str(A.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < A.rows(); ++i) s += A(i, i);
  return a.tape().record(Tensor::scalar(s), {a},
      [a](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        const std::size_t n = a.rows();
        for (std::size_t i = 0; i < n; ++i) d[i * n + i] += g[0];
      },
      "trace");
}

/// Square root of the sum of squared entries. The gradient at the zero
/// matrix is taken as zero.
inline Var frobenius_norm(const Var& m) {
  const Tensor& M = m.value();
  if (M.empty()) throw DimensionError("frobenius_norm: empty matrix");
  double s = 0.0;
  for (double v : M.values()) s += v * v;
  const double norm = std::sqrt(s);
  return m.tape().record(Tensor::scalar(norm), {m},
      [m](Tape& t, std::size_t self, std::span<const double> g) {
        const double norm = t.value(self).item();
        if (norm == 0.0) return;
        auto d = t.grad_sink(m);
        const auto& M = m.value();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * M[i] / norm;
      },
      "frobenius_norm");
}

inline constexpr double kDefaultNormEps = 1e-8;

/// M / (||M||_F + eps), differentiated through numerator and denominator.
inline Var normalize_frobenius(const Var& m, double eps = kDefaultNormEps) {
  if (!(eps > 0.0)) throw ParameterError("normalize_frobenius: eps must be positive");
  return div_scalar(m, add_const(frobenius_norm(m), eps));
}

/// Concatenates along rows; all parts share a column count.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    r += p.rows();
  }
  Tensor out = Tensor::matrix(r, c);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record_span(std::move(out), inputs,
      [inputs](Tape& t, std::size_t, std::span<const double> g) {
        std::size_t off = 0;
        for (const Var& p : inputs) {
          const std::size_t n = p.value().size();
          if (auto d = t.grad_sink(p); !d.empty())
            for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
          off += n;
        }
      },
      "concat_rows");
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  if (count == 0 || begin + count > A.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         shape_str(A.shape()));
  }
  const std::size_t c = A.cols();
  std::vector<double> v(A.data() + begin * c, A.data() + (begin + count) * c);
  return a.tape().record(Tensor({count, c}, std::move(v)), {a},
      [a, begin](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(a);
        const std::size_t off = begin * a.cols();
        for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
      },
      "slice_rows");
}

/// Per-row layer normalization with affine gamma/beta (both 1 x n).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  if (gamma.cols() != c || beta.cols() != c || gamma.rows() != 1 || beta.rows() != 1) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(c));
  }
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += X(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (X(i, j) - mu) * is;
      (*xhat)[i * c + j] = h;
      out(i, j) = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std](Tape& t, std::size_t, std::span<const double> g) {
        const std::size_t r = x.rows(), c = x.cols();
        const auto& gm = gamma.value();
        if (auto dg = t.grad_sink(gamma); !dg.empty())
          for (std::size_t i = 0; i < r * c; ++i) dg[i % c] += g[i] * (*xhat)[i];
        if (auto db = t.grad_sink(beta); !db.empty())
          for (std::size_t i = 0; i < r * c; ++i) db[i % c] += g[i];
        if (auto dx = t.grad_sink(x); !dx.empty()) {
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[i * c + j] * gm[j];
              m1 += dh;
              m2 += dh * (*xhat)[i * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[i * c + j] * gm[j];
              dx[i * c + j] += (*inv_std)[i] * (dh - m1 - (*xhat)[i * c + j] * m2);
            }
          }
        }
      },
      "layer_norm");
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x.tape().record(std::move(out), {x},
      [x](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(x);
        const auto& X = x.value();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double v = X[i];
          const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
          d[i] += g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
        }
      },
      "gelu");
}

/// Multi-head scaled dot-product attention over q, k, v (all S x D); heads
/// split the columns. With `causal`, row i attends to columns j <= i only.
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, bool causal) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t s = Q.rows(), dm = Q.cols();
  if (K.rows() != s || V.rows() != s || K.cols() != dm || V.cols() != dm) {
    throw DimensionError("attention: q/k/v shapes differ");
  }
  if (heads == 0 || dm % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t dh = dm / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(heads * s * s, 0.0);
  Tensor out = Tensor::matrix(s, dm);
  std::vector<double> row(s);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    double* P = probs->data() + h * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t jmax = causal ? i + 1 : s;
      double m = -INFINITY;
      for (std::size_t j = 0; j < jmax; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < dh; ++p) acc += Q(i, c0 + p) * K(j, c0 + p);
        row[j] = acc * sc;
        m = std::max(m, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < jmax; ++j) {
        row[j] = std::exp(row[j] - m);
        z += row[j];
      }
      for (std::size_t j = 0; j < jmax; ++j) {
        const double a = row[j] / z;
        P[i * s + j] = a;
        for (std::size_t p = 0; p < dh; ++p) out(i, c0 + p) += a * V(j, c0 + p);
      }
    }
  }
  return q.tape().record(std::move(out), {q, k, v},
      [q, k, v, heads, causal, sc, probs](Tape& t, std::size_t, std::span<const double> g) {
        const Tensor& Q = q.value();
        const Tensor& K = k.value();
        const Tensor& V = v.value();
        const std::size_t s = Q.rows(), dm = Q.cols(), dh = dm / heads;
        auto dq = t.grad_sink(q);
        auto dk = t.grad_sink(k);
        auto dv = t.grad_sink(v);
        std::vector<double> dA(s), dS(s);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          const double* P = probs->data() + h * s * s;
          for (std::size_t i = 0; i < s; ++i) {
            const std::size_t jmax = causal ? i + 1 : s;
            const double* gi = g.data() + i * dm + c0;
            double dot = 0.0;
            for (std::size_t j = 0; j < jmax; ++j) {
              const double a = P[i * s + j];
              double acc = 0.0;
              for (std::size_t p = 0; p < dh; ++p) acc += gi[p] * V(j, c0 + p);
              dA[j] = acc;
              dot += acc * a;
              if (!dv.empty())
                for (std::size_t p = 0; p < dh; ++p) dv[j * dm + c0 + p] += a * gi[p];
            }
            for (std::size_t j = 0; j < jmax; ++j) dS[j] = P[i * s + j] * (dA[j] - dot) * sc;
            for (std::size_t j = 0; j < jmax; ++j) {
              const double ds = dS[j];
              if (ds == 0.0) continue;
              if (!dq.empty())
                for (std::size_t p = 0; p < dh; ++p) dq[i * dm + c0 + p] += ds * K(j, c0 + p);
              if (!dk.empty())
                for (std::size_t p = 0; p < dh; ++p) dk[j * dm + c0 + p] += ds * Q(i, c0 + p);
            }
          }
        }
      },
      "attention");
}

/// Divides every row by its Euclidean norm. Zero rows are rejected.
inline Var row_normalize(const Var& x) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  auto norms = std::make_shared<std::vector<double>>(r);
  Tensor out = X;
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += X(i, j) * X(i, j);
    const double n = std::sqrt(s);
    if (n == 0.0) throw NumericError("row_normalize: zero-norm row " + std::to_string(i));
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= n;
  }
  return x.tape().record(std::move(out), {x},
      [x, norms](Tape& t, std::size_t self, std::span<const double> g) {
        auto d = t.grad_sink(x);
        const Tensor& Y = t.value(self);
        const std::size_t r = Y.rows(), c = Y.cols();
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y(i, j);
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += (g[i * c + j] - dot * Y(i, j)) / (*norms)[i];
        }
      },
      "row_normalize");
}

/// Row-wise dot products of equally shaped a and b, as an r x 1 column.
inline Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "row_dot");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.value()(i, j) * b.value()(i, j);
  return a.tape().record(std::move(out), {a, b},
      [a, b](Tape& t, std::size_t, std::span<const double> g) {
        const std::size_t c = a.cols();
        if (auto d = t.grad_sink(a); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i / c] * b.value()[i];
        if (auto d = t.grad_sink(b); !d.empty())
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i / c] * a.value()[i];
      },
      "row_dot");
}

/// Element-wise clamp to [lo, hi]; gradient passes only inside the range.
inline Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return x.tape().record(std::move(out), {x},
      [x, lo, hi](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(x);
        const auto& X = x.value();
        for (std::size_t i = 0; i < d.size(); ++i)
          if (X[i] >= lo && X[i] <= hi) d[i] += g[i];
      },
      "clamp");
}

namespace detail {

// Max-shifted log-sum-exp of one row; log1p keeps tiny tails exact.
inline double log_sum_exp(const double* x, std::size_t n) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (x[j] > x[arg]) arg = j;
  const double m = x[arg];
  double tail = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    if (j != arg) tail += std::exp(x[j] - m);
  return m + std::log1p(tail);
}

}  // namespace detail

/// Row-wise log-softmax.
inline Var log_softmax_rows(const Var& x) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  Tensor out = X;
  for (std::size_t i = 0; i < r; ++i) {
    const double lse = detail::log_sum_exp(X.data() + i * c, c);
    for (std::size_t j = 0; j < c; ++j) out(i, j) -= lse;
  }
  return x.tape().record(std::move(out), {x},
      [x](Tape& t, std::size_t self, std::span<const double> g) {
        auto d = t.grad_sink(x);
        const Tensor& Y = t.value(self);
        const std::size_t r = Y.rows(), c = Y.cols();
        for (std::size_t i = 0; i < r; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[i * c + j] - std::exp(Y(i, j)) * gs;
        }
      },
      "log_softmax_rows");
}

/// Row-wise softmax of x / tau with max-shift.
inline Var softmax_temperature(const Var& scores, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax_temperature: tau must be positive");
  const Tensor& X = scores.value();
  const std::size_t r = X.rows(), c = X.cols();
  Tensor out = X;
  for (std::size_t i = 0; i < r; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, X(i, j) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = std::exp(X(i, j) / tau - m);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
  }
  return scores.tape().record(std::move(out), {scores},
      [scores, tau](Tape& t, std::size_t self, std::span<const double> g) {
        auto d = t.grad_sink(scores);
        const Tensor& P = t.value(self);
        const std::size_t r = P.rows(), c = P.cols();
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * P(i, j);
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += P(i, j) * (g[i * c + j] - dot) / tau;
        }
      },
      "softmax_temperature");
}

/// Mean over rows of -logp[i, labels[i]].
inline Var nll(const Var& logp, std::span<const int> labels) {
  const Tensor& L = logp.value();
  if (labels.size() != L.rows()) throw DimensionError("nll: label count does not match rows");
  const std::size_t c = L.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw InputError("nll: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    s -= L(i, static_cast<std::size_t>(labels[i]));
  }
  const double n = static_cast<double>(labels.size());
  std::vector<int> lab(labels.begin(), labels.end());
  return logp.tape().record(Tensor::scalar(s / n), {logp},
      [logp, lab, n](Tape& t, std::size_t, std::span<const double> g) {
        auto d = t.grad_sink(logp);
        const std::size_t c = logp.cols();
        for (std::size_t i = 0; i < lab.size(); ++i) d[i * c + static_cast<std::size_t>(lab[i])] -= g[0] / n;
      },
      "nll");
}

/// Unbiased batch covariance of B x d features: centered^T centered / (B-1).
inline Var batch_covariance(const Var& f) {
  const std::size_t b = f.rows();
  if (b < 2) throw DimensionError("batch_covariance: degenerate batch of " + std::to_string(b) + " rows");
  Var centered = sub_row(f, mean_rows(f));
  Var prod = matmul(transpose(centered), centered);
  return scale(prod, 1.0 / static_cast<double>(b - 1));
}

// ---------------------------------------------------------------------------
// Value-only conveniences over plain tensors.

inline double frobenius_norm(const Tensor& m) {
  Tape t;
  return frobenius_norm(t.constant_ref(m)).item();
}

inline Tensor normalize_frobenius(const Tensor& m, double eps = kDefaultNormEps) {
  Tape t;
  return normalize_frobenius(t.constant_ref(m), eps).value();
}

inline Tensor batch_covariance(const Tensor& f) {
  Tape t;
  return batch_covariance(t.constant_ref(f)).value();
}

inline Tensor softmax_temperature(const Tensor& scores, double tau) {
  Tape t;
  return softmax_temperature(t.constant_ref(scores), tau).value();
}

}  // namespace evoprompt
