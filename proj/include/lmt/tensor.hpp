#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmt/rng.hpp"

namespace lmt {

class Tape;

// Dense row-major 64-bit tensor. Value-semantic: copying copies the data.
// A tensor recorded on a tape additionally carries (tape, tape_id); copies
// share the node identity, so gradients accumulate to the same slot.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  Tape* tape = nullptr;
  int tape_id = -1;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(check_shape(shape), 0.0);
  }

  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (check_shape(shape) != data.size())
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str());
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor randn(std::vector<std::size_t> s, Rng& rng, double sd = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = rng.normal(0.0, sd);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }

  // rank-2 view helpers; rank-1 tensors are treated as a single row
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : numel(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double value() const {
    if (!is_scalar()) throw std::logic_error("Tensor::value: not a scalar");
    return data[0];
  }

  bool tracked() const;
  void detach() {
    tape = nullptr;
    tape_id = -1;
    requires_grad = false;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "x" : "");
    os << ']';
    return os.str();
  }

 private:
  static std::size_t check_shape(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension");
      n *= d;
    }
    return n;
  }
};

// Records the forward pass of one training step. Each op appends a node for
// its output plus a closure implementing the local gradient rule; backward()
// replays the closures in reverse, which visits every node exactly once
// because records are appended in topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf. Gradients for watched tensors survive backward() and
  // are read back via grad().
  void watch(Tensor& t) {
    t.requires_grad = true;
    t.tape = this;
    t.tape_id = new_node(t.numel());
  }

  bool recording() const { return pause_depth_ == 0; }

  int new_node(std::size_t size) {
    nodes_.push_back(Node{std::vector<double>(), size});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void record(std::function<void(Tape&)> backward_fn) {
    records_.push_back(std::move(backward_fn));
  }

  // Gradient accumulation slot for a node; allocated lazily during backward.
  std::span<double> grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.size, 0.0);
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(const Tensor& loss) {
    if (loss.tape != this || loss.tape_id < 0)
      throw std::invalid_argument("backward: loss is not on this tape");
    if (!loss.is_scalar())
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  loss.shape_str());
    grad_of(loss.tape_id)[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)(*this);
  }

  std::span<const double> grad(const Tensor& t) {
    if (t.tape != this || t.tape_id < 0)
      throw std::invalid_argument("grad: tensor is not on this tape");
    return grad_of(t.tape_id);
  }

  // Drops all nodes and records; watched tensors must be re-watched.
  void reset() {
    nodes_.clear();
    records_.clear();
  }

  std::size_t num_records() const { return records_.size(); }

 private:
  friend class NoGradGuard;
  struct Node {
    std::vector<double> grad;
    std::size_t size = 0;
  };
  std::vector<Node> nodes_;
  std::vector<std::function<void(Tape&)>> records_;
  int pause_depth_ = 0;
};

namespace detail {
// Per-thread recording pause; each training run stays on one thread.
inline thread_local int g_pause_depth = 0;
}  // namespace detail

inline bool Tensor::tracked() const {
  return detail::g_pause_depth == 0 && tape != nullptr && tape_id >= 0 &&
         tape->recording();
}

// Suspends recording for the guard's lifetime; ops computed under the guard
// produce detached outputs. The default form pauses every tape on the
// current thread, the tape form pauses just that tape.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::g_pause_depth; }
  explicit NoGradGuard(Tape& tape) : tape_(&tape) { ++tape_->pause_depth_; }
  ~NoGradGuard() {
    if (tape_)
      --tape_->pause_depth_;
    else
      --detail::g_pause_depth;
  }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* tape_ = nullptr;
};

namespace detail {

using EigenMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMatrix>;
using ConstMatMap = Eigen::Map<const EigenMatrix>;

inline ConstMatMap as_matrix(const std::vector<double>& v, std::size_t r,
                             std::size_t c) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(c));
}

inline MatMap as_matrix(std::span<double> v, std::size_t r, std::size_t c) {
  return MatMap(v.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(c));
}

inline ConstMatMap as_matrix(std::span<const double> v, std::size_t r,
                             std::size_t c) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(c));
}

// Picks the tape shared by the tracked operands; throws if two operands
// disagree. Returns nullptr when nothing is tracked (or recording is paused).
inline Tape* result_tape(std::initializer_list<const Tensor*> ins) {
  Tape* tape = nullptr;
  for (const Tensor* t : ins) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape)
      throw std::invalid_argument("op: operands recorded on different tapes");
    tape = t->tape;
  }
  return tape;
}

inline void attach_output(Tensor& out, Tape* tape) {
  if (tape == nullptr) return;
  out.tape = tape;
  out.tape_id = tape->new_node(out.numel());
  out.requires_grad = true;
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io](Tape& t) {
      auto go = t.grad_of(io);
      if (ia >= 0) {
        auto ga = t.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        auto gb = t.grad_of(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io](Tape& t) {
      auto go = t.grad_of(io);
      if (ia >= 0) {
        auto ga = t.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        auto gb = t.grad_of(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io, av = a.data, bv = b.data](Tape& t) {
      auto go = t.grad_of(io);
      if (ia >= 0) {
        auto ga = t.grad_of(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (ib >= 0) {
        auto gb = t.grad_of(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tape* tape = detail::result_tape({&a});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * c;
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tape_id, io = out.tape_id;
    tape->record([ia, io, c](Tape& t) {
      auto go = t.grad_of(io);
      auto ga = t.grad_of(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tape* tape = detail::result_tape({&a});
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + c;
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tape_id, io = out.tape_id;
    tape->record([ia, io](Tape& t) {
      auto go = t.grad_of(io);
      auto ga = t.grad_of(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

// C[m x n] = A[m x k] * B[k x n]. Backward: dA = dC * B^T, dB = A^T * dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 operands, got " +
                                a.shape_str() + " and " + b.shape_str());
  if (a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                a.shape_str() + " vs " + b.shape_str());
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tape* tape = detail::result_tape({&a, &b});
  Tensor out({m, n});
  detail::as_matrix(std::span<double>(out.data), m, n).noalias() =
      detail::as_matrix(a.data, m, k) * detail::as_matrix(b.data, k, n);
  detail::attach_output(out, tape);
  if (tape) {
    const int ia = a.tracked() ? a.tape_id : -1;
    const int ib = b.tracked() ? b.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ia, ib, io, m, k, n, av = a.data, bv = b.data](Tape& t) {
      auto go = detail::as_matrix(std::span<const double>(t.grad_of(io)), m, n);
      if (ia >= 0) {
        auto ga = detail::as_matrix(t.grad_of(ia), m, k);
        ga.noalias() += go * detail::as_matrix(bv, k, n).transpose();
      }
      if (ib >= 0) {
        auto gb = detail::as_matrix(t.grad_of(ib), k, n);
        gb.noalias() += detail::as_matrix(av, m, k).transpose() * go;
      }
    });
  }
  return out;
}

// Adds a length-c bias to every row of X[r x c].
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  if (x.rank() != 2 || bias.numel() != c)
    throw std::invalid_argument("add_rowwise: incompatible shapes " +
                                x.shape_str() + " and " + bias.shape_str());
  Tape* tape = detail::result_tape({&x, &bias});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + bias[j];
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tracked() ? x.tape_id : -1;
    const int ibias = bias.tracked() ? bias.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ix, ibias, io, r, c](Tape& t) {
      auto go = t.grad_of(io);
      if (ix >= 0) {
        auto gx = t.grad_of(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (ibias >= 0) {
        auto gb = t.grad_of(ibias);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
      }
    });
  }
  return out;
}

// Repeats a length-c row r times; backward sums gradients over the rows.
inline Tensor tile_rows(const Tensor& row, std::size_t r) {
  const std::size_t c = row.numel();
  if (row.rows() != 1)
    throw std::invalid_argument("tile_rows: expects a single row, got " +
                                row.shape_str());
  Tape* tape = detail::result_tape({&row});
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = row[j];
  detail::attach_output(out, tape);
  if (tape) {
    const int irow = row.tape_id, io = out.tape_id;
    tape->record([irow, io, r, c](Tape& t) {
      auto go = t.grad_of(io);
      auto gr = t.grad_of(irow);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += go[i * c + j];
    });
  }
  return out;
}

// Appends one constant column (no gradient flows into it).
inline Tensor concat_col(const Tensor& x, const std::vector<double>& col) {
  const std::size_t r = x.rows(), c = x.cols();
  if (x.rank() != 2 || col.size() != r)
    throw std::invalid_argument("concat_col: column length " +
                                std::to_string(col.size()) +
                                " does not match rows of " + x.shape_str());
  Tape* tape = detail::result_tape({&x});
  Tensor out({r, c + 1});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j);
    out.at(i, c) = col[i];
  }
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, r, c](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += go[i * (c + 1) + j];
    });
  }
  return out;
}

// Scales row i of X by v[i] (v is data, not differentiated).
inline Tensor rowscale(const Tensor& x, const std::vector<double>& v) {
  const std::size_t r = x.rows(), c = x.cols();
  if (v.size() != r)
    throw std::invalid_argument("rowscale: scale length " +
                                std::to_string(v.size()) +
                                " does not match rows of " + x.shape_str());
  Tape* tape = detail::result_tape({&x});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) * v[i];
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, r, c, v](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[i * c + j] * v[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tape* tape = detail::result_tape({&x});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, xv = x.data](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (xv[i] > 0.0) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tape* tape = detail::result_tape({&x});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, yv = out.data](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < go.size(); ++i)
        gx[i] += go[i] * (1.0 - yv[i] * yv[i]);
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tape* tape = detail::result_tape({&x});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, yv = out.data](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < go.size(); ++i)
        gx[i] += go[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

// Row-wise softmax (last axis); rank-1 input is treated as one row.
inline Tensor softmax(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tape* tape = detail::result_tape({&x});
  Tensor out(x.shape);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(x[i * c + j] - mx);
      sum += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
  }
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, r, c, yv = out.data](Tape& t) {
      auto go = t.grad_of(io);
      auto gx = t.grad_of(ix);
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          dot += go[i * c + j] * yv[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += yv[i * c + j] * (go[i * c + j] - dot);
      }
    });
  }
  return out;
}

enum class Activation { kRelu, kTanh, kSigmoid, kSoftmax };

inline Tensor activation(Activation kind, const Tensor& x) {
  switch (kind) {
    case Activation::kRelu: return relu(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kSoftmax: return softmax(x);
  }
  throw std::invalid_argument("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  Tape* tape = detail::result_tape({&x});
  Tensor out = Tensor::scalar(std::accumulate(x.data.begin(), x.data.end(), 0.0));
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io](Tape& t) {
      const double g = t.grad_of(io)[0];
      auto gx = t.grad_of(ix);
      for (double& v : gx) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) {
  Tape* tape = detail::result_tape({&x});
  const double n = static_cast<double>(x.numel());
  Tensor out =
      Tensor::scalar(std::accumulate(x.data.begin(), x.data.end(), 0.0) / n);
  detail::attach_output(out, tape);
  if (tape) {
    const int ix = x.tape_id, io = out.tape_id;
    tape->record([ix, io, n](Tape& t) {
      const double g = t.grad_of(io)[0] / n;
      auto gx = t.grad_of(ix);
      for (double& v : gx) v += g;
    });
  }
  return out;
}

// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside the logs.
inline constexpr double kProbClamp = 1e-7;

// Mean binary cross-entropy with soft targets in [0, 1]. `pred` holds
// post-sigmoid probabilities; the target is treated as data (no gradient).
inline Tensor bce_soft(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "bce_soft");
  Tape* tape = detail::result_tape({&pred});
  const double n = static_cast<double>(pred.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double p = std::clamp(pred[i], kProbClamp, 1.0 - kProbClamp);
    acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  Tensor out = Tensor::scalar(acc / n);
  detail::attach_output(out, tape);
  if (tape) {
    const int ip = pred.tape_id, io = out.tape_id;
    tape->record([ip, io, n, pv = pred.data, tv = target.data](Tape& t) {
      const double g = t.grad_of(io)[0] / n;
      auto gp = t.grad_of(ip);
      for (std::size_t i = 0; i < gp.size(); ++i) {
        if (pv[i] <= kProbClamp || pv[i] >= 1.0 - kProbClamp) continue;
        gp[i] += g * (-tv[i] / pv[i] + (1.0 - tv[i]) / (1.0 - pv[i]));
      }
    });
  }
  return out;
}

// Mean squared error; differentiable through both arguments.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "mse");
  Tape* tape = detail::result_tape({&pred, &target});
  const double n = static_cast<double>(pred.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / n);
  detail::attach_output(out, tape);
  if (tape) {
    const int ip = pred.tracked() ? pred.tape_id : -1;
    const int it = target.tracked() ? target.tape_id : -1;
    const int io = out.tape_id;
    tape->record([ip, it, io, n, pv = pred.data, tv = target.data](Tape& t) {
      const double g = 2.0 * t.grad_of(io)[0] / n;
      if (ip >= 0) {
        auto gp = t.grad_of(ip);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * (pv[i] - tv[i]);
      }
      if (it >= 0) {
        auto gt = t.grad_of(it);
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * (pv[i] - tv[i]);
      }
    });
  }
  return out;
}

enum class LossKind { kBceSoft, kMse };

inline Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target) {
  switch (kind) {
    case LossKind::kBceSoft: return bce_soft(pred, target);
    case LossKind::kMse: return mse(pred, target);
  }
  throw std::invalid_argument("loss: unknown kind");
}

// Mean over rows of the cross-entropy between row-wise softmax(logits) and a
// soft target distribution. Backward is the usual (softmax - target) / rows.
inline Tensor softmax_xent(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape(logits, target, "softmax_xent");
  const std::size_t r = logits.rows(), c = logits.cols();
  Tape* tape = detail::result_tape({&logits});
  std::vector<double> sm(logits.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double sumexp = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      sumexp += std::exp(logits[i * c + j] - mx);
    const double logz = mx + std::log(sumexp);
    for (std::size_t j = 0; j < c; ++j) {
      sm[i * c + j] = std::exp(logits[i * c + j] - logz);
      acc -= target[i * c + j] * (logits[i * c + j] - logz);
    }
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(r));
  detail::attach_output(out, tape);
  if (tape) {
    const int il = logits.tape_id, io = out.tape_id;
    tape->record([il, io, r, c, sm = std::move(sm), tv = target.data](Tape& t) {
      const double g = t.grad_of(io)[0] / static_cast<double>(r);
      auto gl = t.grad_of(il);
      for (std::size_t i = 0; i < gl.size(); ++i)
        gl[i] += g * (sm[i] - tv[i]);
    });
  }
  return out;
}

}  // namespace lmt
