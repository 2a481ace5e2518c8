#pragma once

// Reverse-mode differentiation over small dense matrices. A GradientTape
// records one forward pass as a list of nodes; each node owns its value and
// a closure that pushes its output gradient into its inputs. Trainable
// tensors enter as parameter leaves and their gradients are accumulated into
// a caller-owned buffer, so several tapes can run side by side.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "diffuse/error.hpp"

namespace diffuse::ad {

using Matrix = Eigen::MatrixXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), nullptr, -1, false); }

  /// Leaf bound to trainable tensor `index`; the tape reads it by reference.
  Var parameter(int index, const Matrix& value) { return push({}, &value, index, true); }

  const Matrix& value(Var v) const {
    const auto& n = node(v);
    return n.external ? *n.external : n.value;
  }
  double scalar(Var v) const {
    const auto& m = value(v);
    if (m.size() != 1) throw Error("tape: value is not a scalar");
    return m(0, 0);
  }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient slot of a node, zero-initialised on first touch.
  Matrix& grad(Var v) {
    auto& n = node(v);
    if (n.grad.size() == 0) {
      const auto& val = value(v);
      n.grad = Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  /// Records an op output. `back` runs during backward() only when some
  /// input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, std::function<void(GradientTape&)> back) {
    bool needs = false;
    for (auto in : inputs)
      if (in.valid()) needs = needs || node(in).requires_grad;
    Var out = push(std::move(value), nullptr, -1, needs);
    if (needs) nodes_[out.id].back = std::move(back);
    return out;
  }

  /// Seeds d root = 1 and walks the tape backwards, adding parameter
  /// gradients into `param_grads` (indexed like the parameter leaves).
  void backward(Var root, std::span<Matrix> param_grads) {
    if (nodes_.empty() || !root.valid()) throw Error("backward called without a recorded forward pass");
    if (value(root).size() != 1) throw Error("backward: root must be a scalar");
    if (backward_done_) throw Error("backward: tape already consumed");
    backward_done_ = true;
    grad(root).setOnes();
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param >= 0) {
        if (n.param >= static_cast<int>(param_grads.size())) throw Error("backward: gradient buffer too small");
        auto& dst = param_grads[n.param];
        if (dst.size() == 0) dst = Matrix::Zero(n.grad.rows(), n.grad.cols());
        dst += n.grad;
      } else if (n.back) {
        n.back(*this);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    std::function<void(GradientTape&)> back;
    int param = -1;
    bool requires_grad = false;
  };

  Var push(Matrix value, const Matrix* external, int param, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.param = param;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("tape: invalid variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {
inline void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}
}  // namespace detail

// --- elementwise and linear ops ---------------------------------------------

inline Var add(GradientTape& t, Var a, Var b) {
  detail::same_shape(t.value(a), t.value(b), "add");
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    if (t.requires_grad(a)) t.grad(a) += t.grad(out);
    if (t.requires_grad(b)) t.grad(b) += t.grad(out);
  });
}

inline Var sub(GradientTape& t, Var a, Var b) {
  detail::same_shape(t.value(a), t.value(b), "sub");
  return t.record(t.value(a) - t.value(b), {a, b}, [a, b, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    if (t.requires_grad(a)) t.grad(a) += t.grad(out);
    if (t.requires_grad(b)) t.grad(b) -= t.grad(out);
  });
}

inline Var scale(GradientTape& t, Var a, double s) {
  return t.record(s * t.value(a), {a}, [a, s, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(a) += s * t.grad(out);
  });
}

inline Var hadamard(GradientTape& t, Var a, Var b) {
  detail::same_shape(t.value(a), t.value(b), "hadamard");
  return t.record(t.value(a).cwiseProduct(t.value(b)), {a, b},
                  [a, b, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
                    const Matrix& g = t.grad(out);
                    if (t.requires_grad(a)) t.grad(a) += g.cwiseProduct(t.value(b));
                    if (t.requires_grad(b)) t.grad(b) += g.cwiseProduct(t.value(a));
                  });
}

inline Var square(GradientTape& t, Var a) {
  return t.record(t.value(a).cwiseAbs2(), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(a) += 2.0 * t.grad(out).cwiseProduct(t.value(a));
  });
}

inline Var matmul(GradientTape& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.cols() != vb.rows())
    throw Error("matmul: inner dimensions differ (" + std::to_string(va.cols()) + " vs " +
                std::to_string(vb.rows()) + ")");
  return t.record(va * vb, {a, b}, [a, b, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& g = t.grad(out);
    if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

inline Var transpose(GradientTape& t, Var a) {
  return t.record(t.value(a).transpose(), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(a) += t.grad(out).transpose();
  });
}

/// a + 1 * bias, with bias a 1 x cols row broadcast over rows.
inline Var add_row(GradientTape& t, Var a, Var bias) {
  const auto& va = t.value(a);
  const auto& vb = t.value(bias);
  if (vb.rows() != 1 || vb.cols() != va.cols()) throw Error("add_row: bias must be 1 x cols");
  Matrix v = va.rowwise() + vb.row(0);
  return t.record(std::move(v), {a, bias}, [a, bias, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& g = t.grad(out);
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(bias)) t.grad(bias) += g.colwise().sum();
  });
}

inline Var slice_cols(GradientTape& t, Var a, int offset, int width) {
  const auto& va = t.value(a);
  if (offset < 0 || width < 0 || offset + width > va.cols()) throw Error("slice_cols: out of range");
  return t.record(va.middleCols(offset, width), {a},
                  [a, offset, width, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
                    t.grad(a).middleCols(offset, width) += t.grad(out);
                  });
}

inline Var concat_cols(GradientTape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: nothing to concatenate");
  const auto rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (auto p : parts) {
    if (t.value(p).rows() != rows) throw Error("concat_cols: row counts differ");
    cols += t.value(p).cols();
  }
  Matrix v(rows, cols);
  Eigen::Index off = 0;
  for (auto p : parts) {
    const auto& vp = t.value(p);
    v.middleCols(off, vp.cols()) = vp;
    off += vp.cols();
  }
  bool needs = false;
  for (auto p : parts) needs = needs || t.requires_grad(p);
  Var dummy = needs ? parts[0] : Var{};
  for (auto p : parts)
    if (t.requires_grad(p)) dummy = p;
  return t.record(std::move(v), {dummy}, [parts, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& g = t.grad(out);
    Eigen::Index off = 0;
    for (auto p : parts) {
      const auto w = t.value(p).cols();
      if (t.requires_grad(p)) t.grad(p) += g.middleCols(off, w);
      off += w;
    }
  });
}

// --- nonlinearities -----------------------------------------------------------

inline Var relu(GradientTape& t, Var a) {
  return t.record(t.value(a).cwiseMax(0.0), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(a) += (t.value(a).array() > 0.0).cast<double>().matrix().cwiseProduct(t.grad(out));
  });
}

inline Var leaky_relu(GradientTape& t, Var a, double slope) {
  const auto& va = t.value(a);
  Matrix v = va.unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
  return t.record(std::move(v), {a}, [a, slope, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    Matrix d = t.value(a).unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
    t.grad(a) += d.cwiseProduct(t.grad(out));
  });
}

inline Var elu(GradientTape& t, Var a) {
  Matrix v = t.value(a).unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
  return t.record(std::move(v), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    Matrix d = t.value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); });
    t.grad(a) += d.cwiseProduct(t.grad(out));
  });
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Var sigmoid(GradientTape& t, Var a) {
  Matrix v = t.value(a).unaryExpr([](double x) { return sigmoid(x); });
  return t.record(std::move(v), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& s = t.value(out);
    t.grad(a) += s.cwiseProduct((1.0 - s.array()).matrix()).cwiseProduct(t.grad(out));
  });
}

/// Row-wise softmax. Rows whose mask entry is false become all-zero.
inline Matrix softmax_rows(const Matrix& x, const std::vector<std::uint8_t>* row_mask = nullptr) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (row_mask && !(*row_mask)[i]) {
      out.row(i).setZero();
      continue;
    }
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var softmax_rows(GradientTape& t, Var a, std::vector<std::uint8_t> row_mask) {
  Matrix v = softmax_rows(t.value(a), &row_mask);
  return t.record(std::move(v), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& s = t.value(out);
    const Matrix& g = t.grad(out);
    Eigen::VectorXd dots = s.cwiseProduct(g).rowwise().sum();
    t.grad(a) += s.cwiseProduct(g - dots.replicate(1, g.cols()));
  });
}

// --- reductions -----------------------------------------------------------------

/// Column-wise max over rows with mask true (all rows if mask is empty).
/// The gradient goes to the first maximising row.
inline Var readout_max(GradientTape& t, Var a, std::vector<std::uint8_t> row_mask) {
  const auto& va = t.value(a);
  std::vector<Eigen::Index> arg(va.cols(), -1);
  Matrix v(1, va.cols());
  for (Eigen::Index c = 0; c < va.cols(); ++c) {
    double best = 0.0;
    for (Eigen::Index r = 0; r < va.rows(); ++r) {
      if (!row_mask.empty() && !row_mask[r]) continue;
      if (arg[c] < 0 || va(r, c) > best) {
        best = va(r, c);
        arg[c] = r;
      }
    }
    if (arg[c] < 0) throw Error("readout_max: no rows selected");
    v(0, c) = best;
  }
  return t.record(std::move(v), {a}, [a, arg, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& g = t.grad(out);
    auto& ga = t.grad(a);
    for (std::size_t c = 0; c < arg.size(); ++c) ga(arg[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
  });
}

inline Var readout_sum(GradientTape& t, Var a, std::vector<std::uint8_t> row_mask) {
  const auto& va = t.value(a);
  Matrix v = Matrix::Zero(1, va.cols());
  for (Eigen::Index r = 0; r < va.rows(); ++r)
    if (row_mask.empty() || row_mask[r]) v += va.row(r);
  return t.record(std::move(v), {a}, [a, row_mask, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    const Matrix& g = t.grad(out);
    auto& ga = t.grad(a);
    for (Eigen::Index r = 0; r < ga.rows(); ++r)
      if (row_mask.empty() || row_mask[r]) ga.row(r) += g.row(0);
  });
}

inline Var sum_all(GradientTape& t, Var a) {
  Matrix v(1, 1);
  v(0, 0) = t.value(a).sum();
  return t.record(std::move(v), {a}, [a, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(a).array() += t.grad(out)(0, 0);
  });
}

// --- loss -------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

/// Binary cross-entropy with the prediction clamped to [1e-7, 1 - 1e-7].
inline double bce(double p, int label) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return label ? -std::log(q) : -std::log(1.0 - q);
}

/// d bce / d p; zero where the clamp is active.
inline double bce_grad(double p, int label) {
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  return label ? -1.0 / p : 1.0 / (1.0 - p);
}

inline Var bce(GradientTape& t, Var p, int label) {
  Matrix v(1, 1);
  v(0, 0) = bce(t.scalar(p), label);
  return t.record(std::move(v), {p}, [p, label, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(p)(0, 0) += t.grad(out)(0, 0) * bce_grad(t.scalar(p), label);
  });
}

/// BCE of sigmoid(logit), same clamped value as bce(sigmoid(z), label) but
/// with gradient sigmoid(z) - label everywhere, so saturated predictions
/// still receive a learning signal.
inline Var bce_with_logits(GradientTape& t, Var logit, int label) {
  if (t.value(logit).size() != 1) throw Error("bce_with_logits: logit must be 1x1");
  const double p = sigmoid(t.scalar(logit));
  Matrix v(1, 1);
  v(0, 0) = bce(p, label);
  return t.record(std::move(v), {logit}, [logit, p, label, out = Var{static_cast<int>(t.size())}](GradientTape& t) {
    t.grad(logit)(0, 0) += t.grad(out)(0, 0) * (p - (label ? 1.0 : 0.0));
  });
}

}  // namespace diffuse::ad
