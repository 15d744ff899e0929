#ifndef LLATTE_TAPE_HPP_
#define LLATTE_TAPE_HPP_

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/tensor.hpp"

namespace llatte {

// Reverse-mode autodiff on an eager tape. Every op evaluates immediately and
// appends one node; backward() walks the nodes once in reverse creation order,
// which is already a topological order because inputs must exist before use.
enum class OpKind {
  kLeaf,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kAddRow,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kGatherRows,
  kMaskedSoftmax,
  kRmsNorm,
  kSilu,
  kSigmoid,
  kLog,
  kClamp,
  kMeanAll,
  kSumAll,
  kMeanRows,
  kBceLogitsMean,
};

template <class S>
struct NodeT {
  OpKind op = OpKind::kLeaf;
  std::vector<int> inputs;
  TensorT<S> value;
  TensorT<S> grad;  // allocated at backward time for differentiable nodes
  bool requires_grad = false;

  // Op attributes. Which fields are meaningful depends on `op`.
  double alpha = 0.0;        // scale factor / scalar addend / clamp lo
  double beta = 0.0;         // clamp hi
  int i0 = 0, i1 = 0;        // slice bounds, or matmul transpose flags
  std::vector<int> idx;      // gather indices
  std::vector<uint8_t> keep; // softmax mask, 1 = position participates
  TensorT<S> aux;            // constant payload (labels/weights for BCE)
};

// Lightweight handle into a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class S>
class TapeT {
 public:
  using Tensor = TensorT<S>;
  using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const EMat>;
  using MapM = Eigen::Map<EMat>;

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const {
    const NodeT<S>& n = node(v);
    if (n.grad.data.empty()) throw ValueError("gradient not populated; run backward() first");
    return n.grad;
  }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  Var leaf(Tensor t, bool needs_grad = false) {
    t.grad_enabled = needs_grad;
    NodeT<S> n;
    n.op = OpKind::kLeaf;
    n.requires_grad = needs_grad;
    n.value = std::move(t);
    return push(std::move(n));
  }

  Var constant(Tensor t) { return leaf(std::move(t), false); }

  // C = op_a(A) * op_b(B), transposes applied logically.
  Var matmul_g(Var a, Var b, bool ta, bool tb) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_rank2(A, "matmul lhs");
    require_rank2(B, "matmul rhs");
    int am = ta ? A.cols() : A.rows(), ak = ta ? A.rows() : A.cols();
    int bk = tb ? B.cols() : B.rows(), bn = tb ? B.rows() : B.cols();
    if (ak != bk)
      throw ShapeError(strfmt("matmul inner dimensions differ: %s%s vs %s%s", A.shape_str().c_str(),
                              ta ? "^T" : "", B.shape_str().c_str(), tb ? "^T" : ""));
    Tensor out = Tensor::zeros({am, bn});
    MapC ma(A.data.data(), A.rows(), A.cols());
    MapC mb(B.data.data(), B.rows(), B.cols());
    MapM mo(out.data.data(), am, bn);
    if (!ta && !tb) mo.noalias() = ma * mb;
    else if (!ta && tb) mo.noalias() = ma * mb.transpose();
    else if (ta && !tb) mo.noalias() = ma.transpose() * mb;
    else mo.noalias() = ma.transpose() * mb.transpose();
    NodeT<S> n;
    n.op = OpKind::kMatMul;
    n.inputs = {a.id, b.id};
    n.i0 = ta ? 1 : 0;
    n.i1 = tb ? 1 : 0;
    n.value = std::move(out);
    return push_derived(std::move(n));
  }
  Var matmul(Var a, Var b) { return matmul_g(a, b, false, false); }
  Var matmul_nt(Var a, Var b) { return matmul_g(a, b, false, true); }
  Var matmul_tn(Var a, Var b) { return matmul_g(a, b, true, false); }

  Var add(Var a, Var b) { return binary_same_shape(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary_same_shape(OpKind::kSub, a, b); }
  Var mul(Var a, Var b) { return binary_same_shape(OpKind::kMul, a, b); }

  Var scale(Var a, double c) {
    NodeT<S> n = unary_node(OpKind::kScale, a);
    n.alpha = c;
    for (S& v : n.value.data) v = static_cast<S>(v * c);
    return push_derived(std::move(n));
  }

  Var add_scalar(Var a, double c) {
    NodeT<S> n = unary_node(OpKind::kAddScalar, a);
    n.alpha = c;
    for (S& v : n.value.data) v = static_cast<S>(v + c);
    return push_derived(std::move(n));
  }

  // A [m x n] plus row vector b [1 x n], broadcast over rows.
  Var add_row(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_rank2(A, "add_row lhs");
    if (B.rows() != 1 || B.cols() != A.cols())
      throw ShapeError(strfmt("add_row expects bias [1x%d], got %s", A.cols(), B.shape_str().c_str()));
    NodeT<S> n;
    n.op = OpKind::kAddRow;
    n.inputs = {a.id, b.id};
    n.value = A;
    for (int i = 0; i < A.rows(); ++i)
      for (int j = 0; j < A.cols(); ++j) n.value.at(i, j) += B.at(0, j);
    return push_derived(std::move(n));
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
    int cols = value(parts[0]).cols(), rows = 0;
    for (Var p : parts) {
      require_rank2(value(p), "concat_rows input");
      if (value(p).cols() != cols)
        throw ShapeError(strfmt("concat_rows column mismatch: %d vs %d", value(p).cols(), cols));
      rows += value(p).rows();
    }
    Tensor out = Tensor::zeros({rows, cols});
    int r = 0;
    NodeT<S> n;
    n.op = OpKind::kConcatRows;
    for (Var p : parts) {
      const Tensor& t = value(p);
      std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<size_t>(r) * cols);
      r += t.rows();
      n.inputs.push_back(p.id);
    }
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
    int rows = value(parts[0]).rows(), cols = 0;
    for (Var p : parts) {
      require_rank2(value(p), "concat_cols input");
      if (value(p).rows() != rows)
        throw ShapeError(strfmt("concat_cols row mismatch: %d vs %d", value(p).rows(), rows));
      cols += value(p).cols();
    }
    Tensor out = Tensor::zeros({rows, cols});
    NodeT<S> n;
    n.op = OpKind::kConcatCols;
    int c = 0;
    for (Var p : parts) {
      const Tensor& t = value(p);
      for (int i = 0; i < rows; ++i)
        std::copy(t.data.begin() + static_cast<size_t>(i) * t.cols(),
                  t.data.begin() + static_cast<size_t>(i + 1) * t.cols(),
                  out.data.begin() + static_cast<size_t>(i) * cols + c);
      c += t.cols();
      n.inputs.push_back(p.id);
    }
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  // Rows [r0, r1) of a rank-2 tensor.
  Var slice_rows(Var a, int r0, int r1) {
    const Tensor& A = value(a);
    require_rank2(A, "slice_rows input");
    if (r0 < 0 || r1 > A.rows() || r0 >= r1)
      throw ShapeError(strfmt("slice_rows [%d,%d) out of range for %d rows", r0, r1, A.rows()));
    Tensor out = Tensor::zeros({r1 - r0, A.cols()});
    std::copy(A.data.begin() + static_cast<size_t>(r0) * A.cols(),
              A.data.begin() + static_cast<size_t>(r1) * A.cols(), out.data.begin());
    NodeT<S> n;
    n.op = OpKind::kSliceRows;
    n.inputs = {a.id};
    n.i0 = r0;
    n.i1 = r1;
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Tensor& A = value(a);
    require_rank2(A, "slice_cols input");
    if (c0 < 0 || c1 > A.cols() || c0 >= c1)
      throw ShapeError(strfmt("slice_cols [%d,%d) out of range for %d cols", c0, c1, A.cols()));
    Tensor out = Tensor::zeros({A.rows(), c1 - c0});
    for (int i = 0; i < A.rows(); ++i)
      for (int j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
    NodeT<S> n;
    n.op = OpKind::kSliceCols;
    n.inputs = {a.id};
    n.i0 = c0;
    n.i1 = c1;
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  // Embedding lookup: out[i] = table[idx[i]]. Gradients scatter-add into the table.
  Var gather_rows(Var table, std::vector<int> idx) {
    const Tensor& T = value(table);
    require_rank2(T, "gather_rows table");
    if (idx.empty()) throw ShapeError("gather_rows with empty index list");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), T.cols()});
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= T.rows())
        throw ShapeError(strfmt("gather_rows index %d out of range [0,%d)", idx[i], T.rows()));
      std::copy(T.data.begin() + static_cast<size_t>(idx[i]) * T.cols(),
                T.data.begin() + static_cast<size_t>(idx[i] + 1) * T.cols(),
                out.data.begin() + i * T.cols());
    }
    NodeT<S> n;
    n.op = OpKind::kGatherRows;
    n.inputs = {table.id};
    n.idx = std::move(idx);
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  // Row-wise softmax over positions with keep=1. Positions with keep=0 get
  // probability exactly zero. A row with no kept position is a modeling bug,
  // so it is reported by row index rather than silently producing NaN.
  Var masked_softmax(Var a, std::vector<uint8_t> keep) {
    const Tensor& A = value(a);
    require_rank2(A, "masked_softmax input");
    if (keep.size() != A.data.size())
      throw ShapeError(strfmt("masked_softmax mask has %zu entries for %lld values", keep.size(),
                              A.numel()));
    Tensor out = Tensor::zeros({A.rows(), A.cols()});
    for (int i = 0; i < A.rows(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < A.cols(); ++j)
        if (keep[static_cast<size_t>(i) * A.cols() + j]) mx = std::max(mx, static_cast<double>(A.at(i, j)));
      if (!std::isfinite(mx)) throw ValueError(strfmt("masked_softmax row %d has every position masked", i));
      double z = 0.0;
      for (int j = 0; j < A.cols(); ++j) {
        if (!keep[static_cast<size_t>(i) * A.cols() + j]) continue;
        double e = std::exp(static_cast<double>(A.at(i, j)) - mx);
        out.at(i, j) = static_cast<S>(e);
        z += e;
      }
      for (int j = 0; j < A.cols(); ++j) out.at(i, j) = static_cast<S>(out.at(i, j) / z);
    }
    NodeT<S> n;
    n.op = OpKind::kMaskedSoftmax;
    n.inputs = {a.id};
    n.keep = std::move(keep);
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  Var softmax(Var a) {
    return masked_softmax(a, std::vector<uint8_t>(value(a).data.size(), uint8_t(1)));
  }

  // Row-wise RMS normalization with a learned per-column gain:
  //   y[i,j] = x[i,j] / sqrt(mean_j x[i,j]^2 + eps) * gain[j]
  Var rms_norm(Var a, Var gain, double eps = 1e-6) {
    const Tensor& A = value(a);
    const Tensor& G = value(gain);
    require_rank2(A, "rms_norm input");
    if (G.rows() != 1 || G.cols() != A.cols())
      throw ShapeError(strfmt("rms_norm gain must be [1x%d], got %s", A.cols(), G.shape_str().c_str()));
    Tensor out = Tensor::zeros({A.rows(), A.cols()});
    for (int i = 0; i < A.rows(); ++i) {
      double ms = 0.0;
      for (int j = 0; j < A.cols(); ++j) ms += static_cast<double>(A.at(i, j)) * A.at(i, j);
      double inv = 1.0 / std::sqrt(ms / A.cols() + eps);
      for (int j = 0; j < A.cols(); ++j) out.at(i, j) = static_cast<S>(A.at(i, j) * inv * G.at(0, j));
    }
    NodeT<S> n;
    n.op = OpKind::kRmsNorm;
    n.inputs = {a.id, gain.id};
    n.alpha = eps;
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  Var silu(Var a) {
    NodeT<S> n = unary_node(OpKind::kSilu, a);
    for (S& v : n.value.data) {
      double x = static_cast<double>(v);
      v = static_cast<S>(x / (1.0 + std::exp(-x)));
    }
    return push_derived(std::move(n));
  }

  Var sigmoid(Var a) {
    NodeT<S> n = unary_node(OpKind::kSigmoid, a);
    for (S& v : n.value.data) v = static_cast<S>(sigmoid_stable(static_cast<double>(v)));
    return push_derived(std::move(n));
  }

  Var logx(Var a) {
    NodeT<S> n = unary_node(OpKind::kLog, a);
    for (S& v : n.value.data) {
      if (v <= S(0)) throw ValueError(strfmt("log of nonpositive value %g", static_cast<double>(v)));
      v = static_cast<S>(std::log(static_cast<double>(v)));
    }
    return push_derived(std::move(n));
  }

  Var clamp(Var a, double lo, double hi) {
    if (!(lo < hi)) throw ValueError(strfmt("clamp bounds [%g,%g] are not increasing", lo, hi));
    NodeT<S> n = unary_node(OpKind::kClamp, a);
    n.alpha = lo;
    n.beta = hi;
    for (S& v : n.value.data) v = static_cast<S>(std::min(hi, std::max(lo, static_cast<double>(v))));
    return push_derived(std::move(n));
  }

  Var mean_all(Var a) { return reduce_all(OpKind::kMeanAll, a); }
  Var sum_all(Var a) { return reduce_all(OpKind::kSumAll, a); }

  // Column means: [m x n] -> [1 x n].
  Var mean_rows(Var a) {
    const Tensor& A = value(a);
    require_rank2(A, "mean_rows input");
    Tensor out = Tensor::zeros({1, A.cols()});
    for (int i = 0; i < A.rows(); ++i)
      for (int j = 0; j < A.cols(); ++j) out.at(0, j) += A.at(i, j);
    for (S& v : out.data) v = static_cast<S>(v / A.rows());
    NodeT<S> n;
    n.op = OpKind::kMeanRows;
    n.inputs = {a.id};
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  // Weighted mean of numerically stable binary cross-entropy over logits.
  // labels and weights are constants with one entry per logit; the result is
  //   sum_i w_i * bce(z_i, y_i) / sum_i w_i.
  Var bce_logits_mean(Var logits, const std::vector<double>& labels, const std::vector<double>& weights) {
    const Tensor& Z = value(logits);
    size_t m = Z.data.size();
    if (labels.size() != m || weights.size() != m)
      throw ShapeError(strfmt("bce_logits_mean: %zu logits, %zu labels, %zu weights", m, labels.size(),
                              weights.size()));
    double wsum = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ValueError(strfmt("negative loss weight %g", w));
      wsum += w;
    }
    if (wsum <= 0.0) throw ValueError("bce_logits_mean: all loss weights are zero");
    double acc = 0.0;
    for (size_t i = 0; i < m; ++i) {
      double z = static_cast<double>(Z.data[i]);
      double y = labels[i];
      if (y < 0.0 || y > 1.0) throw ValueError(strfmt("label %g outside [0,1]", y));
      acc += weights[i] * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    }
    NodeT<S> n;
    n.op = OpKind::kBceLogitsMean;
    n.inputs = {logits.id};
    n.value = Tensor::scalar(static_cast<S>(acc / wsum));
    n.aux = Tensor::zeros({static_cast<int>(m), 2});
    for (size_t i = 0; i < m; ++i) {
      n.aux.at(static_cast<int>(i), 0) = static_cast<S>(labels[i]);
      n.aux.at(static_cast<int>(i), 1) = static_cast<S>(weights[i]);
    }
    n.alpha = wsum;
    return push_derived(std::move(n));
  }

  // Reverse pass from a scalar loss. Populates grad for every node that
  // requires gradients; parameters the loss does not depend on keep zero
  // gradients, including the degenerate case of a constant loss.
  void backward(Var loss) {
    NodeT<S>& ln = node(loss);
    if (!ln.value.is_scalar())
      throw ShapeError(strfmt("backward requires a scalar loss, got %s", ln.value.shape_str().c_str()));
    for (NodeT<S>& n : nodes_)
      if (n.requires_grad) n.grad = Tensor::zeros(n.value.shape);
    if (!ln.requires_grad) return;
    ln.grad.data[0] = S(1);
    for (int id = loss.id; id >= 0; --id) {
      NodeT<S>& n = nodes_[id];
      if (!n.requires_grad || n.grad.data.empty()) continue;
      propagate(n);
    }
  }

  // Overflow-safe logistic, shared with scalar metric code outside the tape.
  static double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

 private:
  std::vector<NodeT<S>> nodes_;

  NodeT<S>& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw ValueError("variable is not on this tape");
    return nodes_[v.id];
  }
  const NodeT<S>& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw ValueError("variable is not on this tape");
    return nodes_[v.id];
  }

  Var push(NodeT<S> n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push_derived(NodeT<S> n) {
    n.requires_grad = false;
    for (int in : n.inputs)
      if (nodes_[in].requires_grad) n.requires_grad = true;
    return push(std::move(n));
  }

  NodeT<S> unary_node(OpKind op, Var a) {
    NodeT<S> n;
    n.op = op;
    n.inputs = {a.id};
    n.value = value(a);
    return n;
  }

  Var binary_same_shape(OpKind op, Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw ShapeError(strfmt("elementwise op on mismatched shapes %s vs %s", A.shape_str().c_str(),
                              B.shape_str().c_str()));
    NodeT<S> n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.value = A;
    for (size_t i = 0; i < A.data.size(); ++i) {
      if (op == OpKind::kAdd) n.value.data[i] = A.data[i] + B.data[i];
      else if (op == OpKind::kSub) n.value.data[i] = A.data[i] - B.data[i];
      else n.value.data[i] = A.data[i] * B.data[i];
    }
    return push_derived(std::move(n));
  }

  Var reduce_all(OpKind op, Var a) {
    const Tensor& A = value(a);
    double acc = 0.0;
    for (S v : A.data) acc += static_cast<double>(v);
    if (op == OpKind::kMeanAll) acc /= static_cast<double>(A.numel());
    NodeT<S> n;
    n.op = op;
    n.inputs = {a.id};
    n.value = Tensor::scalar(static_cast<S>(acc));
    return push_derived(std::move(n));
  }

  static void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(strfmt("%s must be rank 2, got %s", what, t.shape_str().c_str()));
  }

  // Accumulate dL/dinput for one node given dL/doutput in n.grad.
  void propagate(NodeT<S>& n) {
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatMul: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        NodeT<S>& b = nodes_[n.inputs[1]];
        MapC mg(n.grad.data.data(), n.grad.rows(), n.grad.cols());
        MapC ma(a.value.data.data(), a.value.rows(), a.value.cols());
        MapC mb(b.value.data.data(), b.value.rows(), b.value.cols());
        bool ta = n.i0 != 0, tb = n.i1 != 0;
        if (a.requires_grad) {
          MapM da(a.grad.data.data(), a.grad.rows(), a.grad.cols());
          if (!ta && !tb) da.noalias() += mg * mb.transpose();
          else if (!ta && tb) da.noalias() += mg * mb;
          else if (ta && !tb) da.noalias() += mb * mg.transpose();
          else da.noalias() += mb.transpose() * mg.transpose();
        }
        if (b.requires_grad) {
          MapM db(b.grad.data.data(), b.grad.rows(), b.grad.cols());
          if (!ta && !tb) db.noalias() += ma.transpose() * mg;
          else if (!ta && tb) db.noalias() += mg.transpose() * ma;
          else if (ta && !tb) db.noalias() += ma * mg;
          else db.noalias() += mg.transpose() * ma.transpose();
        }
        break;
      }
      case OpKind::kAdd: {
        for (int k = 0; k < 2; ++k) {
          NodeT<S>& in = nodes_[n.inputs[k]];
          if (!in.requires_grad) continue;
          for (size_t i = 0; i < n.grad.data.size(); ++i) in.grad.data[i] += n.grad.data[i];
        }
        break;
      }
      case OpKind::kSub: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        NodeT<S>& b = nodes_[n.inputs[1]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) a.grad.data[i] += n.grad.data[i];
        if (b.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) b.grad.data[i] -= n.grad.data[i];
        break;
      }
      case OpKind::kMul: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        NodeT<S>& b = nodes_[n.inputs[1]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) a.grad.data[i] += n.grad.data[i] * b.value.data[i];
        if (b.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) b.grad.data[i] += n.grad.data[i] * a.value.data[i];
        break;
      }
      case OpKind::kScale: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i)
            a.grad.data[i] += static_cast<S>(n.grad.data[i] * n.alpha);
        break;
      }
      case OpKind::kAddScalar: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) a.grad.data[i] += n.grad.data[i];
        break;
      }
      case OpKind::kAddRow: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        NodeT<S>& b = nodes_[n.inputs[1]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.grad.data.size(); ++i) a.grad.data[i] += n.grad.data[i];
        if (b.requires_grad)
          for (int i = 0; i < n.grad.rows(); ++i)
            for (int j = 0; j < n.grad.cols(); ++j) b.grad.at(0, j) += n.grad.at(i, j);
        break;
      }
      case OpKind::kConcatRows: {
        int r = 0;
        for (int in_id : n.inputs) {
          NodeT<S>& in = nodes_[in_id];
          int nr = in.value.rows();
          if (in.requires_grad)
            for (int i = 0; i < nr; ++i)
              for (int j = 0; j < n.grad.cols(); ++j) in.grad.at(i, j) += n.grad.at(r + i, j);
          r += nr;
        }
        break;
      }
      case OpKind::kConcatCols: {
        int c = 0;
        for (int in_id : n.inputs) {
          NodeT<S>& in = nodes_[in_id];
          int nc = in.value.cols();
          if (in.requires_grad)
            for (int i = 0; i < n.grad.rows(); ++i)
              for (int j = 0; j < nc; ++j) in.grad.at(i, j) += n.grad.at(i, c + j);
          c += nc;
        }
        break;
      }
      case OpKind::kSliceRows: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (a.requires_grad)
          for (int i = 0; i < n.grad.rows(); ++i)
            for (int j = 0; j < n.grad.cols(); ++j) a.grad.at(n.i0 + i, j) += n.grad.at(i, j);
        break;
      }
      case OpKind::kSliceCols: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (a.requires_grad)
          for (int i = 0; i < n.grad.rows(); ++i)
            for (int j = 0; j < n.grad.cols(); ++j) a.grad.at(i, n.i0 + j) += n.grad.at(i, j);
        break;
      }
      case OpKind::kGatherRows: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (a.requires_grad)
          for (size_t i = 0; i < n.idx.size(); ++i)
            for (int j = 0; j < n.grad.cols(); ++j)
              a.grad.at(n.idx[i], j) += n.grad.at(static_cast<int>(i), j);
        break;
      }
      case OpKind::kMaskedSoftmax: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        // dx_j = p_j * (g_j - sum_k g_k p_k), masked positions stay zero.
        for (int i = 0; i < n.grad.rows(); ++i) {
          double dot = 0.0;
          for (int j = 0; j < n.grad.cols(); ++j)
            dot += static_cast<double>(n.grad.at(i, j)) * n.value.at(i, j);
          for (int j = 0; j < n.grad.cols(); ++j) {
            if (!n.keep[static_cast<size_t>(i) * n.grad.cols() + j]) continue;
            a.grad.at(i, j) += static_cast<S>(n.value.at(i, j) * (static_cast<double>(n.grad.at(i, j)) - dot));
          }
        }
        break;
      }
      case OpKind::kRmsNorm: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        NodeT<S>& g = nodes_[n.inputs[1]];
        const Tensor& X = a.value;
        const Tensor& G = g.value;
        int cols = X.cols();
        for (int i = 0; i < X.rows(); ++i) {
          double ms = 0.0;
          for (int j = 0; j < cols; ++j) ms += static_cast<double>(X.at(i, j)) * X.at(i, j);
          double r = std::sqrt(ms / cols + n.alpha);
          double inv = 1.0 / r;
          double dot = 0.0;  // sum_k dy_k g_k x_k
          for (int j = 0; j < cols; ++j)
            dot += static_cast<double>(n.grad.at(i, j)) * G.at(0, j) * X.at(i, j);
          if (a.requires_grad)
            for (int j = 0; j < cols; ++j)
              a.grad.at(i, j) += static_cast<S>(inv * n.grad.at(i, j) * G.at(0, j) -
                                                X.at(i, j) * dot / (cols * r * r * r));
          if (g.requires_grad)
            for (int j = 0; j < cols; ++j)
              g.grad.at(0, j) += static_cast<S>(n.grad.at(i, j) * X.at(i, j) * inv);
        }
        break;
      }
      case OpKind::kSilu: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
          double x = static_cast<double>(a.value.data[i]);
          double s = sigmoid_stable(x);
          a.grad.data[i] += static_cast<S>(n.grad.data[i] * (s * (1.0 + x * (1.0 - s))));
        }
        break;
      }
      case OpKind::kSigmoid: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
          double s = static_cast<double>(n.value.data[i]);
          a.grad.data[i] += static_cast<S>(n.grad.data[i] * s * (1.0 - s));
        }
        break;
      }
      case OpKind::kLog: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        for (size_t i = 0; i < n.grad.data.size(); ++i)
          a.grad.data[i] += static_cast<S>(n.grad.data[i] / a.value.data[i]);
        break;
      }
      case OpKind::kClamp: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
          double x = static_cast<double>(a.value.data[i]);
          if (x > n.alpha && x < n.beta) a.grad.data[i] += n.grad.data[i];
        }
        break;
      }
      case OpKind::kMeanAll: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        S g = static_cast<S>(n.grad.data[0] / static_cast<S>(a.value.numel()));
        for (S& v : a.grad.data) v += g;
        break;
      }
      case OpKind::kSumAll: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        for (S& v : a.grad.data) v += n.grad.data[0];
        break;
      }
      case OpKind::kMeanRows: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        int rows = a.value.rows();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < a.value.cols(); ++j)
            a.grad.at(i, j) += static_cast<S>(n.grad.at(0, j) / static_cast<S>(rows));
        break;
      }
      case OpKind::kBceLogitsMean: {
        NodeT<S>& a = nodes_[n.inputs[0]];
        if (!a.requires_grad) break;
        double g = static_cast<double>(n.grad.data[0]);
        for (size_t i = 0; i < a.value.data.size(); ++i) {
          double y = static_cast<double>(n.aux.at(static_cast<int>(i), 0));
          double w = static_cast<double>(n.aux.at(static_cast<int>(i), 1));
          double s = sigmoid_stable(static_cast<double>(a.value.data[i]));
          a.grad.data[i] += static_cast<S>(g * w * (s - y) / n.alpha);
        }
        break;
      }
    }
  }
};

using Tape = TapeT<double>;

}  // namespace llatte

#endif  // LLATTE_TAPE_HPP_
