#ifndef LLATTE_TENSOR_HPP_
#define LLATTE_TENSOR_HPP_

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "llatte/common.hpp"

namespace llatte {

// Dense row-major tensor. Rank 1 and 2 are what the model layers need;
// scalars are [1] or [1x1]. `grad_enabled` marks a leaf that participates
// in reverse-mode differentiation when placed on a tape.
template <class S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;
  bool grad_enabled = false;

  TensorT() = default;
  TensorT(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
    if (static_cast<size_t>(numel_of(shape)) != data.size())
      throw ShapeError(strfmt("tensor data size %zu does not match shape product %lld", data.size(),
                              static_cast<long long>(numel_of(shape))));
  }

  // Zero-sized dimensions are legal (an empty event list tokenizes to a
  // 0-row matrix); only negative dimensions are malformed.
  static long long numel_of(const std::vector<int>& shp) {
    long long n = 1;
    for (int d : shp) {
      if (d < 0) throw ShapeError(strfmt("negative dimension %d in shape", d));
      n *= d;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> shp) {
    TensorT t;
    t.shape = std::move(shp);
    t.data.assign(static_cast<size_t>(numel_of(t.shape)), S(0));
    return t;
  }

  static TensorT full(std::vector<int> shp, S v) {
    TensorT t = zeros(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  static TensorT row(std::vector<S> values) {
    int n = static_cast<int>(values.size());
    return TensorT({1, n}, std::move(values));
  }

  static TensorT matrix(int r, int c, std::vector<S> values) { return TensorT({r, c}, std::move(values)); }

  static TensorT identity(int n) {
    TensorT t = zeros({n, n});
    for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = S(1);
    return t;
  }

  long long numel() const { return static_cast<long long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  S& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  S at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool is_scalar() const { return numel() == 1; }
  S scalar_value() const {
    if (!is_scalar()) throw ShapeError("expected a scalar tensor");
    return data[0];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

using Tensor = TensorT<double>;

}  // namespace llatte

#endif  // LLATTE_TENSOR_HPP_
