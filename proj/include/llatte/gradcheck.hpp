#ifndef LLATTE_GRADCHECK_HPP_
#define LLATTE_GRADCHECK_HPP_

#include <functional>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/tape.hpp"
#include "llatte/tensor.hpp"

namespace llatte {

// Result of comparing analytic gradients against central finite differences.
// worst_param / worst_coord identify the coordinate with the largest relative
// error so a failing check points straight at the offending parameter.
struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_param = -1;
  long long worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool ok = false;
};

namespace detail {
// Relative error with an absolute floor. Central differences on a unit-scale
// loss with step h carry ~|f|*ulp/h of noise (about 1e-11 at h = 1e-5), so
// coordinates whose true gradient sits below the floor are compared
// absolutely; an erroneous gradient of magnitude >= the floor still trips the
// relative test.
inline double rel_err(double a, double b) {
  double denom = std::max(std::max(std::abs(a), std::abs(b)), 1e-6);
  return std::abs(a - b) / denom;
}
}  // namespace detail

// Builds a scalar loss from parameter leaves placed on the given tape. The
// same builder is reused for analytic and perturbed evaluations, so it must
// be deterministic.
template <class S>
using LossBuilder = std::function<Var(TapeT<S>&, const std::vector<Var>&)>;

template <class S>
double eval_loss(const LossBuilder<S>& fn, const std::vector<TensorT<S>>& params) {
  TapeT<S> tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const TensorT<S>& p : params) leaves.push_back(tape.leaf(p, false));
  Var loss = fn(tape, leaves);
  double v = static_cast<double>(tape.value(loss).scalar_value());
  if (!std::isfinite(v)) throw ValueError(strfmt("loss evaluated to non-finite value %g", v));
  return v;
}

// Compare supplied analytic gradients against central differences of fn.
// Split out from finite_diff_check so tests can feed deliberately wrong
// gradients and confirm the check flags them.
template <class S>
GradCheckReport finite_diff_compare(const LossBuilder<S>& fn, const std::vector<TensorT<S>>& params,
                                    const std::vector<TensorT<S>>& analytic, double h, double tolerance) {
  if (h <= 0.0) throw ValueError(strfmt("finite-difference step %g must be positive", h));
  if (analytic.size() != params.size())
    throw ShapeError(strfmt("%zu gradient tensors for %zu parameters", analytic.size(), params.size()));
  GradCheckReport rep;
  std::vector<TensorT<S>> work = params;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!analytic[p].same_shape(params[p]))
      throw ShapeError(strfmt("gradient %zu shape %s does not match parameter shape %s", p,
                              analytic[p].shape_str().c_str(), params[p].shape_str().c_str()));
    for (size_t c = 0; c < params[p].data.size(); ++c) {
      S saved = work[p].data[c];
      work[p].data[c] = static_cast<S>(saved + h);
      double fp = eval_loss(fn, work);
      work[p].data[c] = static_cast<S>(saved - h);
      double fm = eval_loss(fn, work);
      work[p].data[c] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double e = detail::rel_err(static_cast<double>(analytic[p].data[c]), numeric);
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst_param = static_cast<int>(p);
        rep.worst_coord = static_cast<long long>(c);
        rep.analytic_at_worst = static_cast<double>(analytic[p].data[c]);
        rep.numeric_at_worst = numeric;
      }
    }
  }
  rep.ok = rep.max_rel_err < tolerance;
  return rep;
}

// Run reverse-mode once for analytic gradients, then check every coordinate
// against central differences with step h.
template <class S>
GradCheckReport finite_diff_check(const LossBuilder<S>& fn, const std::vector<TensorT<S>>& params,
                                  double h, double tolerance) {
  TapeT<S> tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const TensorT<S>& p : params) leaves.push_back(tape.leaf(p, true));
  Var loss = fn(tape, leaves);
  double v = static_cast<double>(tape.value(loss).scalar_value());
  if (!std::isfinite(v)) throw ValueError(strfmt("loss evaluated to non-finite value %g", v));
  tape.backward(loss);
  std::vector<TensorT<S>> analytic;
  analytic.reserve(params.size());
  for (Var l : leaves) analytic.push_back(tape.grad(l));
  return finite_diff_compare(fn, params, analytic, h, tolerance);
}

}  // namespace llatte

#endif  // LLATTE_GRADCHECK_HPP_
