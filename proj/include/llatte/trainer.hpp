#ifndef LLATTE_TRAINER_HPP_
#define LLATTE_TRAINER_HPP_

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/model.hpp"
#include "llatte/rng.hpp"

namespace llatte {

// ---------------------------------------------------------------------------
// Configuration and log
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient-norm ceiling
  int batch = 64;
  long long steps = 1000;
  long long eval_interval = 0;  // 0: evaluate only after the final step
  uint64_t seed = 1;

  void validate() const {
    // lr = 0 is legal: it pins the theta' = theta degenerate case.
    if (lr < 0.0) throw ConfigError(strfmt("learning rate %g must be >= 0", lr));
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError(strfmt("moment decays (%g, %g) must lie in [0,1)", beta1, beta2));
    if (eps <= 0.0) throw ConfigError(strfmt("eps %g must be positive", eps));
    if (clip <= 0.0) throw ConfigError(strfmt("clip norm %g must be positive", clip));
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    if (steps < 1) throw ConfigError("step count must be >= 1");
    if (eval_interval < 0) throw ConfigError("eval interval must be >= 0");
  }
};

struct TrainLogEntry {
  long long step = 0;
  double loss = 0.0;        // train loss of the batch at this step
  std::vector<double> ne;   // eval NE per head
};

struct TrainLog {
  std::vector<std::string> head_names;
  std::vector<TrainLogEntry> entries;

  void append(TrainLogEntry e) {
    if (!entries.empty() && e.step <= entries.back().step)
      throw ValueError(strfmt("log steps must increase: %lld after %lld", e.step, entries.back().step));
    if (e.ne.size() != head_names.size())
      throw ShapeError(strfmt("log entry has %zu NE values for %zu heads", e.ne.size(), head_names.size()));
    entries.push_back(std::move(e));
  }

  std::string to_csv() const {
    std::string out = "step,loss";
    for (const std::string& h : head_names) out += ",ne_" + h;
    out += "\n";
    char buf[64];
    for (const TrainLogEntry& e : entries) {
      std::snprintf(buf, sizeof(buf), "%lld,%.9g", e.step, e.loss);
      out += buf;
      for (double v : e.ne) {
        std::snprintf(buf, sizeof(buf), ",%.9g", v);
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

inline void write_train_log_csv(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot open '%s' for writing", path.c_str()));
  out << log.to_csv();
}

// ---------------------------------------------------------------------------
// Parameter initialization and flat views
// ---------------------------------------------------------------------------

// Full parameter set from the model configs: truncated-normal matrices,
// plain-normal embedding rows, unit gains, zero biases (the per-module init
// routines implement the contract; this is the single entry point).
inline ModelWeights init_params(const ModelConfig& cfg, uint64_t seed) {
  return init_model_weights(cfg, seed);
}

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

inline std::vector<ParamRef> flatten_params(ModelWeights& w) {
  std::vector<ParamRef> refs;
  for_each_param(w, [&](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
  return refs;
}

// ---------------------------------------------------------------------------
// Adaptive-moment update
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  long long t = 0;
};

inline AdamState make_adam_state(const std::vector<ParamRef>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const ParamRef& p : params) {
    s.m.push_back(Tensor::zeros(p.tensor->shape));
    s.v.push_back(Tensor::zeros(p.tensor->shape));
  }
  return s;
}

// One optimizer step in place: global-norm clip across all gradients jointly,
// then the bias-corrected moment update. state.t counts completed steps.
inline void adam_step(std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                      AdamState& state, const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError(strfmt("adam_step got %zu gradients and %zu moment slots for %zu parameters",
                            grads.size(), state.m.size(), params.size()));
  double sq = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!grads[p].same_shape(*params[p].tensor))
      throw ShapeError(strfmt("gradient for %s has shape %s, parameter has %s", params[p].name.c_str(),
                              grads[p].shape_str().c_str(), params[p].tensor->shape_str().c_str()));
    for (double g : grads[p].data) {
      if (!std::isfinite(g))
        throw ValueError(strfmt("non-finite gradient %g in %s", g, params[p].name.c_str()));
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  double scale = norm > cfg.clip ? cfg.clip / norm : 1.0;
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p].tensor;
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (size_t i = 0; i < theta.data.size(); ++i) {
      double g = grads[p].data[i] * scale;
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      theta.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

// Fisher-Yates permutation of 0..n-1 from the (seed, epoch) substream, so the
// shuffling order is a fixed function of the config alone.
inline std::vector<int> epoch_permutation(uint64_t seed, long long epoch, int n) {
  Rng rng = Rng(seed).sub("perm", static_cast<uint64_t>(epoch));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = rng.uniform_int(i + 1);
    std::swap(order[i], order[j]);
  }
  return order;
}

}  // namespace detail

// Weighted multi-head BCE over one batch, differentiable through the logits.
// Scaling by the total head weight makes the value match
//   sum_h w_h * mean_i BCE_h(i)
// i.e. the probability-form multi_task_loss, up to the clamp at saturation.
inline Var batch_loss(Tape& t, const std::vector<std::vector<Var>>& logits_per_example,
                      const std::vector<const LabeledExample*>& batch, const BackboneConfig& bcfg) {
  std::vector<Var> flat;
  std::vector<double> labels, weights;
  double total_w = 0.0;
  for (double w : bcfg.head_weights) total_w += w;
  for (size_t i = 0; i < batch.size(); ++i) {
    for (size_t h = 0; h < bcfg.head_names.size(); ++h) {
      flat.push_back(logits_per_example[i][h]);
      labels.push_back(label_for_head(*batch[i], bcfg.head_names[h]));
      weights.push_back(bcfg.head_weights[h]);
    }
  }
  return t.scale(t.bce_logits_mean(t.concat_rows(flat), labels, weights), total_w);
}

namespace detail {
inline const CachedFeature* cached_at(const std::vector<CachedFeature>* cached, size_t i, size_t n,
                                      const char* what) {
  if (cached == nullptr) return nullptr;
  if (cached->size() != n)
    throw ShapeError(strfmt("%zu cached features supplied for %zu %s examples", cached->size(), n, what));
  return &(*cached)[i];
}
}  // namespace detail

// Eval NE per head over a fixed example list with the current weights. When
// `cached` is given it must align index-for-index with `examples`.
inline std::vector<double> evaluate_ne(const ModelConfig& cfg, const ModelWeights& weights,
                                       const std::vector<LabeledExample>& examples,
                                       const std::vector<CachedFeature>* cached = nullptr) {
  std::vector<std::vector<double>> preds(cfg.backbone.head_names.size());
  std::vector<std::vector<double>> labels(cfg.backbone.head_names.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    const LabeledExample& ex = examples[i];
    Tape t;
    ModelVars v = place_model_weights(t, weights, false);
    PredictionVector pv = model_predict(t, ex, cfg, v,
                                        detail::cached_at(cached, i, examples.size(), "eval"));
    for (size_t h = 0; h < pv.p.size(); ++h) {
      preds[h].push_back(pv.p[h]);
      labels[h].push_back(label_for_head(ex, cfg.backbone.head_names[h]));
    }
  }
  std::vector<double> ne;
  ne.reserve(preds.size());
  for (size_t h = 0; h < preds.size(); ++h) ne.push_back(normalized_entropy(preds[h], labels[h]));
  return ne;
}

struct TrainResult {
  ModelWeights weights;
  TrainLog log;
  std::vector<double> step_losses;  // every step's batch loss, for trend analysis
};

// Deterministic mini-batch loop: batches walk fixed per-epoch permutations
// (partial batch at each epoch boundary), one tape per step, evaluation at
// eval_interval boundaries and always after the final step.
inline TrainResult train_model(const ModelConfig& mcfg, const ModelWeights& init,
                               const std::vector<LabeledExample>& train_set,
                               const std::vector<LabeledExample>& eval_set, const TrainConfig& tcfg,
                               const std::vector<CachedFeature>* train_cached = nullptr,
                               const std::vector<CachedFeature>* eval_cached = nullptr) {
  mcfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw ValueError("training set is empty");
  if (eval_set.empty()) throw ValueError("eval set is empty");
  detail::cached_at(train_cached, 0, train_set.size(), "train");
  detail::cached_at(eval_cached, 0, eval_set.size(), "eval");

  TrainResult res;
  res.weights = init;
  res.log.head_names = mcfg.backbone.head_names;
  std::vector<ParamRef> params = flatten_params(res.weights);
  AdamState state = make_adam_state(params);

  long long epoch = 0;
  std::vector<int> order = detail::epoch_permutation(tcfg.seed, epoch, static_cast<int>(train_set.size()));
  size_t cursor = 0;

  for (long long step = 1; step <= tcfg.steps; ++step) {
    std::vector<const LabeledExample*> batch;
    std::vector<int> batch_idx;
    batch.reserve(tcfg.batch);
    while (static_cast<int>(batch.size()) < tcfg.batch && cursor < order.size()) {
      batch_idx.push_back(order[cursor]);
      batch.push_back(&train_set[order[cursor++]]);
    }
    if (cursor == order.size()) {
      epoch += 1;
      order = detail::epoch_permutation(tcfg.seed, epoch, static_cast<int>(train_set.size()));
      cursor = 0;
    }

    Tape t;
    ModelVars vars = place_model_weights(t, res.weights, true);
    std::vector<std::vector<Var>> logits;
    logits.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
      logits.push_back(model_forward(t, *batch[i], mcfg, vars,
                                     detail::cached_at(train_cached, batch_idx[i], train_set.size(),
                                                       "train"))
                           .logits);
    Var loss = batch_loss(t, logits, batch, mcfg.backbone);
    double loss_value = t.value(loss).scalar_value();
    res.step_losses.push_back(loss_value);
    t.backward(loss);

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for_each_var(vars, [&](Var& leaf) { grads.push_back(t.grad(leaf)); });
    adam_step(params, grads, state, tcfg);

    bool at_interval = tcfg.eval_interval > 0 && step % tcfg.eval_interval == 0;
    if (at_interval || step == tcfg.steps)
      res.log.append({step, loss_value, evaluate_ne(mcfg, res.weights, eval_set, eval_cached)});
  }
  return res;
}

}  // namespace llatte

#endif  // LLATTE_TRAINER_HPP_
