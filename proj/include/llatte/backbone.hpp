#ifndef LLATTE_BACKBONE_HPP_
#define LLATTE_BACKBONE_HPP_

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/rng.hpp"
#include "llatte/sequence.hpp"
#include "llatte/tape.hpp"
#include "llatte/tensor.hpp"

namespace llatte {

// Predictions are clamped into [kProbEps, 1 - kProbEps] so log losses stay
// finite without visibly biasing calibration.
inline constexpr double kProbEps = 1e-7;

// ---------------------------------------------------------------------------
// Configuration and feature schema
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::vector<int> sparse_vocab;  // vocabulary size per sparse field
  int d_e = 8;                    // embedding width per sparse field
  std::vector<int> dense_dims;    // width per dense slot (cached embedding included)
  int m_float = 0;                // scalar attribute count
  int L_NS = 2;                   // interaction layers
  int hidden = 32;                // interaction hidden width
  int d_out = 16;                 // width of the fused representation z
  std::vector<std::string> head_names = {"ctr", "cvr"};
  std::vector<double> head_weights = {1.0, 1.0};
  int m_seq = 2;                  // summaries entering the concat
  int d_seq = 16;

  void validate() const {
    if (d_e < 1 || hidden < 1 || d_out < 1) throw ConfigError("backbone widths must be positive");
    if (L_NS < 1) throw ConfigError("L_NS must be >= 1");
    for (int v : sparse_vocab)
      if (v < 1) throw ConfigError("sparse vocabulary sizes must be positive");
    for (int d : dense_dims)
      if (d < 1) throw ConfigError("dense slot widths must be positive");
    if (m_float < 0) throw ConfigError("m_float must be >= 0");
    if (m_seq < 0 || (m_seq > 0 && d_seq < 1)) throw ConfigError("summary slot shape invalid");
    if (head_names.empty() || head_names.size() != head_weights.size())
      throw ConfigError("head names and weights must align and be nonempty");
    double total = 0.0;
    for (double w : head_weights) {
      if (w < 0.0) throw ConfigError(strfmt("head weight %g is negative", w));
      total += w;
    }
    if (total == 0.0) throw ConfigError("head weights must not all be zero");
  }

  int d0() const {
    int d = static_cast<int>(sparse_vocab.size()) * d_e + m_float + m_seq * d_seq;
    for (int dd : dense_dims) d += dd;
    return d;
  }
};

struct FeatureBundle {
  std::vector<int> sparse_ids;              // one id per sparse field
  std::vector<std::vector<double>> dense;   // one vector per dense slot
  std::vector<double> floats;               // scalar attributes
};

struct PredictionVector {
  std::vector<double> p;  // per head, strictly inside (0,1)
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

struct CrossLayerWeights {
  Tensor w_mlp, b_mlp;      // [in x hidden], [1 x hidden]
  Tensor w_cross, b_cross;  // [in x d0], [1 x d0]
  Tensor w_proj, b_proj;    // [(hidden + d0) x hidden], [1 x hidden]
};

struct HeadWeights {
  Tensor w1, b1;  // [d_out x hidden], [1 x hidden]
  Tensor w2, b2;  // [hidden x 1], [1 x 1]
};

struct BackboneWeights {
  std::vector<Tensor> tables;  // one per sparse field
  std::vector<CrossLayerWeights> layers;
  Tensor w_z, b_z;  // [hidden x d_out], [1 x d_out]
  std::vector<HeadWeights> heads;
};

template <class Fn>
void for_each_param(BackboneWeights& w, const std::string& prefix, Fn&& fn) {
  for (size_t f = 0; f < w.tables.size(); ++f)
    fn(prefix + "table" + std::to_string(f), w.tables[f]);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    std::string p = prefix + "cross" + std::to_string(l) + ".";
    fn(p + "w_mlp", w.layers[l].w_mlp);
    fn(p + "b_mlp", w.layers[l].b_mlp);
    fn(p + "w_cross", w.layers[l].w_cross);
    fn(p + "b_cross", w.layers[l].b_cross);
    fn(p + "w_proj", w.layers[l].w_proj);
    fn(p + "b_proj", w.layers[l].b_proj);
  }
  fn(prefix + "w_z", w.w_z);
  fn(prefix + "b_z", w.b_z);
  for (size_t h = 0; h < w.heads.size(); ++h) {
    std::string p = prefix + "head" + std::to_string(h) + ".";
    fn(p + "w1", w.heads[h].w1);
    fn(p + "b1", w.heads[h].b1);
    fn(p + "w2", w.heads[h].w2);
    fn(p + "b2", w.heads[h].b2);
  }
}

inline BackboneWeights init_backbone_weights(const BackboneConfig& cfg, uint64_t seed) {
  cfg.validate();
  const double sigma = 0.02;
  Rng root = Rng(seed).sub("backbone", 0);
  BackboneWeights w;
  for (size_t f = 0; f < cfg.sparse_vocab.size(); ++f)
    w.tables.push_back(
        detail::init_embedding(root, "table" + std::to_string(f), cfg.sparse_vocab[f], cfg.d_e, sigma));
  int d0 = cfg.d0();
  for (int l = 0; l < cfg.L_NS; ++l) {
    std::string p = "cross" + std::to_string(l) + ".";
    int in = l == 0 ? d0 : cfg.hidden;
    CrossLayerWeights cl;
    cl.w_mlp = detail::init_matrix(root, p + "w_mlp", in, cfg.hidden, sigma);
    cl.b_mlp = Tensor::zeros({1, cfg.hidden});
    cl.w_cross = detail::init_matrix(root, p + "w_cross", in, d0, sigma);
    cl.b_cross = Tensor::zeros({1, d0});
    cl.w_proj = detail::init_matrix(root, p + "w_proj", cfg.hidden + d0, cfg.hidden, sigma);
    cl.b_proj = Tensor::zeros({1, cfg.hidden});
    w.layers.push_back(std::move(cl));
  }
  w.w_z = detail::init_matrix(root, "w_z", cfg.hidden, cfg.d_out, sigma);
  w.b_z = Tensor::zeros({1, cfg.d_out});
  for (size_t h = 0; h < cfg.head_names.size(); ++h) {
    std::string p = "head" + std::to_string(h) + ".";
    HeadWeights hw;
    hw.w1 = detail::init_matrix(root, p + "w1", cfg.d_out, cfg.hidden, sigma);
    hw.b1 = Tensor::zeros({1, cfg.hidden});
    hw.w2 = detail::init_matrix(root, p + "w2", cfg.hidden, 1, sigma);
    hw.b2 = Tensor::zeros({1, 1});
    w.heads.push_back(std::move(hw));
  }
  return w;
}

struct CrossLayerVars {
  Var w_mlp, b_mlp, w_cross, b_cross, w_proj, b_proj;
};

struct HeadVars {
  Var w1, b1, w2, b2;
};

struct BackboneVars {
  std::vector<Var> tables;
  std::vector<CrossLayerVars> layers;
  Var w_z, b_z;
  std::vector<HeadVars> heads;
};

inline BackboneVars place_backbone_weights(Tape& t, const BackboneWeights& w, bool needs_grad) {
  BackboneVars v;
  for (const Tensor& tab : w.tables) v.tables.push_back(t.leaf(tab, needs_grad));
  for (const CrossLayerWeights& cl : w.layers)
    v.layers.push_back({t.leaf(cl.w_mlp, needs_grad), t.leaf(cl.b_mlp, needs_grad),
                        t.leaf(cl.w_cross, needs_grad), t.leaf(cl.b_cross, needs_grad),
                        t.leaf(cl.w_proj, needs_grad), t.leaf(cl.b_proj, needs_grad)});
  v.w_z = t.leaf(w.w_z, needs_grad);
  v.b_z = t.leaf(w.b_z, needs_grad);
  for (const HeadWeights& hw : w.heads)
    v.heads.push_back({t.leaf(hw.w1, needs_grad), t.leaf(hw.b1, needs_grad),
                       t.leaf(hw.w2, needs_grad), t.leaf(hw.b2, needs_grad)});
  return v;
}

// Enumerates tape leaves in the exact order for_each_param(BackboneWeights)
// enumerates tensors; gradient collection zips the two, so keep them in sync.
template <class Fn>
void for_each_var(BackboneVars& v, Fn&& fn) {
  for (Var& tab : v.tables) fn(tab);
  for (CrossLayerVars& cl : v.layers) {
    fn(cl.w_mlp);
    fn(cl.b_mlp);
    fn(cl.w_cross);
    fn(cl.b_cross);
    fn(cl.w_proj);
    fn(cl.b_proj);
  }
  fn(v.w_z);
  fn(v.b_z);
  for (HeadVars& h : v.heads) {
    fn(h.w1);
    fn(h.b1);
    fn(h.w2);
    fn(h.b2);
  }
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

// Fixed concatenation order: sparse embeddings, dense slots, float
// attributes, sequence summaries. Errors name the offending field.
inline Var embed_and_concat(Tape& t, const FeatureBundle& bundle, const std::vector<Var>& summaries,
                            const BackboneConfig& cfg, const BackboneVars& v) {
  if (bundle.sparse_ids.size() != cfg.sparse_vocab.size())
    throw ShapeError(strfmt("bundle has %zu sparse ids, schema declares %zu fields",
                            bundle.sparse_ids.size(), cfg.sparse_vocab.size()));
  if (bundle.dense.size() != cfg.dense_dims.size())
    throw ShapeError(strfmt("bundle has %zu dense slots, schema declares %zu",
                            bundle.dense.size(), cfg.dense_dims.size()));
  if (static_cast<int>(bundle.floats.size()) != cfg.m_float)
    throw ShapeError(strfmt("bundle has %zu float attributes, schema declares %d",
                            bundle.floats.size(), cfg.m_float));
  if (static_cast<int>(summaries.size()) != cfg.m_seq)
    throw ShapeError(strfmt("got %zu sequence summaries, schema declares %d", summaries.size(),
                            cfg.m_seq));
  std::vector<Var> parts;
  for (size_t f = 0; f < bundle.sparse_ids.size(); ++f) {
    int id = bundle.sparse_ids[f];
    if (id < 0 || id >= cfg.sparse_vocab[f])
      throw ValueError(strfmt("sparse field %zu id %d outside vocabulary of %d rows", f, id,
                              cfg.sparse_vocab[f]));
    parts.push_back(t.gather_rows(v.tables[f], {id}));
  }
  for (size_t s = 0; s < bundle.dense.size(); ++s) {
    if (static_cast<int>(bundle.dense[s].size()) != cfg.dense_dims[s])
      throw ShapeError(strfmt("dense slot %zu has dim %zu, schema declares %d", s,
                              bundle.dense[s].size(), cfg.dense_dims[s]));
    parts.push_back(t.leaf(Tensor::row(bundle.dense[s])));
  }
  if (cfg.m_float > 0) parts.push_back(t.leaf(Tensor::row(bundle.floats)));
  for (Var z : summaries) {
    if (t.value(z).rows() != 1 || t.value(z).cols() != cfg.d_seq)
      throw ShapeError(strfmt("summary has shape %s, schema declares [1x%d]",
                              t.value(z).shape_str().c_str(), cfg.d_seq));
    parts.push_back(z);
  }
  return t.concat_cols(parts);
}

// Two-branch interaction layer: an MLP branch and an elementwise cross
// branch h0 * (W x_prev + b), concatenated then projected back to the hidden
// width; a final projection produces z.
inline Var interaction_stack(Tape& t, Var h0, const BackboneConfig& cfg, const BackboneVars& v) {
  if (t.value(h0).rows() != 1 || t.value(h0).cols() != cfg.d0())
    throw ShapeError(strfmt("h0 has shape %s, schema implies [1x%d]",
                            t.value(h0).shape_str().c_str(), cfg.d0()));
  Var x = h0;
  for (int l = 0; l < cfg.L_NS; ++l) {
    const CrossLayerVars& w = v.layers[l];
    Var mlp = t.silu(t.add_row(t.matmul(x, w.w_mlp), w.b_mlp));
    Var cross = t.mul(h0, t.add_row(t.matmul(x, w.w_cross), w.b_cross));
    x = t.add_row(t.matmul(t.concat_cols({mlp, cross}), w.w_proj), w.b_proj);
  }
  return t.add_row(t.matmul(x, v.w_z), v.b_z);
}

// Per-head shallow MLP producing a single logit.
inline std::vector<Var> predict_logits(Tape& t, Var z, const BackboneVars& v) {
  std::vector<Var> logits;
  logits.reserve(v.heads.size());
  for (const HeadVars& h : v.heads) {
    Var hid = t.silu(t.add_row(t.matmul(z, h.w1), h.b1));
    logits.push_back(t.add_row(t.matmul(hid, h.w2), h.b2));
  }
  return logits;
}

inline double clamp_prob(double p) { return std::min(std::max(p, kProbEps), 1.0 - kProbEps); }

inline PredictionVector predict(Tape& t, Var z, const BackboneVars& v) {
  PredictionVector out;
  for (Var logit : predict_logits(t, z, v))
    out.p.push_back(clamp_prob(Tape::sigmoid_stable(t.value(logit).scalar_value())));
  return out;
}

// ---------------------------------------------------------------------------
// Losses and metrics (plain scalar functions over clamped probabilities)
// ---------------------------------------------------------------------------

namespace detail {

inline double bce_term(double p, double y) {
  p = clamp_prob(p);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

}  // namespace detail

// Weighted multi-task binary cross-entropy: sum_h w_h * mean_i BCE_h(i).
inline double multi_task_loss(const std::vector<std::vector<double>>& preds_per_head,
                              const std::vector<std::vector<double>>& labels_per_head,
                              const std::vector<double>& head_weights) {
  if (preds_per_head.size() != labels_per_head.size() || preds_per_head.size() != head_weights.size())
    throw ShapeError(strfmt("loss got %zu prediction heads, %zu label heads, %zu weights",
                            preds_per_head.size(), labels_per_head.size(), head_weights.size()));
  double total = 0.0;
  for (size_t h = 0; h < preds_per_head.size(); ++h) {
    if (head_weights[h] < 0.0) throw ValueError(strfmt("head weight %g is negative", head_weights[h]));
    if (preds_per_head[h].size() != labels_per_head[h].size() || preds_per_head[h].empty())
      throw ShapeError(strfmt("head %zu has %zu predictions for %zu labels", h,
                              preds_per_head[h].size(), labels_per_head[h].size()));
    double acc = 0.0;
    for (size_t i = 0; i < preds_per_head[h].size(); ++i)
      acc += detail::bce_term(preds_per_head[h][i], labels_per_head[h][i]);
    total += head_weights[h] * acc / static_cast<double>(preds_per_head[h].size());
  }
  return total;
}

// NE = average log loss divided by the entropy of the empirical positive
// rate; 1.0 means "no better than the best constant predictor".
inline double normalized_entropy(const std::vector<double>& preds, const std::vector<double>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ShapeError(strfmt("normalized_entropy got %zu predictions for %zu labels", preds.size(),
                            labels.size()));
  double p = std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(labels.size());
  if (p <= 0.0 || p >= 1.0)
    throw ValueError(strfmt("degenerate label distribution: positive rate %g", p));
  double num = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) num += detail::bce_term(preds[i], labels[i]);
  num /= static_cast<double>(preds.size());
  double denom = -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
  return num / denom;
}

// Forward FLOPs for one example through the interaction stack and heads,
// counting 2 FLOPs per multiply-accumulate of the dominant matmul terms.
inline long long backbone_flop_count(const BackboneConfig& cfg) {
  cfg.validate();
  long long d0 = cfg.d0();
  long long hidden = cfg.hidden;
  long long total = 0;
  for (int l = 0; l < cfg.L_NS; ++l) {
    long long in = (l == 0) ? d0 : hidden;
    total += 2 * in * hidden;            // mlp branch
    total += 2 * in * d0;                // cross branch
    total += 2 * (hidden + d0) * hidden; // merge projection
  }
  total += 2 * hidden * cfg.d_out;  // fused representation
  for (size_t h = 0; h < cfg.head_names.size(); ++h)
    total += 2 * (static_cast<long long>(cfg.d_out) * hidden + hidden);  // per-head MLP + logit
  return total;
}

// Relative NE change in percent; negative is an improvement.
inline double delta_ne(double ne_variant, double ne_baseline) {
  if (ne_baseline <= 0.0) throw ValueError(strfmt("nonpositive baseline NE %g", ne_baseline));
  return 100.0 * (ne_variant - ne_baseline) / ne_baseline;
}

inline std::string metric_json(const std::string& head, double ne, double delta_ne_pct, size_t n,
                               double p) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "{\"head\": \"%s\", \"ne\": %.9g, \"delta_ne_pct\": %.9g, \"n\": %zu, \"p\": %.9g}",
                head.c_str(), ne, delta_ne_pct, n, p);
  return buf;
}

inline void write_metric_json(const std::string& path, const std::string& head, double ne,
                              double delta_ne_pct, size_t n, double p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot open '%s' for writing", path.c_str()));
  out << metric_json(head, ne, delta_ne_pct, n, p) << "\n";
}

}  // namespace llatte

#endif  // LLATTE_BACKBONE_HPP_
