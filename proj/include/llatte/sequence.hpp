#ifndef LLATTE_SEQUENCE_HPP_
#define LLATTE_SEQUENCE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "llatte/common.hpp"
#include "llatte/events.hpp"
#include "llatte/rng.hpp"
#include "llatte/tape.hpp"
#include "llatte/tensor.hpp"

namespace llatte {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SeqMode { kCandidateAware, kUserOnly };

// Vocabulary sizes for the categorical tables, shared with the generator so
// ids always fit. Embedding width is fixed per table.
inline constexpr int kTypeVocab = 4;
inline constexpr int kSurfaceVocab = 4;
inline constexpr int kDeviceVocab = 4;
inline constexpr int kHourVocab = 24;
inline constexpr int kMetaVocab = 16;
inline constexpr int kItemVocab = GeneratorConfig::kNumItems;
inline constexpr int kEmbedDim = 8;
inline constexpr int kMaxContext = 8192;

// Relative-age encoding: 8 (sin, cos) pairs at geometric periods from 1 hour
// to 90 days, ordered ascending so narrow tokens still keep the pair pinned
// at exactly 24 hours.
inline constexpr int kTimePairs = 8;
inline constexpr double kTimePeriodsHours[kTimePairs] = {1, 3, 9, 24, 81, 243, 729, 2160};

struct SeqConfig {
  int L = 2;                  // transformer layers
  int d = 16;                 // token width
  int h = 2;                  // attention heads
  int d_c = 4;                // shared latent width (head dim equals d_c)
  int d_ff = 64;              // feed-forward width, 4*d by default
  int n_q = 4;                // query tokens appended after the events
  std::vector<int> schedule;  // rows retained entering each layer's successor; empty = no trimming
  SeqMode mode = SeqMode::kCandidateAware;
  int d_seq = 16;             // summary width
  int m_seq = 2;              // number of summaries
  int lora_rank = 2;
  int time_dims = 16;         // leading token dims that receive the additive age encoding
  int d_content = 16;         // content vector width expected on events/candidates
  int max_events = kMaxContext;  // horizon: at most this many most-recent events are consumed
  bool mask_content = false;  // ID-only ablation: treat every event's content vector as absent

  void validate() const {
    if (L < 0) throw ConfigError("layer count must be >= 0");
    if (d < 1 || h < 1 || d_c < 1 || d_ff < 1) throw ConfigError("widths must be positive");
    if (d_c > d) throw ConfigError(strfmt("d_c=%d must not exceed d=%d", d_c, d));
    if (n_q < 1) throw ConfigError("n_q must be >= 1");
    if (d_seq < 1 || m_seq < 1) throw ConfigError("summary shape must be positive");
    if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
    if (time_dims < 0) throw ConfigError("time_dims must be >= 0");
    if (d_content < 1) throw ConfigError("d_content must be >= 1");
    if (max_events < 1 || max_events > kMaxContext)
      throw ConfigError(strfmt("max_events=%d must lie in [1, %d]", max_events, kMaxContext));
    if (!schedule.empty()) {
      if (static_cast<int>(schedule.size()) != L)
        throw ConfigError(strfmt("schedule has %zu entries for %d layers", schedule.size(), L));
      for (size_t i = 0; i < schedule.size(); ++i) {
        if (schedule[i] < n_q)
          throw ConfigError(strfmt("schedule entry %zu (%d) is below n_q=%d", i, schedule[i], n_q));
        if (i > 0 && schedule[i] > schedule[i - 1])
          throw ConfigError(strfmt("schedule must be nonincreasing, entry %zu rises to %d", i, schedule[i]));
      }
    }
  }

  // Width of the per-event concat entering the token MLP.
  int token_concat_width() const { return 5 * kEmbedDim + d_content; }

  // Width of the mode-dependent query feature vector.
  int query_feature_width() const {
    if (mode == SeqMode::kCandidateAware)
      return d_content + 2 /*cross*/ + kSurfaceVocab + kDeviceVocab + 2 /*hour sin,cos*/;
    return kTypeVocab + 1;  // action-type histogram + log event count
  }
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

struct LayerWeights {
  Tensor w_q_down;   // [d x h*d_c]
  Tensor w_kv_down;  // [d x d_c]
  Tensor gain_q;     // [1 x h*d_c]
  Tensor gain_kv;    // [1 x d_c]
  Tensor w_q_up;     // h stacked blocks of [d_c x d_c]
  Tensor w_k_up;     // h stacked blocks of [d_c x d_c]
  Tensor w_v_up;     // h stacked blocks of [d_c x d_c]
  Tensor w_out;      // [h*d_c x d], rows grouped by head
  Tensor gain_z;     // [1 x d] post-attention norm
  Tensor w_ff1;      // [d x d_ff]
  Tensor b_ff1;      // [1 x d_ff]
  Tensor w_ff2;      // [d_ff x d]
  Tensor b_ff2;      // [1 x d]
  Tensor gain_x;     // [1 x d] post-FFN norm
};

// Two-layer MLP readout whose linears carry low-rank adapters W + A*B.
struct ReadoutWeights {
  Tensor w1, bias1, lora_a1, lora_b1;  // [in x d], [1 x d], [in x r], [r x d]
  Tensor w2, bias2, lora_a2, lora_b2;  // [d x d_seq], [1 x d_seq], [d x r], [r x d_seq]
};

struct SeqWeights {
  Tensor e_type, e_item, e_surface, e_time, e_meta;
  Tensor e_missing;            // [1 x kEmbedDim], added to meta when content is absent
  Tensor w_act1, b_act1;       // token MLP: concat -> d
  Tensor w_act2, b_act2;       // d -> d
  Tensor w_qc;                 // query features -> n_q*d
  Tensor seed_q;               // [n_q x d] learned seed tokens
  std::vector<LayerWeights> layers;
  std::vector<ReadoutWeights> readouts;  // m_seq of them
};

template <class Fn>
void for_each_param(SeqWeights& w, const std::string& prefix, Fn&& fn) {
  fn(prefix + "e_type", w.e_type);
  fn(prefix + "e_item", w.e_item);
  fn(prefix + "e_surface", w.e_surface);
  fn(prefix + "e_time", w.e_time);
  fn(prefix + "e_meta", w.e_meta);
  fn(prefix + "e_missing", w.e_missing);
  fn(prefix + "w_act1", w.w_act1);
  fn(prefix + "b_act1", w.b_act1);
  fn(prefix + "w_act2", w.w_act2);
  fn(prefix + "b_act2", w.b_act2);
  fn(prefix + "w_qc", w.w_qc);
  fn(prefix + "seed_q", w.seed_q);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    std::string p = prefix + "layer" + std::to_string(l) + ".";
    LayerWeights& lw = w.layers[l];
    fn(p + "w_q_down", lw.w_q_down);
    fn(p + "w_kv_down", lw.w_kv_down);
    fn(p + "gain_q", lw.gain_q);
    fn(p + "gain_kv", lw.gain_kv);
    fn(p + "w_q_up", lw.w_q_up);
    fn(p + "w_k_up", lw.w_k_up);
    fn(p + "w_v_up", lw.w_v_up);
    fn(p + "w_out", lw.w_out);
    fn(p + "gain_z", lw.gain_z);
    fn(p + "w_ff1", lw.w_ff1);
    fn(p + "b_ff1", lw.b_ff1);
    fn(p + "w_ff2", lw.w_ff2);
    fn(p + "b_ff2", lw.b_ff2);
    fn(p + "gain_x", lw.gain_x);
  }
  for (size_t k = 0; k < w.readouts.size(); ++k) {
    std::string p = prefix + "readout" + std::to_string(k) + ".";
    ReadoutWeights& r = w.readouts[k];
    fn(p + "w1", r.w1);
    fn(p + "bias1", r.bias1);
    fn(p + "lora_a1", r.lora_a1);
    fn(p + "lora_b1", r.lora_b1);
    fn(p + "w2", r.w2);
    fn(p + "bias2", r.bias2);
    fn(p + "lora_a2", r.lora_a2);
    fn(p + "lora_b2", r.lora_b2);
  }
}

namespace detail {

inline Tensor init_matrix(Rng& root, const std::string& name, int rows, int cols, double sigma) {
  Rng rng = root.sub(name.c_str(), 0);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = rng.truncated_normal(sigma);
  return t;
}

inline Tensor init_embedding(Rng& root, const std::string& name, int rows, int cols, double sigma) {
  Rng rng = root.sub(name.c_str(), 0);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = sigma * rng.normal();
  return t;
}

}  // namespace detail

// Fresh weights: truncated-normal matrices (std 0.02, clipped at two sigma),
// plain-normal embedding rows, unit gains, zero biases. Each tensor draws
// from its own named substream so the layout of the struct never changes the
// values.
inline SeqWeights init_seq_weights(const SeqConfig& cfg, uint64_t seed) {
  cfg.validate();
  const double sigma = 0.02;
  Rng root = Rng(seed).sub("seq", 0);
  SeqWeights w;
  w.layers.resize(cfg.L);
  w.readouts.resize(cfg.m_seq);
  int in_flat = cfg.n_q * cfg.d;
  w.e_type = detail::init_embedding(root, "e_type", kTypeVocab, kEmbedDim, sigma);
  w.e_item = detail::init_embedding(root, "e_item", kItemVocab, kEmbedDim, sigma);
  w.e_surface = detail::init_embedding(root, "e_surface", kSurfaceVocab, kEmbedDim, sigma);
  w.e_time = detail::init_embedding(root, "e_time", kHourVocab, kEmbedDim, sigma);
  w.e_meta = detail::init_embedding(root, "e_meta", kMetaVocab, kEmbedDim, sigma);
  w.e_missing = detail::init_embedding(root, "e_missing", 1, kEmbedDim, sigma);
  w.w_act1 = detail::init_matrix(root, "w_act1", cfg.token_concat_width(), cfg.d, sigma);
  w.b_act1 = Tensor::zeros({1, cfg.d});
  w.w_act2 = detail::init_matrix(root, "w_act2", cfg.d, cfg.d, sigma);
  w.b_act2 = Tensor::zeros({1, cfg.d});
  w.w_qc = detail::init_matrix(root, "w_qc", cfg.query_feature_width(), cfg.n_q * cfg.d, sigma);
  w.seed_q = detail::init_matrix(root, "seed_q", cfg.n_q, cfg.d, sigma);
  for (int l = 0; l < cfg.L; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights& lw = w.layers[l];
    lw.w_q_down = detail::init_matrix(root, p + "w_q_down", cfg.d, cfg.h * cfg.d_c, sigma);
    lw.w_kv_down = detail::init_matrix(root, p + "w_kv_down", cfg.d, cfg.d_c, sigma);
    lw.gain_q = Tensor::full({1, cfg.h * cfg.d_c}, 1.0);
    lw.gain_kv = Tensor::full({1, cfg.d_c}, 1.0);
    lw.w_q_up = detail::init_matrix(root, p + "w_q_up", cfg.h * cfg.d_c, cfg.d_c, sigma);
    lw.w_k_up = detail::init_matrix(root, p + "w_k_up", cfg.h * cfg.d_c, cfg.d_c, sigma);
    lw.w_v_up = detail::init_matrix(root, p + "w_v_up", cfg.h * cfg.d_c, cfg.d_c, sigma);
    lw.w_out = detail::init_matrix(root, p + "w_out", cfg.h * cfg.d_c, cfg.d, sigma);
    lw.gain_z = Tensor::full({1, cfg.d}, 1.0);
    lw.w_ff1 = detail::init_matrix(root, p + "w_ff1", cfg.d, cfg.d_ff, sigma);
    lw.b_ff1 = Tensor::zeros({1, cfg.d_ff});
    lw.w_ff2 = detail::init_matrix(root, p + "w_ff2", cfg.d_ff, cfg.d, sigma);
    lw.b_ff2 = Tensor::zeros({1, cfg.d});
    lw.gain_x = Tensor::full({1, cfg.d}, 1.0);
  }
  for (int k = 0; k < cfg.m_seq; ++k) {
    std::string p = "readout" + std::to_string(k) + ".";
    ReadoutWeights& r = w.readouts[k];
    r.w1 = detail::init_matrix(root, p + "w1", in_flat, cfg.d, sigma);
    r.bias1 = Tensor::zeros({1, cfg.d});
    r.lora_a1 = detail::init_matrix(root, p + "lora_a1", in_flat, cfg.lora_rank, sigma);
    r.lora_b1 = Tensor::zeros({cfg.lora_rank, cfg.d});  // zero B: adapters start as no-ops
    r.w2 = detail::init_matrix(root, p + "w2", cfg.d, cfg.d_seq, sigma);
    r.bias2 = Tensor::zeros({1, cfg.d_seq});
    r.lora_a2 = detail::init_matrix(root, p + "lora_a2", cfg.d, cfg.lora_rank, sigma);
    r.lora_b2 = Tensor::zeros({cfg.lora_rank, cfg.d_seq});
  }
  return w;
}

// Tape-resident mirror of SeqWeights. Placing weights once per step keeps
// the leaf ids stable for gradient collection.
struct LayerVars {
  Var w_q_down, w_kv_down, gain_q, gain_kv, w_q_up, w_k_up, w_v_up, w_out;
  Var gain_z, w_ff1, b_ff1, w_ff2, b_ff2, gain_x;
};

struct ReadoutVars {
  Var w1, bias1, lora_a1, lora_b1, w2, bias2, lora_a2, lora_b2;
};

struct SeqVars {
  Var e_type, e_item, e_surface, e_time, e_meta, e_missing;
  Var w_act1, b_act1, w_act2, b_act2, w_qc, seed_q;
  std::vector<LayerVars> layers;
  std::vector<ReadoutVars> readouts;
};

inline SeqVars place_seq_weights(Tape& t, const SeqWeights& w, bool needs_grad) {
  SeqVars v;
  v.e_type = t.leaf(w.e_type, needs_grad);
  v.e_item = t.leaf(w.e_item, needs_grad);
  v.e_surface = t.leaf(w.e_surface, needs_grad);
  v.e_time = t.leaf(w.e_time, needs_grad);
  v.e_meta = t.leaf(w.e_meta, needs_grad);
  v.e_missing = t.leaf(w.e_missing, needs_grad);
  v.w_act1 = t.leaf(w.w_act1, needs_grad);
  v.b_act1 = t.leaf(w.b_act1, needs_grad);
  v.w_act2 = t.leaf(w.w_act2, needs_grad);
  v.b_act2 = t.leaf(w.b_act2, needs_grad);
  v.w_qc = t.leaf(w.w_qc, needs_grad);
  v.seed_q = t.leaf(w.seed_q, needs_grad);
  for (const LayerWeights& lw : w.layers) {
    LayerVars lv;
    lv.w_q_down = t.leaf(lw.w_q_down, needs_grad);
    lv.w_kv_down = t.leaf(lw.w_kv_down, needs_grad);
    lv.gain_q = t.leaf(lw.gain_q, needs_grad);
    lv.gain_kv = t.leaf(lw.gain_kv, needs_grad);
    lv.w_q_up = t.leaf(lw.w_q_up, needs_grad);
    lv.w_k_up = t.leaf(lw.w_k_up, needs_grad);
    lv.w_v_up = t.leaf(lw.w_v_up, needs_grad);
    lv.w_out = t.leaf(lw.w_out, needs_grad);
    lv.gain_z = t.leaf(lw.gain_z, needs_grad);
    lv.w_ff1 = t.leaf(lw.w_ff1, needs_grad);
    lv.b_ff1 = t.leaf(lw.b_ff1, needs_grad);
    lv.w_ff2 = t.leaf(lw.w_ff2, needs_grad);
    lv.b_ff2 = t.leaf(lw.b_ff2, needs_grad);
    lv.gain_x = t.leaf(lw.gain_x, needs_grad);
    v.layers.push_back(lv);
  }
  for (const ReadoutWeights& r : w.readouts) {
    ReadoutVars rv;
    rv.w1 = t.leaf(r.w1, needs_grad);
    rv.bias1 = t.leaf(r.bias1, needs_grad);
    rv.lora_a1 = t.leaf(r.lora_a1, needs_grad);
    rv.lora_b1 = t.leaf(r.lora_b1, needs_grad);
    rv.w2 = t.leaf(r.w2, needs_grad);
    rv.bias2 = t.leaf(r.bias2, needs_grad);
    rv.lora_a2 = t.leaf(r.lora_a2, needs_grad);
    rv.lora_b2 = t.leaf(r.lora_b2, needs_grad);
    v.readouts.push_back(rv);
  }
  return v;
}

// Enumerates tape leaves in the exact order for_each_param(SeqWeights)
// enumerates tensors; gradient collection zips the two, so keep them in sync.
template <class Fn>
void for_each_var(SeqVars& v, Fn&& fn) {
  fn(v.e_type);
  fn(v.e_item);
  fn(v.e_surface);
  fn(v.e_time);
  fn(v.e_meta);
  fn(v.e_missing);
  fn(v.w_act1);
  fn(v.b_act1);
  fn(v.w_act2);
  fn(v.b_act2);
  fn(v.w_qc);
  fn(v.seed_q);
  for (LayerVars& lv : v.layers) {
    fn(lv.w_q_down);
    fn(lv.w_kv_down);
    fn(lv.gain_q);
    fn(lv.gain_kv);
    fn(lv.w_q_up);
    fn(lv.w_k_up);
    fn(lv.w_v_up);
    fn(lv.w_out);
    fn(lv.gain_z);
    fn(lv.w_ff1);
    fn(lv.b_ff1);
    fn(lv.w_ff2);
    fn(lv.b_ff2);
    fn(lv.gain_x);
  }
  for (ReadoutVars& rv : v.readouts) {
    fn(rv.w1);
    fn(rv.bias1);
    fn(rv.lora_a1);
    fn(rv.lora_b1);
    fn(rv.w2);
    fn(rv.bias2);
    fn(rv.lora_a2);
    fn(rv.lora_b2);
  }
}

// ---------------------------------------------------------------------------
// Query context
// ---------------------------------------------------------------------------

// Mode-dependent request summary. reference_time_s anchors every relative
// age: the request time in candidate_aware mode, but the last event's
// timestamp in user_only mode, so an upstream embedding computed at trigger
// time is bit-for-bit reproducible later as long as no new event arrived.
struct QueryContext {
  SeqMode mode = SeqMode::kCandidateAware;
  int64_t reference_time_s = 0;
  std::vector<double> features;
};

inline QueryContext make_candidate_query(const LabeledExample& ex, const SeqConfig& cfg) {
  if (cfg.mode != SeqMode::kCandidateAware)
    throw ConfigError("make_candidate_query requires candidate_aware mode");
  QueryContext q;
  q.mode = SeqMode::kCandidateAware;
  q.reference_time_s = ex.context.request_time_s;
  q.features.reserve(cfg.query_feature_width());
  if (static_cast<int>(ex.candidate.content_vec.size()) != cfg.d_content)
    throw ShapeError(strfmt("candidate content has dim %zu, config expects %d",
                            ex.candidate.content_vec.size(), cfg.d_content));
  q.features.insert(q.features.end(), ex.candidate.content_vec.begin(), ex.candidate.content_vec.end());
  double c0 = ex.cross_features.size() > 0 ? ex.cross_features[0] : 0.0;
  double c1 = ex.cross_features.size() > 1 ? ex.cross_features[1] : 0.0;
  q.features.push_back(c0);
  q.features.push_back(c1);
  for (int s = 0; s < kSurfaceVocab; ++s) q.features.push_back(ex.context.surface_id == s ? 1.0 : 0.0);
  for (int dv = 0; dv < kDeviceVocab; ++dv) q.features.push_back(ex.context.device_id == dv ? 1.0 : 0.0);
  double hod = static_cast<double>((ex.context.request_time_s / 3600) % 24);
  q.features.push_back(std::sin(2.0 * kPi * hod / 24.0));
  q.features.push_back(std::cos(2.0 * kPi * hod / 24.0));
  return q;
}

inline QueryContext make_user_query(const ActionEvent* begin, const ActionEvent* end,
                                    const SeqConfig& cfg) {
  if (cfg.mode != SeqMode::kUserOnly) throw ConfigError("make_user_query requires user_only mode");
  QueryContext q;
  q.mode = SeqMode::kUserOnly;
  q.reference_time_s = begin == end ? 0 : (end - 1)->timestamp_s;
  std::vector<double> hist(kTypeVocab, 0.0);
  double n = static_cast<double>(end - begin);
  for (const ActionEvent* e = begin; e != end; ++e) hist[static_cast<int>(e->action_type)] += 1.0;
  if (n > 0)
    for (double& v : hist) v /= n;
  q.features = hist;
  q.features.push_back(std::log1p(n));
  return q;
}

// ---------------------------------------------------------------------------
// Token construction
// ---------------------------------------------------------------------------

// Sinusoidal encoding of the age delta = reference - tau, laid out as
// (sin, cos) per period, ascending periods, clipped to the first `dims`.
inline std::vector<double> time_encode(int64_t tau_s, int64_t reference_s, int dims = 2 * kTimePairs) {
  if (tau_s > reference_s)
    throw ValueError(strfmt("event time %lld is after the reference time %lld",
                            static_cast<long long>(tau_s), static_cast<long long>(reference_s)));
  double delta_h = static_cast<double>(reference_s - tau_s) / 3600.0;
  std::vector<double> enc(2 * kTimePairs);
  for (int i = 0; i < kTimePairs; ++i) {
    double angle = 2.0 * kPi * delta_h / kTimePeriodsHours[i];
    enc[2 * i] = std::sin(angle);
    enc[2 * i + 1] = std::cos(angle);
  }
  if (dims < static_cast<int>(enc.size())) enc.resize(std::max(dims, 0));
  return enc;
}

namespace detail {

inline void check_id(const char* table, int id, int vocab) {
  if (id < 0 || id >= vocab) throw ValueError(strfmt("%s id %d outside table of %d rows", table, id, vocab));
}

}  // namespace detail

// Events -> [T x d] token rows, oldest first. Five categorical embeddings
// plus the content slot feed a two-layer MLP; the additive age encoding
// lands on the leading time_dims afterwards.
inline Var tokenize(Tape& t, const ActionEvent* begin, const ActionEvent* end,
                    int64_t reference_time_s, const SeqConfig& cfg, const SeqVars& w) {
  int T = static_cast<int>(end - begin);
  if (T == 0) return t.leaf(Tensor::zeros({0, cfg.d}));
  if (T > kMaxContext) throw ValueError(strfmt("sequence of %d events exceeds the %d context cap", T, kMaxContext));
  std::vector<int> types(T), items(T), surfaces(T), hours(T), metas(T);
  Tensor content = Tensor::zeros({T, cfg.d_content});
  Tensor missing = Tensor::zeros({T, 1});
  Tensor ages = Tensor::zeros({T, cfg.d});
  int enc_dims = std::min(cfg.d, std::min(cfg.time_dims, 2 * kTimePairs));
  for (int i = 0; i < T; ++i) {
    const ActionEvent& e = begin[i];
    types[i] = static_cast<int>(e.action_type);
    detail::check_id("type", types[i], kTypeVocab);
    detail::check_id("item", e.item_id, kItemVocab);
    detail::check_id("surface", e.surface_id, kSurfaceVocab);
    detail::check_id("meta", e.meta_id, kMetaVocab);
    items[i] = e.item_id;
    surfaces[i] = e.surface_id;
    hours[i] = static_cast<int>((e.timestamp_s / 3600) % 24);
    metas[i] = e.meta_id;
    if (e.has_content && !cfg.mask_content) {
      if (static_cast<int>(e.content_vec.size()) != cfg.d_content)
        throw ShapeError(strfmt("event content has dim %zu, config expects %d", e.content_vec.size(),
                                cfg.d_content));
      for (int j = 0; j < cfg.d_content; ++j) content.at(i, j) = e.content_vec[j];
    } else {
      missing.at(i, 0) = 1.0;
    }
    std::vector<double> enc = time_encode(e.timestamp_s, reference_time_s, enc_dims);
    for (int j = 0; j < enc_dims; ++j) ages.at(i, j) = enc[j];
  }
  Var meta_emb = t.gather_rows(w.e_meta, metas);
  // Missing content adds a learned indicator onto the meta embedding.
  meta_emb = t.add(meta_emb, t.matmul(t.leaf(missing), w.e_missing));
  Var cat = t.concat_cols({t.gather_rows(w.e_type, types), t.gather_rows(w.e_item, items),
                           t.gather_rows(w.e_surface, surfaces), t.gather_rows(w.e_time, hours),
                           meta_emb, t.leaf(content)});
  Var hid = t.silu(t.add_row(t.matmul(cat, w.w_act1), w.b_act1));
  Var X = t.add_row(t.matmul(hid, w.w_act2), w.b_act2);
  return t.add(X, t.leaf(ages));
}

// Projects the query features to n_q tokens and adds the learned seeds.
inline Var build_query_tokens(Tape& t, const QueryContext& q, const SeqConfig& cfg, const SeqVars& w) {
  if (q.mode != cfg.mode) throw ConfigError("query context mode does not match the model mode");
  if (static_cast<int>(q.features.size()) != cfg.query_feature_width())
    throw ShapeError(strfmt("query features have dim %zu, config expects %d", q.features.size(),
                            cfg.query_feature_width()));
  Var f = t.leaf(Tensor::row(q.features));
  Var proj = t.matmul(f, w.w_qc);  // [1 x n_q*d]
  std::vector<Var> rows;
  rows.reserve(cfg.n_q);
  for (int k = 0; k < cfg.n_q; ++k) rows.push_back(t.slice_cols(proj, k * cfg.d, (k + 1) * cfg.d));
  return t.add(t.concat_rows(rows), w.seed_q);
}

// Query tokens occupy the last n_q rows of the fused input. Either side may
// be empty (no events, or a query-free pass).
inline Var fuse_query_tokens(Tape& t, Var x_seq, Var q) {
  if (t.value(x_seq).cols() != t.value(q).cols())
    throw ShapeError(strfmt("token width %d does not match query width %d", t.value(x_seq).cols(),
                            t.value(q).cols()));
  if (t.value(x_seq).rows() == 0) return q;
  if (t.value(q).rows() == 0) return x_seq;
  return t.concat_rows({x_seq, q});
}

// Lower-triangular keep mask: position i attends to positions <= i. Query
// tokens sit last, so they see the whole sequence and earlier queries.
inline std::vector<uint8_t> causal_keep(int rows) {
  std::vector<uint8_t> keep(static_cast<size_t>(rows) * rows, 0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j <= i; ++j) keep[static_cast<size_t>(i) * rows + j] = 1;
  return keep;
}

// ---------------------------------------------------------------------------
// Attention, two mathematically equivalent paths
// ---------------------------------------------------------------------------

// Optional per-layer capture of attention matrices for offline analysis.
struct AttnProbe {
  struct LayerProbe {
    std::vector<Tensor> per_head;     // [rows x rows] post-softmax
    std::vector<int64_t> col_times;   // timestamp per column
    std::vector<uint8_t> col_is_event;
  };
  std::vector<LayerProbe> layers;
  int n_q = 0;
};

namespace detail {

struct HeadSlices {
  Var q_lat_h;  // [rows x d_c]
  Var wq_h, wk_h, wv_h, wout_h;
};

inline HeadSlices head_slices(Tape& t, Var q_lat, const LayerVars& w, int head, int d_c) {
  HeadSlices s;
  s.q_lat_h = t.slice_cols(q_lat, head * d_c, (head + 1) * d_c);
  s.wq_h = t.slice_rows(w.w_q_up, head * d_c, (head + 1) * d_c);
  s.wk_h = t.slice_rows(w.w_k_up, head * d_c, (head + 1) * d_c);
  s.wv_h = t.slice_rows(w.w_v_up, head * d_c, (head + 1) * d_c);
  s.wout_h = t.slice_rows(w.w_out, head * d_c, (head + 1) * d_c);
  return s;
}

}  // namespace detail

// Reference path: per-head K, V, Q are materialized through the
// up-projections before scaled dot-product attention.
inline Var mla_naive(Tape& t, Var X, const LayerVars& w, const SeqConfig& cfg,
                     const std::vector<uint8_t>& keep,
                     AttnProbe::LayerProbe* probe = nullptr) {
  Var kv_lat = t.rms_norm(t.matmul(X, w.w_kv_down), w.gain_kv);
  Var q_lat = t.rms_norm(t.matmul(X, w.w_q_down), w.gain_q);
  double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_c));
  std::vector<Var> heads;
  heads.reserve(cfg.h);
  for (int head = 0; head < cfg.h; ++head) {
    detail::HeadSlices s = detail::head_slices(t, q_lat, w, head, cfg.d_c);
    Var Q = t.matmul(s.q_lat_h, s.wq_h);
    Var K = t.matmul(kv_lat, s.wk_h);
    Var V = t.matmul(kv_lat, s.wv_h);
    Var P = t.masked_softmax(t.scale(t.matmul_nt(Q, K), scale), keep);
    if (probe) probe->per_head.push_back(t.value(P));
    heads.push_back(t.matmul(P, V));
  }
  return t.matmul(t.concat_cols(heads), w.w_out);
}

// Fused per-head matrices realizing the algebraic absorption of the up- and
// output-projections: scores through w_qk, values straight to model width
// through w_vo.
struct AbsorbedWeights {
  Tensor w_qk;  // h stacked blocks of [d_c x d_c]
  Tensor w_vo;  // h stacked blocks of [d_c x d]
};

inline AbsorbedWeights absorb_weights(const LayerWeights& lw, const SeqConfig& cfg) {
  AbsorbedWeights a;
  a.w_qk = Tensor::zeros({cfg.h * cfg.d_c, cfg.d_c});
  a.w_vo = Tensor::zeros({cfg.h * cfg.d_c, cfg.d});
  for (int head = 0; head < cfg.h; ++head) {
    for (int i = 0; i < cfg.d_c; ++i)
      for (int j = 0; j < cfg.d_c; ++j) {
        double acc = 0.0;
        for (int k = 0; k < cfg.d_c; ++k)
          acc += lw.w_q_up.at(head * cfg.d_c + i, k) * lw.w_k_up.at(head * cfg.d_c + j, k);
        a.w_qk.at(head * cfg.d_c + i, j) = acc;
      }
    for (int i = 0; i < cfg.d_c; ++i)
      for (int j = 0; j < cfg.d; ++j) {
        double acc = 0.0;
        for (int k = 0; k < cfg.d_c; ++k)
          acc += lw.w_v_up.at(head * cfg.d_c + i, k) * lw.w_out.at(head * cfg.d_c + k, j);
        a.w_vo.at(head * cfg.d_c + i, j) = acc;
      }
  }
  return a;
}

// Absorbed path: scores live entirely in the shared latent space and values
// skip the per-head width, matching the naive path to floating-point noise.
inline Var mla_absorbed(Tape& t, Var X, const LayerVars& w, const AbsorbedWeights& fused,
                        const SeqConfig& cfg, const std::vector<uint8_t>& keep,
                        AttnProbe::LayerProbe* probe = nullptr) {
  Var kv_lat = t.rms_norm(t.matmul(X, w.w_kv_down), w.gain_kv);
  Var q_lat = t.rms_norm(t.matmul(X, w.w_q_down), w.gain_q);
  Var w_qk = t.leaf(fused.w_qk);
  Var w_vo = t.leaf(fused.w_vo);
  double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_c));
  Var out;
  for (int head = 0; head < cfg.h; ++head) {
    Var q_lat_h = t.slice_cols(q_lat, head * cfg.d_c, (head + 1) * cfg.d_c);
    Var wqk_h = t.slice_rows(w_qk, head * cfg.d_c, (head + 1) * cfg.d_c);
    Var wvo_h = t.slice_rows(w_vo, head * cfg.d_c, (head + 1) * cfg.d_c);
    Var P = t.masked_softmax(t.scale(t.matmul_nt(t.matmul(q_lat_h, wqk_h), kv_lat), scale), keep);
    if (probe) probe->per_head.push_back(t.value(P));
    Var head_out = t.matmul(t.matmul(P, kv_lat), wvo_h);
    out = head == 0 ? head_out : t.add(out, head_out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer, trimming, forward
// ---------------------------------------------------------------------------

enum class AttnPath { kNaive, kAbsorbed };

// Z = norm(R + MLA(R)); X = norm(Z + FFN(Z)), FFN a two-matmul block with a
// self-gated nonlinearity (cost 4*T*d*d_ff FLOPs, matching the accounting).
inline Var transformer_layer(Tape& t, Var R, const LayerVars& w, const SeqConfig& cfg,
                             const std::vector<uint8_t>& keep, AttnPath path,
                             const AbsorbedWeights* fused = nullptr,
                             AttnProbe::LayerProbe* probe = nullptr) {
  Var attn = path == AttnPath::kNaive
                 ? mla_naive(t, R, w, cfg, keep, probe)
                 : mla_absorbed(t, R, w, *fused, cfg, keep, probe);
  Var Z = t.rms_norm(t.add(R, attn), w.gain_z);
  Var ff = t.add_row(t.matmul(t.silu(t.add_row(t.matmul(Z, w.w_ff1), w.b_ff1)), w.w_ff2), w.b_ff2);
  return t.rms_norm(t.add(Z, ff), w.gain_x);
}

// Keeps the last T_next rows: the most recent events plus all query tokens.
inline Var pyramidal_trim(Tape& t, Var X, int T_next, int n_q) {
  int rows = t.value(X).rows();
  if (T_next > rows) throw ShapeError(strfmt("cannot retain %d of %d rows", T_next, rows));
  if (T_next < n_q) throw ShapeError(strfmt("retained count %d would drop query tokens (n_q=%d)", T_next, n_q));
  if (T_next == rows) return X;
  return t.slice_rows(X, rows - T_next, rows);
}

// Low-rank-adapted two-layer MLP over the flattened query rows.
inline Var readout_lora(Tape& t, Var flat, const ReadoutVars& r) {
  Var w1 = t.add(r.w1, t.matmul(r.lora_a1, r.lora_b1));
  Var w2 = t.add(r.w2, t.matmul(r.lora_a2, r.lora_b2));
  Var hid = t.silu(t.add_row(t.matmul(flat, w1), r.bias1));
  return t.add_row(t.matmul(hid, w2), r.bias2);
}

// Full sequence-module pass. Returns the m_seq summaries as tape variables;
// probe capture (eval only) records every post-softmax attention matrix,
// hidden_capture the pre-trim output of every layer.
inline std::vector<Var> seq_forward(Tape& t, const ActionEvent* begin, const ActionEvent* end,
                                    const QueryContext& qctx, const SeqConfig& cfg, const SeqVars& w,
                                    AttnPath path = AttnPath::kNaive,
                                    const std::vector<AbsorbedWeights>* fused = nullptr,
                                    AttnProbe* probe = nullptr,
                                    std::vector<Tensor>* hidden_capture = nullptr) {
  cfg.validate();
  Var q = build_query_tokens(t, qctx, cfg, w);
  Var X = fuse_query_tokens(t, tokenize(t, begin, end, qctx.reference_time_s, cfg, w), q);
  int T = static_cast<int>(end - begin);
  std::vector<int64_t> times;
  times.reserve(T + cfg.n_q);
  for (const ActionEvent* e = begin; e != end; ++e) times.push_back(e->timestamp_s);
  for (int k = 0; k < cfg.n_q; ++k) times.push_back(qctx.reference_time_s);
  if (probe) {
    probe->layers.clear();
    probe->n_q = cfg.n_q;
  }
  for (int l = 0; l < cfg.L; ++l) {
    int rows = t.value(X).rows();
    AttnProbe::LayerProbe* lp = nullptr;
    if (probe) {
      probe->layers.emplace_back();
      lp = &probe->layers.back();
      lp->col_times = times;
      lp->col_is_event.assign(times.size(), 1);
      for (int k = 0; k < cfg.n_q; ++k) lp->col_is_event[times.size() - 1 - k] = 0;
    }
    X = transformer_layer(t, X, w.layers[l], cfg, causal_keep(rows), path,
                          fused ? &(*fused)[l] : nullptr, lp);
    if (hidden_capture) hidden_capture->push_back(t.value(X));
    if (!cfg.schedule.empty()) {
      // Schedules are absolute row budgets; short histories simply keep
      // every row they have.
      int keep_rows = std::min(cfg.schedule[l], rows);
      X = pyramidal_trim(t, X, keep_rows, cfg.n_q);
      times.erase(times.begin(), times.end() - keep_rows);
    }
  }
  int rows = t.value(X).rows();
  std::vector<Var> q_rows;
  q_rows.reserve(cfg.n_q);
  for (int k = rows - cfg.n_q; k < rows; ++k) q_rows.push_back(t.slice_rows(X, k, k + 1));
  Var flat = t.concat_cols(q_rows);  // [1 x n_q*d]
  std::vector<Var> summaries;
  summaries.reserve(cfg.m_seq);
  for (int k = 0; k < cfg.m_seq; ++k) summaries.push_back(readout_lora(t, flat, w.readouts[k]));
  return summaries;
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

struct FlopReport {
  long long seq_flops = 0;
  std::vector<long long> per_layer;
  long long tokenize_flops = 0;
  long long readout_flops = 0;
};

// Dominant-term accounting at 2 FLOPs per multiply-accumulate; softmax,
// normalization, and nonlinearity costs are ignored by convention.
inline FlopReport flop_count(const SeqConfig& cfg, int T) {
  cfg.validate();
  if (T < 0) throw ValueError("event count must be >= 0");
  FlopReport rep;
  long long rows = T + cfg.n_q;
  for (int l = 0; l < cfg.L; ++l) {
    long long t_in = rows;
    long long d = cfg.d, h = cfg.h, dc = cfg.d_c, dff = cfg.d_ff;
    long long layer = 2 * t_in * d * dc        // KV down-projection
                      + 2 * t_in * d * h * dc  // Q down-projection
                      + 2 * t_in * h * dc * dc // latent score transform
                      + 2 * t_in * t_in * h * dc  // scores
                      + 2 * t_in * t_in * h * dc  // context aggregation
                      + 2 * t_in * h * dc * d  // output projection
                      + 4 * t_in * d * dff;    // feed-forward
    rep.per_layer.push_back(layer);
    rep.seq_flops += layer;
    if (!cfg.schedule.empty()) rows = std::min<long long>(cfg.schedule[l], rows);
  }
  long long cw = cfg.token_concat_width();
  rep.tokenize_flops = 2LL * T * (cw * cfg.d + static_cast<long long>(cfg.d) * cfg.d);
  long long in_flat = static_cast<long long>(cfg.n_q) * cfg.d;
  long long lin1 = in_flat * cfg.d + in_flat * cfg.lora_rank + static_cast<long long>(cfg.lora_rank) * cfg.d;
  long long lin2 = static_cast<long long>(cfg.d) * cfg.d_seq + static_cast<long long>(cfg.d) * cfg.lora_rank +
                   static_cast<long long>(cfg.lora_rank) * cfg.d_seq;
  rep.readout_flops = 2LL * cfg.m_seq * (lin1 + lin2);
  return rep;
}

// ---------------------------------------------------------------------------
// Attention analysis
// ---------------------------------------------------------------------------

struct AttentionReport {
  std::vector<double> recent_mass;  // index k-1: mean renormalized mass on the k most recent events
  std::vector<double> topk_mass;    // index k-1: mean mass of the k largest entries per row
  std::map<long long, std::pair<double, double>> hourly;  // bucket -> (total mass, mean per event)
  int excluded_rows = 0;
  int counted_rows = 0;
};

// Aggregates query-row attention over event columns across layers and heads.
// Rows that place zero mass on event columns are excluded but counted.
inline AttentionReport attention_report(const AttnProbe& probe, int64_t request_time_s) {
  AttentionReport rep;
  int max_events = 0;
  for (const AttnProbe::LayerProbe& lp : probe.layers) {
    int events = 0;
    for (uint8_t f : lp.col_is_event) events += f;
    max_events = std::max(max_events, events);
  }
  if (max_events == 0) return rep;
  rep.recent_mass.assign(max_events, 0.0);
  rep.topk_mass.assign(max_events, 0.0);
  std::map<long long, std::pair<double, int>> bucket_acc;  // total mass, event-column count

  for (const AttnProbe::LayerProbe& lp : probe.layers) {
    std::vector<int> event_cols;
    for (size_t c = 0; c < lp.col_is_event.size(); ++c)
      if (lp.col_is_event[c]) event_cols.push_back(static_cast<int>(c));
    for (const Tensor& P : lp.per_head) {
      int rows = P.rows();
      for (int r = rows - probe.n_q; r < rows; ++r) {
        std::vector<double> mass;
        mass.reserve(event_cols.size());
        double total = 0.0;
        for (int c : event_cols) {
          mass.push_back(P.at(r, c));
          total += P.at(r, c);
        }
        if (total <= 0.0 || mass.empty()) {
          ++rep.excluded_rows;
          continue;
        }
        ++rep.counted_rows;
        for (double& m : mass) m /= total;
        // Recent mass: event columns are time-ordered, most recent last.
        double acc = 0.0;
        for (size_t k = 0; k < mass.size(); ++k) {
          acc += mass[mass.size() - 1 - k];
          rep.recent_mass[k] += acc;
        }
        for (size_t k = mass.size(); k < static_cast<size_t>(max_events); ++k) rep.recent_mass[k] += 1.0;
        std::vector<double> sorted = mass;
        std::sort(sorted.begin(), sorted.end(), std::greater<double>());
        acc = 0.0;
        for (size_t k = 0; k < sorted.size(); ++k) {
          acc += sorted[k];
          rep.topk_mass[k] += acc;
        }
        for (size_t k = sorted.size(); k < static_cast<size_t>(max_events); ++k) rep.topk_mass[k] += 1.0;
        for (size_t i = 0; i < event_cols.size(); ++i) {
          long long bucket = (request_time_s - lp.col_times[event_cols[i]]) / 3600;
          bucket_acc[bucket].first += mass[i];
        }
      }
    }
    // Event-column multiplicity per bucket: one slot per (head, query row).
    for (int c : event_cols) {
      long long bucket = (request_time_s - lp.col_times[c]) / 3600;
      bucket_acc[bucket].second += static_cast<int>(lp.per_head.size()) * probe.n_q;
    }
  }
  if (rep.counted_rows > 0) {
    for (double& v : rep.recent_mass) v /= rep.counted_rows;
    for (double& v : rep.topk_mass) v /= rep.counted_rows;
  }
  for (const auto& [bucket, acc] : bucket_acc) {
    double mean_per_event = acc.second > 0 ? acc.first / acc.second : 0.0;
    rep.hourly[bucket] = {acc.first, mean_per_event};
  }
  return rep;
}

inline void write_attention_mass_csv(const AttentionReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot open '%s' for writing", path.c_str()));
  out << "k,recent_mass,topk_mass\n";
  char buf[80];
  for (size_t k = 0; k < rep.recent_mass.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", k + 1, rep.recent_mass[k], rep.topk_mass[k]);
    out << buf;
  }
}

inline void write_attention_hourly_csv(const AttentionReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot open '%s' for writing", path.c_str()));
  out << "bucket_hours,total_mass,mean_mass_per_event\n";
  char buf[96];
  for (const auto& [bucket, v] : rep.hourly) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g\n", bucket, v.first, v.second);
    out << buf;
  }
}

}  // namespace llatte

#endif  // LLATTE_SEQUENCE_HPP_
