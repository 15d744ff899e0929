#ifndef LLATTE_MODEL_HPP_
#define LLATTE_MODEL_HPP_

#include <string>
#include <vector>

#include "llatte/backbone.hpp"
#include "llatte/events.hpp"
#include "llatte/sequence.hpp"
#include "llatte/tape.hpp"
#include "llatte/tensor.hpp"

namespace llatte {

// The generator emits exactly two cross features per example (content cosine
// against the last visible event and a hashed user-ad affinity).
inline constexpr int kNumCrossFeatures = 2;

// ---------------------------------------------------------------------------
// Full model: sequence module feeding the feature-interaction backbone
// ---------------------------------------------------------------------------

// d_transfer > 0 reserves a dense slot for a cached upstream embedding plus a
// float "missing" flag; 0 means the model has no cached-embedding pathway.
struct ModelConfig {
  SeqConfig seq;
  BackboneConfig backbone;
  int d_transfer = 0;

  void validate() const {
    seq.validate();
    backbone.validate();
    if (d_transfer < 0) throw ConfigError("d_transfer must be >= 0");
    if (backbone.m_seq != seq.m_seq || backbone.d_seq != seq.d_seq)
      throw ConfigError(strfmt("backbone expects %d summaries of width %d, sequence module emits %d of width %d",
                               backbone.m_seq, backbone.d_seq, seq.m_seq, seq.d_seq));
    std::vector<int> vocab = {kSurfaceVocab, kDeviceVocab, GeneratorConfig::kNumAds,
                              GeneratorConfig::kNumAds / GeneratorConfig::kAdsPerAdvertiser};
    if (backbone.sparse_vocab != vocab)
      throw ConfigError("backbone sparse schema must be [surface, device, ad, advertiser]");
    std::vector<int> dense = {seq.d_content};
    int floats = kNumCrossFeatures;
    if (d_transfer > 0) {
      dense.push_back(d_transfer);
      floats += 1;  // cache-missing flag
    }
    if (backbone.dense_dims != dense || backbone.m_float != floats)
      throw ConfigError("backbone dense/float schema disagrees with the model feature layout");
  }
};

// Canonical schema wiring: sparse = [surface, device, ad, advertiser];
// dense = [candidate content (+ cached embedding when d_transfer > 0)];
// floats = [cross features (+ cache-missing flag when d_transfer > 0)].
inline ModelConfig make_model_config(const SeqConfig& seq, int L_NS, int hidden, int d_out,
                                     int d_transfer = 0) {
  ModelConfig cfg;
  cfg.seq = seq;
  cfg.d_transfer = d_transfer;
  cfg.backbone.sparse_vocab = {kSurfaceVocab, kDeviceVocab, GeneratorConfig::kNumAds,
                               GeneratorConfig::kNumAds / GeneratorConfig::kAdsPerAdvertiser};
  cfg.backbone.dense_dims = {seq.d_content};
  cfg.backbone.m_float = kNumCrossFeatures;
  if (d_transfer > 0) {
    cfg.backbone.dense_dims.push_back(d_transfer);
    cfg.backbone.m_float += 1;
  }
  cfg.backbone.L_NS = L_NS;
  cfg.backbone.hidden = hidden;
  cfg.backbone.d_out = d_out;
  cfg.backbone.m_seq = seq.m_seq;
  cfg.backbone.d_seq = seq.d_seq;
  cfg.validate();
  return cfg;
}

struct ModelWeights {
  SeqWeights seq;
  BackboneWeights backbone;
};

template <class Fn>
void for_each_param(ModelWeights& w, Fn&& fn) {
  for_each_param(w.seq, "seq.", fn);
  for_each_param(w.backbone, "backbone.", fn);
}

inline ModelWeights init_model_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  w.seq = init_seq_weights(cfg.seq, seed);
  w.backbone = init_backbone_weights(cfg.backbone, seed);
  return w;
}

struct ModelVars {
  SeqVars seq;
  BackboneVars backbone;
};

inline ModelVars place_model_weights(Tape& t, const ModelWeights& w, bool needs_grad) {
  return {place_seq_weights(t, w.seq, needs_grad), place_backbone_weights(t, w.backbone, needs_grad)};
}

// Same order as for_each_param(ModelWeights).
template <class Fn>
void for_each_var(ModelVars& v, Fn&& fn) {
  for_each_var(v.seq, fn);
  for_each_var(v.backbone, fn);
}

// Overwrite every leaf slot with vars from a flat list (e.g. fresh leaves
// created by a gradient checker). Order matches for_each_param.
inline void assign_vars(ModelVars& v, const std::vector<Var>& flat) {
  size_t i = 0;
  for_each_var(v, [&](Var& slot) {
    if (i >= flat.size()) throw ShapeError("too few vars for the model parameter list");
    slot = flat[i++];
  });
  if (i != flat.size())
    throw ShapeError(strfmt("%zu vars supplied for %zu model parameters", flat.size(), i));
}

// ---------------------------------------------------------------------------
// Feature wiring
// ---------------------------------------------------------------------------

// A cached upstream embedding as the downstream model sees it: the stored
// vector, or a zero vector with missing = 1 when no record qualifies.
struct CachedFeature {
  std::vector<double> vec;
  double missing = 1.0;
};

inline FeatureBundle make_feature_bundle(const LabeledExample& ex, const ModelConfig& cfg,
                                         const CachedFeature* cached = nullptr) {
  FeatureBundle b;
  b.sparse_ids = {ex.context.surface_id, ex.context.device_id, ex.candidate.ad_id,
                  ex.candidate.advertiser_id};
  b.dense.push_back(ex.candidate.content_vec);
  b.floats = ex.cross_features;
  if (static_cast<int>(b.floats.size()) != kNumCrossFeatures)
    throw ShapeError(strfmt("example carries %zu cross features, expected %d", ex.cross_features.size(),
                            kNumCrossFeatures));
  if (cfg.d_transfer > 0) {
    if (cached == nullptr) {
      b.dense.push_back(std::vector<double>(cfg.d_transfer, 0.0));
      b.floats.push_back(1.0);
    } else {
      if (static_cast<int>(cached->vec.size()) != cfg.d_transfer)
        throw ShapeError(strfmt("cached embedding has dim %zu, model expects %d", cached->vec.size(),
                                cfg.d_transfer));
      b.dense.push_back(cached->vec);
      b.floats.push_back(cached->missing);
    }
  } else if (cached != nullptr) {
    throw ConfigError("model has no cached-embedding slot (d_transfer = 0)");
  }
  return b;
}

inline double label_for_head(const LabeledExample& ex, const std::string& head) {
  if (head == "ctr") return ex.label_ctr ? 1.0 : 0.0;
  if (head == "cvr") return ex.label_cvr ? 1.0 : 0.0;
  throw ConfigError(strfmt("unknown head '%s' (no label field)", head.c_str()));
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ModelOutput {
  std::vector<Var> logits;     // [1x1] per head
  std::vector<Var> summaries;  // m_seq of [1 x d_seq]
};

// The sequence module consumes at most seq.max_events of the most recent
// visible events; older history falls outside the model's horizon.
inline const ActionEvent* windowed_begin(const ActionEvent* begin, const ActionEvent* end,
                                         const SeqConfig& cfg) {
  long long n = end - begin;
  if (n > cfg.max_events) return end - cfg.max_events;
  return begin;
}

inline ModelOutput model_forward(Tape& t, const LabeledExample& ex, const ModelConfig& cfg,
                                 const ModelVars& v, const CachedFeature* cached = nullptr,
                                 AttnPath path = AttnPath::kNaive, AttnProbe* probe = nullptr) {
  const ActionEvent* begin = windowed_begin(ex.visible_begin(), ex.visible_end(), cfg.seq);
  QueryContext qctx = cfg.seq.mode == SeqMode::kCandidateAware
                          ? make_candidate_query(ex, cfg.seq)
                          : make_user_query(begin, ex.visible_end(), cfg.seq);
  ModelOutput out;
  out.summaries = seq_forward(t, begin, ex.visible_end(), qctx, cfg.seq, v.seq, path,
                              nullptr, probe);
  FeatureBundle bundle = make_feature_bundle(ex, cfg, cached);
  Var h0 = embed_and_concat(t, bundle, out.summaries, cfg.backbone, v.backbone);
  Var z = interaction_stack(t, h0, cfg.backbone, v.backbone);
  out.logits = predict_logits(t, z, v.backbone);
  return out;
}

inline PredictionVector model_predict(Tape& t, const LabeledExample& ex, const ModelConfig& cfg,
                                      const ModelVars& v, const CachedFeature* cached = nullptr) {
  PredictionVector pv;
  for (Var logit : model_forward(t, ex, cfg, v, cached).logits)
    pv.p.push_back(clamp_prob(Tape::sigmoid_stable(t.value(logit).scalar_value())));
  return pv;
}

}  // namespace llatte

#endif  // LLATTE_MODEL_HPP_
