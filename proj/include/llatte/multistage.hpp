#ifndef LLATTE_MULTISTAGE_HPP_
#define LLATTE_MULTISTAGE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "llatte/model.hpp"
#include "llatte/trainer.hpp"

namespace llatte {

// ---------------------------------------------------------------------------
// Embedding store
// ---------------------------------------------------------------------------

struct EmbeddingRecord {
  int64_t user_id = 0;
  std::vector<double> vec;  // dim d_transfer
  int64_t computed_at = 0;  // seconds
  std::string model_version;

  void validate(int d_transfer) const {
    if (static_cast<int>(vec.size()) != d_transfer)
      throw ShapeError(strfmt("embedding record has dim %zu, store expects %d", vec.size(), d_transfer));
    for (double x : vec)
      if (!std::isfinite(x)) throw ValueError(strfmt("non-finite embedding entry for user %lld",
                                                     static_cast<long long>(user_id)));
  }
};

// One writer, many readers. Each write publishes an immutable record under an
// exclusive lock; readers copy out a shared_ptr under a shared lock, so a read
// always observes a complete record, never a partial write. The store keeps
// every version per user (ordered by computed_at) so offline evaluation can
// replay as-of reads against historical request times; a live system would
// only keep the latest map.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(int d_transfer) : d_transfer_(d_transfer) {
    if (d_transfer < 1) throw ConfigError("embedding store needs d_transfer >= 1");
  }

  int d_transfer() const { return d_transfer_; }

  void put(EmbeddingRecord rec) {
    rec.validate(d_transfer_);
    auto ptr = std::make_shared<const EmbeddingRecord>(std::move(rec));
    std::unique_lock<std::shared_mutex> lock(mu_);
    std::vector<std::shared_ptr<const EmbeddingRecord>>& hist = records_[ptr->user_id];
    // Keep the version list sorted by computed_at; ties keep insertion order
    // so the most recent write wins an as-of read at the shared timestamp.
    auto pos = std::upper_bound(hist.begin(), hist.end(), ptr->computed_at,
                                [](int64_t t, const std::shared_ptr<const EmbeddingRecord>& r) {
                                  return t < r->computed_at;
                                });
    hist.insert(pos, std::move(ptr));
  }

  // Latest record regardless of time; nullptr when the user is absent.
  std::shared_ptr<const EmbeddingRecord> latest(int64_t user_id) const {
    std::shared_lock<std::shared_mutex> lock(mu_);
    auto it = records_.find(user_id);
    if (it == records_.end() || it->second.empty()) return nullptr;
    return it->second.back();
  }

  // Latest record with computed_at <= request_time; nullptr when none
  // qualifies. Never returns a record from the future.
  std::shared_ptr<const EmbeddingRecord> get_asof(int64_t user_id, int64_t request_time) const {
    std::shared_lock<std::shared_mutex> lock(mu_);
    auto it = records_.find(user_id);
    if (it == records_.end()) return nullptr;
    const auto& hist = it->second;
    auto pos = std::upper_bound(hist.begin(), hist.end(), request_time,
                                [](int64_t t, const std::shared_ptr<const EmbeddingRecord>& r) {
                                  return t < r->computed_at;
                                });
    if (pos == hist.begin()) return nullptr;
    return *(pos - 1);
  }

  size_t user_count() const {
    std::shared_lock<std::shared_mutex> lock(mu_);
    return records_.size();
  }

  size_t record_count() const {
    std::shared_lock<std::shared_mutex> lock(mu_);
    size_t n = 0;
    for (const auto& kv : records_) n += kv.second.size();
    return n;
  }

 private:
  int d_transfer_;
  mutable std::shared_mutex mu_;
  std::map<int64_t, std::vector<std::shared_ptr<const EmbeddingRecord>>> records_;
};

// As-of read as the downstream model consumes it: the stored vector with
// missing = 0, or the fallback zero vector with missing = 1 when no record
// has computed_at <= request_time.
inline CachedFeature store_get_asof(const EmbeddingStore& store, int64_t user_id,
                                    int64_t request_time) {
  if (request_time < 0) throw ValueError("request_time must be >= 0");
  std::shared_ptr<const EmbeddingRecord> rec = store.get_asof(user_id, request_time);
  CachedFeature out;
  if (rec == nullptr) {
    out.vec.assign(store.d_transfer(), 0.0);
    out.missing = 1.0;
  } else {
    out.vec = rec->vec;
    out.missing = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trigger policy and upstream inference
// ---------------------------------------------------------------------------

struct TriggerPolicy {
  std::vector<ActionType> types = {ActionType::kConversion};
  int64_t min_interval_s = 0;  // minimum seconds between updates per user

  void validate() const {
    if (min_interval_s < 0) throw ConfigError("trigger min interval must be >= 0");
    if (types.empty()) throw ConfigError("trigger policy needs at least one action type");
  }

  bool matches(ActionType t) const { return std::find(types.begin(), types.end(), t) != types.end(); }
};

// The upstream side of the two-stage pipeline: a user_only model whose first
// sequence summary is pushed through a fixed random projection to d_transfer.
// The projection sits outside the upstream training graph (its output feeds
// the store, not the upstream loss), so it stays at its seeded value; entries
// are N(0, 1/d_seq) to keep projected coordinates on the summary's scale.
struct UpstreamModel {
  ModelConfig cfg;      // seq.mode must be kUserOnly
  ModelWeights weights;
  Tensor w_transfer;    // [d_seq x d_transfer]
  int d_transfer = 0;
  std::string version = "v1";
};

inline UpstreamModel make_upstream_model(const ModelConfig& cfg, const ModelWeights& weights,
                                         int d_transfer, uint64_t seed, std::string version = "v1") {
  cfg.validate();
  if (cfg.seq.mode != SeqMode::kUserOnly)
    throw ConfigError("upstream model must run its sequence module user_only");
  if (d_transfer < 1) throw ConfigError("d_transfer must be >= 1");
  UpstreamModel um;
  um.cfg = cfg;
  um.weights = weights;
  Rng root = Rng(seed).sub("transfer", 0);
  um.w_transfer = detail::init_matrix(root, "w_transfer", cfg.seq.d_seq, d_transfer,
                                      1.0 / std::sqrt(static_cast<double>(cfg.seq.d_seq)));
  um.d_transfer = d_transfer;
  um.version = std::move(version);
  return um;
}

// Embed the user's history as of time t: events with timestamp <= t, windowed
// to the model's horizon, user_only forward, first summary projected to
// d_transfer. Deterministic; an empty history is a query-only forward.
inline EmbeddingRecord upstream_infer(const UpstreamModel& um, int64_t user_id,
                                      const ActionEvent* begin, const ActionEvent* end, int64_t t) {
  if (um.cfg.seq.mode != SeqMode::kUserOnly)
    throw ConfigError("upstream model must run its sequence module user_only");
  while (begin < end && (end - 1)->timestamp_s > t) --end;
  begin = windowed_begin(begin, end, um.cfg.seq);

  Tape tape;
  ModelVars v = place_model_weights(tape, um.weights, false);
  QueryContext qctx = make_user_query(begin, end, um.cfg.seq);
  std::vector<Var> summaries = seq_forward(tape, begin, end, qctx, um.cfg.seq, v.seq);
  const Tensor& z1 = tape.value(summaries[0]);  // [1 x d_seq]

  EmbeddingRecord rec;
  rec.user_id = user_id;
  rec.vec.assign(um.d_transfer, 0.0);
  for (int j = 0; j < um.d_transfer; ++j) {
    double acc = 0.0;
    for (int k = 0; k < um.cfg.seq.d_seq; ++k) acc += z1.at(0, k) * um.w_transfer.at(k, j);
    rec.vec[j] = acc;
  }
  rec.computed_at = t;
  rec.model_version = um.version;
  rec.validate(um.d_transfer);
  return rec;
}

// ---------------------------------------------------------------------------
// Event-stream processing
// ---------------------------------------------------------------------------

// One event in the merged all-user timeline.
struct TimelineEvent {
  int64_t user_id = 0;
  ActionEvent event;
};

// Merge the full event history of every distinct user in the dataset into one
// time-sorted stream (ties broken by user id, then per-user event order).
inline std::vector<TimelineEvent> build_timeline(const Dataset& data) {
  std::map<int64_t, std::shared_ptr<const UserHistory>> users;
  for (const std::vector<LabeledExample>* split : {&data.train, &data.eval})
    for (const LabeledExample& ex : *split)
      if (ex.user) users.emplace(ex.user->user_id, ex.user);

  std::vector<TimelineEvent> timeline;
  for (const auto& kv : users) {
    kv.second->check_sorted();
    for (const ActionEvent& ev : kv.second->events) timeline.push_back({kv.first, ev});
  }
  std::stable_sort(timeline.begin(), timeline.end(), [](const TimelineEvent& a, const TimelineEvent& b) {
    if (a.event.timestamp_s != b.event.timestamp_s) return a.event.timestamp_s < b.event.timestamp_s;
    return a.user_id < b.user_id;
  });
  return timeline;
}

struct UpdateLogEntry {
  int64_t user_id = 0;
  int64_t trigger_time = 0;
  ActionType event_type = ActionType::kConversion;
};

inline std::string update_log_csv(const std::vector<UpdateLogEntry>& log) {
  std::string out = "user_id,trigger_time,event_type\n";
  for (const UpdateLogEntry& e : log)
    out += strfmt("%lld,%lld,%s\n", static_cast<long long>(e.user_id),
                  static_cast<long long>(e.trigger_time), action_type_name(e.event_type));
  return out;
}

// Walk the time-sorted stream; on each event matching the policy whose user
// has had no update for at least min_interval_s, recompute the embedding from
// that user's history up to and including the trigger event and publish it.
// staleness_delay_s shifts every record's computed_at to model asynchronous
// inference lag; the interval gate runs on trigger times, not delayed ones.
inline std::vector<UpdateLogEntry> process_event_stream(const std::vector<TimelineEvent>& timeline,
                                                        const TriggerPolicy& policy,
                                                        const UpstreamModel& um, EmbeddingStore& store,
                                                        int64_t staleness_delay_s = 0) {
  policy.validate();
  if (staleness_delay_s < 0) throw ConfigError("staleness delay must be >= 0");
  if (store.d_transfer() != um.d_transfer)
    throw ConfigError(strfmt("store dim %d does not match upstream d_transfer %d", store.d_transfer(),
                             um.d_transfer));
  for (size_t i = 1; i < timeline.size(); ++i)
    if (timeline[i].event.timestamp_s < timeline[i - 1].event.timestamp_s)
      throw ValueError(strfmt("event timeline is not time-sorted at position %zu", i));

  std::map<int64_t, std::vector<ActionEvent>> seen;
  std::map<int64_t, int64_t> last_update;
  std::vector<UpdateLogEntry> log;
  for (const TimelineEvent& te : timeline) {
    std::vector<ActionEvent>& hist = seen[te.user_id];
    hist.push_back(te.event);
    if (!policy.matches(te.event.action_type)) continue;
    int64_t t = te.event.timestamp_s;
    auto it = last_update.find(te.user_id);
    if (it != last_update.end() && t - it->second < policy.min_interval_s) continue;
    EmbeddingRecord rec = upstream_infer(um, te.user_id, hist.data(), hist.data() + hist.size(), t);
    rec.computed_at += staleness_delay_s;
    store.put(std::move(rec));
    last_update[te.user_id] = t;
    log.push_back({te.user_id, t, te.event.action_type});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Downstream scoring
// ---------------------------------------------------------------------------

// Score one request: as-of read at the request time fills the dedicated dense
// slot (or the zero-vector fallback with missing = 1), then the compact
// candidate_aware model predicts as usual.
inline PredictionVector downstream_score(const LabeledExample& ex, const EmbeddingStore& store,
                                         const ModelConfig& cfg, const ModelWeights& weights) {
  if (cfg.d_transfer < 1) throw ConfigError("downstream model has no cached-embedding slot");
  if (store.d_transfer() != cfg.d_transfer)
    throw ConfigError(strfmt("store dim %d does not match model d_transfer %d", store.d_transfer(),
                             cfg.d_transfer));
  if (!ex.user) throw ValueError("example has no user history");
  CachedFeature cached = store_get_asof(store, ex.user->user_id, ex.context.request_time_s);
  Tape t;
  ModelVars v = place_model_weights(t, weights, false);
  return model_predict(t, ex, cfg, v, &cached);
}

// ---------------------------------------------------------------------------
// Transfer ratio
// ---------------------------------------------------------------------------

// tau = delta_ne_downstream / delta_ne_upstream, as a fraction of the
// upstream gain carried through to the downstream model.
inline double transfer_ratio(double delta_ne_upstream, double delta_ne_downstream) {
  if (delta_ne_upstream == 0.0) throw ValueError("undefined transfer ratio: upstream NE delta is zero");
  return delta_ne_downstream / delta_ne_upstream;
}

// Reported percent value: truncation toward zero matches the convention used
// for published integers (0.538... -> 53).
inline int transfer_ratio_display_pct(double tau) { return static_cast<int>(tau * 100.0); }

// ---------------------------------------------------------------------------
// Pipeline evaluation
// ---------------------------------------------------------------------------

struct PipelineConfig {
  SeqConfig upstream_seq;           // candidate upstream; mode user_only, horizon via max_events
  SeqConfig upstream_baseline_seq;  // baseline upstream; mode user_only
  SeqConfig downstream_seq;         // mode candidate_aware, short horizon
  int d_transfer = 64;
  TriggerPolicy policy;
  int64_t staleness_delay_s = 0;
  int l_ns = 2;  // backbone stack shared by every model in the pipeline
  int hidden = 32;
  int d_out = 16;
  TrainConfig train;

  void validate() const {
    upstream_seq.validate();
    upstream_baseline_seq.validate();
    downstream_seq.validate();
    if (upstream_seq.mode != SeqMode::kUserOnly || upstream_baseline_seq.mode != SeqMode::kUserOnly)
      throw ConfigError("upstream sequence modules must run user_only");
    if (downstream_seq.mode != SeqMode::kCandidateAware)
      throw ConfigError("downstream sequence module must run candidate_aware");
    if (d_transfer < 1) throw ConfigError("d_transfer must be >= 1");
    if (staleness_delay_s < 0) throw ConfigError("staleness delay must be >= 0");
    policy.validate();
    train.validate();
  }
};

struct PipelineReport {
  double ne_up = 0;             // upstream candidate eval NE (first head)
  double ne_up_baseline = 0;    // upstream baseline eval NE
  double ne_down = 0;           // downstream NE consuming the candidate upstream's cache
  double ne_down_baseline = 0;  // downstream NE consuming the baseline upstream's cache
  double tau_pct = 0;           // 100 * transfer_ratio
  long long seq_flops_up = 0;   // per-inference sequence FLOPs at the upstream horizon
  long long seq_flops_down = 0; // per-request sequence FLOPs at the downstream horizon
  double flops_ratio = 0;       // up / down
};

inline std::string pipeline_report_json(const PipelineReport& r) {
  return strfmt(
      "{\"ne_up\": %.9g, \"ne_down\": %.9g, \"ne_down_baseline\": %.9g, \"tau_pct\": %.9g, "
      "\"seq_flops_up\": %lld, \"seq_flops_down\": %lld, \"flops_ratio\": %.9g}",
      r.ne_up, r.ne_down, r.ne_down_baseline, r.tau_pct, r.seq_flops_up, r.seq_flops_down,
      r.flops_ratio);
}

// Trained artifacts of one evaluate_pipeline run, exposed for inspection.
struct PipelineModels {
  UpstreamModel up_baseline;
  UpstreamModel up_candidate;
  ModelConfig down_cfg;
  ModelWeights down_baseline;
  ModelWeights down_candidate;
};

namespace detail {

// Cached features for a whole example list, resolved against one store.
inline std::vector<CachedFeature> resolve_cached(const std::vector<LabeledExample>& examples,
                                                 const EmbeddingStore& store) {
  std::vector<CachedFeature> out;
  out.reserve(examples.size());
  for (const LabeledExample& ex : examples) {
    if (!ex.user) throw ValueError("example has no user history");
    out.push_back(store_get_asof(store, ex.user->user_id, ex.context.request_time_s));
  }
  return out;
}

}  // namespace detail

// Full two-stage protocol. Both upstream variants train end-to-end on the
// same labeled examples (sequence module user_only, candidate features enter
// only through the backbone) so upstream and downstream NE stay comparable.
// Each variant then populates its own store from the merged event timeline,
// and a downstream model is retrained from the same seed per variant, reading
// that store as-of each request. tau relates the downstream NE delta to the
// upstream NE delta; identical variants make it undefined and raise.
inline PipelineReport evaluate_pipeline(const PipelineConfig& pcfg, const Dataset& data, uint64_t seed,
                                        PipelineModels* models_out = nullptr) {
  pcfg.validate();
  std::vector<TimelineEvent> timeline = build_timeline(data);

  auto run_upstream = [&](const SeqConfig& seq, const std::string& version) {
    ModelConfig mc = make_model_config(seq, pcfg.l_ns, pcfg.hidden, pcfg.d_out, 0);
    TrainResult tr = train_model(mc, init_model_weights(mc, seed), data.train, data.eval, pcfg.train);
    UpstreamModel um = make_upstream_model(mc, tr.weights, pcfg.d_transfer, seed, version);
    double ne = evaluate_ne(mc, tr.weights, data.eval)[0];
    return std::make_pair(um, ne);
  };

  auto [up_base, ne_up_base] = run_upstream(pcfg.upstream_baseline_seq, "baseline");
  auto [up_cand, ne_up_cand] = run_upstream(pcfg.upstream_seq, "candidate");

  ModelConfig down_cfg =
      make_model_config(pcfg.downstream_seq, pcfg.l_ns, pcfg.hidden, pcfg.d_out, pcfg.d_transfer);
  auto run_downstream = [&](const UpstreamModel& um) {
    EmbeddingStore store(pcfg.d_transfer);
    process_event_stream(timeline, pcfg.policy, um, store, pcfg.staleness_delay_s);
    std::vector<CachedFeature> train_cached = detail::resolve_cached(data.train, store);
    std::vector<CachedFeature> eval_cached = detail::resolve_cached(data.eval, store);
    TrainResult tr = train_model(down_cfg, init_model_weights(down_cfg, seed), data.train, data.eval,
                                 pcfg.train, &train_cached, &eval_cached);
    double ne = evaluate_ne(down_cfg, tr.weights, data.eval, &eval_cached)[0];
    return std::make_pair(std::move(tr.weights), ne);
  };

  auto [down_base_w, ne_down_base] = run_downstream(up_base);
  auto [down_cand_w, ne_down_cand] = run_downstream(up_cand);

  PipelineReport rep;
  rep.ne_up = ne_up_cand;
  rep.ne_up_baseline = ne_up_base;
  rep.ne_down = ne_down_cand;
  rep.ne_down_baseline = ne_down_base;
  double dup = delta_ne(ne_up_cand, ne_up_base);
  double ddown = delta_ne(ne_down_cand, ne_down_base);
  rep.tau_pct = 100.0 * transfer_ratio(dup, ddown);
  rep.seq_flops_up = flop_count(pcfg.upstream_seq, pcfg.upstream_seq.max_events).seq_flops;
  rep.seq_flops_down = flop_count(pcfg.downstream_seq, pcfg.downstream_seq.max_events).seq_flops;
  rep.flops_ratio = static_cast<double>(rep.seq_flops_up) / static_cast<double>(rep.seq_flops_down);

  if (models_out != nullptr) {
    models_out->up_baseline = std::move(up_base);
    models_out->up_candidate = std::move(up_cand);
    models_out->down_cfg = down_cfg;
    models_out->down_baseline = std::move(down_base_w);
    models_out->down_candidate = std::move(down_cand_w);
  }
  return rep;
}

}  // namespace llatte

#endif  // LLATTE_MULTISTAGE_HPP_
