#ifndef LLATTE_SCALING_HPP_
#define LLATTE_SCALING_HPP_

// Experiment orchestration across the scaling axes: grids of (depth, width,
// horizon, content) configs trained over shared seeds, log-linear fits of
// NE improvement against compute, ablation tables, and iso-FLOPs pipeline
// comparisons. Aggregation is deterministic regardless of scheduling order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "llatte/multistage.hpp"

namespace llatte {

enum class ScalingAxis { kDepth, kWidth, kSeqLength, kContent, kGrid };

inline const char* scaling_axis_name(ScalingAxis a) {
  switch (a) {
    case ScalingAxis::kDepth: return "depth";
    case ScalingAxis::kWidth: return "width";
    case ScalingAxis::kSeqLength: return "seq_length";
    case ScalingAxis::kContent: return "content";
    case ScalingAxis::kGrid: return "grid";
  }
  throw ValueError("unknown scaling axis");
}

// One point on an axis. Single-valued axes read `a`; the grid axis reads
// (a, b) = (layers, token width).
struct GridValue {
  int a = 0;
  int b = 0;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Standard error of the mean (sample stddev / sqrt(n)); 0 for n < 2.
inline double stderr_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  double var = ss / static_cast<double>(v.size() - 1);
  return std::sqrt(var / static_cast<double>(v.size()));
}

// Runs fn(0..n-1) on up to `jobs` threads, strided so slot ownership is
// fixed up front. fn must not throw; runs record their own failures.
template <class Fn>
inline void parallel_tasks(size_t n, int jobs, Fn&& fn) {
  if (jobs < 1) throw ValueError(strfmt("jobs=%d must be >= 1", jobs));
  size_t workers = std::min<size_t>(static_cast<size_t>(jobs), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&fn, w, workers, n] {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

// Ascending copy; experiment outputs must not depend on seed order.
inline std::vector<uint64_t> sorted_seeds(const std::vector<uint64_t>& seeds) {
  std::vector<uint64_t> s = seeds;
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Grid expansion
// ---------------------------------------------------------------------------

// Applies one axis value to the base sequence config. Width scaling keeps the
// conventional shape ratios: d_ff = 4*d and latent width d/4 (floored at 1).
inline SeqConfig apply_axis_value(ScalingAxis axis, GridValue v, const SeqConfig& base) {
  SeqConfig cfg = base;
  auto set_width = [&cfg](int d) {
    cfg.d = d;
    cfg.d_ff = 4 * d;
    cfg.d_c = std::max(1, d / 4);
  };
  switch (axis) {
    case ScalingAxis::kDepth: cfg.L = v.a; break;
    case ScalingAxis::kWidth: set_width(v.a); break;
    case ScalingAxis::kSeqLength: cfg.max_events = v.a; break;
    case ScalingAxis::kContent: cfg.mask_content = (v.a == 0); break;
    case ScalingAxis::kGrid:
      cfg.L = v.a;
      set_width(v.b);
      break;
  }
  return cfg;
}

inline std::string grid_config_id(const SeqConfig& cfg) {
  return strfmt("L%d_d%d_T%d_c%d", cfg.L, cfg.d, cfg.max_events, cfg.mask_content ? 0 : 1);
}

// Full model config for one grid point: schema wiring follows the sequence
// config, backbone shape and heads follow the prototype.
inline ModelConfig grid_model_config(const SeqConfig& seq, const BackboneConfig& proto) {
  ModelConfig mc = make_model_config(seq, proto.L_NS, proto.hidden, proto.d_out, 0);
  mc.backbone.d_e = proto.d_e;
  mc.backbone.head_names = proto.head_names;
  mc.backbone.head_weights = proto.head_weights;
  mc.validate();
  return mc;
}

struct ExperimentSpec {
  ScalingAxis axis = ScalingAxis::kDepth;
  std::vector<GridValue> values;
  SeqConfig base_seq;
  BackboneConfig backbone;  // prototype; schema fields are rewired per config
  TrainConfig train;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string baseline_id;  // empty: the config expanded from values[0]

  void validate() const {
    if (values.empty()) throw ConfigError("experiment value list is empty");
    train.validate();
    std::vector<uint64_t> s = detail::sorted_seeds(seeds);
    if (std::unique(s.begin(), s.end()) != s.end())
      throw ConfigError("experiment seeds must be distinct");
    if (s.size() < 3)
      throw ConfigError(strfmt("%zu seeds given, at least 3 required for aggregate statistics", s.size()));
  }
};

struct RunResult {
  std::string config_id;
  int L = 0;
  int d = 0;
  int T = 0;           // event horizon (max_events)
  bool content = true; // false when the config masks event content
  long long c_seq = 0; // sequence-module FLOPs per sample at the horizon
  long long c_full = 0;
  std::vector<uint64_t> seeds;          // ascending
  std::vector<std::vector<double>> ne;  // [seed][head]; empty row = failed run
  std::vector<std::string> failures;    // one entry per failed run, "seed N: reason"
  double ne_ctr_mean = std::numeric_limits<double>::quiet_NaN();
  double ne_ctr_stderr = std::numeric_limits<double>::quiet_NaN();
  double delta_ne_pct = std::numeric_limits<double>::quiet_NaN();    // vs baseline, seed-paired
  double delta_ne_stderr = std::numeric_limits<double>::quiet_NaN();
};

// Per-sample forward FLOPs of the whole model at the config's horizon.
inline long long full_flop_count(const ModelConfig& mc) {
  FlopReport rep = flop_count(mc.seq, mc.seq.max_events);
  return rep.seq_flops + rep.tokenize_flops + rep.readout_flops + backbone_flop_count(mc.backbone);
}

namespace detail {

// Trains one grid config with one seed; the seed drives both the weight
// init and the batch shuffling so runs own disjoint RNG streams.
inline std::vector<double> run_grid_once(const ModelConfig& mc, const TrainConfig& base_train,
                                         uint64_t seed, const Dataset& data) {
  TrainConfig tc = base_train;
  tc.seed = seed;
  TrainResult tr = train_model(mc, init_model_weights(mc, seed), data.train, data.eval, tc);
  return evaluate_ne(mc, tr.weights, data.eval);
}

}  // namespace detail

// Trains every (config, seed) pair and aggregates NE and seed-paired ΔNE
// against the baseline config. A run that throws is recorded in its result's
// `failures` and excluded from the aggregates; the grid itself completes.
inline std::vector<RunResult> run_grid(const ExperimentSpec& spec, const Dataset& data, int jobs = 1) {
  spec.validate();
  std::vector<uint64_t> seeds = detail::sorted_seeds(spec.seeds);

  struct Slot {
    SeqConfig seq;
    ModelConfig mc;
    bool usable = false;
    std::string config_error;
  };
  std::vector<Slot> slots;
  std::vector<RunResult> results(spec.values.size());
  for (size_t c = 0; c < spec.values.size(); ++c) {
    Slot slot;
    slot.seq = apply_axis_value(spec.axis, spec.values[c], spec.base_seq);
    RunResult& r = results[c];
    r.config_id = grid_config_id(slot.seq);
    r.L = slot.seq.L;
    r.d = slot.seq.d;
    r.T = slot.seq.max_events;
    r.content = !slot.seq.mask_content;
    r.seeds = seeds;
    r.ne.resize(seeds.size());
    try {
      slot.mc = grid_model_config(slot.seq, spec.backbone);
      r.c_seq = flop_count(slot.seq, slot.seq.max_events).seq_flops;
      r.c_full = full_flop_count(slot.mc);
      slot.usable = true;
    } catch (const std::exception& e) {
      slot.config_error = e.what();
    }
    slots.push_back(std::move(slot));
  }

  size_t baseline_idx = 0;
  if (!spec.baseline_id.empty()) {
    bool found = false;
    for (size_t c = 0; c < results.size(); ++c)
      if (results[c].config_id == spec.baseline_id) {
        baseline_idx = c;
        found = true;
        break;
      }
    if (!found)
      throw ValueError(strfmt("baseline config id '%s' is not in the expanded grid", spec.baseline_id.c_str()));
  }

  // Flat (config, seed) slots so parallel completion order cannot matter.
  size_t n_seeds = seeds.size();
  std::vector<std::string> run_errors(slots.size() * n_seeds);
  detail::parallel_tasks(slots.size() * n_seeds, jobs, [&](size_t i) {
    size_t c = i / n_seeds, s = i % n_seeds;
    if (!slots[c].usable) {
      run_errors[i] = strfmt("seed %llu: %s", static_cast<unsigned long long>(seeds[s]),
                             slots[c].config_error.c_str());
      return;
    }
    try {
      results[c].ne[s] = detail::run_grid_once(slots[c].mc, spec.train, seeds[s], data);
    } catch (const std::exception& e) {
      run_errors[i] = strfmt("seed %llu: %s", static_cast<unsigned long long>(seeds[s]), e.what());
    }
  });

  for (size_t c = 0; c < slots.size(); ++c) {
    RunResult& r = results[c];
    std::vector<double> ctr;
    for (size_t s = 0; s < n_seeds; ++s) {
      if (!run_errors[c * n_seeds + s].empty()) r.failures.push_back(run_errors[c * n_seeds + s]);
      if (!r.ne[s].empty()) ctr.push_back(r.ne[s][0]);
    }
    r.ne_ctr_mean = detail::mean_of(ctr);
    r.ne_ctr_stderr = detail::stderr_of(ctr);
  }

  const RunResult& base = results[baseline_idx];
  for (RunResult& r : results) {
    std::vector<double> deltas;
    for (size_t s = 0; s < n_seeds; ++s)
      if (!r.ne[s].empty() && !base.ne[s].empty())
        deltas.push_back(delta_ne(r.ne[s][0], base.ne[s][0]));
    r.delta_ne_pct = detail::mean_of(deltas);
    r.delta_ne_stderr = detail::stderr_of(deltas);
  }
  return results;
}

inline std::string results_csv(const std::vector<RunResult>& rows) {
  std::string out = "config_id,L,d,T,content,c_seq,c_full,ne_ctr_mean,ne_ctr_stderr,delta_ne_pct\n";
  for (const RunResult& r : rows)
    out += strfmt("%s,%d,%d,%d,%d,%lld,%lld,%.9g,%.9g,%.9g\n", r.config_id.c_str(), r.L, r.d, r.T,
                  r.content ? 1 : 0, r.c_seq, r.c_full, r.ne_ctr_mean, r.ne_ctr_stderr, r.delta_ne_pct);
  return out;
}

// ---------------------------------------------------------------------------
// Scaling-law fit
// ---------------------------------------------------------------------------

enum class FlopsColumn { kCSeq, kCFull };

inline const char* flops_column_name(FlopsColumn c) {
  return c == FlopsColumn::kCSeq ? "c_seq" : "c_full";
}

struct FitResult {
  double alpha = 0.0;  // improvement per decade of compute: ΔNE = -alpha*log10(C) + beta
  double beta = 0.0;
  double r2 = 0.0;
  std::vector<double> residuals;  // in input order
};

// Ordinary least squares of ΔNE on log10(C). Sums run over points sorted by
// (C, ΔNE) so the fit is bitwise invariant to input ordering.
inline FitResult fit_scaling_law(const std::vector<RunResult>& rows, FlopsColumn col) {
  if (rows.size() < 2)
    throw ValueError(strfmt("scaling fit needs at least 2 points, got %zu", rows.size()));
  std::vector<std::pair<double, double>> pts;  // (log10 C, ΔNE)
  pts.reserve(rows.size());
  for (const RunResult& r : rows) {
    long long c = (col == FlopsColumn::kCSeq) ? r.c_seq : r.c_full;
    if (c <= 0) throw ValueError(strfmt("config '%s' has nonpositive budget %lld", r.config_id.c_str(), c));
    if (!std::isfinite(r.delta_ne_pct))
      throw ValueError(strfmt("config '%s' has non-finite delta NE", r.config_id.c_str()));
    pts.emplace_back(std::log10(static_cast<double>(c)), r.delta_ne_pct);
  }
  std::vector<std::pair<double, double>> sorted = pts;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front().first == sorted.back().first)
    throw ValueError("scaling fit needs at least 2 distinct compute budgets");

  double n = static_cast<double>(sorted.size());
  double mx = 0.0, my = 0.0;
  for (const auto& p : sorted) {
    mx += p.first;
    my += p.second;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : sorted) {
    sxx += (p.first - mx) * (p.first - mx);
    sxy += (p.first - mx) * (p.second - my);
    syy += (p.second - my) * (p.second - my);
  }
  double slope = sxy / sxx;

  FitResult fit;
  fit.alpha = -slope;
  fit.beta = my - slope * mx;
  fit.residuals.reserve(pts.size());
  double ssres = 0.0;
  for (const auto& p : pts) {
    double res = p.second - (slope * p.first + fit.beta);
    fit.residuals.push_back(res);
  }
  for (const auto& p : sorted) {
    double res = p.second - (slope * p.first + fit.beta);
    ssres += res * res;
  }
  fit.r2 = syy > 0.0 ? 1.0 - ssres / syy : (ssres == 0.0 ? 1.0 : 0.0);
  return fit;
}

inline std::string fit_json(ScalingAxis axis, FlopsColumn col, const FitResult& fit) {
  return strfmt("{\"axis\": \"%s\", \"flops_column\": \"%s\", \"alpha\": %.9g, \"beta\": %.9g, \"r2\": %.9g}",
                scaling_axis_name(axis), flops_column_name(col), fit.alpha, fit.beta, fit.r2);
}

// ---------------------------------------------------------------------------
// Composition ablation
// ---------------------------------------------------------------------------

struct Allocation {
  int views = 0;
  int conv = 0;
};

struct CompositionRow {
  int views = 0;
  int conv = 0;
  std::vector<double> ne;  // ctr NE per seed
  double ne_mean = 0.0;
  double ne_stderr = 0.0;
  double delta_ne_pct = 0.0;  // vs the balanced row, seed-paired
  double delta_ne_stderr = 0.0;
};

struct CompositionTable {
  int T = 0;
  std::vector<CompositionRow> rows;  // ordered as the allocations were given
};

// Rebuilds every example's visible history as a quota-composed sequence of at
// most T events; visibility boundaries and labels are untouched.
inline Dataset compose_dataset(const Dataset& data, int T, int views_quota, int conv_quota) {
  auto rebuild = [&](const std::vector<LabeledExample>& in) {
    std::vector<LabeledExample> out;
    out.reserve(in.size());
    for (const LabeledExample& ex : in) {
      if (!ex.user) throw ValueError("example has no user history");
      auto hist = std::make_shared<UserHistory>();
      hist->user_id = ex.user->user_id;
      hist->events = compose_sequence(ex.visible_begin(), ex.visible_end(), T, views_quota, conv_quota);
      LabeledExample copy = ex;
      copy.visible_count = static_cast<int>(hist->events.size());
      copy.user = std::move(hist);
      out.push_back(std::move(copy));
    }
    return out;
  };
  Dataset out;
  out.train = rebuild(data.train);
  out.eval = rebuild(data.eval);
  return out;
}

// Trains one model per (allocation, seed) on quota-composed histories and
// reports ΔNE against the balanced (views == conv) allocation.
inline CompositionTable composition_ablation(const SeqConfig& base_seq, const BackboneConfig& proto,
                                             const TrainConfig& train,
                                             const std::vector<uint64_t>& seeds,
                                             const std::vector<Allocation>& allocations,
                                             const Dataset& data, int jobs = 1) {
  if (allocations.empty()) throw ValueError("allocation list is empty");
  if (seeds.empty()) throw ValueError("seed list is empty");
  CompositionTable table;
  table.T = allocations[0].views + allocations[0].conv;
  size_t balanced = allocations.size();
  for (size_t i = 0; i < allocations.size(); ++i) {
    const Allocation& a = allocations[i];
    if (a.views < 0 || a.conv < 0 || a.views + a.conv != table.T)
      throw ValueError(strfmt("allocation %d+%d does not sum to the shared budget %d", a.views, a.conv,
                              table.T));
    if (a.views == a.conv && balanced == allocations.size()) balanced = i;
  }
  if (balanced == allocations.size())
    throw ValueError("no balanced allocation (views == conv) to serve as the reference row");
  if (base_seq.max_events < table.T)
    throw ConfigError(strfmt("max_events=%d must cover the composition budget T=%d", base_seq.max_events,
                             table.T));
  ModelConfig mc = grid_model_config(base_seq, proto);
  std::vector<uint64_t> sorted = detail::sorted_seeds(seeds);

  table.rows.resize(allocations.size());
  size_t n_seeds = sorted.size();
  std::vector<Dataset> composed(allocations.size());
  for (size_t i = 0; i < allocations.size(); ++i)
    composed[i] = compose_dataset(data, table.T, allocations[i].views, allocations[i].conv);

  std::vector<std::vector<double>> ne(allocations.size(), std::vector<double>(n_seeds, 0.0));
  std::string first_error;
  std::mutex err_mu;
  detail::parallel_tasks(allocations.size() * n_seeds, jobs, [&](size_t idx) {
    size_t i = idx / n_seeds, s = idx % n_seeds;
    try {
      ne[i][s] = detail::run_grid_once(mc, train, sorted[s], composed[i])[0];
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (first_error.empty()) first_error = e.what();
    }
  });
  if (!first_error.empty()) throw ValueError(first_error);

  for (size_t i = 0; i < allocations.size(); ++i) {
    CompositionRow& row = table.rows[i];
    row.views = allocations[i].views;
    row.conv = allocations[i].conv;
    row.ne = ne[i];
    row.ne_mean = detail::mean_of(row.ne);
    row.ne_stderr = detail::stderr_of(row.ne);
    std::vector<double> deltas;
    for (size_t s = 0; s < n_seeds; ++s) deltas.push_back(delta_ne(ne[i][s], ne[balanced][s]));
    row.delta_ne_pct = detail::mean_of(deltas);
    row.delta_ne_stderr = detail::stderr_of(deltas);
  }
  return table;
}

inline std::string composition_csv(const CompositionTable& table) {
  std::string out = "views,conv,ne_ctr_mean,ne_ctr_stderr,delta_ne_pct\n";
  for (const CompositionRow& r : table.rows)
    out += strfmt("%d,%d,%.9g,%.9g,%.9g\n", r.views, r.conv, r.ne_mean, r.ne_stderr, r.delta_ne_pct);
  return out;
}

inline std::string composition_render(const CompositionTable& table) {
  std::string out = strfmt("sequence composition at T=%d\n", table.T);
  out += strfmt("%8s %8s %12s %22s\n", "views", "conv", "ne_ctr", "delta_ne_pct");
  for (const CompositionRow& r : table.rows)
    out += strfmt("%8d %8d %12.5f %14.3f +- %.3f\n", r.views, r.conv, r.ne_mean, r.delta_ne_pct,
                  r.delta_ne_stderr);
  return out;
}

// ---------------------------------------------------------------------------
// Content ablation
// ---------------------------------------------------------------------------

struct ContentCell {
  int L = 0;
  bool with_content = false;
  std::vector<double> ne;  // ctr NE per seed
  double ne_mean = 0.0;
  double ne_stderr = 0.0;
};

struct ContentTable {
  std::vector<ContentCell> cells;  // (shallow,id), (shallow,content), (deep,id), (deep,content)
  // Per-seed content gain (NE improvement, positive = better) at each depth;
  // interaction = gain(deep) - gain(shallow).
  double gain_shallow_mean = 0.0;
  double gain_deep_mean = 0.0;
  double interaction_mean = 0.0;
  double interaction_stderr = 0.0;
};

// 2x2 {depth} x {id_only, with_content} table. The ID-only arm masks event
// content at tokenize time; everything else is shared.
inline ContentTable content_ablation(const SeqConfig& base_seq, int shallow_L, int deep_L,
                                     const BackboneConfig& proto, const TrainConfig& train,
                                     const std::vector<uint64_t>& seeds, const Dataset& data,
                                     int jobs = 1) {
  if (seeds.empty()) throw ValueError("seed list is empty");
  if (shallow_L == deep_L) throw ConfigError("content ablation needs two distinct depths");
  std::vector<uint64_t> sorted = detail::sorted_seeds(seeds);
  size_t n_seeds = sorted.size();

  ContentTable table;
  std::vector<ModelConfig> configs;
  for (int L : {shallow_L, deep_L})
    for (bool with_content : {false, true}) {
      SeqConfig seq = base_seq;
      seq.L = L;
      seq.mask_content = !with_content;
      configs.push_back(grid_model_config(seq, proto));
      ContentCell cell;
      cell.L = L;
      cell.with_content = with_content;
      cell.ne.resize(n_seeds, 0.0);
      table.cells.push_back(std::move(cell));
    }

  std::string first_error;
  std::mutex err_mu;
  detail::parallel_tasks(configs.size() * n_seeds, jobs, [&](size_t idx) {
    size_t c = idx / n_seeds, s = idx % n_seeds;
    try {
      table.cells[c].ne[s] = detail::run_grid_once(configs[c], train, sorted[s], data)[0];
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (first_error.empty()) first_error = e.what();
    }
  });
  if (!first_error.empty()) throw ValueError(first_error);

  for (ContentCell& cell : table.cells) {
    cell.ne_mean = detail::mean_of(cell.ne);
    cell.ne_stderr = detail::stderr_of(cell.ne);
  }
  std::vector<double> gain_shallow, gain_deep, interaction;
  for (size_t s = 0; s < n_seeds; ++s) {
    double gs = -delta_ne(table.cells[1].ne[s], table.cells[0].ne[s]);
    double gd = -delta_ne(table.cells[3].ne[s], table.cells[2].ne[s]);
    gain_shallow.push_back(gs);
    gain_deep.push_back(gd);
    interaction.push_back(gd - gs);
  }
  table.gain_shallow_mean = detail::mean_of(gain_shallow);
  table.gain_deep_mean = detail::mean_of(gain_deep);
  table.interaction_mean = detail::mean_of(interaction);
  table.interaction_stderr = detail::stderr_of(interaction);
  return table;
}

inline std::string content_csv(const ContentTable& table) {
  std::string out = "L,content,ne_ctr_mean,ne_ctr_stderr\n";
  for (const ContentCell& c : table.cells)
    out += strfmt("%d,%s,%.9g,%.9g\n", c.L, c.with_content ? "with_content" : "id_only", c.ne_mean,
                  c.ne_stderr);
  return out;
}

inline std::string content_render(const ContentTable& table) {
  std::string out = strfmt("%4s %14s %12s\n", "L", "features", "ne_ctr");
  for (const ContentCell& c : table.cells)
    out += strfmt("%4d %14s %12.5f\n", c.L, c.with_content ? "with_content" : "id_only", c.ne_mean);
  out += strfmt("content gain: shallow %.3f%%, deep %.3f%%; interaction %.3f +- %.3f\n",
                table.gain_shallow_mean, table.gain_deep_mean, table.interaction_mean,
                table.interaction_stderr);
  return out;
}

// ---------------------------------------------------------------------------
// Iso-FLOPs pipeline comparison
// ---------------------------------------------------------------------------

struct IsoRow {
  std::string config_id;
  double delta_ne_up = 0.0;    // upstream NE change vs the pipeline's baseline upstream, %
  double delta_ne_down = 0.0;  // downstream NE change through the cache, %
  double tau_pct = 0.0;        // transfer ratio, %
};

inline constexpr double kIsoFlopsTolerance = 0.10;

// Runs the two-stage pipeline once per candidate upstream config; candidates
// must match sequence budgets within the iso-FLOPs tolerance.
inline std::vector<IsoRow> iso_flops_compare(const SeqConfig& config_a, const SeqConfig& config_b,
                                             const PipelineConfig& base_pipeline, const Dataset& data,
                                             uint64_t seed) {
  long long budget_a = flop_count(config_a, config_a.max_events).seq_flops;
  long long budget_b = flop_count(config_b, config_b.max_events).seq_flops;
  long long hi = std::max(budget_a, budget_b);
  if (hi <= 0) throw ValueError("iso-FLOPs comparison needs positive sequence budgets");
  double rel = static_cast<double>(std::llabs(budget_a - budget_b)) / static_cast<double>(hi);
  if (rel > kIsoFlopsTolerance)
    throw ValueError(strfmt("sequence budgets %lld and %lld differ by %.1f%%, beyond the %.0f%% iso-FLOPs tolerance",
                            budget_a, budget_b, 100.0 * rel, 100.0 * kIsoFlopsTolerance));

  std::vector<IsoRow> rows;
  for (const SeqConfig& cfg : {config_a, config_b}) {
    PipelineConfig pcfg = base_pipeline;
    pcfg.upstream_seq = cfg;
    PipelineReport rep = evaluate_pipeline(pcfg, data, seed);
    IsoRow row;
    row.config_id = grid_config_id(cfg);
    row.delta_ne_up = delta_ne(rep.ne_up, rep.ne_up_baseline);
    row.delta_ne_down = delta_ne(rep.ne_down, rep.ne_down_baseline);
    row.tau_pct = rep.tau_pct;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string iso_flops_csv(const std::vector<IsoRow>& rows) {
  std::string out = "config_id,delta_ne_up,delta_ne_down,tau_pct\n";
  for (const IsoRow& r : rows)
    out += strfmt("%s,%.9g,%.9g,%.9g\n", r.config_id.c_str(), r.delta_ne_up, r.delta_ne_down, r.tau_pct);
  return out;
}

// Aligned text table; the transfer ratio column truncates toward zero like
// the pipeline's display convention.
inline std::string iso_flops_render(const std::vector<IsoRow>& rows) {
  std::string out = strfmt("%-16s %10s %12s %6s\n", "config", "dNE_up%", "dNE_down%", "tau%");
  for (const IsoRow& r : rows)
    out += strfmt("%-16s %10.2f %12.2f %6d\n", r.config_id.c_str(), r.delta_ne_up, r.delta_ne_down,
                  static_cast<int>(r.tau_pct));
  return out;
}

// ---------------------------------------------------------------------------
// Sequence-length sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  int T = 0;
  std::vector<double> ne;  // ctr NE per seed
  double ne_mean = 0.0;
  double ne_stderr = 0.0;
};

struct SweepCurve {
  int L = 0;
  std::vector<SweepPoint> points;  // ascending T
  double slope = std::numeric_limits<double>::quiet_NaN();  // d ne_mean / d log10(T); NaN for one point
  bool monotone_nonincreasing = true;  // ne_mean never rises with T
};

struct SweepResult {
  std::vector<uint64_t> seeds;  // ascending; ne entries across the sweep share this order
  std::vector<SweepCurve> curves;
};

// NE(T) per depth over a shared dataset; lengths must be strictly ascending.
inline SweepResult seq_length_sweep(const SeqConfig& base_seq,
                                    const std::vector<int>& depths,
                                    const std::vector<int>& lengths,
                                    const BackboneConfig& proto, const TrainConfig& train,
                                    const std::vector<uint64_t>& seeds, const Dataset& data,
                                    int jobs = 1) {
  if (depths.empty()) throw ValueError("depth list is empty");
  if (lengths.empty()) throw ValueError("length list is empty");
  if (seeds.empty()) throw ValueError("seed list is empty");
  for (size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1])
      throw ValueError(strfmt("lengths must be strictly ascending, %d follows %d", lengths[i],
                              lengths[i - 1]));
  SweepResult result;
  result.seeds = detail::sorted_seeds(seeds);
  const std::vector<uint64_t>& sorted = result.seeds;
  size_t n_seeds = sorted.size();

  std::vector<SweepCurve>& curves = result.curves;
  curves.resize(depths.size());
  std::vector<ModelConfig> configs;
  for (size_t di = 0; di < depths.size(); ++di) {
    curves[di].L = depths[di];
    curves[di].points.resize(lengths.size());
    for (size_t ti = 0; ti < lengths.size(); ++ti) {
      SeqConfig seq = base_seq;
      seq.L = depths[di];
      seq.max_events = lengths[ti];
      configs.push_back(grid_model_config(seq, proto));
      curves[di].points[ti].T = lengths[ti];
      curves[di].points[ti].ne.resize(n_seeds, 0.0);
    }
  }

  std::string first_error;
  std::mutex err_mu;
  size_t n_lengths = lengths.size();
  detail::parallel_tasks(configs.size() * n_seeds, jobs, [&](size_t idx) {
    size_t c = idx / n_seeds, s = idx % n_seeds;
    size_t di = c / n_lengths, ti = c % n_lengths;
    try {
      curves[di].points[ti].ne[s] = detail::run_grid_once(configs[c], train, sorted[s], data)[0];
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (first_error.empty()) first_error = e.what();
    }
  });
  if (!first_error.empty()) throw ValueError(first_error);

  for (SweepCurve& curve : curves) {
    for (SweepPoint& p : curve.points) {
      p.ne_mean = detail::mean_of(p.ne);
      p.ne_stderr = detail::stderr_of(p.ne);
    }
    for (size_t i = 1; i < curve.points.size(); ++i)
      if (curve.points[i].ne_mean > curve.points[i - 1].ne_mean) curve.monotone_nonincreasing = false;
    if (curve.points.size() >= 2) {
      double mx = 0.0, my = 0.0, n = static_cast<double>(curve.points.size());
      for (const SweepPoint& p : curve.points) {
        mx += std::log10(static_cast<double>(p.T));
        my += p.ne_mean;
      }
      mx /= n;
      my /= n;
      double sxx = 0.0, sxy = 0.0;
      for (const SweepPoint& p : curve.points) {
        double dx = std::log10(static_cast<double>(p.T)) - mx;
        sxx += dx * dx;
        sxy += dx * (p.ne_mean - my);
      }
      curve.slope = sxy / sxx;
    }
  }
  return result;
}

// One row per (depth, T, seed).
inline std::string sweep_curves_csv(const SweepResult& result) {
  std::string out = "L,T,seed,ne_ctr\n";
  for (const SweepCurve& curve : result.curves)
    for (const SweepPoint& p : curve.points)
      for (size_t s = 0; s < p.ne.size(); ++s)
        out += strfmt("%d,%d,%llu,%.9g\n", curve.L, p.T,
                      static_cast<unsigned long long>(result.seeds[s]), p.ne[s]);
  return out;
}

inline std::string sweep_render(const SweepResult& result) {
  std::string out = strfmt("%4s %6s %12s %12s\n", "L", "T", "ne_ctr", "stderr");
  for (const SweepCurve& curve : result.curves) {
    for (const SweepPoint& p : curve.points)
      out += strfmt("%4d %6d %12.5f %12.5f\n", curve.L, p.T, p.ne_mean, p.ne_stderr);
    if (std::isfinite(curve.slope))
      out += strfmt("depth %d: slope %.4f per decade of T, %s\n", curve.L, curve.slope,
                    curve.monotone_nonincreasing ? "monotone" : "non-monotone");
  }
  return out;
}

}  // namespace llatte

#endif  // LLATTE_SCALING_HPP_
