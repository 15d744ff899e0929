// Scaling lab: grid orchestration with per-run failure recording, log-linear
// compute fits, composition/content ablations, iso-FLOPs pipeline comparisons,
// and horizon sweeps against the generator's planted long-range signal.
#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "llatte/scaling.hpp"

using namespace llatte;

namespace {

// Smallest workable candidate-aware config; the grid tests scale from here.
SeqConfig tiny_seq(int max_events = 8) {
  SeqConfig s;
  s.L = 1;
  s.d = 8;
  s.h = 1;
  s.d_c = 2;
  s.d_ff = 16;
  s.n_q = 2;
  s.d_seq = 4;
  s.m_seq = 1;
  s.lora_rank = 1;
  s.time_dims = 8;
  s.d_content = 4;
  s.max_events = max_events;
  return s;
}

BackboneConfig tiny_proto() {
  BackboneConfig b;
  b.d_e = 4;
  b.L_NS = 1;
  b.hidden = 8;
  b.d_out = 4;
  return b;
}

TrainConfig tiny_train(long long steps = 6, int batch = 8) {
  TrainConfig t;
  t.steps = steps;
  t.batch = batch;
  return t;
}

Dataset tiny_dataset(int users, int days, uint64_t seed, double events_per_day = 2.0,
                     double conversion_fraction = 0.05) {
  GeneratorConfig gc;
  gc.num_users = users;
  gc.horizon_days = days;
  gc.events_per_day = events_per_day;
  gc.conversion_fraction = conversion_fraction;
  gc.d_content = 4;
  gc.seed = seed;
  return generate_dataset(gc);
}

// A fit input with just the fields the regression reads.
RunResult fit_row(long long c, double delta) {
  RunResult r;
  r.config_id = strfmt("c%lld", c);
  r.c_seq = c;
  r.c_full = 10 * c;
  r.delta_ne_pct = delta;
  return r;
}

double pooled_stderr(double a, double b) { return std::sqrt(a * a + b * b); }

}  // namespace

// ---------------------------------------------------------------------------
// axis expansion
// ---------------------------------------------------------------------------

TEST_CASE("axis values rewrite the intended config fields") {
  SeqConfig base = tiny_seq(32);

  SECTION("depth touches only L") {
    SeqConfig c = apply_axis_value(ScalingAxis::kDepth, {4, 0}, base);
    CHECK(c.L == 4);
    CHECK(c.d == base.d);
    CHECK(c.max_events == base.max_events);
  }
  SECTION("width rescales the dependent shape ratios") {
    SeqConfig c = apply_axis_value(ScalingAxis::kWidth, {16, 0}, base);
    CHECK(c.d == 16);
    CHECK(c.d_ff == 64);
    CHECK(c.d_c == 4);
    CHECK(c.L == base.L);
    // Narrow widths keep the latent floor at 1.
    CHECK(apply_axis_value(ScalingAxis::kWidth, {2, 0}, base).d_c == 1);
  }
  SECTION("seq_length sets the horizon") {
    CHECK(apply_axis_value(ScalingAxis::kSeqLength, {128, 0}, base).max_events == 128);
  }
  SECTION("content toggles the tokenizer mask") {
    CHECK(apply_axis_value(ScalingAxis::kContent, {0, 0}, base).mask_content);
    CHECK_FALSE(apply_axis_value(ScalingAxis::kContent, {1, 0}, base).mask_content);
  }
  SECTION("grid sets depth and width together") {
    SeqConfig c = apply_axis_value(ScalingAxis::kGrid, {2, 16}, base);
    CHECK(c.L == 2);
    CHECK(c.d == 16);
    CHECK(c.d_ff == 64);
  }
  SECTION("config ids encode the four scaled fields") {
    CHECK(grid_config_id(base) == "L1_d8_T32_c1");
    SeqConfig masked = base;
    masked.mask_content = true;
    masked.L = 2;
    CHECK(grid_config_id(masked) == "L2_d8_T32_c0");
  }
}

TEST_CASE("experiment spec validation") {
  ExperimentSpec spec;
  spec.base_seq = tiny_seq();
  spec.backbone = tiny_proto();
  spec.train = tiny_train();
  spec.values = {{1, 0}};
  CHECK_NOTHROW(spec.validate());

  SECTION("empty value list") {
    spec.values.clear();
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }
  SECTION("too few seeds") {
    spec.seeds = {1, 2};
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }
  SECTION("duplicate seeds") {
    spec.seeds = {1, 2, 2};
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }
}

// ---------------------------------------------------------------------------
// masked content is invisible to the model
// ---------------------------------------------------------------------------

TEST_CASE("content mask is a no-op on content-free events and blinds content-ful ones") {
  Dataset data = tiny_dataset(6, 3, 21);
  SeqConfig seq = tiny_seq();
  ModelConfig plain = grid_model_config(seq, tiny_proto());

  // Strip event content everywhere; candidates keep theirs.
  Dataset stripped = data;
  auto strip = [](std::vector<LabeledExample>& v) {
    std::map<const UserHistory*, std::shared_ptr<UserHistory>> rebuilt;
    for (LabeledExample& ex : v) {
      auto it = rebuilt.find(ex.user.get());
      if (it == rebuilt.end()) {
        auto h = std::make_shared<UserHistory>(*ex.user);
        for (ActionEvent& e : h->events) {
          e.has_content = false;
          e.content_vec.clear();
        }
        it = rebuilt.emplace(ex.user.get(), std::move(h)).first;
      }
      ex.user = it->second;
    }
  };
  strip(stripped.train);
  strip(stripped.eval);

  TrainResult tr = train_model(plain, init_model_weights(plain, 5), stripped.train, stripped.eval,
                               tiny_train());
  std::vector<double> ne_plain = evaluate_ne(plain, tr.weights, stripped.eval);

  SeqConfig masked_seq = seq;
  masked_seq.mask_content = true;
  ModelConfig masked = grid_model_config(masked_seq, tiny_proto());

  SECTION("masking a model that never saw event content changes nothing") {
    CHECK(evaluate_ne(masked, tr.weights, stripped.eval) == ne_plain);
  }
  SECTION("under the mask, event content is invisible") {
    // Same weights, same examples, but original (content-ful) histories:
    // masked evaluation cannot tell the two datasets apart.
    CHECK(evaluate_ne(masked, tr.weights, data.eval) == evaluate_ne(masked, tr.weights, stripped.eval));
    // Without the mask the content slot is live.
    CHECK(evaluate_ne(plain, tr.weights, data.eval) != ne_plain);
  }
}

// ---------------------------------------------------------------------------
// run_grid
// ---------------------------------------------------------------------------

TEST_CASE("a single-config grid is its own baseline with zero delta") {
  Dataset data = tiny_dataset(8, 3, 31);
  ExperimentSpec spec;
  spec.axis = ScalingAxis::kDepth;
  spec.values = {{1, 0}};
  spec.base_seq = tiny_seq();
  spec.backbone = tiny_proto();
  spec.train = tiny_train();

  std::vector<RunResult> rows = run_grid(spec, data);
  REQUIRE(rows.size() == 1);
  const RunResult& r = rows[0];
  CHECK(r.config_id == "L1_d8_T8_c1");
  CHECK(r.failures.empty());
  REQUIRE(r.ne.size() == 3);
  for (const std::vector<double>& per_head : r.ne) REQUIRE(per_head.size() == 2);
  CHECK(r.delta_ne_pct == 0.0);
  CHECK(r.delta_ne_stderr == 0.0);
  CHECK(std::isfinite(r.ne_ctr_mean));
  CHECK(r.ne_ctr_stderr >= 0.0);

  // Budget columns tie back to the FLOP accounting of the modules themselves.
  CHECK(r.c_seq == flop_count(spec.base_seq, spec.base_seq.max_events).seq_flops);
  CHECK(r.c_full > r.c_seq);
  ModelConfig mc = grid_model_config(spec.base_seq, spec.backbone);
  FlopReport fr = flop_count(spec.base_seq, spec.base_seq.max_events);
  CHECK(r.c_full == fr.seq_flops + fr.tokenize_flops + fr.readout_flops +
                        backbone_flop_count(mc.backbone));
}

TEST_CASE("a 2x2 grid trains every cell and pins the baseline at zero") {
  Dataset data = tiny_dataset(8, 3, 32);
  ExperimentSpec spec;
  spec.axis = ScalingAxis::kGrid;
  spec.values = {{1, 8}, {1, 12}, {2, 8}, {2, 12}};
  spec.base_seq = tiny_seq();
  spec.backbone = tiny_proto();
  spec.train = tiny_train();

  std::vector<RunResult> rows = run_grid(spec, data);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].config_id == "L1_d8_T8_c1");
  CHECK(rows[1].config_id == "L1_d12_T8_c1");
  CHECK(rows[2].config_id == "L2_d8_T8_c1");
  CHECK(rows[3].config_id == "L2_d12_T8_c1");
  CHECK(rows[0].delta_ne_pct == 0.0);
  for (const RunResult& r : rows) {
    CHECK(r.failures.empty());
    CHECK(std::isfinite(r.delta_ne_pct));
    CHECK(r.c_seq <= r.c_full);
  }
  // Deeper and wider both cost more sequence compute.
  CHECK(rows[3].c_seq > rows[0].c_seq);

  SECTION("seed order never changes the aggregates") {
    ExperimentSpec permuted = spec;
    permuted.seeds = {3, 1, 2};
    std::vector<RunResult> again = run_grid(permuted, data);
    REQUIRE(again.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
      CHECK(again[i].seeds == rows[i].seeds);
      CHECK(again[i].ne == rows[i].ne);
      CHECK(again[i].ne_ctr_mean == rows[i].ne_ctr_mean);
      CHECK(again[i].delta_ne_pct == rows[i].delta_ne_pct);
    }
  }
  SECTION("parallel execution reproduces the serial aggregates") {
    std::vector<RunResult> par = run_grid(spec, data, /*jobs=*/2);
    REQUIRE(par.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
      CHECK(par[i].ne == rows[i].ne);
      CHECK(par[i].delta_ne_pct == rows[i].delta_ne_pct);
    }
  }
  SECTION("an explicit baseline id recenters the deltas") {
    ExperimentSpec rebased = spec;
    rebased.baseline_id = "L2_d12_T8_c1";
    std::vector<RunResult> again = run_grid(rebased, data);
    CHECK(again[3].delta_ne_pct == 0.0);
    CHECK(again[0].delta_ne_pct != 0.0);
  }
  SECTION("an unknown baseline id is rejected") {
    ExperimentSpec broken = spec;
    broken.baseline_id = "L9_d9_T9_c1";
    CHECK_THROWS_WITH(run_grid(broken, data), Catch::Matchers::ContainsSubstring("L9_d9_T9_c1"));
  }
}

TEST_CASE("a failed run is recorded, not silently dropped") {
  Dataset data = tiny_dataset(8, 3, 33);
  ExperimentSpec spec;
  spec.axis = ScalingAxis::kDepth;
  spec.values = {{1, 0}, {-1, 0}};  // the second depth is invalid
  spec.base_seq = tiny_seq();
  spec.backbone = tiny_proto();
  spec.train = tiny_train();

  std::vector<RunResult> rows = run_grid(spec, data);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].failures.empty());
  CHECK(std::isfinite(rows[0].ne_ctr_mean));

  const RunResult& broken = rows[1];
  REQUIRE(broken.failures.size() == 3);
  CHECK_THAT(broken.failures[0], Catch::Matchers::ContainsSubstring("seed 1"));
  CHECK_THAT(broken.failures[0], Catch::Matchers::ContainsSubstring("layer count"));
  for (const std::vector<double>& per_head : broken.ne) CHECK(per_head.empty());
  CHECK(std::isnan(broken.ne_ctr_mean));
  CHECK(std::isnan(broken.delta_ne_pct));
}

TEST_CASE("results CSV is pinned") {
  RunResult r;
  r.config_id = "L2_d16_T64_c1";
  r.L = 2;
  r.d = 16;
  r.T = 64;
  r.content = true;
  r.c_seq = 123456;
  r.c_full = 654321;
  r.ne_ctr_mean = 0.875;
  r.ne_ctr_stderr = 0.0125;
  r.delta_ne_pct = -1.5;
  CHECK(results_csv({r}) ==
        "config_id,L,d,T,content,c_seq,c_full,ne_ctr_mean,ne_ctr_stderr,delta_ne_pct\n"
        "L2_d16_T64_c1,2,16,64,1,123456,654321,0.875,0.0125,-1.5\n");
}

// ---------------------------------------------------------------------------
// scaling-law fit
// ---------------------------------------------------------------------------

TEST_CASE("collinear points recover the exact line") {
  std::vector<RunResult> rows = {fit_row(100000000LL, -0.6), fit_row(1000000000LL, -0.8),
                                 fit_row(10000000000LL, -1.0)};
  FitResult fit = fit_scaling_law(rows, FlopsColumn::kCSeq);
  CHECK(fit.alpha == Catch::Approx(0.2).margin(1e-9));
  CHECK(fit.beta == Catch::Approx(1.0).margin(1e-9));
  CHECK(fit.r2 == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(fit.residuals.size() == 3);
  for (double res : fit.residuals) CHECK(std::abs(res) < 1e-12);
}

TEST_CASE("the fit recovers a planted slope through tiny noise") {
  // y = -0.200 * log10(C) + 1.0 plus deterministic noise of magnitude 1e-6.
  Rng rng(77);
  std::vector<RunResult> rows;
  for (int k = 0; k < 12; ++k) {
    long long c = 1000LL << k;  // spans ~3.6 decades
    double y = -0.200 * std::log10(static_cast<double>(c)) + 1.0 + 1e-6 * rng.normal();
    rows.push_back(fit_row(c, y));
  }
  FitResult fit = fit_scaling_law(rows, FlopsColumn::kCSeq);
  CHECK(fit.alpha == Catch::Approx(0.200).margin(1e-4));
  CHECK(fit.r2 > 0.999999);
}

TEST_CASE("degenerate fits are rejected") {
  SECTION("fewer than two points") {
    CHECK_THROWS_AS(fit_scaling_law({fit_row(100, -0.5)}, FlopsColumn::kCSeq), ValueError);
  }
  SECTION("all budgets equal") {
    std::vector<RunResult> rows = {fit_row(100, -0.5), fit_row(100, -0.7)};
    CHECK_THROWS_WITH(fit_scaling_law(rows, FlopsColumn::kCSeq),
                      Catch::Matchers::ContainsSubstring("distinct"));
  }
  SECTION("non-finite delta") {
    std::vector<RunResult> rows = {fit_row(100, -0.5), fit_row(1000, 0.0)};
    rows[1].delta_ne_pct = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(fit_scaling_law(rows, FlopsColumn::kCSeq),
                      Catch::Matchers::ContainsSubstring("non-finite"));
  }
  SECTION("nonpositive budget") {
    std::vector<RunResult> rows = {fit_row(100, -0.5), fit_row(1000, -0.7)};
    rows[0].c_seq = 0;
    CHECK_THROWS_AS(fit_scaling_law(rows, FlopsColumn::kCSeq), ValueError);
  }
}

TEST_CASE("the fit ignores input order and follows the chosen column") {
  std::vector<RunResult> rows = {fit_row(1000, -0.4), fit_row(100000, -0.9), fit_row(10000, -0.6),
                                 fit_row(1000000, -1.05)};
  FitResult fwd = fit_scaling_law(rows, FlopsColumn::kCSeq);
  std::vector<RunResult> shuffled = {rows[2], rows[0], rows[3], rows[1]};
  FitResult rev = fit_scaling_law(shuffled, FlopsColumn::kCSeq);
  CHECK(fwd.alpha == rev.alpha);
  CHECK(fwd.beta == rev.beta);
  CHECK(fwd.r2 == rev.r2);
  // Residuals follow their own input's row order.
  CHECK(fwd.residuals[2] == rev.residuals[0]);
  CHECK(fwd.residuals[0] == rev.residuals[1]);

  // c_full is 10x c_seq here: same slope, intercept shifted by one decade.
  FitResult full = fit_scaling_law(rows, FlopsColumn::kCFull);
  CHECK(full.alpha == Catch::Approx(fwd.alpha).margin(1e-12));
  CHECK(full.beta == Catch::Approx(fwd.beta + fwd.alpha).margin(1e-9));
}

TEST_CASE("rescaling every budget by a constant shifts only the intercept") {
  std::vector<RunResult> rows = {fit_row(1000, -0.4), fit_row(10000, -0.62), fit_row(100000, -0.81)};
  FitResult base = fit_scaling_law(rows, FlopsColumn::kCSeq);
  std::vector<RunResult> scaled = rows;
  for (RunResult& r : scaled) r.c_seq *= 1000;
  FitResult shifted = fit_scaling_law(scaled, FlopsColumn::kCSeq);
  CHECK(shifted.alpha == Catch::Approx(base.alpha).margin(1e-9));
  CHECK(shifted.beta == Catch::Approx(base.beta + base.alpha * 3.0).margin(1e-9));
}

TEST_CASE("fit JSON is pinned") {
  FitResult fit;
  fit.alpha = 0.2;
  fit.beta = 1.0;
  fit.r2 = 1.0;
  CHECK(fit_json(ScalingAxis::kDepth, FlopsColumn::kCSeq, fit) ==
        "{\"axis\": \"depth\", \"flops_column\": \"c_seq\", \"alpha\": 0.2, \"beta\": 1, \"r2\": 1}");
  CHECK(fit_json(ScalingAxis::kGrid, FlopsColumn::kCFull, fit) ==
        "{\"axis\": \"grid\", \"flops_column\": \"c_full\", \"alpha\": 0.2, \"beta\": 1, \"r2\": 1}");
}

// ---------------------------------------------------------------------------
// composition ablation
// ---------------------------------------------------------------------------

TEST_CASE("composed datasets keep labels and bound the window") {
  Dataset data = tiny_dataset(8, 6, 41, /*events_per_day=*/4.0, /*conversion_fraction=*/0.2);
  Dataset composed = compose_dataset(data, 8, 4, 4);
  REQUIRE(composed.train.size() == data.train.size());
  REQUIRE(composed.eval.size() == data.eval.size());
  for (size_t i = 0; i < composed.train.size(); ++i) {
    const LabeledExample& a = data.train[i];
    const LabeledExample& b = composed.train[i];
    CHECK(b.visible_count <= 8);
    CHECK(b.visible_count == static_cast<int>(b.user->events.size()));
    CHECK(b.label_ctr == a.label_ctr);
    CHECK(b.candidate.ad_id == a.candidate.ad_id);
    CHECK_NOTHROW(b.user->check_sorted());
    // Never more events than were visible originally.
    CHECK(b.visible_count <= a.visible_count);
  }
}

TEST_CASE("composition table validation") {
  Dataset data = tiny_dataset(6, 3, 42);
  SeqConfig seq = tiny_seq(8);
  SECTION("allocations must share one budget") {
    CHECK_THROWS_WITH(composition_ablation(seq, tiny_proto(), tiny_train(), {1, 2, 3},
                                           {{4, 4}, {5, 4}}, data),
                      Catch::Matchers::ContainsSubstring("sum"));
  }
  SECTION("a balanced reference row is required") {
    CHECK_THROWS_WITH(composition_ablation(seq, tiny_proto(), tiny_train(), {1, 2, 3},
                                           {{8, 0}, {0, 8}}, data),
                      Catch::Matchers::ContainsSubstring("balanced"));
  }
  SECTION("the model horizon must cover the budget") {
    CHECK_THROWS_WITH(composition_ablation(tiny_seq(4), tiny_proto(), tiny_train(), {1, 2, 3},
                                           {{4, 4}}, data),
                      Catch::Matchers::ContainsSubstring("max_events"));
  }
}

TEST_CASE("the balanced row is its own zero reference and rows keep their order") {
  Dataset data = tiny_dataset(8, 4, 45, /*events_per_day=*/3.0, /*conversion_fraction=*/0.2);
  std::vector<Allocation> allocations = {{8, 0}, {4, 4}, {0, 8}};
  CompositionTable table = composition_ablation(tiny_seq(8), tiny_proto(), tiny_train(), {1, 2, 3},
                                                allocations, data);
  REQUIRE(table.rows.size() == 3);
  CHECK(table.T == 8);
  for (size_t i = 0; i < allocations.size(); ++i) {
    CHECK(table.rows[i].views == allocations[i].views);
    CHECK(table.rows[i].conv == allocations[i].conv);
    REQUIRE(table.rows[i].ne.size() == 3);
  }
  CHECK(table.rows[1].delta_ne_pct == 0.0);
  CHECK(table.rows[1].delta_ne_stderr == 0.0);

  std::string csv = composition_csv(table);
  CHECK_THAT(csv, Catch::Matchers::ContainsSubstring(
                      "views,conv,ne_ctr_mean,ne_ctr_stderr,delta_ne_pct\n8,0,"));
  std::string text = composition_render(table);
  CHECK_THAT(text, Catch::Matchers::ContainsSubstring("T=8"));
}

TEST_CASE("pure extremes underperform the balanced mixture", "[directional][slow]") {
  // The generator plants both a recent-view content signal and a long-range
  // conversion signal, so discarding either event category hurts.
  GeneratorConfig gc;
  gc.num_users = 64;
  gc.horizon_days = 20;
  gc.events_per_day = 3.0;
  gc.conversion_fraction = 0.25;
  gc.d_content = 4;

  SeqConfig seq = tiny_seq(16);
  seq.d_c = 4;
  TrainConfig train = tiny_train(/*steps=*/150, /*batch=*/16);

  double pure_views = 0.0, pure_conv = 0.0;
  for (uint64_t seed : {11u, 12u, 13u}) {
    gc.seed = seed;
    Dataset data = generate_dataset(gc);
    CompositionTable table = composition_ablation(seq, tiny_proto(), train, {seed},
                                                  {{16, 0}, {8, 8}, {0, 16}}, data);
    pure_views += table.rows[0].delta_ne_pct;
    pure_conv += table.rows[2].delta_ne_pct;
  }
  CHECK(pure_views > 0.0);
  CHECK(pure_conv > 0.0);
}

// ---------------------------------------------------------------------------
// content ablation
// ---------------------------------------------------------------------------

TEST_CASE("content ablation emits a 2x2 table over the requested depths") {
  Dataset data = tiny_dataset(8, 3, 52);
  ContentTable table = content_ablation(tiny_seq(), 1, 4, tiny_proto(), tiny_train(), {1, 2, 3}, data);
  REQUIRE(table.cells.size() == 4);
  CHECK(table.cells[0].L == 1);
  CHECK_FALSE(table.cells[0].with_content);
  CHECK(table.cells[1].L == 1);
  CHECK(table.cells[1].with_content);
  CHECK(table.cells[2].L == 4);
  CHECK_FALSE(table.cells[2].with_content);
  CHECK(table.cells[3].L == 4);
  CHECK(table.cells[3].with_content);
  for (const ContentCell& c : table.cells) {
    REQUIRE(c.ne.size() == 3);
    CHECK(std::isfinite(c.ne_mean));
  }
  CHECK(std::isfinite(table.interaction_mean));

  std::string csv = content_csv(table);
  CHECK_THAT(csv, Catch::Matchers::ContainsSubstring("L,content,ne_ctr_mean,ne_ctr_stderr\n1,id_only,"));
  CHECK_THAT(content_render(table), Catch::Matchers::ContainsSubstring("interaction"));

  CHECK_THROWS_AS(content_ablation(tiny_seq(), 2, 2, tiny_proto(), tiny_train(), {1, 2, 3}, data),
                  ConfigError);
}

TEST_CASE("content helps the deeper model more", "[directional][slow]") {
  GeneratorConfig gc;
  gc.num_users = 64;
  gc.horizon_days = 10;
  gc.events_per_day = 3.0;
  gc.d_content = 4;

  SeqConfig seq = tiny_seq(32);
  seq.d_c = 4;
  TrainConfig train = tiny_train(/*steps=*/200, /*batch=*/16);

  double interaction = 0.0;
  for (uint64_t seed : {11u, 12u, 13u}) {
    gc.seed = seed;
    Dataset data = generate_dataset(gc);
    ContentTable table = content_ablation(seq, /*shallow_L=*/1, /*deep_L=*/2, tiny_proto(), train,
                                          {seed}, data);
    interaction += table.interaction_mean;
  }
  CHECK(interaction > 0.0);
}

// ---------------------------------------------------------------------------
// iso-FLOPs comparison
// ---------------------------------------------------------------------------

namespace {

PipelineConfig tiny_pipeline(const SeqConfig& upstream) {
  PipelineConfig p;
  p.upstream_seq = upstream;
  p.upstream_seq.mode = SeqMode::kUserOnly;
  p.upstream_baseline_seq = p.upstream_seq;
  p.upstream_baseline_seq.max_events = 2;
  p.downstream_seq = tiny_seq(4);
  p.d_transfer = 3;
  p.l_ns = 1;
  p.hidden = 8;
  p.d_out = 4;
  p.train = tiny_train(/*steps=*/8, /*batch=*/8);
  TriggerPolicy every;
  every.types = {ActionType::kView, ActionType::kClick, ActionType::kConversion, ActionType::kOrganic};
  p.policy = every;
  return p;
}

}  // namespace

TEST_CASE("identical configs produce identical iso-FLOPs rows") {
  Dataset data = tiny_dataset(10, 3, 61);
  SeqConfig up = tiny_seq(16);
  up.mode = SeqMode::kUserOnly;
  std::vector<IsoRow> rows = iso_flops_compare(up, up, tiny_pipeline(up), data, 7);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].config_id == rows[1].config_id);
  CHECK(rows[0].delta_ne_up == rows[1].delta_ne_up);
  CHECK(rows[0].delta_ne_down == rows[1].delta_ne_down);
  CHECK(rows[0].tau_pct == rows[1].tau_pct);
  CHECK(std::isfinite(rows[0].tau_pct));
}

TEST_CASE("budget mismatch beyond tolerance names both budgets") {
  Dataset data = tiny_dataset(6, 3, 62);
  SeqConfig small = tiny_seq(8);
  small.mode = SeqMode::kUserOnly;
  SeqConfig big = tiny_seq(512);
  big.mode = SeqMode::kUserOnly;
  long long b_small = flop_count(small, small.max_events).seq_flops;
  long long b_big = flop_count(big, big.max_events).seq_flops;
  REQUIRE(b_big > b_small * 2);
  CHECK_THROWS_WITH(iso_flops_compare(small, big, tiny_pipeline(small), data, 7),
                    Catch::Matchers::ContainsSubstring(strfmt("%lld", b_small)) &&
                        Catch::Matchers::ContainsSubstring(strfmt("%lld", b_big)));
}

TEST_CASE("iso-FLOPs rendering is pinned") {
  std::vector<IsoRow> rows(2);
  rows[0] = {"L2_d16_T512_c1", -0.14, -0.07, 50.0};
  rows[1] = {"L4_d16_T256_c1", -0.13, -0.07, 53.9};
  CHECK(iso_flops_render(rows) ==
        "config              dNE_up%    dNE_down%   tau%\n"
        "L2_d16_T512_c1        -0.14        -0.07     50\n"
        "L4_d16_T256_c1        -0.13        -0.07     53\n");
  CHECK(iso_flops_csv(rows) ==
        "config_id,delta_ne_up,delta_ne_down,tau_pct\n"
        "L2_d16_T512_c1,-0.14,-0.07,50\n"
        "L4_d16_T256_c1,-0.13,-0.07,53.9\n");
}

// ---------------------------------------------------------------------------
// sequence-length sweep
// ---------------------------------------------------------------------------

TEST_CASE("sweep shape, ordering, and CSV") {
  Dataset data = tiny_dataset(8, 3, 71);
  SECTION("lengths must strictly ascend") {
    CHECK_THROWS_AS(seq_length_sweep(tiny_seq(), {1}, {8, 8}, tiny_proto(), tiny_train(), {1, 2, 3},
                                     data),
                    ValueError);
  }
  SECTION("a single length yields a point but no slope") {
    SweepResult res = seq_length_sweep(tiny_seq(), {1}, {8}, tiny_proto(), tiny_train(), {1, 2, 3},
                                       data);
    REQUIRE(res.curves.size() == 1);
    REQUIRE(res.curves[0].points.size() == 1);
    CHECK(std::isnan(res.curves[0].slope));
  }
  SECTION("one CSV row per depth, length, and seed") {
    SweepResult res = seq_length_sweep(tiny_seq(), {1, 2}, {4, 8}, tiny_proto(), tiny_train(),
                                       {5, 6, 7}, data);
    std::string csv = sweep_curves_csv(res);
    std::vector<std::string> lines;
    size_t pos = 0;
    while (pos < csv.size()) {
      size_t nl = csv.find('\n', pos);
      lines.push_back(csv.substr(pos, nl - pos));
      pos = nl + 1;
    }
    REQUIRE(lines.size() == 1 + 2 * 2 * 3);
    CHECK(lines[0] == "L,T,seed,ne_ctr");
    CHECK_THAT(lines[1], Catch::Matchers::StartsWith("1,4,5,"));
    CHECK_THAT(lines[4], Catch::Matchers::StartsWith("1,8,5,"));
    CHECK_THAT(lines[12], Catch::Matchers::StartsWith("2,8,7,"));
    for (const SweepCurve& c : res.curves) CHECK(std::isfinite(c.slope));
    CHECK_THAT(sweep_render(res), Catch::Matchers::ContainsSubstring("slope"));
  }
}

TEST_CASE("long horizons beat short ones once the planted range is covered", "[directional][slow]") {
  // The conversion-affinity term looks back long_range_days = 14 days; at
  // three events per day the planted horizon is ~42 events, so T=64 covers it
  // while T=4 cannot.
  GeneratorConfig gc;
  gc.num_users = 64;
  gc.horizon_days = 20;
  gc.events_per_day = 3.0;
  gc.d_content = 4;

  SeqConfig seq = tiny_seq();
  seq.d_c = 4;
  TrainConfig train = tiny_train(/*steps=*/200, /*batch=*/16);

  std::vector<double> ne_short, ne_long;
  for (uint64_t seed : {11u, 12u, 13u}) {
    gc.seed = seed;
    Dataset data = generate_dataset(gc);
    SweepResult res = seq_length_sweep(seq, {1}, {4, 64}, tiny_proto(), train, {seed}, data);
    ne_short.push_back(res.curves[0].points[0].ne[0]);
    ne_long.push_back(res.curves[0].points[1].ne[0]);
  }
  auto mean3 = [](const std::vector<double>& v) { return (v[0] + v[1] + v[2]) / 3.0; };
  auto se3 = [&](const std::vector<double>& v) {
    double m = mean3(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / 2.0 / 3.0);
  };
  double margin = mean3(ne_short) - mean3(ne_long);
  INFO("short " << mean3(ne_short) << " long " << mean3(ne_long) << " margin " << margin);
  CHECK(margin > 2.0 * pooled_stderr(se3(ne_short), se3(ne_long)));
}
