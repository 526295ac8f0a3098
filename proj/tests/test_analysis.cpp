#include <gtest/gtest.h>

#include <sstream>

#include "lily/analysis.hpp"

using namespace lily;

namespace {

EncoderConfig tiny_cfg(std::size_t layers = 3) {
  EncoderConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.vocab = 10;
  c.seq_len = 4;
  c.n_classes = 3;
  return c;
}

OptimizerConfig quick_opt(std::size_t epochs) {
  OptimizerConfig o;
  o.epochs = epochs;
  o.batch_size = 16;
  o.lr = 2e-2;
  return o;
}

struct Run {
  Encoder encoder;
  Adapters adapters;
  TrainTrace trace;
};

Run train_lily(const LilyConfig& lc, std::size_t epochs, const EncoderConfig& cfg = tiny_cfg()) {
  static const auto task = make_task(2, tiny_cfg(), 48, 16);
  Run r{build_encoder(cfg, 4), {}, {}};
  r.adapters = inject_lily(r.encoder, lc, 4);
  r.trace = train(r.encoder, r.adapters, task, quick_opt(epochs), 4);
  return r;
}

Run train_lora(const LoraConfig& rc, std::size_t epochs) {
  static const auto task = make_task(2, tiny_cfg(), 48, 16);
  Run r{build_encoder(tiny_cfg(), 4), {}, {}};
  r.adapters = inject_lora(r.encoder, rc, 4);
  r.trace = train(r.encoder, r.adapters, task, quick_opt(epochs), 4);
  return r;
}

LilyConfig small_lily(std::size_t ne_2 = 3) {
  LilyConfig lc;
  lc.rank_r = 3;
  lc.ne_1 = 2;
  lc.ne_2 = ne_2;
  lc.placement = Placement::parse("qv");
  return lc;
}

}  // namespace

TEST(AccumulatedDeltaW, ZeroEpochsGiveZeroMatrix) {
  auto lily = train_lily(small_lily(), 0);
  EXPECT_EQ(accumulated_delta_w(lily.trace, Family::query, 1), Matrix(8, 8));
  LoraConfig rc;
  rc.placement = Placement::parse("qv");
  auto lora = train_lora(rc, 0);
  EXPECT_EQ(accumulated_delta_w(lora.trace, Family::value, 2), Matrix(8, 8));
  EXPECT_EQ(final_delta_w(lily.trace, Family::query, 0), Matrix(8, 8));
}

TEST(AccumulatedDeltaW, LoraOneEpochIsScaledProduct) {
  LoraConfig rc;
  rc.rank = 2;
  rc.scale = 2.0;
  rc.placement = Placement::parse("qv");
  auto r = train_lora(rc, 1);
  const auto& ad = r.adapters.lora_sets.at(Family::query)[1];
  const Matrix expect = scale(matmul(ad.A, ad.B), 2.0);
  EXPECT_NE(expect, Matrix(8, 8));
  EXPECT_EQ(accumulated_delta_w(r.trace, Family::query, 1), expect);
  EXPECT_EQ(final_delta_w(r.trace, Family::query, 1), expect);
}

TEST(AccumulatedDeltaW, LoraTelescopesToFinalProduct) {
  LoraConfig rc;
  rc.rank = 2;
  rc.placement = Placement::parse("qv");
  auto r = train_lora(rc, 4);
  for (std::size_t l = 0; l < 3; ++l) {
    const Matrix acc = accumulated_delta_w(r.trace, Family::value, l);
    EXPECT_LE(max_abs_diff(acc, final_delta_w(r.trace, Family::value, l)), 1e-14);
    EXPECT_LE(numerical_rank(acc), 2u);
  }
}

TEST(AccumulatedDeltaW, LilyIsSumOfEpochTerms) {
  auto r = train_lily(small_lily(), 3);
  auto terms = lily_epoch_terms(r.trace, Family::value, 2);
  ASSERT_EQ(terms.size(), 3u);
  Matrix sum(8, 8);
  for (const auto& t : terms) {
    EXPECT_LE(numerical_rank(t), 3u);
    accumulate(sum, t);
  }
  EXPECT_EQ(accumulated_delta_w(r.trace, Family::value, 2), sum);
  // The last epoch term is the final-snapshot update.
  EXPECT_EQ(final_delta_w(r.trace, Family::value, 2), terms.back());
}

TEST(AccumulatedDeltaW, RejectsMissingSnapshots) {
  auto r = train_lily(small_lily(), 2);
  r.trace.snapshots.pop_back();
  EXPECT_THROW(accumulated_delta_w(r.trace, Family::query, 0), std::invalid_argument);
  EXPECT_THROW(lily_epoch_terms(r.trace, Family::query, 0), std::invalid_argument);
}

TEST(AccumulatedDeltaW, RealTraceEpochTermsBoundedAndSumDominatesThem) {
  // Default width, rank 32, five epochs.
  const EncoderConfig cfg;
  auto task = make_task(1, cfg, 128, 32);
  Encoder e = build_encoder(cfg, 0);
  LilyConfig lc;
  lc.rank_r = 32;
  lc.placement = Placement::parse("q");
  Adapters ad = inject_lily(e, lc, 0);
  OptimizerConfig o;
  o.epochs = 5;
  auto t = train(e, ad, task, o, 0);
  for (std::size_t l = 0; l < 3; ++l) {
    std::size_t max_term = 0;
    for (const auto& term : lily_epoch_terms(t, Family::query, l)) {
      const std::size_t r = numerical_rank(term);
      EXPECT_LE(r, 32u);
      max_term = std::max(max_term, r);
    }
    EXPECT_GE(numerical_rank(accumulated_delta_w(t, Family::query, l)), max_term) << "layer " << l;
  }
}

TEST(RankExperiment, BoundsDeterminismAndCsv) {
  RankExperimentConfig c;
  c.encoder = tiny_cfg(4);
  c.lily = small_lily(2);
  c.lily.rank_r = 2;
  c.lora.rank = 2;
  c.lora.placement = c.lily.placement;
  c.opt = quick_opt(3);
  auto task = make_task(3, tiny_cfg(), 48, 16);
  RankReport a = rank_experiment(task, c), b = rank_experiment(task, c);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.family, Family::query);
  EXPECT_LE(a.lily_params, a.lora_params);
  ASSERT_EQ(a.layers.size(), 3u);
  for (const auto& l : a.layers) {
    EXPECT_LE(l.lora_final_rank, 2u);
    EXPECT_LE(l.lora_accumulated_rank, 2u);
    EXPECT_LE(l.lily_max_epoch_term_rank, 2u);
    EXPECT_LE(l.lily_accumulated_rank, 8u);
    EXPECT_GE(l.lily_accumulated_rank, l.lily_max_epoch_term_rank);
  }
  std::ostringstream csv;
  write_csv(a, csv);
  const std::string text = csv.str();
  EXPECT_EQ(text.rfind("layer,method,mode,rank,sigma1,tolerance,params\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 5 * 3);
}

TEST(RankExperiment, BudgetViolationRejectedBeforeTraining) {
  RankExperimentConfig c;
  c.encoder = tiny_cfg(2);
  c.lily = small_lily(2);
  c.lily.rank_r = 8;
  c.lora.rank = 1;
  c.lora.placement = c.lily.placement;
  c.opt.epochs = 1'000'000;  // would take hours if training started
  auto task = make_task(3, tiny_cfg(2), 16, 4);
  EXPECT_THROW(rank_experiment(task, c), BudgetError);
  c.lora.placement = Placement::parse("kvmlp");
  EXPECT_THROW(rank_experiment(task, c), std::invalid_argument);
}

TEST(Heatmap, LayerTotalsEqualEventCount) {
  auto r = train_lily(small_lily(), 3);
  auto h = router_heatmap(r.trace, Family::value);
  EXPECT_EQ(h.events, r.trace.step_loss.size());
  EXPECT_EQ(h.layers(), (std::vector<std::size_t>{0, 1, 2}));
  for (std::size_t l : h.layers()) {
    double total = 0.0;
    for (double w : h.layer_weights(l)) {
      EXPECT_GE(w, 0.0);
      total += w;
    }
    EXPECT_NEAR(total, static_cast<double>(h.events), 1e-6);
  }
}

TEST(Heatmap, UniformModeSplitsEvenlyAndSingleExpertTakesAll) {
  LilyConfig lc = small_lily(3);
  lc.router_mode = RouterMode::uniform;
  auto r = train_lily(lc, 2);
  auto h = router_heatmap(r.trace, Family::query);
  for (std::size_t l : h.layers()) {
    auto w = h.layer_weights(l);
    ASSERT_EQ(w.size(), 3u);
    EXPECT_EQ(w[0], w[1]);
    EXPECT_EQ(w[1], w[2]);
    EXPECT_NEAR(w[0], static_cast<double>(h.events) / 3.0, 1e-9);
  }
  auto one = train_lily(small_lily(1), 2);
  auto h1 = router_heatmap(one.trace, Family::query);
  for (std::size_t l : h1.layers()) EXPECT_EQ(h1.layer_weights(l), std::vector<double>{static_cast<double>(h1.events)});
}

TEST(Heatmap, LayerSelectionAndCsvRoundTrip) {
  EXPECT_EQ(default_heatmap_layers(6), (std::vector<std::size_t>{0, 3, 5}));
  EXPECT_EQ(default_heatmap_layers(2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(default_heatmap_layers(1), (std::vector<std::size_t>{0}));
  auto r = train_lily(small_lily(), 2);
  auto sel = router_heatmap(r.trace, Family::query, std::vector<std::size_t>{2, 0});
  EXPECT_EQ(sel.layers(), (std::vector<std::size_t>{2, 0}));
  EXPECT_THROW(router_heatmap(r.trace, Family::query, std::vector<std::size_t>{3}), std::out_of_range);

  std::stringstream routes;
  write_routes_csv(r.trace, Family::query, routes);
  auto rebuilt = heatmap_from_routes_csv(routes);
  auto full = router_heatmap(r.trace, Family::query);
  ASSERT_EQ(rebuilt.cells.size(), full.cells.size());
  for (std::size_t i = 0; i < full.cells.size(); ++i) {
    EXPECT_EQ(rebuilt.cells[i].layer, full.cells[i].layer);
    EXPECT_EQ(rebuilt.cells[i].expert, full.cells[i].expert);
    EXPECT_NEAR(rebuilt.cells[i].weight, full.cells[i].weight, 1e-12);
  }
  std::ostringstream csv;
  write_csv(full, csv);
  EXPECT_EQ(csv.str().rfind("layer,expert,weight\n", 0), 0u);
}

TEST(FeatureDistance, IdentityShiftSymmetryAndRange) {
  LayerFeatures f;
  Matrix a(3, 4);
  for (std::size_t k = 0; k < a.size(); ++k) a.data()[k] = static_cast<double>(k % 5) * 0.25 - 0.5;
  f.per_layer = {a, add(a, Matrix::from_rows({{0.75, 0.75, 0.75, 0.75}})), seeded_gaussian(3, 4, 1.0, 1)};
  auto r = feature_distance(f, all_layer_pairs(3));
  ASSERT_EQ(r.rows.size(), 9u);
  auto d = [&](std::size_t i, std::size_t j) { return r.rows[i * 3 + j].mean_abs_diff; };
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d(i, i), 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(d(i, j), d(j, i));
  }
  EXPECT_EQ(d(0, 1), 0.75);
  EXPECT_THROW(feature_distance(f, {{0, 3}}), std::out_of_range);
  std::ostringstream csv;
  write_csv(r, csv);
  EXPECT_EQ(csv.str().rfind("layer_a,layer_b,mean_abs_diff\n", 0), 0u);
}

TEST(FeatureDistance, ModelAverageIsSymmetricWithZeroDiagonal) {
  auto r = train_lily(small_lily(), 1);
  auto task = make_task(2, tiny_cfg(), 48, 16);
  auto rep = mean_feature_distance(r.encoder, r.adapters, task.val, 8);
  ASSERT_EQ(rep.rows.size(), 9u);
  for (const auto& row : rep.rows) {
    EXPECT_GE(row.mean_abs_diff, 0.0);
    if (row.layer_a == row.layer_b) EXPECT_EQ(row.mean_abs_diff, 0.0);
    else EXPECT_GT(row.mean_abs_diff, 0.0);
  }
}

TEST(Sweep, BudgetedModeKeepsParamsWithinTwoPercent) {
  // ne values dividing rank_r * ne_0 keep rank * ne fixed; only router entries drift.
  SweepConfig s;
  s.encoder = EncoderConfig{};
  s.lily.rank_r = 16;
  s.ne_values = {1, 2, 4};
  s.mode = SweepMode::budgeted;
  const double ref = static_cast<double>(lily_model_params(s.encoder, sweep_config(s, 1)));
  for (std::size_t ne : s.ne_values) {
    LilyConfig c = sweep_config(s, ne);
    EXPECT_EQ(c.rank_r * ne, 16u);
    EXPECT_NEAR(static_cast<double>(lily_model_params(s.encoder, c)), ref, 0.02 * ref) << "ne " << ne;
  }
}

TEST(Sweep, BudgetedModePicksNearestRankOtherwise) {
  SweepConfig s;
  s.lily.rank_r = 16;
  s.ne_values = {1, 3, 6};
  s.mode = SweepMode::budgeted;
  const auto ref = static_cast<long>(lily_model_params(s.encoder, sweep_config(s, 1)));
  for (std::size_t ne : {3u, 6u}) {
    LilyConfig c = sweep_config(s, ne);
    const long gap = std::labs(static_cast<long>(lily_model_params(s.encoder, c)) - ref);
    for (std::size_t r : {c.rank_r - 1, c.rank_r + 1}) {
      if (r == 0) continue;
      LilyConfig other = c;
      other.rank_r = r;
      EXPECT_LE(gap, std::labs(static_cast<long>(lily_model_params(s.encoder, other)) - ref)) << "ne " << ne;
    }
  }
}

TEST(Sweep, FixedRankModeGrowsParams) {
  SweepConfig s;
  s.lily.rank_r = 8;
  s.ne_values = {1, 2, 3, 6};
  std::size_t prev = 0;
  for (std::size_t ne : s.ne_values) {
    LilyConfig c = sweep_config(s, ne);
    EXPECT_EQ(c.rank_r, 8u);
    EXPECT_EQ(c.ne_1, ne);
    EXPECT_EQ(c.ne_2, ne);
    const std::size_t p = lily_model_params(s.encoder, c);
    EXPECT_GT(p, prev);
    prev = p;
  }
  s.ne_2 = 1;
  EXPECT_EQ(sweep_config(s, 6).ne_2, 1u);
  EXPECT_THROW(sweep_config(s, 7), std::invalid_argument);
}

TEST(Sweep, RowsReportTrainedConfigs) {
  SweepConfig s;
  s.encoder = tiny_cfg();
  s.lily = small_lily();
  s.opt = quick_opt(1);
  s.ne_values = {1, 3};
  auto task = make_task(2, tiny_cfg(), 48, 16);
  auto rows = granularity_sweep(task, s);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.params, lily_model_params(s.encoder, sweep_config(s, r.ne)));
    EXPECT_GE(r.val_acc, 0.0);
    EXPECT_LE(r.val_acc, 1.0);
  }
  std::ostringstream csv;
  write_csv(rows, csv);
  EXPECT_EQ(csv.str().rfind("ne,ne_2,rank,params,val_acc\n", 0), 0u);
}
