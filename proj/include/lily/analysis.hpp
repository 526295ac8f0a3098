#pragma once

// Measurement protocols over training traces: numerical rank of accumulated
// effective weight updates, accumulated router weights per expert and layer,
// adapter-granularity sweeps and layer-to-layer feature distances.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lily/adapters.hpp"
#include "lily/io.hpp"
#include "lily/numkit.hpp"
#include "lily/toymodel.hpp"
#include "lily/trainer.hpp"

namespace lily {

class BudgetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require_snapshots(const TrainTrace& t) {
  if (t.snapshots.size() != t.epochs + 1)
    throw std::invalid_argument("trace is missing epoch snapshots (" + std::to_string(t.snapshots.size()) +
                                " for " + std::to_string(t.epochs) + " epochs)");
}

inline std::pair<std::size_t, std::size_t> delta_shape(const Adapters& a, Family f) {
  if (a.method == Method::lily) {
    const auto& set = a.lily_sets.at(f);
    return {set.A_list.at(0).rows(), set.B_bank.at(0).cols()};
  }
  if (a.method == Method::lora) {
    const auto& ad = a.lora_sets.at(f).at(0);
    return {ad.A.rows(), ad.B.cols()};
  }
  throw std::invalid_argument("trace has no adapters");
}

inline Matrix lora_product(const Adapters& a, Family f, std::size_t layer) {
  const auto& ad = a.lora_sets.at(f).at(layer);
  return scale(matmul(ad.A, ad.B), ad.scale);
}

}  // namespace detail

/// Lily's per-epoch effective update: s * A_e (sum_i mean_S_e,i B^i_e), using the
/// end-of-epoch snapshot and the epoch-mean route weights.
inline std::vector<Matrix> lily_epoch_terms(const TrainTrace& t, Family f, std::size_t layer) {
  detail::require_snapshots(t);
  std::vector<Matrix> terms;
  for (std::size_t e = 1; e <= t.epochs; ++e) {
    const Adapters& snap = t.snapshots[e];
    if (snap.method != Method::lily) throw std::invalid_argument("lily_epoch_terms: trace is not a Lily run");
    terms.push_back(effective_delta_w(snap.lily_sets.at(f), layer, epoch_mean_routes(t, e, f, layer), snap.lily.scale_s));
  }
  return terms;
}

/// Sum over epochs of each epoch's effective update. For LoRA the per-epoch
/// differences telescope to the final product minus the (zero) initial one.
inline Matrix accumulated_delta_w(const TrainTrace& t, Family f, std::size_t layer) {
  detail::require_snapshots(t);
  const Adapters& init = t.snapshots.front();
  auto [rows, cols] = detail::delta_shape(init, f);
  Matrix sum(rows, cols);
  if (init.method == Method::lily) {
    for (const Matrix& term : lily_epoch_terms(t, f, layer)) accumulate(sum, term);
  } else {
    for (std::size_t e = 1; e <= t.epochs; ++e)
      accumulate(sum, subtract(detail::lora_product(t.snapshots[e], f, layer),
                               detail::lora_product(t.snapshots[e - 1], f, layer)));
  }
  return sum;
}

/// Effective update of the last snapshot alone.
inline Matrix final_delta_w(const TrainTrace& t, Family f, std::size_t layer) {
  detail::require_snapshots(t);
  const Adapters& last = t.snapshots.back();
  if (last.method == Method::lora) return detail::lora_product(last, f, layer);
  if (t.epochs == 0) {
    auto [rows, cols] = detail::delta_shape(last, f);
    return Matrix(rows, cols);
  }
  return effective_delta_w(last.lily_sets.at(f), layer, epoch_mean_routes(t, t.epochs, f, layer), last.lily.scale_s);
}

struct LayerRank {
  std::size_t layer = 0;
  std::size_t lora_final_rank = 0;
  std::size_t lora_accumulated_rank = 0;
  std::size_t lily_accumulated_rank = 0;
  std::size_t lily_final_snapshot_rank = 0;
  std::size_t lily_max_epoch_term_rank = 0;
  Spectrum lora_spectrum;  // of the final LoRA product
  Spectrum lily_spectrum;  // of the accumulated Lily update
  double lora_accumulated_sigma1 = 0.0;
  double lily_final_sigma1 = 0.0;
  double lily_max_term_sigma1 = 0.0;
};

struct RankReport {
  Family family = Family::query;
  double tolerance = kDefaultRankTolerance;
  std::size_t lora_params = 0;
  std::size_t lily_params = 0;
  std::size_t lora_rank = 0;
  std::size_t lily_rank = 0;
  std::vector<LayerRank> layers;
  std::vector<double> lora_val_accuracy;
  std::vector<double> lily_val_accuracy;

  bool operator==(const RankReport& o) const {
    auto key = [](const RankReport& r) {
      std::vector<double> k{static_cast<double>(r.lora_params), static_cast<double>(r.lily_params)};
      for (const auto& l : r.layers) {
        k.insert(k.end(), {static_cast<double>(l.lora_final_rank), static_cast<double>(l.lily_accumulated_rank),
                           static_cast<double>(l.lily_final_snapshot_rank), static_cast<double>(l.lily_max_epoch_term_rank)});
        k.insert(k.end(), l.lora_spectrum.singular_values.begin(), l.lora_spectrum.singular_values.end());
        k.insert(k.end(), l.lily_spectrum.singular_values.begin(), l.lily_spectrum.singular_values.end());
      }
      return k;
    };
    return key(*this) == key(o);
  }
};

/// layer,method,mode,rank,sigma1,tolerance,params
inline void write_csv(const RankReport& r, std::ostream& out) {
  out << "layer,method,mode,rank,sigma1,tolerance,params\n";
  const auto tol = format_real(r.tolerance);
  for (const auto& l : r.layers) {
    auto row = [&](const char* method, const char* mode, std::size_t rank, double s1, std::size_t params) {
      out << l.layer << ',' << method << ',' << mode << ',' << rank << ',' << format_real(s1) << ',' << tol << ','
          << params << '\n';
    };
    row("lora", "final", l.lora_final_rank, l.lora_spectrum.largest(), r.lora_params);
    row("lora", "accumulated", l.lora_accumulated_rank, l.lora_accumulated_sigma1, r.lora_params);
    row("lily", "accumulated", l.lily_accumulated_rank, l.lily_spectrum.largest(), r.lily_params);
    row("lily", "final_snapshot", l.lily_final_snapshot_rank, l.lily_final_sigma1, r.lily_params);
    row("lily", "max_epoch_term", l.lily_max_epoch_term_rank, l.lily_max_term_sigma1, r.lily_params);
  }
}

struct RankExperimentConfig {
  EncoderConfig encoder;
  LoraConfig lora;
  LilyConfig lily;
  OptimizerConfig opt;
  std::uint64_t seed = 0;
  double tolerance = kDefaultRankTolerance;
  std::size_t report_layers = 3;
  TrainOptions train_options{};
};

/// Family whose updates are measured: query when adapted, else the first adapted family.
inline Family rank_family(const Placement& p) {
  if (p.contains(Family::query)) return Family::query;
  auto fs = p.families();
  if (fs.empty()) throw std::invalid_argument("rank_family: empty placement");
  return fs.front();
}

/// Checks the budget, trains LoRA and Lily on the same task and backbone, and
/// measures update ranks for the first `report_layers` adapted layers.
inline RankReport rank_experiment(const SyntheticTask& task, const RankExperimentConfig& cfg) {
  if (!(cfg.lora.placement == cfg.lily.placement))
    throw std::invalid_argument("rank_experiment: LoRA and Lily placements differ");
  Encoder base = build_encoder(cfg.encoder, cfg.seed);
  Adapters lora = inject_lora(base, cfg.lora, cfg.seed);
  Adapters lily = inject_lily(base, cfg.lily, cfg.seed);
  RankReport report;
  report.family = rank_family(cfg.lily.placement);
  report.tolerance = cfg.tolerance;
  report.lora_params = adapter_param_count(lora);
  report.lily_params = adapter_param_count(lily);
  report.lora_rank = cfg.lora.rank;
  report.lily_rank = cfg.lily.rank_r;
  if (report.lily_params > report.lora_params)
    throw BudgetError("rank_experiment: Lily uses " + std::to_string(report.lily_params) +
                      " trainable adapter parameters, LoRA only " + std::to_string(report.lora_params));

  Encoder e1 = base;
  TrainTrace lora_trace = train(e1, lora, task, cfg.opt, cfg.seed, cfg.train_options);
  Encoder e2 = base;
  TrainTrace lily_trace = train(e2, lily, task, cfg.opt, cfg.seed, cfg.train_options);
  report.lora_val_accuracy = lora_trace.val_accuracy;
  report.lily_val_accuracy = lily_trace.val_accuracy;

  const Family f = report.family;
  const std::size_t n = std::min(cfg.report_layers, cfg.encoder.n_layers);
  for (std::size_t l = 0; l < n; ++l) {
    LayerRank lr;
    lr.layer = l;
    lr.lora_spectrum = svd_spectrum(final_delta_w(lora_trace, f, l));
    lr.lora_final_rank = numerical_rank(lr.lora_spectrum, cfg.tolerance);
    const Spectrum lora_acc = svd_spectrum(accumulated_delta_w(lora_trace, f, l));
    lr.lora_accumulated_rank = numerical_rank(lora_acc, cfg.tolerance);
    lr.lora_accumulated_sigma1 = lora_acc.largest();
    lr.lily_spectrum = svd_spectrum(accumulated_delta_w(lily_trace, f, l));
    lr.lily_accumulated_rank = numerical_rank(lr.lily_spectrum, cfg.tolerance);
    const Spectrum fin = svd_spectrum(final_delta_w(lily_trace, f, l));
    lr.lily_final_snapshot_rank = numerical_rank(fin, cfg.tolerance);
    lr.lily_final_sigma1 = fin.largest();
    for (const Matrix& term : lily_epoch_terms(lily_trace, f, l)) {
      const Spectrum s = svd_spectrum(term);
      const std::size_t r = numerical_rank(s, cfg.tolerance);
      if (r >= lr.lily_max_epoch_term_rank) {
        lr.lily_max_epoch_term_rank = r;
        lr.lily_max_term_sigma1 = s.largest();
      }
    }
    report.layers.push_back(std::move(lr));
  }
  return report;
}

struct HeatmapCell {
  std::size_t layer = 0;
  std::size_t expert = 0;
  double weight = 0.0;
};

struct HeatmapReport {
  std::vector<HeatmapCell> cells;
  std::size_t events = 0;  // logged route vectors per layer

  std::vector<std::size_t> layers() const {
    std::vector<std::size_t> ls;
    for (const auto& c : cells)
      if (ls.empty() || ls.back() != c.layer) ls.push_back(c.layer);
    return ls;
  }
  std::vector<double> layer_weights(std::size_t layer) const {
    std::vector<double> w;
    for (const auto& c : cells)
      if (c.layer == layer) w.push_back(c.weight);
    return w;
  }
};

/// {first, middle, last} layer indices, deduplicated.
inline std::vector<std::size_t> default_heatmap_layers(std::size_t n_layers) {
  std::vector<std::size_t> ls{0, n_layers / 2, n_layers - 1};
  ls.erase(std::unique(ls.begin(), ls.end()), ls.end());
  return ls;
}

/// Sums every logged route vector, grouped by (layer, expert).
inline HeatmapReport router_heatmap(const TrainTrace& t, Family f, std::optional<std::vector<std::size_t>> layers = {}) {
  HeatmapReport r;
  std::vector<Matrix> sums;
  for (const auto& step : t.step_routes) {
    auto it = step.find(f);
    if (it == step.end()) continue;
    if (sums.empty()) sums = it->second;
    else
      for (std::size_t l = 0; l < sums.size(); ++l) accumulate(sums[l], it->second[l]);
    ++r.events;
  }
  std::vector<std::size_t> sel;
  if (layers) sel = *layers;
  else
    for (std::size_t l = 0; l < sums.size(); ++l) sel.push_back(l);
  for (std::size_t l : sel) {
    if (l >= sums.size()) throw std::out_of_range("router_heatmap: layer " + std::to_string(l) + " not logged");
    for (std::size_t k = 0; k < sums[l].cols(); ++k) r.cells.push_back({l, k, sums[l](0, k)});
  }
  return r;
}

inline void write_csv(const HeatmapReport& r, std::ostream& out) {
  out << "layer,expert,weight\n";
  for (const auto& c : r.cells) out << c.layer << ',' << c.expert << ',' << format_real(c.weight) << '\n';
}

/// Rebuilds a heatmap from a routes.csv (epoch,layer,expert,weight) stream.
inline HeatmapReport heatmap_from_routes_csv(std::istream& in) {
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,layer,expert,weight", 0) != 0) throw FormatError("routes.csv: unexpected header");
  std::map<std::pair<std::size_t, std::size_t>, double> acc;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& s : f)
      if (!std::getline(ls, s, ',')) throw FormatError("routes.csv: short row: " + line);
    acc[{static_cast<std::size_t>(parse_real(f[1])), static_cast<std::size_t>(parse_real(f[2]))}] += parse_real(f[3]);
  }
  HeatmapReport r;
  for (const auto& [key, w] : acc) r.cells.push_back({key.first, key.second, w});
  return r;
}

enum class SweepMode : std::uint8_t { fixed_rank, budgeted };

struct SweepRow {
  std::size_t ne = 0;
  std::size_t ne_2 = 0;
  std::size_t rank = 0;
  std::size_t params = 0;
  double val_acc = 0.0;
};

struct SweepConfig {
  EncoderConfig encoder;
  LilyConfig lily;  // rank_r is the fixed rank, or the reference rank at ne_values[0] when budgeted
  OptimizerConfig opt;
  std::vector<std::size_t> ne_values;
  SweepMode mode = SweepMode::fixed_rank;
  std::size_t ne_2 = 0;  // 0: ne_2 follows ne
  std::uint64_t seed = 0;
  TrainOptions train_options{};
};

inline std::size_t lily_model_params(const EncoderConfig& enc, const LilyConfig& cfg) {
  std::size_t total = 0;
  for (Family f : cfg.placement.families()) {
    auto [cin, cout] = family_dims(enc, f);
    total += lily_param_count(cfg, cin, cout, enc.n_layers);
  }
  return total;
}

/// Configuration for one sweep row (rank chosen to match the reference budget when budgeted).
inline LilyConfig sweep_config(const SweepConfig& s, std::size_t ne) {
  if (ne < 1 || ne > s.encoder.n_layers) throw std::invalid_argument("granularity_sweep: ne must lie in [1, L]");
  LilyConfig c = s.lily;
  c.share_A = true;
  c.ne_1 = ne;
  c.ne_2 = s.ne_2 ? s.ne_2 : ne;
  if (s.mode == SweepMode::budgeted) {
    LilyConfig ref = s.lily;
    ref.share_A = true;
    ref.ne_1 = s.ne_values.at(0);
    ref.ne_2 = s.ne_2 ? s.ne_2 : ref.ne_1;
    const double target = static_cast<double>(lily_model_params(s.encoder, ref));
    std::size_t best = 1;
    double best_gap = -1.0;
    for (std::size_t r = 1; r <= 4 * s.lily.rank_r * s.ne_values.at(0) + 1; ++r) {
      c.rank_r = r;
      const double gap = std::abs(static_cast<double>(lily_model_params(s.encoder, c)) - target);
      if (best_gap < 0.0 || gap < best_gap) best = r, best_gap = gap;
    }
    c.rank_r = best;
  }
  return c;
}

inline std::vector<SweepRow> granularity_sweep(const SyntheticTask& task, const SweepConfig& s) {
  if (s.ne_values.empty()) throw std::invalid_argument("granularity_sweep: no ne values");
  std::vector<SweepRow> rows;
  for (std::size_t ne : s.ne_values) {
    LilyConfig c = sweep_config(s, ne);
    Encoder e = build_encoder(s.encoder, s.seed);
    Adapters ad = inject_lily(e, c, s.seed);
    TrainTrace t = train(e, ad, task, s.opt, s.seed, s.train_options);
    rows.push_back({ne, c.ne_2, c.rank_r, adapter_param_count(ad), t.val_accuracy.back()});
  }
  return rows;
}

inline void write_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "ne,ne_2,rank,params,val_acc\n";
  for (const auto& r : rows)
    out << r.ne << ',' << r.ne_2 << ',' << r.rank << ',' << r.params << ',' << format_real(r.val_acc) << '\n';
}

struct FeatureDistance {
  std::size_t layer_a = 0;
  std::size_t layer_b = 0;
  double mean_abs_diff = 0.0;
};

struct FeatureDistanceReport {
  std::vector<FeatureDistance> rows;
};

inline std::vector<std::pair<std::size_t, std::size_t>> all_layer_pairs(std::size_t n_layers) {
  std::vector<std::pair<std::size_t, std::size_t>> p;
  for (std::size_t a = 0; a < n_layers; ++a)
    for (std::size_t b = 0; b < n_layers; ++b) p.emplace_back(a, b);
  return p;
}

/// Mean over positions and channels of |f_a - f_b|.
inline FeatureDistanceReport feature_distance(const LayerFeatures& f,
                                              const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  FeatureDistanceReport r;
  for (auto [a, b] : pairs) {
    if (a >= f.per_layer.size() || b >= f.per_layer.size())
      throw std::out_of_range("feature_distance: layer index out of range");
    const Matrix& x = f.per_layer[a];
    const Matrix& y = f.per_layer[b];
    detail::require(x.same_shape(y), "feature_distance", x, y);
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += std::abs(x.data()[k] - y.data()[k]);
    r.rows.push_back({a, b, x.size() ? s / static_cast<double>(x.size()) : 0.0});
  }
  return r;
}

/// Pairwise distances averaged over the given examples.
inline FeatureDistanceReport mean_feature_distance(const Encoder& e, const Adapters& ad, const Split& s,
                                                   std::size_t max_examples = 32) {
  const auto pairs = all_layer_pairs(e.cfg.n_layers);
  FeatureDistanceReport total;
  const std::size_t n = std::min(max_examples, s.size());
  for (std::size_t i = 0; i < n; ++i) {
    LayerFeatures f;
    forward_with_features(e, ad, s.rows[i], &f);
    auto r = feature_distance(f, pairs);
    if (total.rows.empty()) total = r;
    else
      for (std::size_t k = 0; k < r.rows.size(); ++k) total.rows[k].mean_abs_diff += r.rows[k].mean_abs_diff;
  }
  for (auto& row : total.rows) row.mean_abs_diff /= static_cast<double>(std::max<std::size_t>(n, 1));
  return total;
}

inline void write_csv(const FeatureDistanceReport& r, std::ostream& out) {
  out << "layer_a,layer_b,mean_abs_diff\n";
  for (const auto& row : r.rows) out << row.layer_a << ',' << row.layer_b << ',' << format_real(row.mean_abs_diff) << '\n';
}

}  // namespace lily
