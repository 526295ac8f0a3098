#pragma once

// Teacher-student synthetic classification tasks, AdamW with decoupled weight
// decay, and a deterministic training loop that records losses, validation
// accuracy, per-epoch adapter snapshots and per-batch route weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "lily/adapters.hpp"
#include "lily/gradkit.hpp"
#include "lily/io.hpp"
#include "lily/toymodel.hpp"

namespace lily {

struct Split {
  std::vector<std::vector<int>> rows;
  std::vector<int> labels;

  std::size_t size() const noexcept { return rows.size(); }
};

struct SyntheticTask {
  Split train;
  Split val;
  std::uint64_t seed = 0;
  std::uint64_t teacher_seed = 0;
  EncoderConfig cfg;
  Encoder teacher;  // labels are the argmax of this model's head
};

inline int predict(const Encoder& e, const Adapters& ad, std::span<const int> tokens) {
  Matrix logits = forward_with_features(e, ad, tokens);
  return static_cast<int>(argmax(logits.row(0)));
}

/// Random token rows labelled by a frozen random teacher. The teacher head bias
/// centres its logits over the generated rows; if any class falls outside
/// [n/(2K), 2n/K] the teacher is redrawn from the next sub-seed.
inline SyntheticTask make_task(std::uint64_t seed, const EncoderConfig& cfg, std::size_t n_train, std::size_t n_val) {
  if (n_train < 1 || n_val < 1) throw std::invalid_argument("make_task: split sizes must be >= 1");
  validate(cfg);
  SyntheticTask task;
  task.seed = seed;
  task.cfg = cfg;

  const std::size_t n = n_train + n_val;
  GaussianStream tokens(derive_seed(seed, "tokens"));
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> rows;
  while (rows.size() < n) {
    std::vector<int> row(cfg.seq_len);
    for (int& t : row) t = static_cast<int>(tokens.raw() % cfg.vocab);
    if (seen.insert(row).second) rows.push_back(std::move(row));
    else if (seen.size() > 64 * n) throw std::invalid_argument("make_task: cannot draw enough distinct rows");
  }

  const Adapters none = no_adapters();
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t tseed = derive_seed(seed, "teacher/" + std::to_string(attempt));
    Encoder teacher = build_encoder(cfg, tseed);
    teacher.head.weight = seeded_gaussian(cfg.d_model, cfg.n_classes, 1.0, derive_seed(tseed, "teacher.head"));
    teacher.head.bias = Matrix(1, cfg.n_classes);
    Matrix mean(1, cfg.n_classes);
    for (const auto& r : rows) accumulate(mean, forward_with_features(teacher, none, r));
    teacher.head.bias = scale(mean, -1.0 / static_cast<double>(n));

    std::vector<int> labels;
    std::vector<std::size_t> counts(cfg.n_classes, 0);
    for (const auto& r : rows) {
      labels.push_back(predict(teacher, none, r));
      ++counts[static_cast<std::size_t>(labels.back())];
    }
    const double k = static_cast<double>(cfg.n_classes);
    const bool balanced = std::all_of(counts.begin(), counts.end(), [&](std::size_t c) {
      return static_cast<double>(c) >= static_cast<double>(n) / (2.0 * k) &&
             static_cast<double>(c) <= 2.0 * static_cast<double>(n) / k;
    });
    if (!balanced) continue;

    task.teacher_seed = tseed;
    task.teacher = std::move(teacher);
    for (std::size_t i = 0; i < n; ++i) {
      Split& s = i < n_train ? task.train : task.val;
      s.rows.push_back(rows[i]);
      s.labels.push_back(labels[i]);
    }
    return task;
  }
  throw std::runtime_error("make_task: no balanced teacher found");
}

/// One example per line: token ids then the label, comma separated.
inline void write_dataset_csv(const Split& s, std::ostream& out) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (int t : s.rows[i]) out << t << ',';
    out << s.labels[i] << '\n';
  }
}

inline Split read_dataset_csv(std::istream& in) {
  Split s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<int> vals;
    std::string_view rest(line);
    while (true) {
      auto comma = rest.find(',');
      const double v = parse_real(rest.substr(0, comma));
      if (v != std::floor(v)) throw FormatError("dataset: non-integer value in '" + line + "'");
      vals.push_back(static_cast<int>(v));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (vals.size() < 2) throw FormatError("dataset: row needs tokens and a label");
    s.labels.push_back(vals.back());
    vals.pop_back();
    s.rows.push_back(std::move(vals));
  }
  return s;
}

enum class Schedule : std::uint8_t { constant, linear_decay, cosine };

struct OptimizerConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  Schedule schedule = Schedule::cosine;
};

inline void validate(const OptimizerConfig& o) {
  if (!(o.lr >= 0.0)) throw std::invalid_argument("OptimizerConfig: learning rate must be >= 0");
  if (o.batch_size < 1) throw std::invalid_argument("OptimizerConfig: batch size must be >= 1");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0))
    throw std::invalid_argument("OptimizerConfig: betas must lie in [0,1)");
}

/// Learning rate for 0-based `step` out of `total` steps.
inline double scheduled_lr(const OptimizerConfig& o, std::size_t step, std::size_t total) {
  if (total == 0) return o.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  switch (o.schedule) {
    case Schedule::constant: return o.lr;
    case Schedule::linear_decay: return o.lr * (1.0 - t);
    case Schedule::cosine: return o.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  return o.lr;
}

struct AdamState {
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
  std::size_t t = 0;
};

/// One AdamW update with bias correction; decay acts on the parameters directly:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
inline void adamw_step(std::span<const ParamRef> params, const NamedGradients& grads, AdamState& state,
                       const OptimizerConfig& opt, double lr) {
  for (const auto& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw std::invalid_argument("adamw_step: no gradient for " + p.name);
    if (!it->second.same_shape(*p.matrix))
      throw ShapeError("adamw_step: " + p.name + " gradient " + it->second.shape_string() + " vs parameter " +
                       p.matrix->shape_string());
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (const auto& p : params) {
    const Matrix& g = grads.at(p.name);
    Matrix& w = *p.matrix;
    auto [mit, fresh_m] = state.m.try_emplace(p.name, w.rows(), w.cols());
    auto [vit, fresh_v] = state.v.try_emplace(p.name, w.rows(), w.cols());
    auto m = mit->second.data();
    auto v = vit->second.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.data()[k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      double& wk = w.data()[k];
      wk -= lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * wk);
    }
  }
}

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(std::size_t step)
      : std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct TrainTrace {
  std::size_t epochs = 0;
  std::size_t steps_per_epoch = 0;
  std::vector<double> step_loss;
  std::vector<double> val_accuracy;  // [0] before training, then one per epoch
  std::vector<Adapters> snapshots;   // [0] at initialization, then end of each epoch
  std::vector<RouteCapture> step_routes;  // batch-mean route weights per (family, layer)

  std::size_t epoch_of_step(std::size_t step) const { return step / steps_per_epoch + 1; }
};

struct TrainOptions {
  std::size_t threads = 1;
};

/// LILY_THREADS, default 1.
inline std::size_t threads_from_env() {
  if (const char* s = std::getenv("LILY_THREADS")) {
    const long v = std::strtol(s, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

inline double accuracy(const Encoder& e, const Adapters& ad, const Split& s) {
  if (s.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.size(); ++i) hits += predict(e, ad, s.rows[i]) == s.labels[i];
  return static_cast<double>(hits) / static_cast<double>(s.size());
}

inline std::vector<ParamRef> trainable_refs(Encoder& e, Adapters& ad) {
  std::vector<ParamRef> refs;
  for_each_trainable(e.head, ad, [&](const std::string& name, Matrix& m) { refs.push_back({name, &m}); });
  return refs;
}

struct ExampleResult {
  double loss = 0.0;
  NamedGradients grads;
  RouteCapture routes;
};

inline ExampleResult example_gradient(const Encoder& e, const Adapters& ad, std::span<const int> tokens, int label) {
  ExampleResult r;
  Tape tape;
  Var logits = record_logits(tape, e, e.head, ad, tokens, {nullptr, &r.routes});
  const int lab[1] = {label};
  Var loss = tape.cross_entropy(logits, lab);
  r.loss = tape.value(loss)(0, 0);
  r.grads = tape.backward(loss);
  return r;
}

/// Updates only the head and adapter tensors. Per-example work may run on
/// several threads; reductions always happen in example order.
inline TrainTrace train(Encoder& e, Adapters& ad, const SyntheticTask& task, const OptimizerConfig& opt,
                        std::uint64_t seed, TrainOptions options = {}) {
  validate(opt);
  const std::size_t n = task.train.size();
  if (n == 0) throw std::invalid_argument("train: empty training split");
  TrainTrace trace;
  trace.epochs = opt.epochs;
  trace.steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = trace.epochs * trace.steps_per_epoch;

  trace.val_accuracy.push_back(accuracy(e, ad, task.val));
  trace.snapshots.push_back(ad);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  GaussianStream shuffle(derive_seed(seed, "shuffle"));
  AdamState state;
  std::vector<ParamRef> refs = trainable_refs(e, ad);
  const std::size_t threads = std::max<std::size_t>(1, options.threads);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.raw() % (i + 1)]);
    for (std::size_t b0 = 0; b0 < n; b0 += opt.batch_size, ++step) {
      const std::size_t b1 = std::min(n, b0 + opt.batch_size);
      const std::size_t count = b1 - b0;
      std::vector<ExampleResult> results(count);
      auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
          const std::size_t idx = order[b0 + j];
          results[j] = example_gradient(e, ad, task.train.rows[idx], task.train.labels[idx]);
        }
      };
      if (threads == 1 || count < 2) {
        work(0, count);
      } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (count + threads - 1) / threads;
        for (std::size_t lo = 0; lo < count; lo += chunk) pool.emplace_back(work, lo, std::min(count, lo + chunk));
        for (auto& t : pool) t.join();
      }

      NamedGradients grads = std::move(results[0].grads);
      double loss = results[0].loss;
      RouteCapture routes = std::move(results[0].routes);
      for (std::size_t j = 1; j < count; ++j) {
        loss += results[j].loss;
        for (auto& [name, g] : results[j].grads) accumulate(grads.at(name), g);
        for (auto& [f, per_layer] : results[j].routes)
          for (std::size_t l = 0; l < per_layer.size(); ++l) accumulate(routes[f][l], per_layer[l]);
      }
      const double inv = 1.0 / static_cast<double>(count);
      loss *= inv;
      if (!std::isfinite(loss)) throw DivergenceError(step);
      for (auto& [name, g] : grads) g = scale(g, inv);
      for (auto& [f, per_layer] : routes)
        for (auto& s : per_layer) s = scale(s, inv);

      adamw_step(refs, grads, state, opt, scheduled_lr(opt, step, total_steps));
      trace.step_loss.push_back(loss);
      trace.step_routes.push_back(std::move(routes));
    }
    trace.val_accuracy.push_back(accuracy(e, ad, task.val));
    trace.snapshots.push_back(ad);
  }
  return trace;
}

/// Mean of the logged batch route weights over one epoch (1-based).
inline RouteWeights epoch_mean_routes(const TrainTrace& t, std::size_t epoch, Family f, std::size_t layer) {
  if (epoch < 1 || epoch > t.epochs) throw std::out_of_range("epoch_mean_routes: epoch out of range");
  Matrix sum;
  const std::size_t lo = (epoch - 1) * t.steps_per_epoch, hi = epoch * t.steps_per_epoch;
  for (std::size_t s = lo; s < hi; ++s) {
    const Matrix& m = t.step_routes.at(s).at(f).at(layer);
    if (sum.empty()) sum = m;
    else accumulate(sum, m);
  }
  sum = scale(sum, 1.0 / static_cast<double>(hi - lo));
  double total = 0.0;
  for (double v : sum.data()) total += v;
  for (double& v : sum.data()) v /= total;
  return RouteWeights(std::vector<double>(sum.data().begin(), sum.data().end()));
}

inline void write_loss_csv(const TrainTrace& t, std::ostream& out) {
  out << "step,loss\n";
  for (std::size_t i = 0; i < t.step_loss.size(); ++i) out << i << ',' << format_real(t.step_loss[i]) << '\n';
}

inline void write_accuracy_csv(const TrainTrace& t, std::ostream& out) {
  out << "epoch,val_acc\n";
  for (std::size_t i = 0; i < t.val_accuracy.size(); ++i) out << i << ',' << format_real(t.val_accuracy[i]) << '\n';
}

/// Per-epoch sums of logged route weights for one family: epoch,layer,expert,weight.
inline void write_routes_csv(const TrainTrace& t, Family f, std::ostream& out) {
  out << "epoch,layer,expert,weight\n";
  for (std::size_t epoch = 1; epoch <= t.epochs; ++epoch) {
    std::vector<Matrix> sums;
    for (std::size_t s = (epoch - 1) * t.steps_per_epoch; s < epoch * t.steps_per_epoch; ++s) {
      auto it = t.step_routes.at(s).find(f);
      if (it == t.step_routes.at(s).end()) return;
      if (sums.empty()) sums = it->second;
      else
        for (std::size_t l = 0; l < sums.size(); ++l) accumulate(sums[l], it->second[l]);
    }
    for (std::size_t l = 0; l < sums.size(); ++l)
      for (std::size_t k = 0; k < sums[l].cols(); ++k)
        out << epoch << ',' << l << ',' << k << ',' << format_real(sums[l](0, k)) << '\n';
  }
}

/// Analytic versus central-difference gradients of one example's loss for
/// every trainable tensor. `corrupt` != 1 scales matmul input-gradients (negative control).
inline GradCheckReport model_grad_check(const Encoder& e, const Adapters& ad, std::span<const int> tokens, int label,
                                        double rel_tol, double abs_tol, double eps = 1e-6, double corrupt = 1.0) {
  Encoder ec = e;
  Adapters ac = ad;
  const int lab[1] = {label};
  Program loss = [&](Tape& t) { return t.cross_entropy(record_logits(t, ec, ec.head, ac, tokens), lab); };
  NamedGradients analytic;
  {
    Tape t;
    Var l = loss(t);
    t.corrupt_backward(corrupt);
    analytic = t.backward(l);
  }
  const std::vector<ParamRef> refs = trainable_refs(ec, ac);
  return grad_check(analytic, finite_diff_grad(loss, refs, eps), rel_tol, abs_tol);
}

struct GradCheckInstance {
  Encoder encoder;
  Adapters adapters;
  std::vector<int> tokens;
  int label = 0;
};

/// Tiny model (d_model 8, 2 layers, 4 positions) with every family adapted.
/// B experts, routers and the head are randomized so that no gradient is trivially zero.
inline GradCheckInstance tiny_grad_check_instance(Method method, RouterMode mode, std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.vocab = 10;
  cfg.seq_len = 4;
  cfg.n_classes = 3;
  GradCheckInstance g;
  g.encoder = build_encoder(cfg, seed);
  g.encoder.head.weight = seeded_gaussian(cfg.d_model, cfg.n_classes, 0.5, derive_seed(seed, "gc.head.weight"));
  g.encoder.head.bias = seeded_gaussian(1, cfg.n_classes, 0.5, derive_seed(seed, "gc.head.bias"));
  const Placement all = Placement::parse("all");
  if (method == Method::lily) {
    LilyConfig lc;
    lc.rank_r = 3;
    lc.ne_1 = 2;
    lc.ne_2 = 3;
    lc.router_mode = mode;
    lc.placement = all;
    g.adapters = inject_lily(g.encoder, lc, seed);
  } else if (method == Method::lora) {
    LoraConfig lc;
    lc.rank = 2;
    lc.placement = all;
    g.adapters = inject_lora(g.encoder, lc, seed);
  } else {
    g.adapters = no_adapters();
  }
  Head<Matrix> unused;
  for_each_trainable(unused, g.adapters, [&](const std::string& name, Matrix& m) {
    if (name.rfind("head.", 0) == 0) return;
    m = seeded_gaussian(m.rows(), m.cols(), 0.5, derive_seed(seed, "gc." + name));
  });
  GaussianStream tok(derive_seed(seed, "gc.tokens"));
  for (std::size_t i = 0; i < cfg.seq_len; ++i) g.tokens.push_back(static_cast<int>(tok.raw() % cfg.vocab));
  g.label = static_cast<int>(tok.raw() % cfg.n_classes);
  return g;
}

}  // namespace lily
