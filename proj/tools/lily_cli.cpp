// lily: run adapter experiments from flat key=value configs and write CSV reports.
//
// Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 training divergence.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lily/analysis.hpp"
#include "lily/config.hpp"
#include "lily/flopsbench.hpp"
#include "lily/trainer.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using namespace lily;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kConfigError = 2, kDiverged = 3;
constexpr double kGradRelTol = 1e-4, kGradAbsTol = 1e-6;

struct GlobalFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  bool corrupt_backward = false;
};

RunConfig load_config(const GlobalFlags& g, Command cmd) {
  KeyValues kv;
  if (!g.config.empty()) kv = load_key_values(g.config);
  RunConfig c = parse_run_config(kv, cmd);
  if (!g.out.empty()) c.out_dir = g.out;
  if (g.seed) c.seed = *g.seed;
  if (g.tol) {
    if (!(*g.tol > 0.0 && *g.tol < 1.0)) throw ConfigError("tol", "--tol must lie in (0,1)");
    c.tol = *g.tol;
  }
  return c;
}

/// Writes files under the output directory and remembers them for the manifest.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  template <class Fn>
  void write(const std::string& name, Fn&& fn) {
    std::ofstream out(dir_ / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
    fn(out);
    files_.push_back(name);
  }
  void add(const fs::path& p) { files_.push_back(p.filename().string()); }
  void manifest() {
    files_.push_back("manifest.txt");
    std::ofstream out(dir_ / "manifest.txt", std::ios::binary);
    for (const auto& f : files_) out << f << '\n';
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

SyntheticTask load_task(const RunConfig& c) {
  if (c.train_data.empty()) return make_task(c.task_seed, task_encoder(c), c.n_train, c.n_val);
  SyntheticTask task;
  task.cfg = c.encoder;
  auto read = [&](const std::string& path, const char* key) {
    std::ifstream in(path);
    if (!in) throw ConfigError(key, std::string("config key '") + key + "': cannot read '" + path + "'");
    Split s = read_dataset_csv(in);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.rows[i].size() != c.encoder.seq_len)
        throw ConfigError(key, std::string("config key '") + key + "': row length differs from seq_len");
      for (int t : s.rows[i])
        if (t < 0 || static_cast<std::size_t>(t) >= c.encoder.vocab)
          throw ConfigError(key, std::string("config key '") + key + "': token outside the vocabulary");
      if (s.labels[i] < 0 || static_cast<std::size_t>(s.labels[i]) >= c.encoder.n_classes)
        throw ConfigError(key, std::string("config key '") + key + "': label outside [0, n_classes)");
    }
    if (s.size() == 0) throw ConfigError(key, std::string("config key '") + key + "': empty dataset");
    return s;
  };
  task.train = read(c.train_data, "train_data");
  task.val = read(c.val_data, "val_data");
  return task;
}

Adapters make_adapters(const Encoder& e, const RunConfig& c) {
  switch (c.method) {
    case Method::lily: return inject_lily(e, c.lily, c.seed);
    case Method::lora: return inject_lora(e, c.lora, c.seed);
    default: return no_adapters();
  }
}

int cmd_train(const RunConfig& c) {
  const SyntheticTask task = load_task(c);
  Encoder e = build_encoder(c.encoder, c.seed);
  Adapters ad = make_adapters(e, c);
  const TrainTrace trace = train(e, ad, task, c.opt, c.seed, {threads_from_env()});

  Outputs out(c.out_dir);
  out.write("loss.csv", [&](std::ostream& o) { write_loss_csv(trace, o); });
  out.write("accuracy.csv", [&](std::ostream& o) { write_accuracy_csv(trace, o); });
  const auto families = ad.method == Method::lily ? ad.placement().families() : std::vector<Family>{};
  out.write("routes.csv", [&](std::ostream& o) {
    if (families.empty()) o << "epoch,layer,expert,weight\n";
    else write_routes_csv(trace, families.front(), o);
  });
  for (Family f : families)
    out.write("routes_" + std::string(family_name(f)) + ".csv", [&](std::ostream& o) { write_routes_csv(trace, f, o); });
  out.write("feature_distance.csv", [&](std::ostream& o) { write_csv(mean_feature_distance(e, ad, task.val), o); });
  for (const auto& p : save_checkpoint(adapter_tensors(e, ad), out.dir() / "adapters")) out.add(p);
  out.manifest();
  std::cout << "final val accuracy " << trace.val_accuracy.back() << " (initial " << trace.val_accuracy.front()
            << ")\n";
  return kOk;
}

int cmd_gradcheck(const RunConfig& c, bool corrupt) {
  GradCheckReport all;
  for (Method m : {Method::lily, Method::lora}) {
    const auto inst = tiny_grad_check_instance(m, c.lily.router_mode, c.seed);
    auto r = model_grad_check(inst.encoder, inst.adapters, inst.tokens, inst.label, kGradRelTol, kGradAbsTol, 1e-6,
                              corrupt ? 1.5 : 1.0);
    const std::string prefix = m == Method::lily ? "lily/" : "lora/";
    for (auto& e : r.entries) {
      e.name = prefix + e.name;
      all.entries.push_back(e);
    }
    all.pass = all.pass && r.pass;
  }
  Outputs out(c.out_dir);
  out.write("gradcheck.csv", [&](std::ostream& o) { write_csv(all, o); });
  const GradCheckEntry* w = all.worst();
  if (!all.pass) {
    std::cerr << "gradient check failed: worst parameter " << w->name << " max_abs_err " << w->max_abs_err
              << " max_rel_err " << w->max_rel_err << '\n';
    return kCheckFailed;
  }
  std::cout << "gradient check passed for " << all.entries.size() << " tensors (worst " << w->name << ", abs "
            << w->max_abs_err << ")\n";
  return kOk;
}

int cmd_rank(const RunConfig& c) {
  RankExperimentConfig rc;
  rc.encoder = c.encoder;
  rc.lora = c.lora;
  rc.lily = c.lily;
  rc.opt = c.opt;
  rc.seed = c.seed;
  rc.tolerance = c.tol;
  rc.report_layers = c.rank_layers;
  rc.train_options.threads = threads_from_env();
  RankReport r;
  try {
    // Budget is checked before the task is built so a violation fails fast.
    Encoder probe = build_encoder(c.encoder, c.seed);
    const auto lily = adapter_param_count(inject_lily(probe, c.lily, c.seed));
    const auto lora = adapter_param_count(inject_lora(probe, c.lora, c.seed));
    if (lily > lora) throw BudgetError("Lily uses " + std::to_string(lily) + " adapter parameters, LoRA " + std::to_string(lora));
    r = rank_experiment(load_task(c), rc);
  } catch (const BudgetError& e) {
    throw ConfigError("rank_r", std::string("budget violation: ") + e.what());
  }
  Outputs out(c.out_dir);
  out.write("rank.csv", [&](std::ostream& o) { write_csv(r, o); });
  out.manifest();
  std::size_t wins = 0;
  for (const auto& l : r.layers) {
    std::cout << "layer " << l.layer << ": lora " << l.lora_final_rank << ", lily accumulated " << l.lily_accumulated_rank
              << " (final snapshot " << l.lily_final_snapshot_rank << ")\n";
    wins += l.lily_accumulated_rank > l.lora_final_rank;
  }
  std::cout << "lily higher on " << wins << " of " << r.layers.size() << " layers\n";
  return kOk;
}

int cmd_heatmap(const RunConfig& c) {
  const SyntheticTask task = load_task(c);
  Encoder e = build_encoder(c.encoder, c.seed);
  Adapters ad = inject_lily(e, c.lily, c.seed);
  const TrainTrace trace = train(e, ad, task, c.opt, c.seed, {threads_from_env()});
  const auto layers = c.heatmap_layers.empty() ? default_heatmap_layers(c.encoder.n_layers) : c.heatmap_layers;
  Outputs out(c.out_dir);
  const Family main = rank_family(c.lily.placement);
  out.write("heatmap.csv", [&](std::ostream& o) { write_csv(router_heatmap(trace, main, layers), o); });
  for (Family f : c.lily.placement.families())
    out.write("heatmap_" + std::string(family_name(f)) + ".csv",
              [&](std::ostream& o) { write_csv(router_heatmap(trace, f, layers), o); });
  out.manifest();
  return kOk;
}

int cmd_flops(const RunConfig& c) {
  FlopsReport r;
  try {
    r = timed_compare(c.flops_n, c.flops_d, c.flops_c, c.flops_ne, c.flops_reps, c.seed);
  } catch (const EquivalenceError& e) {
    std::cerr << e.what() << '\n';
    return kCheckFailed;
  }
  Outputs out(c.out_dir);
  out.write("flops.csv", [&](std::ostream& o) { write_csv(std::vector{r}, o); });
  out.manifest();
  std::cout << "flops naive " << r.naive_flops << " efficient " << r.efficient_flops << " ratio " << r.ratio
            << "; time naive " << r.naive_ms << " ms efficient " << r.efficient_ms << " ms ratio " << r.time_ratio
            << '\n';
  return kOk;
}

int cmd_equiv(const RunConfig& c) {
  const auto rows = equivalence_sweep(c.equiv_instances, c.seed);
  Outputs out(c.out_dir);
  out.write("equiv.csv", [&](std::ostream& o) { write_csv(rows, o); });
  out.manifest();
  double worst = 0.0;
  for (const auto& r : rows) worst = std::max(worst, r.max_abs_diff);
  std::cout << rows.size() << " instances, worst max-abs difference " << worst << '\n';
  if (!(worst <= kMergeTolerance)) {
    std::cerr << "merge orders disagree beyond " << kMergeTolerance << '\n';
    return kCheckFailed;
  }
  return kOk;
}

int cmd_sweep(const RunConfig& c) {
  SweepConfig s;
  s.encoder = c.encoder;
  s.lily = c.lily;
  s.opt = c.opt;
  s.ne_values = c.sweep_ne;
  s.mode = c.sweep_mode;
  s.ne_2 = c.sweep_ne2;
  s.seed = c.seed;
  s.train_options.threads = threads_from_env();
  const auto rows = granularity_sweep(load_task(c), s);
  Outputs out(c.out_dir);
  out.write("sweep.csv", [&](std::ostream& o) { write_csv(rows, o); });
  out.manifest();
  return kOk;
}

int cmd_plot(const RunConfig& c) {
  const fs::path dir = c.out_dir;
  std::size_t made = 0;
  auto table = [&](const char* name) -> std::optional<plot::Table> {
    std::ifstream in(dir / name);
    if (!in) return std::nullopt;
    return plot::read_table(in);
  };
  auto svg = [&](const char* name) {
    ++made;
    return (dir / name).string();
  };
  if (auto t = table("loss.csv")) plot::line_chart(t->numbers("step"), t->numbers("loss"), "training loss", svg("loss.svg"));
  if (auto t = table("accuracy.csv"))
    plot::line_chart(t->numbers("epoch"), t->numbers("val_acc"), "validation accuracy", svg("accuracy.svg"));
  if (auto t = table("heatmap.csv"))
    plot::heat_grid(t->numbers("layer"), t->numbers("expert"), t->numbers("weight"), "accumulated expert weight",
                    "layer", "expert", svg("heatmap.svg"));
  if (auto t = table("feature_distance.csv"))
    plot::heat_grid(t->numbers("layer_a"), t->numbers("layer_b"), t->numbers("mean_abs_diff"), "feature distance",
                    "layer", "layer", svg("feature_distance.svg"));
  if (auto t = table("sweep.csv"))
    plot::line_chart(t->numbers("ne"), t->numbers("val_acc"), "validation accuracy by granularity", svg("sweep.svg"));
  std::cout << "wrote " << made << " plot(s) to " << dir.string() << '\n';
  return made ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lily adapter experiments: training, gradient checks, rank, routing and FLOPs reports"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags g;
  app.add_option("--config", g.config, "key=value configuration file");
  app.add_option("--out", g.out, "output directory (overrides out_dir)");
  app.add_option("--seed", g.seed, "seed (overrides the config)");
  app.add_option("--tol", g.tol, "relative rank tolerance");

  struct Sub {
    const char* name;
    Command cmd;
    const char* help;
  };
  const Sub subs[] = {{"train", Command::train, "train one adapted model and write trace CSVs"},
                      {"gradcheck", Command::gradcheck, "compare analytic and finite-difference gradients"},
                      {"rank", Command::rank, "rank of accumulated weight updates, LoRA vs Lily"},
                      {"heatmap", Command::heatmap, "accumulated router weight per layer and expert"},
                      {"flops", Command::flops, "FLOPs and timing of naive vs efficient expert merge"},
                      {"equiv", Command::equiv, "check both merge orders agree on random shapes"},
                      {"sweep", Command::sweep, "adapter granularity sweep"},
                      {"plot", Command::plot, "render report CSVs in the output directory as SVG"}};
  std::vector<std::pair<CLI::App*, Command>> cmds;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    if (s.cmd == Command::gradcheck)
      sub->add_flag("--corrupt-backward", g.corrupt_backward, "perturb matmul backward (negative control)");
    cmds.emplace_back(sub, s.cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  Command cmd = Command::train;
  for (auto [sub, c] : cmds)
    if (sub->parsed()) cmd = c;
  try {
    const RunConfig c = load_config(g, cmd);
    switch (cmd) {
      case Command::train: return cmd_train(c);
      case Command::gradcheck: return cmd_gradcheck(c, g.corrupt_backward);
      case Command::rank: return cmd_rank(c);
      case Command::heatmap: return cmd_heatmap(c);
      case Command::flops: return cmd_flops(c);
      case Command::equiv: return cmd_equiv(c);
      case Command::sweep: return cmd_sweep(c);
      case Command::plot: return cmd_plot(c);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kOk;
}
