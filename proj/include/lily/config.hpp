#pragma once

// Flat key=value run configuration: '#' starts a comment, blank lines are
// ignored, unknown keys are rejected and every value is type-checked before
// any work starts.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lily/adapters.hpp"
#include "lily/analysis.hpp"
#include "lily/toymodel.hpp"
#include "lily/trainer.hpp"

namespace lily {

/// Invalid configuration; `key()` names the offending entry (may be empty for syntax errors).
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what) : std::invalid_argument(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

using KeyValues = std::map<std::string, std::string>;

namespace detail {
inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}
}  // namespace detail

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("", "config line " + std::to_string(n) + ": expected key=value");
    const std::string key(detail::trim(s.substr(0, eq)));
    if (key.empty()) throw ConfigError("", "config line " + std::to_string(n) + ": empty key");
    if (!kv.emplace(key, std::string(detail::trim(s.substr(eq + 1)))).second)
      throw ConfigError(key, "duplicate config key '" + key + "'");
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file '" + path + "'");
  return parse_key_values(in);
}

enum class Command : std::uint8_t { train, gradcheck, rank, heatmap, flops, equiv, sweep, plot };

struct RunConfig {
  EncoderConfig encoder;
  Method method = Method::lily;
  LilyConfig lily;
  LoraConfig lora;
  OptimizerConfig opt;
  std::uint64_t seed = 0;
  std::uint64_t task_seed = 1;
  std::size_t task_layers = 0;  // teacher depth; 0 follows n_layers
  std::size_t n_train = 512;
  std::size_t n_val = 256;
  std::string out_dir = "out";
  double tol = kDefaultRankTolerance;
  std::size_t rank_layers = 3;
  std::vector<std::size_t> heatmap_layers;  // empty: first, middle, last
  std::vector<std::size_t> sweep_ne;
  SweepMode sweep_mode = SweepMode::fixed_rank;
  std::size_t sweep_ne2 = 0;
  std::size_t flops_n = 1024, flops_d = 16, flops_c = 768, flops_ne = 4, flops_reps = 10;
  std::size_t equiv_instances = 100;
  std::string train_data, val_data;
};

namespace detail {

inline const std::set<std::string, std::less<>>& known_keys() {
  static const std::set<std::string, std::less<>> keys{
      "n_layers", "d_model", "n_heads", "d_ff", "vocab", "seq_len", "n_classes",
      "method", "rank_r", "ne_1", "ne_2", "scale_s", "share_A", "router_mode", "router_binding", "placement",
      "lora_r", "lora_scale",
      "lr", "beta1", "beta2", "weight_decay", "eps", "epochs", "batch_size", "lr_schedule",
      "seed", "task_seed", "task_layers", "n_train", "n_val", "out_dir", "tol", "rank_layers", "heatmap_layers",
      "sweep_ne", "sweep_mode", "sweep_ne2",
      "flops_N", "flops_d", "flops_C", "flops_Ne", "flops_reps", "equiv_instances",
      "train_data", "val_data"};
  return keys;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty())
    throw ConfigError(key, "config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    return parse_real(v);
  } catch (const FormatError&) {
    throw ConfigError(key, "config key '" + key + "': expected a real number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::string_view s = v;
  while (!s.empty()) {
    const auto comma = s.find(',');
    out.push_back(to_u64(key, std::string(trim(s.substr(0, comma)))));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError(key, "config key '" + key + "': expected a comma-separated list");
  return out;
}

[[noreturn]] inline void bad_choice(const std::string& key, const std::string& v, const char* choices) {
  throw ConfigError(key, "config key '" + key + "': expected one of " + choices + ", got '" + v + "'");
}

}  // namespace detail

/// Keys a subcommand cannot run without. `method` decides which rank key train needs.
inline std::vector<std::string> required_keys(Command cmd, const KeyValues& kv) {
  switch (cmd) {
    case Command::train: {
      std::vector<std::string> req{"method"};
      if (auto it = kv.find("method"); it != kv.end()) {
        if (it->second == "lily") req.emplace_back("rank_r");
        if (it->second == "lora") req.emplace_back("lora_r");
      }
      return req;
    }
    case Command::rank: return {"rank_r", "lora_r"};
    case Command::heatmap: return {"rank_r"};
    case Command::sweep: return {"rank_r", "sweep_ne"};
    default: return {};
  }
}

inline RunConfig parse_run_config(const KeyValues& kv, Command cmd) {
  using namespace detail;
  for (const auto& [k, v] : kv)
    if (!known_keys().contains(k)) throw ConfigError(k, "unknown config key '" + k + "'");
  for (const auto& k : required_keys(cmd, kv))
    if (!kv.contains(k)) throw ConfigError(k, "missing required config key '" + k + "'");

  RunConfig c;
  auto get = [&](const char* key, auto&& apply) {
    if (auto it = kv.find(key); it != kv.end()) apply(it->first, it->second);
  };
  auto size = [&](const char* key, std::size_t& dst) {
    get(key, [&](const std::string& k, const std::string& v) { dst = to_u64(k, v); });
  };
  auto real = [&](const char* key, double& dst) {
    get(key, [&](const std::string& k, const std::string& v) { dst = to_real(k, v); });
  };

  size("n_layers", c.encoder.n_layers);
  size("d_model", c.encoder.d_model);
  size("n_heads", c.encoder.n_heads);
  size("d_ff", c.encoder.d_ff);
  size("vocab", c.encoder.vocab);
  size("seq_len", c.encoder.seq_len);
  size("n_classes", c.encoder.n_classes);
  get("method", [&](const std::string& k, const std::string& v) {
    if (v == "lily") c.method = Method::lily;
    else if (v == "lora") c.method = Method::lora;
    else if (v == "none") c.method = Method::none;
    else bad_choice(k, v, "lily, lora, none");
  });
  size("rank_r", c.lily.rank_r);
  size("ne_1", c.lily.ne_1);
  size("ne_2", c.lily.ne_2);
  real("scale_s", c.lily.scale_s);
  get("share_A", [&](const std::string& k, const std::string& v) { c.lily.share_A = to_bool(k, v); });
  get("router_mode", [&](const std::string& k, const std::string& v) {
    if (v == "routed") c.lily.router_mode = RouterMode::routed;
    else if (v == "uniform") c.lily.router_mode = RouterMode::uniform;
    else bad_choice(k, v, "routed, uniform");
  });
  get("router_binding", [&](const std::string& k, const std::string& v) {
    if (v == "per_a") c.lily.router_binding = RouterBinding::per_a;
    else if (v == "single") c.lily.router_binding = RouterBinding::single;
    else bad_choice(k, v, "per_a, single");
  });
  get("placement", [&](const std::string& k, const std::string& v) {
    try {
      c.lily.placement = Placement::parse(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(k, "config key '" + k + "': " + e.what());
    }
    if (c.lily.placement.empty()) throw ConfigError(k, "config key '" + k + "': empty placement");
    c.lora.placement = c.lily.placement;
  });
  size("lora_r", c.lora.rank);
  real("lora_scale", c.lora.scale);
  real("lr", c.opt.lr);
  real("beta1", c.opt.beta1);
  real("beta2", c.opt.beta2);
  real("weight_decay", c.opt.weight_decay);
  real("eps", c.opt.eps);
  size("epochs", c.opt.epochs);
  size("batch_size", c.opt.batch_size);
  get("lr_schedule", [&](const std::string& k, const std::string& v) {
    if (v == "constant") c.opt.schedule = Schedule::constant;
    else if (v == "linear_decay") c.opt.schedule = Schedule::linear_decay;
    else if (v == "cosine") c.opt.schedule = Schedule::cosine;
    else bad_choice(k, v, "constant, linear_decay, cosine");
  });
  get("seed", [&](const std::string& k, const std::string& v) { c.seed = to_u64(k, v); });
  get("task_seed", [&](const std::string& k, const std::string& v) { c.task_seed = to_u64(k, v); });
  size("task_layers", c.task_layers);
  size("n_train", c.n_train);
  size("n_val", c.n_val);
  get("out_dir", [&](const std::string&, const std::string& v) { c.out_dir = v; });
  real("tol", c.tol);
  size("rank_layers", c.rank_layers);
  get("heatmap_layers", [&](const std::string& k, const std::string& v) { c.heatmap_layers = to_list(k, v); });
  get("sweep_ne", [&](const std::string& k, const std::string& v) { c.sweep_ne = to_list(k, v); });
  get("sweep_mode", [&](const std::string& k, const std::string& v) {
    if (v == "fixed") c.sweep_mode = SweepMode::fixed_rank;
    else if (v == "budgeted") c.sweep_mode = SweepMode::budgeted;
    else bad_choice(k, v, "fixed, budgeted");
  });
  size("sweep_ne2", c.sweep_ne2);
  size("flops_N", c.flops_n);
  size("flops_d", c.flops_d);
  size("flops_C", c.flops_c);
  size("flops_Ne", c.flops_ne);
  size("flops_reps", c.flops_reps);
  size("equiv_instances", c.equiv_instances);
  get("train_data", [&](const std::string&, const std::string& v) { c.train_data = v; });
  get("val_data", [&](const std::string&, const std::string& v) { c.val_data = v; });

  // Semantic checks, attributed to the most specific key.
  auto check = [](bool ok, const char* key, const std::string& why) {
    if (!ok) throw ConfigError(key, std::string("config key '") + key + "': " + why);
  };
  try {
    validate(c.encoder);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(c.encoder.d_model % std::max<std::size_t>(c.encoder.n_heads, 1) ? "n_heads" : "n_layers", e.what());
  }
  check(c.lily.rank_r >= 1, "rank_r", "must be >= 1");
  check(c.lily.ne_1 >= 1 && (!c.lily.share_A || c.lily.ne_1 <= c.encoder.n_layers), "ne_1", "must lie in [1, n_layers]");
  check(c.lily.ne_2 >= 1, "ne_2", "must be >= 1");
  check(c.lora.rank >= 1, "lora_r", "must be >= 1");
  check(c.opt.lr >= 0.0, "lr", "must be >= 0");
  check(c.opt.batch_size >= 1, "batch_size", "must be >= 1");
  check(c.opt.beta1 >= 0.0 && c.opt.beta1 < 1.0, "beta1", "must lie in [0,1)");
  check(c.opt.beta2 >= 0.0 && c.opt.beta2 < 1.0, "beta2", "must lie in [0,1)");
  check(c.opt.eps > 0.0, "eps", "must be > 0");
  check(c.tol > 0.0 && c.tol < 1.0, "tol", "must lie in (0,1)");
  check(c.n_train >= 1, "n_train", "must be >= 1");
  check(c.n_val >= 1, "n_val", "must be >= 1");
  check(c.flops_n >= 1 && c.flops_d >= 1 && c.flops_c >= 1 && c.flops_ne >= 1, "flops_N", "dimensions must be >= 1");
  check(c.flops_reps >= 10, "flops_reps", "must be >= 10");
  for (std::size_t l : c.heatmap_layers) check(l < c.encoder.n_layers, "heatmap_layers", "layer index out of range");
  for (std::size_t ne : c.sweep_ne) check(ne >= 1 && ne <= c.encoder.n_layers, "sweep_ne", "values must lie in [1, n_layers]");
  check(c.train_data.empty() == c.val_data.empty(), "val_data", "train_data and val_data must be given together");
  return c;
}

/// Encoder shape of the labelling teacher: the student's, with its own depth when set.
inline EncoderConfig task_encoder(const RunConfig& c) {
  EncoderConfig t = c.encoder;
  if (c.task_layers) t.n_layers = c.task_layers;
  return t;
}

}  // namespace lily
