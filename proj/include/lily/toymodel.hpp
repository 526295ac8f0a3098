#pragma once

// Small transformer encoder with frozen backbone weights, a trainable mean-pooled
// classification head, and injectable Lily or LoRA adapters on the query, key,
// value and MLP projections.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lily/adapters.hpp"
#include "lily/gradkit.hpp"
#include "lily/io.hpp"
#include "lily/numkit.hpp"

namespace lily {

struct EncoderConfig {
  std::size_t n_layers = 6;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab = 64;
  std::size_t seq_len = 16;
  std::size_t n_classes = 4;

  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const EncoderConfig&) const = default;
};

inline void validate(const EncoderConfig& c) {
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab, c.seq_len, c.n_classes})
    if (v < 1) throw std::invalid_argument("EncoderConfig: all counts must be >= 1");
  if (c.d_model % c.n_heads != 0) throw std::invalid_argument("EncoderConfig: d_model not divisible by n_heads");
}

/// Input and output widths of a family's projection.
inline std::pair<std::size_t, std::size_t> family_dims(const EncoderConfig& c, Family f) {
  switch (f) {
    case Family::mlp_up: return {c.d_model, c.d_ff};
    case Family::mlp_down: return {c.d_ff, c.d_model};
    default: return {c.d_model, c.d_model};
  }
}

template <class V>
struct BlockWeights {
  V wq, wk, wv, wo, w_up, w_down;

  const V& projection(Family f) const {
    switch (f) {
      case Family::query: return wq;
      case Family::key: return wk;
      case Family::value: return wv;
      case Family::mlp_up: return w_up;
      case Family::mlp_down: return w_down;
    }
    throw std::logic_error("unknown family");
  }
};

template <class V>
struct Head {
  V weight;  // d_model x n_classes
  V bias;    // 1 x n_classes
};

/// Frozen backbone plus trainable head.
struct Encoder {
  EncoderConfig cfg;
  Matrix embed;  // vocab x d_model
  Matrix pos;    // seq_len x d_model
  std::vector<BlockWeights<Matrix>> blocks;
  Head<Matrix> head;

  /// Every backbone tensor by name (head excluded).
  TensorMap backbone_tensors() const {
    TensorMap t;
    t.emplace("embed", embed);
    t.emplace("pos", pos);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto p = "block" + std::to_string(l) + ".";
      const auto& b = blocks[l];
      t.emplace(p + "wq", b.wq);
      t.emplace(p + "wk", b.wk);
      t.emplace(p + "wv", b.wv);
      t.emplace(p + "wo", b.wo);
      t.emplace(p + "w_up", b.w_up);
      t.emplace(p + "w_down", b.w_down);
    }
    return t;
  }
};

/// FNV-1a over the raw bytes of every backbone tensor.
inline std::uint64_t backbone_checksum(const Encoder& e) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& [name, m] : e.backbone_tensors())
    for (double v : m.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFF;
        h *= 0x100000001B3ull;
      }
    }
  return h;
}

inline Encoder build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Encoder e;
  e.cfg = cfg;
  auto g = [&](std::size_t r, std::size_t c, double sd, const std::string& name) {
    return seeded_gaussian(r, c, sd, derive_seed(seed, name));
  };
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double sd_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  e.embed = g(cfg.vocab, cfg.d_model, 1.0, "embed");
  e.pos = g(cfg.seq_len, cfg.d_model, 0.5, "pos");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto p = "block" + std::to_string(l) + ".";
    e.blocks.push_back({g(cfg.d_model, cfg.d_model, sd_d, p + "wq"), g(cfg.d_model, cfg.d_model, sd_d, p + "wk"),
                        g(cfg.d_model, cfg.d_model, sd_d, p + "wv"), g(cfg.d_model, cfg.d_model, sd_d, p + "wo"),
                        g(cfg.d_model, cfg.d_ff, sd_d, p + "w_up"), g(cfg.d_ff, cfg.d_model, sd_ff, p + "w_down")});
  }
  e.head.weight = g(cfg.d_model, cfg.n_classes, 0.02, "head.weight");
  e.head.bias = Matrix(1, cfg.n_classes);
  return e;
}

/// Token embedding plus positional embedding; rejects out-of-vocabulary ids.
inline Matrix embed_tokens(const Encoder& e, std::span<const int> tokens) {
  if (tokens.size() != e.cfg.seq_len)
    throw std::invalid_argument("embed_tokens: expected " + std::to_string(e.cfg.seq_len) + " tokens, got " +
                                std::to_string(tokens.size()));
  Matrix x(tokens.size(), e.cfg.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= e.cfg.vocab)
      throw std::out_of_range("embed_tokens: token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(e.cfg.vocab));
    for (std::size_t j = 0; j < e.cfg.d_model; ++j) x(i, j) = e.embed(static_cast<std::size_t>(t), j) + e.pos(i, j);
  }
  return x;
}

enum class Method : std::uint8_t { none, lily, lora };

struct LoraConfig {
  std::size_t rank = 4;
  double scale = 1.0;
  Placement placement{Family::key, Family::value, Family::mlp_up, Family::mlp_down};
};

/// Adapters attached to one encoder: a Lily set per family (B bank model-wide
/// within the family) or one LoRA pair per family and layer.
template <class V>
struct AdapterBundle {
  Method method = Method::none;
  LilyConfig lily;
  LoraConfig lora;
  std::map<Family, BasicLilyAdapterSet<V>> lily_sets;
  std::map<Family, std::vector<BasicLoraAdapter<V>>> lora_sets;

  Placement placement() const {
    switch (method) {
      case Method::lily: return lily.placement;
      case Method::lora: return lora.placement;
      default: return {};
    }
  }
};

using Adapters = AdapterBundle<Matrix>;

/// Wraps every targeted projection of every layer.
inline Adapters inject_lily(const Encoder& e, const LilyConfig& cfg, std::uint64_t seed) {
  if (cfg.placement.empty()) throw std::invalid_argument("inject: empty placement");
  Adapters a;
  a.method = Method::lily;
  a.lily = cfg;
  for (Family f : cfg.placement.families()) {
    auto [cin, cout] = family_dims(e.cfg, f);
    a.lily_sets.emplace(f, init_lily(cfg, cin, cout, e.cfg.n_layers, seed, family_name(f)));
  }
  return a;
}

inline Adapters inject_lora(const Encoder& e, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.placement.empty()) throw std::invalid_argument("inject: empty placement");
  Adapters a;
  a.method = Method::lora;
  a.lora = cfg;
  for (Family f : cfg.placement.families()) {
    auto [cin, cout] = family_dims(e.cfg, f);
    auto& layers = a.lora_sets[f];
    for (std::size_t l = 0; l < e.cfg.n_layers; ++l)
      layers.push_back(init_lora(cfg.rank, cin, cout, cfg.scale, l, seed, family_name(f)));
  }
  return a;
}

inline Adapters no_adapters() { return {}; }

inline std::size_t wrapped_projection_count(const Adapters& a, std::size_t n_layers) {
  return a.placement().families().size() * n_layers;
}

/// Visits every trainable tensor of the head and adapters in a fixed order.
template <class V, class Fn>
void for_each_trainable(Head<V>& head, AdapterBundle<V>& ad, Fn&& fn) {
  fn(std::string("head.weight"), head.weight);
  fn(std::string("head.bias"), head.bias);
  for (auto& [f, set] : ad.lily_sets) {
    const auto fam = family_name(f);
    for (std::size_t g = 0; g < set.A_list.size(); ++g) fn(tensor_name(fam, 'A', g), set.A_list[g]);
    for (std::size_t i = 0; i < set.B_bank.size(); ++i) fn(tensor_name(fam, 'B', i), set.B_bank[i]);
    for (std::size_t g = 0; g < set.routers.size(); ++g) fn(tensor_name(fam, 'R', g), set.routers[g]);
  }
  for (auto& [f, layers] : ad.lora_sets) {
    const auto fam = family_name(f);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      fn(tensor_name(fam, 'A', l), layers[l].A);
      fn(tensor_name(fam, 'B', l), layers[l].B);
    }
  }
}

/// Trainable adapter entries (head excluded).
inline std::size_t adapter_param_count(const Adapters& a) {
  std::size_t n = 0;
  Head<Matrix> dummy;
  auto copy = a;
  for_each_trainable(dummy, copy, [&](const std::string& name, const Matrix& m) {
    if (name.rfind("head.", 0) != 0) n += m.size();
  });
  return n;
}

inline TensorMap adapter_tensors(const Encoder& e, const Adapters& a) {
  TensorMap t;
  auto head = e.head;
  auto copy = a;
  for_each_trainable(head, copy, [&](const std::string& name, const Matrix& m) { t.emplace(name, m); });
  return t;
}

/// Outputs of each block for one example.
struct LayerFeatures {
  std::vector<Matrix> per_layer;
};

/// Route weights used at each (family, layer) during one forward.
using RouteCapture = std::map<Family, std::vector<Matrix>>;

struct ForwardCapture {
  LayerFeatures* features = nullptr;
  RouteCapture* routes = nullptr;
};

/// Backend-generic encoder forward over an embedded input; returns 1 x n_classes logits.
template <class B>
typename B::Value encoder_forward(B& be, const EncoderConfig& cfg, const std::vector<BlockWeights<typename B::Value>>& blocks,
                                  const Head<typename B::Value>& head, const AdapterBundle<typename B::Value>& ad,
                                  const typename B::Value& x0, ForwardCapture cap = {}) {
  using V = typename B::Value;
  if (cap.features) cap.features->per_layer.clear();
  if (cap.routes) cap.routes->clear();

  auto project = [&](Family f, std::size_t layer, const V& h, const V& w0) -> V {
    if (ad.method == Method::lily) {
      auto it = ad.lily_sets.find(f);
      if (it != ad.lily_sets.end()) {
        Matrix s;
        V y = lily_project(be, h, w0, it->second, layer, ad.lily, cap.routes ? &s : nullptr);
        if (cap.routes) (*cap.routes)[f].push_back(std::move(s));
        return y;
      }
    } else if (ad.method == Method::lora) {
      auto it = ad.lora_sets.find(f);
      if (it != ad.lora_sets.end()) return lora_project(be, h, w0, it->second.at(layer));
    }
    return be.matmul(h, w0);
  };

  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  V x = x0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& w = blocks[l];
    V h = be.layer_norm(x);
    V q = project(Family::query, l, h, w.wq);
    V k = project(Family::key, l, h, w.wk);
    V v = project(Family::value, l, h, w.wv);
    std::vector<V> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      V qh = be.slice_cols(q, hd * dh, (hd + 1) * dh);
      V kh = be.slice_cols(k, hd * dh, (hd + 1) * dh);
      V vh = be.slice_cols(v, hd * dh, (hd + 1) * dh);
      V att = be.row_softmax(be.scale(be.matmul(qh, be.transpose(kh)), inv_sqrt_dh));
      heads.push_back(be.matmul(att, vh));
    }
    x = be.add(x, be.matmul(be.concat_cols(std::span<const V>(heads)), w.wo));
    V h2 = be.layer_norm(x);
    V up = be.gelu(project(Family::mlp_up, l, h2, w.w_up));
    x = be.add(x, project(Family::mlp_down, l, up, w.w_down));
    if (cap.features) cap.features->per_layer.push_back(be.value(x));
  }
  V pooled = be.scale(be.sum_rows(be.layer_norm(x)), 1.0 / static_cast<double>(cfg.seq_len));
  return be.add(be.matmul(pooled, head.weight), head.bias);
}

/// Direct evaluation: logits (1 x n_classes) for one token row.
inline Matrix forward_with_features(const Encoder& e, const Adapters& ad, std::span<const int> tokens,
                                    LayerFeatures* features = nullptr, RouteCapture* routes = nullptr) {
  Eager be;
  return encoder_forward(be, e.cfg, e.blocks, e.head, ad, embed_tokens(e, tokens), {features, routes});
}

/// Leaves for one forward/backward on a tape. Backbone leaves are frozen.
struct BoundModel {
  std::vector<BlockWeights<Var>> blocks;
  Head<Var> head;
  AdapterBundle<Var> adapters;
};

inline BoundModel bind(Tape& tape, const Encoder& e, const Head<Matrix>& head, const Adapters& ad) {
  BoundModel b;
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    const auto p = "block" + std::to_string(l) + ".";
    const auto& w = e.blocks[l];
    b.blocks.push_back({tape.parameter(p + "wq", w.wq, false), tape.parameter(p + "wk", w.wk, false),
                        tape.parameter(p + "wv", w.wv, false), tape.parameter(p + "wo", w.wo, false),
                        tape.parameter(p + "w_up", w.w_up, false), tape.parameter(p + "w_down", w.w_down, false)});
  }
  b.head.weight = tape.parameter("head.weight", head.weight, true);
  b.head.bias = tape.parameter("head.bias", head.bias, true);
  b.adapters.method = ad.method;
  b.adapters.lily = ad.lily;
  b.adapters.lora = ad.lora;
  for (const auto& [f, set] : ad.lily_sets) {
    const auto fam = family_name(f);
    BasicLilyAdapterSet<Var> vs;
    vs.layer_to_group = set.layer_to_group;
    for (std::size_t g = 0; g < set.A_list.size(); ++g) vs.A_list.push_back(tape.parameter(tensor_name(fam, 'A', g), set.A_list[g], true));
    for (std::size_t i = 0; i < set.B_bank.size(); ++i) vs.B_bank.push_back(tape.parameter(tensor_name(fam, 'B', i), set.B_bank[i], true));
    for (std::size_t g = 0; g < set.routers.size(); ++g) vs.routers.push_back(tape.parameter(tensor_name(fam, 'R', g), set.routers[g], true));
    b.adapters.lily_sets.emplace(f, std::move(vs));
  }
  for (const auto& [f, layers] : ad.lora_sets) {
    const auto fam = family_name(f);
    auto& out = b.adapters.lora_sets[f];
    for (std::size_t l = 0; l < layers.size(); ++l)
      out.push_back({tape.parameter(tensor_name(fam, 'A', l), layers[l].A, true),
                     tape.parameter(tensor_name(fam, 'B', l), layers[l].B, true), layers[l].scale});
  }
  return b;
}

/// Records the forward of one example on `tape`; returns the logits node.
inline Var record_logits(Tape& tape, const Encoder& e, const Head<Matrix>& head, const Adapters& ad,
                         std::span<const int> tokens, ForwardCapture cap = {}) {
  BoundModel b = bind(tape, e, head, ad);
  Var x0 = tape.constant(embed_tokens(e, tokens));
  return encoder_forward(tape, e.cfg, b.blocks, b.head, b.adapters, x0, cap);
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace lily
