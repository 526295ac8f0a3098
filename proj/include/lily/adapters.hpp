#pragma once

// LoRA baseline and the Lily adapter: down-projectors A shared by contiguous
// blocks of layers, one model-wide bank of up-projector experts B, and a
// router per A whose softmax over position-summed logits mixes the bank.
//
// The projection code is templated on the evaluation backend (Eager or Tape)
// so the direct forward and the recorded forward share one code path.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lily/gradkit.hpp"
#include "lily/kernels.hpp"
#include "lily/numkit.hpp"

namespace lily {

/// Adaptable projections of an encoder block.
enum class Family : std::uint8_t { query, key, value, mlp_up, mlp_down };

inline constexpr std::array<Family, 5> kAllFamilies{Family::query, Family::key, Family::value,
                                                    Family::mlp_up, Family::mlp_down};

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::query: return "query";
    case Family::key: return "key";
    case Family::value: return "value";
    case Family::mlp_up: return "mlp_up";
    case Family::mlp_down: return "mlp_down";
  }
  return "?";
}

/// Set of adapted families, kept in canonical order.
class Placement {
 public:
  Placement() = default;
  Placement(std::initializer_list<Family> fs) {
    for (Family f : fs) insert(f);
  }

  /// Accepts the named variants qv, mlp, qvmlp, kvmlp, all, or a comma list of
  /// query,key,value,mlp,mlp_up,mlp_down. "mlp" always means both projections.
  static Placement parse(std::string_view text) {
    Placement p;
    if (text == "qv") return {Family::query, Family::value};
    if (text == "mlp") return {Family::mlp_up, Family::mlp_down};
    if (text == "qvmlp") return {Family::query, Family::value, Family::mlp_up, Family::mlp_down};
    if (text == "kvmlp") return {Family::key, Family::value, Family::mlp_up, Family::mlp_down};
    if (text == "all") return {Family::query, Family::key, Family::value, Family::mlp_up, Family::mlp_down};
    while (!text.empty()) {
      auto comma = text.find(',');
      auto item = text.substr(0, comma);
      bool known = false;
      for (Family f : kAllFamilies)
        if (item == family_name(f)) {
          p.insert(f);
          known = true;
        }
      if (item == "mlp") {
        p.insert(Family::mlp_up);
        p.insert(Family::mlp_down);
        known = true;
      }
      if (item == "q") p.insert(Family::query), known = true;
      if (item == "k") p.insert(Family::key), known = true;
      if (item == "v") p.insert(Family::value), known = true;
      if (!known) throw std::invalid_argument("unknown placement target '" + std::string(item) + "'");
      if (comma == std::string_view::npos) break;
      text.remove_prefix(comma + 1);
    }
    return p;
  }

  void insert(Family f) { mask_ |= bit(f); }
  bool contains(Family f) const noexcept { return (mask_ & bit(f)) != 0; }
  bool empty() const noexcept { return mask_ == 0; }

  std::vector<Family> families() const {
    std::vector<Family> out;
    for (Family f : kAllFamilies)
      if (contains(f)) out.push_back(f);
    return out;
  }

  std::string to_string() const {
    std::string s;
    for (Family f : families()) {
      if (!s.empty()) s += ',';
      s += family_name(f);
    }
    return s;
  }

  bool operator==(const Placement&) const = default;

 private:
  static std::uint8_t bit(Family f) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(f)); }
  std::uint8_t mask_ = 0;
};

enum class RouterMode : std::uint8_t { routed, uniform };
enum class RouterBinding : std::uint8_t { per_a, single };

struct LilyConfig {
  std::size_t rank_r = 16;
  std::size_t ne_1 = 2;
  std::size_t ne_2 = 2;
  double scale_s = 1.0;
  bool share_A = true;
  RouterMode router_mode = RouterMode::routed;
  RouterBinding router_binding = RouterBinding::per_a;
  Placement placement{Family::key, Family::value, Family::mlp_up, Family::mlp_down};
};

/// Number of A projectors actually built: ne_1 when sharing, one per layer otherwise.
inline std::size_t effective_ne1(const LilyConfig& cfg, std::size_t n_layers) {
  return cfg.share_A ? cfg.ne_1 : n_layers;
}

inline void validate(const LilyConfig& cfg, std::size_t n_layers) {
  if (cfg.rank_r < 1) throw std::invalid_argument("LilyConfig: rank_r must be >= 1");
  if (cfg.ne_1 < 1) throw std::invalid_argument("LilyConfig: ne_1 must be >= 1");
  if (cfg.ne_2 < 1) throw std::invalid_argument("LilyConfig: ne_2 must be >= 1");
  if (effective_ne1(cfg, n_layers) > n_layers)
    throw std::invalid_argument("LilyConfig: ne_1 exceeds the layer count");
}

/// Number of routers: one per A, or a single model-wide router.
inline std::size_t router_count(const LilyConfig& cfg, std::size_t n_layers) {
  if (cfg.router_mode == RouterMode::uniform) return 0;
  return cfg.router_binding == RouterBinding::single ? 1 : effective_ne1(cfg, n_layers);
}

/// Contiguous floor-division blocks: floor(layer * ne_1 / n_layers).
inline std::size_t layer_group(std::size_t layer, std::size_t n_layers, std::size_t ne_1) {
  if (n_layers == 0 || layer >= n_layers)
    throw std::out_of_range("layer_group: layer " + std::to_string(layer) + " outside [0," +
                            std::to_string(n_layers) + ")");
  if (ne_1 < 1 || ne_1 > n_layers) throw std::invalid_argument("layer_group: ne_1 must lie in [1, n_layers]");
  return layer * ne_1 / n_layers;
}

template <class V>
struct BasicLilyAdapterSet {
  std::vector<V> A_list;   // ne_1 of C_in x r
  std::vector<V> B_bank;   // ne_2 of r x C_out
  std::vector<V> routers;  // ne_2 x r, one per A (or one total); empty when uniform
  std::vector<std::size_t> layer_to_group;

  std::size_t group_of(std::size_t layer) const {
    if (layer >= layer_to_group.size())
      throw std::out_of_range("LilyAdapterSet: invalid layer " + std::to_string(layer));
    return layer_to_group[layer];
  }
};

using LilyAdapterSet = BasicLilyAdapterSet<Matrix>;

template <class V>
struct BasicLoraAdapter {
  V A;  // C_in x r
  V B;  // r x C_out
  double scale = 1.0;
};

using LoraAdapter = BasicLoraAdapter<Matrix>;

/// Expert mixing weights: nonnegative, summing to one.
struct RouteWeights {
  std::vector<double> S;

  RouteWeights() = default;
  explicit RouteWeights(std::vector<double> s) : S(std::move(s)) {
    if (S.empty()) throw std::invalid_argument("RouteWeights: empty");
    double total = 0.0;
    for (double v : S) {
      if (!(v >= 0.0)) throw std::invalid_argument("RouteWeights: negative weight");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("RouteWeights: weights do not sum to 1");
  }

  static RouteWeights uniform(std::size_t n) { return RouteWeights(std::vector<double>(n, 1.0 / static_cast<double>(n))); }
  static RouteWeights one_hot(std::size_t n, std::size_t k) {
    std::vector<double> s(n, 0.0);
    s.at(k) = 1.0;
    return RouteWeights(std::move(s));
  }

  Matrix as_row() const { return Matrix::row_vector(S); }
  std::size_t size() const noexcept { return S.size(); }
};

/// x' = x A
inline Matrix down_project(const Matrix& x, const Matrix& A) { return matmul(x, A); }

/// Row of router logits: column sums over the N positions of x' R^T.
template <class B>
typename B::Value route_logits(B& be, const typename B::Value& x_prime, const typename B::Value& router) {
  return be.sum_rows(be.matmul(x_prime, be.transpose(router)));
}

inline RouteWeights route(const Matrix& x_prime, const Matrix& router) {
  if (x_prime.rows() < 1) throw ShapeError("route: empty sequence");
  if (x_prime.cols() != router.cols())
    throw ShapeError("route: x' " + x_prime.shape_string() + " vs router " + router.shape_string());
  Eager be;
  Matrix s = be.row_softmax(route_logits(be, x_prime, router));
  return RouteWeights(std::vector<double>(s.data().begin(), s.data().end()));
}

/// Efficient merge: sum_i S_i B^i as one scalar-weighted matrix sum.
inline Matrix combine_experts(const RouteWeights& S, std::span<const Matrix> bank) {
  if (S.size() != bank.size())
    throw ShapeError("combine_experts: " + std::to_string(S.size()) + " weights for " +
                     std::to_string(bank.size()) + " experts");
  return weighted_sum(S.as_row(), bank);
}

/// Reference merge: every expert applied to x', outputs mixed afterwards.
inline Matrix combine_experts_naive(const Matrix& x_prime, const RouteWeights& S, std::span<const Matrix> bank) {
  if (S.size() != bank.size() || bank.empty())
    throw ShapeError("combine_experts_naive: " + std::to_string(S.size()) + " weights for " +
                     std::to_string(bank.size()) + " experts");
  Matrix out(x_prime.rows(), bank[0].cols());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    detail::require(bank[i].same_shape(bank[0]), "combine_experts_naive", bank[0], bank[i]);
    axpy(S.S[i], matmul(x_prime, bank[i]), out);
  }
  return out;
}

/// y = x W0 + s * x' (sum_i S_i B^i) with x' = x A_group(layer).
/// When `route_out` is set it receives the 1 x ne_2 weights used.
template <class B>
typename B::Value lily_project(B& be, const typename B::Value& x, const typename B::Value& w0,
                               const BasicLilyAdapterSet<typename B::Value>& set, std::size_t layer,
                               const LilyConfig& cfg, Matrix* route_out = nullptr) {
  using V = typename B::Value;
  const std::size_t g = set.group_of(layer);
  V base = be.matmul(x, w0);
  V xp = be.matmul(x, set.A_list.at(g));
  V s;
  if (cfg.router_mode == RouterMode::routed) {
    const V& router = set.routers.at(cfg.router_binding == RouterBinding::single ? 0 : g);
    s = be.row_softmax(route_logits(be, xp, router));
  } else {
    const std::size_t n = set.B_bank.size();
    s = be.constant(Matrix(1, n, 1.0 / static_cast<double>(n)));
  }
  if (route_out) *route_out = be.value(s);
  V combined = be.weighted_sum(s, std::span<const V>(set.B_bank));
  V delta = be.matmul(xp, combined);
  return be.add(base, be.scale(delta, cfg.scale_s));
}

template <class B>
typename B::Value lora_project(B& be, const typename B::Value& x, const typename B::Value& w0,
                               const BasicLoraAdapter<typename B::Value>& ad) {
  auto base = be.matmul(x, w0);
  auto delta = be.matmul(be.matmul(x, ad.A), ad.B);
  return be.add(base, be.scale(delta, ad.scale));
}

inline Matrix lily_forward(const Matrix& x, const Matrix& w0, const LilyAdapterSet& set, std::size_t layer,
                           const LilyConfig& cfg, Matrix* route_out = nullptr) {
  Eager be;
  return lily_project(be, x, w0, set, layer, cfg, route_out);
}

inline Matrix lora_forward(const Matrix& x, const Matrix& w0, const LoraAdapter& ad) {
  Eager be;
  return lora_project(be, x, w0, ad);
}

/// scale * A_group(layer) * (sum_i S_i B^i); rank <= r by construction.
inline Matrix effective_delta_w(const LilyAdapterSet& set, std::size_t layer, const RouteWeights& S, double scale) {
  const std::size_t g = set.group_of(layer);
  return lily::scale(matmul(set.A_list.at(g), combine_experts(S, set.B_bank)), scale);
}

/// ne_1*C_in*r + ne_2*r*C_out + router entries; frozen weights excluded.
inline std::size_t lily_param_count(const LilyConfig& cfg, std::size_t c_in, std::size_t c_out,
                                    std::size_t n_layers) {
  validate(cfg, n_layers);
  const std::size_t ne1 = effective_ne1(cfg, n_layers);
  return ne1 * c_in * cfg.rank_r + cfg.ne_2 * cfg.rank_r * c_out +
         router_count(cfg, n_layers) * cfg.ne_2 * cfg.rank_r;
}

inline std::size_t lora_param_count(std::size_t r, std::size_t n_layers, std::size_t c_in, std::size_t c_out) {
  return n_layers * (c_in * r + r * c_out);
}

inline constexpr double kAdapterInitStd = 0.02;

/// Tensor names: "<prefix>.A.<g>", "<prefix>.B.<i>", "<prefix>.R.<g>".
inline std::string tensor_name(std::string_view prefix, char kind, std::size_t index) {
  return std::string(prefix) + "." + kind + "." + std::to_string(index);
}

/// A and routers ~ N(0, 0.02^2) from per-tensor derived seeds; every B expert is zero,
/// so the adapted projection equals the frozen one at initialization.
inline LilyAdapterSet init_lily(const LilyConfig& cfg, std::size_t c_in, std::size_t c_out, std::size_t n_layers,
                                std::uint64_t seed, std::string_view prefix = "lily") {
  validate(cfg, n_layers);
  const std::size_t ne1 = effective_ne1(cfg, n_layers);
  LilyAdapterSet set;
  for (std::size_t g = 0; g < ne1; ++g)
    set.A_list.push_back(
        seeded_gaussian(c_in, cfg.rank_r, kAdapterInitStd, derive_seed(seed, tensor_name(prefix, 'A', g))));
  for (std::size_t i = 0; i < cfg.ne_2; ++i) set.B_bank.emplace_back(cfg.rank_r, c_out);
  for (std::size_t g = 0; g < router_count(cfg, n_layers); ++g)
    set.routers.push_back(
        seeded_gaussian(cfg.ne_2, cfg.rank_r, kAdapterInitStd, derive_seed(seed, tensor_name(prefix, 'R', g))));
  for (std::size_t l = 0; l < n_layers; ++l) set.layer_to_group.push_back(layer_group(l, n_layers, ne1));
  return set;
}

/// Same naming and draw as Lily's A for index `layer`, so per-layer Lily and LoRA start identical.
inline LoraAdapter init_lora(std::size_t r, std::size_t c_in, std::size_t c_out, double scale, std::size_t layer,
                             std::uint64_t seed, std::string_view prefix = "lora") {
  if (r < 1) throw std::invalid_argument("init_lora: rank must be >= 1");
  return LoraAdapter{
      seeded_gaussian(c_in, r, kAdapterInitStd, derive_seed(seed, tensor_name(prefix, 'A', layer))),
      Matrix(r, c_out), scale};
}

}  // namespace lily
