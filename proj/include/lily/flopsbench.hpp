#pragma once

// FLOPs accounting and wall-clock comparison for the two expert-merge orders:
// mixing expert outputs (naive) versus mixing expert weights first (efficient).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lily/adapters.hpp"
#include "lily/io.hpp"
#include "lily/numkit.hpp"

namespace lily {

class EquivalenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require_positive_shape(std::uint64_t n, std::uint64_t d, std::uint64_t c, std::uint64_t ne) {
  if (n < 1 || d < 1 || c < 1 || ne < 1) throw std::invalid_argument("flops: every dimension must be >= 1");
}
}  // namespace detail

/// Ne * (2NdC + dC + NC): every expert applied to x', then outputs scaled and summed.
inline std::uint64_t flops_naive(std::uint64_t n, std::uint64_t d, std::uint64_t c, std::uint64_t ne) {
  detail::require_positive_shape(n, d, c, ne);
  return ne * (2 * n * d * c + d * c + n * c);
}

/// 2dC(N + Ne): experts merged into one d x C matrix, then a single product.
inline std::uint64_t flops_efficient(std::uint64_t n, std::uint64_t d, std::uint64_t c, std::uint64_t ne) {
  detail::require_positive_shape(n, d, c, ne);
  return 2 * d * c * (n + ne);
}

struct FlopsReport {
  std::size_t n = 0, d = 0, c = 0, ne = 0;
  std::uint64_t naive_flops = 0;
  std::uint64_t efficient_flops = 0;
  double ratio = 0.0;
  double naive_ms = std::numeric_limits<double>::quiet_NaN();
  double efficient_ms = std::numeric_limits<double>::quiet_NaN();
  double time_ratio = std::numeric_limits<double>::quiet_NaN();
  double max_abs_diff = std::numeric_limits<double>::quiet_NaN();
};

inline FlopsReport flops_report(std::size_t n, std::size_t d, std::size_t c, std::size_t ne) {
  FlopsReport r{n, d, c, ne};
  r.naive_flops = flops_naive(n, d, c, ne);
  r.efficient_flops = flops_efficient(n, d, c, ne);
  r.ratio = static_cast<double>(r.naive_flops) / static_cast<double>(r.efficient_flops);
  return r;
}

inline constexpr double kMergeTolerance = 1e-9;
inline constexpr std::size_t kWarmupReps = 3;

namespace detail {
template <class Fn>
double median_ms(Fn&& fn, std::size_t reps) {
  for (std::size_t i = 0; i < kWarmupReps; ++i) fn();
  std::vector<double> t(reps);
  for (auto& v : t) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    v = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(reps / 2), t.end());
  double m = t[reps / 2];
  if (reps % 2 == 0) m = 0.5 * (m + *std::max_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(reps / 2)));
  return m;
}

/// Random softmax weights so every expert contributes.
inline RouteWeights random_routes(std::size_t ne, std::uint64_t seed) {
  Matrix logits = seeded_gaussian(1, ne, 1.0, seed);
  std::vector<double> s = softmax_stable(logits.row(0));
  return RouteWeights(std::move(s));
}
}  // namespace detail

/// Median single-threaded timings of both merge orders on identical random data.
/// Throws EquivalenceError when outputs differ by more than 1e-9.
inline FlopsReport timed_compare(std::size_t n, std::size_t d, std::size_t c, std::size_t ne, std::size_t reps = 10,
                                 std::uint64_t seed = 0) {
  if (reps < 10) throw std::invalid_argument("timed_compare: reps must be >= 10");
  FlopsReport r = flops_report(n, d, c, ne);
  const Matrix xp = seeded_gaussian(n, d, 1.0, derive_seed(seed, "bench.x"));
  std::vector<Matrix> bank;
  for (std::size_t i = 0; i < ne; ++i)
    bank.push_back(seeded_gaussian(d, c, 1.0, derive_seed(seed, tensor_name("bench", 'B', i))));
  const RouteWeights S = detail::random_routes(ne, derive_seed(seed, "bench.S"));

  Matrix naive_out, efficient_out;
  r.naive_ms = detail::median_ms([&] { naive_out = combine_experts_naive(xp, S, bank); }, reps);
  r.efficient_ms = detail::median_ms([&] { efficient_out = matmul(xp, combine_experts(S, bank)); }, reps);
  r.time_ratio = r.naive_ms / r.efficient_ms;
  r.max_abs_diff = max_abs_diff(naive_out, efficient_out);
  if (!(r.max_abs_diff <= kMergeTolerance))
    throw EquivalenceError("timed_compare: merge outputs differ by " + format_real(r.max_abs_diff));
  return r;
}

/// N,d,C,Ne,naive_flops,efficient_flops,flops_ratio,naive_ms,efficient_ms,time_ratio
inline void write_csv(const std::vector<FlopsReport>& rows, std::ostream& out) {
  out << "N,d,C,Ne,naive_flops,efficient_flops,flops_ratio,naive_ms,efficient_ms,time_ratio\n";
  auto opt = [](double v) { return v == v ? format_real(v) : std::string{}; };
  for (const auto& r : rows)
    out << r.n << ',' << r.d << ',' << r.c << ',' << r.ne << ',' << r.naive_flops << ',' << r.efficient_flops << ','
        << format_real(r.ratio) << ',' << opt(r.naive_ms) << ',' << opt(r.efficient_ms) << ',' << opt(r.time_ratio)
        << '\n';
}

struct EquivalenceRow {
  std::size_t n = 0, r = 0, c = 0, ne = 0;
  double max_abs_diff = 0.0;
};

/// Random shapes with N, C <= 64, r <= 16, Ne <= 8; both merge orders per instance.
inline std::vector<EquivalenceRow> equivalence_sweep(std::size_t instances, std::uint64_t seed) {
  GaussianStream shape(derive_seed(seed, "equiv.shape"));
  std::vector<EquivalenceRow> rows;
  for (std::size_t k = 0; k < instances; ++k) {
    EquivalenceRow row;
    row.n = 1 + shape.raw() % 64;
    row.r = 1 + shape.raw() % 16;
    row.c = 1 + shape.raw() % 64;
    row.ne = 1 + shape.raw() % 8;
    const std::uint64_t s = derive_seed(seed, "equiv." + std::to_string(k));
    const Matrix xp = seeded_gaussian(row.n, row.r, 1.0, derive_seed(s, "x"));
    std::vector<Matrix> bank;
    for (std::size_t i = 0; i < row.ne; ++i) bank.push_back(seeded_gaussian(row.r, row.c, 1.0, derive_seed(s, tensor_name("bank", 'B', i))));
    const RouteWeights S = detail::random_routes(row.ne, derive_seed(s, "S"));
    row.max_abs_diff = max_abs_diff(combine_experts_naive(xp, S, bank), matmul(xp, combine_experts(S, bank)));
    rows.push_back(row);
  }
  return rows;
}

inline void write_csv(const std::vector<EquivalenceRow>& rows, std::ostream& out) {
  out << "N,r,C,Ne,max_abs_diff\n";
  for (const auto& r : rows)
    out << r.n << ',' << r.r << ',' << r.c << ',' << r.ne << ',' << format_real(r.max_abs_diff) << '\n';
}

}  // namespace lily
