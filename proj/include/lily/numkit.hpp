#pragma once

// Dense row-major matrices of doubles and the handful of kernels the rest of
// the library is built from: products, stable softmax, singular values,
// numerical rank and a reproducible Gaussian generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lily {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Singular values in descending order.
struct Spectrum {
  std::vector<double> singular_values;

  double largest() const noexcept { return singular_values.empty() ? 0.0 : singular_values.front(); }
};

namespace detail {

inline void require(bool ok, std::string_view op, const Matrix& a, const Matrix& b) {
  if (!ok)
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
}

}  // namespace detail

inline bool all_finite(const Matrix& m) noexcept {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Matrix& m, std::string_view op) {
  if (!all_finite(m)) throw std::domain_error(std::string(op) + ": non-finite input");
}

/// Standard product. Every c(i,j) accumulates a(i,p)*b(p,j) for p = 0..k-1 in
/// order, so results do not depend on the row blocking below.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  const double* __restrict pa = a.data().data();
  const double* __restrict pb = b.data().data();
  double* __restrict pc = c.data().data();
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = pc + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = pa[i * k + p], a1 = pa[(i + 1) * k + p];
      const double a2 = pa[(i + 2) * k + p], a3 = pa[(i + 3) * k + p];
      const double* __restrict brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* __restrict brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a);

/// a * b^T. Accumulates over the shared index in order, like matmul.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt", a, b);
  return matmul(a, transpose(b));
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn", a, b);
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Matrix c(m, n);
  double* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data().data() + p * m;
    const double* brow = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Elementwise sum. A 1xC right operand is broadcast over the rows of `a`.
inline Matrix add(const Matrix& a, const Matrix& b) {
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && a.cols() == b.cols();
  detail::require(a.same_shape(b) || broadcast, "add", a, b);
  Matrix c = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    auto brow = b.row(broadcast ? 0 : i);
    for (std::size_t j = 0; j < a.cols(); ++j) crow[j] += brow[j];
  }
  return c;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "subtract", a, b);
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

/// dst += alpha * src
inline void axpy(double alpha, const Matrix& src, Matrix& dst) {
  detail::require(src.same_shape(dst), "axpy", src, dst);
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}

inline void accumulate(Matrix& dst, const Matrix& src) {
  detail::require(src.same_shape(dst), "accumulate", dst, src);
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline Matrix scale(const Matrix& a, double c) {
  Matrix r = a;
  for (double& v : r.data()) v *= c;
  return r;
}

/// Column sums: the N rows of `a` collapse into a single 1xC row.
inline Matrix sum_rows(const Matrix& a) {
  Matrix s(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += r[j];
  }
  return s;
}

/// Max-subtracted softmax; rejects empty input.
inline std::vector<double> softmax_stable(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax_stable: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& o : out) o /= total;
  return out;
}

inline Matrix row_softmax(const Matrix& a) {
  Matrix r(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto s = softmax_stable(a.row(i));
    std::copy(s.begin(), s.end(), r.row(i).begin());
  }
  return r;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

namespace detail {

// Symmetric tridiagonal eigenvalues by implicit QL with Wilkinson-style
// shifts. diag has n entries, off has n entries with off[i] coupling i and
// i+1 (off[n-1] unused). Off-diagonals below abs_floor are treated as zero.
inline void tridiagonal_eigenvalues(std::vector<double>& diag, std::vector<double>& off,
                                    double abs_floor) {
  const int n = static_cast<int>(diag.size());
  constexpr double eps = std::numeric_limits<double>::epsilon();
  for (int l = 0; l < n; ++l) {
    int iter = 0;
    int m = l;
    do {
      for (m = l; m < n - 1; ++m) {
        const double dd = std::abs(diag[m]) + std::abs(diag[m + 1]);
        if (std::abs(off[m]) <= eps * dd || std::abs(off[m]) <= abs_floor) break;
      }
      if (m != l) {
        if (++iter > 200) throw std::runtime_error("svd_spectrum: QL iteration did not converge");
        double g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
        double r = std::hypot(g, 1.0);
        g = diag[m] - diag[l] + off[l] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        int i = m - 1;
        bool underflow = false;
        for (; i >= l; --i) {
          const double f = s * off[i];
          const double b = c * off[i];
          r = std::hypot(f, g);
          off[i + 1] = r;
          if (r == 0.0) {
            diag[i + 1] -= p;
            off[m] = 0.0;
            underflow = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = diag[i + 1] - p;
          r = (diag[i] - g) * s + 2.0 * c * b;
          p = s * r;
          diag[i + 1] = g + p;
          g = c * r - b;
        }
        if (underflow) continue;
        diag[l] -= p;
        off[l] = g;
        off[m] = 0.0;
      }
    } while (m != l);
  }
}

// Householder reduction of a (rows >= cols) to upper bidiagonal form.
// Returns (d, e): d has n entries, e has n-1 superdiagonal entries.
inline std::pair<std::vector<double>, std::vector<double>> bidiagonalize(Matrix a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> d(n, 0.0), e(n > 0 ? n - 1 : 0, 0.0);
  std::vector<double> v;
  for (std::size_t k = 0; k < n; ++k) {
    // Left reflector on column k, rows k..m-1.
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm = std::hypot(norm, a(i, k));
    if (norm > 0.0) {
      const double alpha = a(k, k) > 0 ? -norm : norm;
      v.assign(m - k, 0.0);
      for (std::size_t i = k; i < m; ++i) v[i - k] = a(i, k);
      v[0] -= alpha;
      double vnorm2 = 0.0;
      for (double x : v) vnorm2 += x * x;
      if (vnorm2 > 0.0) {
        for (std::size_t j = k; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t i = k; i < m; ++i) dot += v[i - k] * a(i, j);
          const double f = 2.0 * dot / vnorm2;
          for (std::size_t i = k; i < m; ++i) a(i, j) -= f * v[i - k];
        }
      }
      d[k] = alpha;
    } else {
      d[k] = 0.0;
    }
    if (k + 1 >= n) break;
    // Right reflector on row k, columns k+1..n-1.
    norm = 0.0;
    for (std::size_t j = k + 1; j < n; ++j) norm = std::hypot(norm, a(k, j));
    if (norm > 0.0) {
      const double alpha = a(k, k + 1) > 0 ? -norm : norm;
      v.assign(n - k - 1, 0.0);
      for (std::size_t j = k + 1; j < n; ++j) v[j - k - 1] = a(k, j);
      v[0] -= alpha;
      double vnorm2 = 0.0;
      for (double x : v) vnorm2 += x * x;
      if (vnorm2 > 0.0) {
        for (std::size_t i = k; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = k + 1; j < n; ++j) dot += a(i, j) * v[j - k - 1];
          const double f = 2.0 * dot / vnorm2;
          for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= f * v[j - k - 1];
        }
      }
      e[k] = alpha;
    } else {
      e[k] = 0.0;
    }
  }
  return {std::move(d), std::move(e)};
}

}  // namespace detail

/// Singular values via Householder bidiagonalization followed by the
/// eigenvalues of the 2n x 2n Golub-Kahan tridiagonal (zero diagonal,
/// interleaved d/e off-diagonal). Eigenvalues come in +-sigma pairs.
inline Spectrum svd_spectrum(const Matrix& m) {
  require_finite(m, "svd_spectrum");
  if (m.empty()) return {};
  Matrix work = m.rows() >= m.cols() ? m : transpose(m);
  const std::size_t n = work.cols();
  auto [d, e] = detail::bidiagonalize(std::move(work));

  double scale_ref = 0.0;
  for (double x : d) scale_ref = std::max(scale_ref, std::abs(x));
  for (double x : e) scale_ref = std::max(scale_ref, std::abs(x));
  Spectrum out;
  if (scale_ref == 0.0) {
    out.singular_values.assign(n, 0.0);
    return out;
  }

  std::vector<double> diag(2 * n, 0.0), off(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    off[2 * i] = d[i];
    if (i + 1 < n) off[2 * i + 1] = e[i];
  }
  off[2 * n - 1] = 0.0;
  detail::tridiagonal_eigenvalues(diag, off,
                                  std::numeric_limits<double>::epsilon() * scale_ref * 0.5);
  std::sort(diag.begin(), diag.end(), std::greater<>());
  out.singular_values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.singular_values[i] = std::abs(diag[i]);
  std::sort(out.singular_values.begin(), out.singular_values.end(), std::greater<>());
  return out;
}

inline constexpr double kDefaultRankTolerance = 1e-6;

/// Count of singular values strictly above rel_tol * sigma_1; zero for the zero matrix.
inline std::size_t numerical_rank(const Spectrum& s, double rel_tol = kDefaultRankTolerance) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0))
    throw std::invalid_argument("numerical_rank: rel_tol must lie in (0,1)");
  const double top = s.largest();
  if (top == 0.0) return 0;
  return static_cast<std::size_t>(std::count_if(s.singular_values.begin(), s.singular_values.end(),
                                                [&](double v) { return v > rel_tol * top; }));
}

inline std::size_t numerical_rank(const Matrix& m, double rel_tol = kDefaultRankTolerance) {
  return numerical_rank(svd_spectrum(m), rel_tol);
}

// --- seeded randomness -----------------------------------------------------
//
// Generator: std::mt19937_64 seeded with the 64-bit seed. Each uniform draw is
// the top 53 bits of one engine output scaled to [0,1). Normals come from the
// Box-Muller transform on consecutive uniform pairs (u1, u2):
//   z0 = sqrt(-2 ln(1 - u1)) cos(2 pi u2),  z1 = sqrt(-2 ln(1 - u1)) sin(2 pi u2)
// and the matrix is filled row-major, z0 before z1.

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Stable per-name sub-seed: splitmix64(seed ^ fnv1a64(name)).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return splitmix64(seed ^ h);
}

class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t raw() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Matrix seeded_gaussian(std::size_t rows, std::size_t cols, double stddev,
                              std::uint64_t seed) {
  if (stddev < 0.0) throw std::invalid_argument("seeded_gaussian: negative stddev");
  Matrix m(rows, cols);
  if (stddev == 0.0) return m;
  GaussianStream g(seed);
  for (double& v : m.data()) v = stddev * g.next();
  return m;
}

}  // namespace lily
