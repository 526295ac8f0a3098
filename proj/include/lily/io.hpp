#pragma once

// Matrix serialization (CSV and the LILYMAT1 binary dump) and named-tensor
// checkpoints: a binary blob of concatenated LILYMAT1 dumps plus a plain-text
// manifest with one "name rows cols offset" line per tensor.

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lily/numkit.hpp"

namespace lily {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest round-trip decimal representation, always with '.' as separator.
inline std::string format_real(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline double parse_real(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw FormatError("not a real number: '" + std::string(s) + "'");
  return v;
}

inline void write_csv(const Matrix& m, std::ostream& out) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_real(m(i, j));
    }
    out << '\n';
  }
}

inline Matrix read_csv(std::istream& in) {
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::size_t count = 0;
    std::string_view rest(line);
    while (true) {
      auto comma = rest.find(',');
      data.push_back(parse_real(rest.substr(0, comma)));
      ++count;
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (rows == 0) cols = count;
    else if (count != cols) throw FormatError("read_csv: ragged row " + std::to_string(rows));
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<unsigned char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw FormatError("LILYMAT1: truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline constexpr std::string_view kMatrixMagic = "LILYMAT1";

/// magic, rows (u64 LE), cols (u64 LE), row-major IEEE-754 doubles (LE).
inline void write_binary(const Matrix& m, std::ostream& out) {
  out.write(kMatrixMagic.data(), static_cast<std::streamsize>(kMatrixMagic.size()));
  detail::put_u64(out, m.rows());
  detail::put_u64(out, m.cols());
  for (double v : m.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint64_t binary_size(const Matrix& m) { return 8 + 16 + 8 * m.size(); }

inline Matrix read_binary(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), 8) || std::string_view(magic.data(), 8) != kMatrixMagic)
    throw FormatError("LILYMAT1: bad magic");
  const auto rows = detail::get_u64(in);
  const auto cols = detail::get_u64(in);
  std::vector<double> data(rows * cols);
  for (double& v : data) v = std::bit_cast<double>(detail::get_u64(in));
  return Matrix(rows, cols, std::move(data));
}

using TensorMap = std::map<std::string, Matrix>;

/// Writes `<stem>.bin` and `<stem>.manifest`; returns both paths.
inline std::vector<std::filesystem::path> save_checkpoint(const TensorMap& tensors,
                                                          const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto manifest_path = stem;
  manifest_path += ".manifest";
  std::ofstream bin(bin_path, std::ios::binary);
  std::ofstream manifest(manifest_path);
  if (!bin || !manifest) throw std::runtime_error("cannot write checkpoint " + stem.string());
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos)
      throw FormatError("checkpoint: tensor name contains whitespace: " + name);
    manifest << name << ' ' << m.rows() << ' ' << m.cols() << ' ' << offset << '\n';
    write_binary(m, bin);
    offset += binary_size(m);
  }
  return {bin_path, manifest_path};
}

inline TensorMap load_checkpoint(const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto manifest_path = stem;
  manifest_path += ".manifest";
  std::ifstream bin(bin_path, std::ios::binary);
  std::ifstream manifest(manifest_path);
  if (!bin || !manifest) throw std::runtime_error("cannot read checkpoint " + stem.string());
  TensorMap out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    std::uint64_t rows = 0, cols = 0, offset = 0;
    if (!(ls >> name >> rows >> cols >> offset)) throw FormatError("manifest: bad line: " + line);
    bin.seekg(static_cast<std::streamoff>(offset));
    Matrix m = read_binary(bin);
    if (m.rows() != rows || m.cols() != cols)
      throw FormatError("manifest: shape disagrees with payload for " + name);
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

}  // namespace lily
