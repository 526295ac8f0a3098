#pragma once

// Reverse-mode differentiation over a fixed set of matrix primitives.
//
// A Tape records each primitive eagerly: the forward value is computed by the
// same kernel the Eager backend uses, so a recorded program and its direct
// evaluation agree bit for bit. Model code is written once against the small
// backend interface shared by Tape (Value = Var) and Eager (Value = Matrix).

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lily/io.hpp"
#include "lily/kernels.hpp"
#include "lily/numkit.hpp"

namespace lily {

enum class Primitive : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Scale,
  RowSoftmax,
  SumRows,
  Gelu,
  Relu,
  LayerNorm,
  CrossEntropy,
  Mse,
  SliceCols,
  ConcatCols,
  WeightedSum,
};

inline std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Leaf: return "leaf";
    case Primitive::MatMul: return "matmul";
    case Primitive::Transpose: return "transpose";
    case Primitive::Add: return "add";
    case Primitive::Scale: return "scale";
    case Primitive::RowSoftmax: return "row_softmax";
    case Primitive::SumRows: return "sum_rows";
    case Primitive::Gelu: return "gelu";
    case Primitive::Relu: return "relu";
    case Primitive::LayerNorm: return "layer_norm";
    case Primitive::CrossEntropy: return "cross_entropy";
    case Primitive::Mse: return "mse";
    case Primitive::SliceCols: return "slice_cols";
    case Primitive::ConcatCols: return "concat_cols";
    case Primitive::WeightedSum: return "weighted_sum";
  }
  return "?";
}

class UnsupportedPrimitive : public std::invalid_argument {
 public:
  explicit UnsupportedPrimitive(std::string_view name)
      : std::invalid_argument("unsupported primitive: " + std::string(name)) {}
};

inline Primitive parse_primitive(std::string_view name) {
  for (auto p : {Primitive::MatMul, Primitive::Transpose, Primitive::Add, Primitive::Scale,
                 Primitive::RowSoftmax, Primitive::SumRows, Primitive::Gelu, Primitive::Relu,
                 Primitive::LayerNorm, Primitive::CrossEntropy, Primitive::Mse,
                 Primitive::SliceCols, Primitive::ConcatCols, Primitive::WeightedSum})
    if (primitive_name(p) == name) return p;
  throw UnsupportedPrimitive(name);
}

using NamedGradients = std::map<std::string, Matrix>;

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
};

/// Tape-free backend: every primitive returns its value directly.
struct Eager {
  using Value = Matrix;

  const Matrix& value(const Matrix& m) const noexcept { return m; }
  Matrix constant(Matrix m) const { return m; }

  Matrix matmul(const Matrix& a, const Matrix& b) const { return lily::matmul(a, b); }
  Matrix transpose(const Matrix& a) const { return lily::transpose(a); }
  Matrix add(const Matrix& a, const Matrix& b) const { return lily::add(a, b); }
  Matrix scale(const Matrix& a, double c) const { return lily::scale(a, c); }
  Matrix row_softmax(const Matrix& a) const { return lily::row_softmax(a); }
  Matrix sum_rows(const Matrix& a) const { return lily::sum_rows(a); }
  Matrix gelu(const Matrix& a) const { return lily::gelu(a); }
  Matrix relu(const Matrix& a) const { return lily::relu(a); }
  Matrix layer_norm(const Matrix& a) const { return lily::layer_norm(a); }
  Matrix cross_entropy(const Matrix& logits, std::span<const int> labels) const {
    return lily::cross_entropy(logits, labels);
  }
  Matrix mse(const Matrix& pred, const Matrix& target) const { return lily::mse(pred, target); }
  Matrix slice_cols(const Matrix& a, std::size_t b, std::size_t e) const {
    return lily::slice_cols(a, b, e);
  }
  Matrix concat_cols(std::span<const Matrix> parts) const { return lily::concat_cols(parts); }
  Matrix weighted_sum(const Matrix& w, std::span<const Matrix> terms) const {
    return lily::weighted_sum(w, terms);
  }
};

class Tape {
 public:
  using Value = Var;

  /// Named leaf referring to `m`, which must outlive the tape. Frozen leaves
  /// never receive gradient.
  Var parameter(std::string name, const Matrix& m, bool trainable) {
    for (const auto& n : nodes_)
      if (n.op == Primitive::Leaf && !n.name.empty() && n.name == name)
        throw std::invalid_argument("Tape: duplicate parameter name " + name);
    Node node;
    node.op = Primitive::Leaf;
    node.ref = &m;
    node.name = std::move(name);
    node.trainable = trainable;
    node.needs_grad = trainable;
    return push(std::move(node));
  }

  Var constant(Matrix m) {
    Node node;
    node.op = Primitive::Leaf;
    node.owned = std::move(m);
    return push(std::move(node));
  }

  const Matrix& value(Var v) const { return node(v).value(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  Primitive op(Var v) const { return node(v).op; }
  std::span<const int> inputs(Var v) const { return node(v).inputs; }

  Var matmul(Var a, Var b) { return unary_or_binary(Primitive::MatMul, lily::matmul(value(a), value(b)), {a, b}); }
  Var transpose(Var a) { return unary_or_binary(Primitive::Transpose, lily::transpose(value(a)), {a}); }
  Var add(Var a, Var b) { return unary_or_binary(Primitive::Add, lily::add(value(a), value(b)), {a, b}); }
  Var scale(Var a, double c) {
    Var v = unary_or_binary(Primitive::Scale, lily::scale(value(a), c), {a});
    nodes_[v.id].scalar = c;
    return v;
  }
  Var row_softmax(Var a) { return unary_or_binary(Primitive::RowSoftmax, lily::row_softmax(value(a)), {a}); }
  Var sum_rows(Var a) { return unary_or_binary(Primitive::SumRows, lily::sum_rows(value(a)), {a}); }
  Var gelu(Var a) { return unary_or_binary(Primitive::Gelu, lily::gelu(value(a)), {a}); }
  Var relu(Var a) { return unary_or_binary(Primitive::Relu, lily::relu(value(a)), {a}); }
  Var layer_norm(Var a) {
    std::vector<double> inv_std;
    Matrix y = lily::layer_norm(value(a), &inv_std);
    Var v = unary_or_binary(Primitive::LayerNorm, std::move(y), {a});
    nodes_[v.id].cache = std::move(inv_std);
    return v;
  }
  Var cross_entropy(Var logits, std::span<const int> labels) {
    Var v = unary_or_binary(Primitive::CrossEntropy, lily::cross_entropy(value(logits), labels), {logits});
    nodes_[v.id].labels.assign(labels.begin(), labels.end());
    return v;
  }
  Var mse(Var pred, const Matrix& target) {
    Var t = constant(target);
    return unary_or_binary(Primitive::Mse, lily::mse(value(pred), value(t)), {pred, t});
  }
  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Var v = unary_or_binary(Primitive::SliceCols, lily::slice_cols(value(a), begin, end), {a});
    nodes_[v.id].lo = begin;
    return v;
  }
  Var concat_cols(std::span<const Var> parts) {
    std::vector<Matrix> vals;
    vals.reserve(parts.size());
    for (Var p : parts) vals.push_back(value(p));
    return unary_or_binary(Primitive::ConcatCols, lily::concat_cols(vals), parts);
  }
  /// weights is 1 x n; terms are the n equally shaped matrices being mixed.
  Var weighted_sum(Var weights, std::span<const Var> terms) {
    std::vector<Matrix> vals;
    vals.reserve(terms.size());
    for (Var t : terms) vals.push_back(value(t));
    std::vector<Var> all{weights};
    all.insert(all.end(), terms.begin(), terms.end());
    return unary_or_binary(Primitive::WeightedSum, lily::weighted_sum(value(weights), vals), all);
  }

  /// Name-dispatched entry point for attribute-free primitives.
  Var apply(std::string_view op, std::span<const Var> in) {
    const Primitive p = parse_primitive(op);
    auto arity = [&](std::size_t n) {
      if (in.size() != n)
        throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) + " inputs");
    };
    switch (p) {
      case Primitive::MatMul: arity(2); return matmul(in[0], in[1]);
      case Primitive::Add: arity(2); return add(in[0], in[1]);
      case Primitive::Transpose: arity(1); return transpose(in[0]);
      case Primitive::RowSoftmax: arity(1); return row_softmax(in[0]);
      case Primitive::SumRows: arity(1); return sum_rows(in[0]);
      case Primitive::Gelu: arity(1); return gelu(in[0]);
      case Primitive::Relu: arity(1); return relu(in[0]);
      case Primitive::LayerNorm: arity(1); return layer_norm(in[0]);
      case Primitive::ConcatCols: return concat_cols(in);
      default:
        throw std::invalid_argument(std::string(op) + ": needs attributes, use the typed method");
    }
  }

  /// Test hook: multiplies every matmul input-gradient by `factor`.
  void corrupt_backward(double factor) noexcept { fault_ = factor; }

  /// Gradients of a scalar node for every trainable leaf (zero when unreached).
  NamedGradients backward(Var loss) const;

 private:
  struct Node {
    Primitive op = Primitive::Leaf;
    std::vector<int> inputs;
    Matrix owned;
    const Matrix* ref = nullptr;
    double scalar = 0.0;
    std::size_t lo = 0;
    std::vector<int> labels;
    std::vector<double> cache;
    std::string name;
    bool trainable = false;
    bool needs_grad = false;

    const Matrix& value() const noexcept { return ref ? *ref : owned; }
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("Tape: invalid node handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var unary_or_binary(Primitive p, Matrix v, std::span<const Var> in) {
    Node n;
    n.op = p;
    n.owned = std::move(v);
    for (Var x : in) {
      n.inputs.push_back(x.id);
      n.needs_grad = n.needs_grad || node(x).needs_grad;
    }
    return push(std::move(n));
  }
  Var unary_or_binary(Primitive p, Matrix v, std::initializer_list<Var> in) {
    return unary_or_binary(p, std::move(v), std::span<const Var>(in.begin(), in.size()));
  }

  std::vector<Node> nodes_;
  double fault_ = 1.0;
};

inline NamedGradients Tape::backward(Var loss) const {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + lv.shape_string());

  std::vector<Matrix> grad(nodes_.size());
  auto grad_of = [&](int id) -> Matrix& {
    Matrix& g = grad[static_cast<std::size_t>(id)];
    if (g.empty() && !nodes_[id].value().empty()) g = Matrix(nodes_[id].value().rows(), nodes_[id].value().cols());
    return g;
  };
  auto wants = [&](int id) { return nodes_[static_cast<std::size_t>(id)].needs_grad; };

  if (nodes_[loss.id].needs_grad) grad_of(loss.id)(0, 0) = 1.0;

  for (int i = loss.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.op == Primitive::Leaf || grad[i].empty()) continue;
    const Matrix& g = grad[i];
    const Matrix& y = n.value();
    switch (n.op) {
      case Primitive::MatMul: {
        const int a = n.inputs[0], b = n.inputs[1];
        if (wants(a)) {
          Matrix ga = matmul_nt(g, nodes_[b].value());
          if (fault_ != 1.0) ga = lily::scale(ga, fault_);
          accumulate(grad_of(a), ga);
        }
        if (wants(b)) accumulate(grad_of(b), matmul_tn(nodes_[a].value(), g));
        break;
      }
      case Primitive::Transpose:
        if (wants(n.inputs[0])) accumulate(grad_of(n.inputs[0]), lily::transpose(g));
        break;
      case Primitive::Add: {
        const int a = n.inputs[0], b = n.inputs[1];
        if (wants(a)) accumulate(grad_of(a), g);
        if (wants(b)) {
          if (nodes_[b].value().rows() == g.rows()) accumulate(grad_of(b), g);
          else accumulate(grad_of(b), lily::sum_rows(g));
        }
        break;
      }
      case Primitive::Scale:
        if (wants(n.inputs[0])) axpy(n.scalar, g, grad_of(n.inputs[0]));
        break;
      case Primitive::RowSoftmax: {
        if (!wants(n.inputs[0])) break;
        Matrix& gx = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
        }
        break;
      }
      case Primitive::SumRows: {
        if (!wants(n.inputs[0])) break;
        Matrix& gx = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < gx.rows(); ++r)
          for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g(0, c);
        break;
      }
      case Primitive::Gelu: {
        if (!wants(n.inputs[0])) break;
        const Matrix& x = nodes_[n.inputs[0]].value();
        Matrix& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < x.size(); ++k) gx.data()[k] += g.data()[k] * gelu_grad_scalar(x.data()[k]);
        break;
      }
      case Primitive::Relu: {
        if (!wants(n.inputs[0])) break;
        const Matrix& x = nodes_[n.inputs[0]].value();
        Matrix& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < x.size(); ++k)
          if (x.data()[k] > 0.0) gx.data()[k] += g.data()[k];
        break;
      }
      case Primitive::LayerNorm: {
        if (!wants(n.inputs[0])) break;
        Matrix& gx = grad_of(n.inputs[0]);
        const double cols = static_cast<double>(y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double mean_g = 0.0, mean_gy = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) {
            mean_g += g(r, c);
            mean_gy += g(r, c) * y(r, c);
          }
          mean_g /= cols;
          mean_gy /= cols;
          const double is = n.cache[r];
          for (std::size_t c = 0; c < y.cols(); ++c)
            gx(r, c) += is * (g(r, c) - mean_g - y(r, c) * mean_gy);
        }
        break;
      }
      case Primitive::CrossEntropy: {
        if (!wants(n.inputs[0])) break;
        const Matrix& z = nodes_[n.inputs[0]].value();
        Matrix& gz = grad_of(n.inputs[0]);
        const double w = g(0, 0) / static_cast<double>(z.rows());
        for (std::size_t r = 0; r < z.rows(); ++r) {
          auto p = softmax_stable(z.row(r));
          p[static_cast<std::size_t>(n.labels[r])] -= 1.0;
          for (std::size_t c = 0; c < z.cols(); ++c) gz(r, c) += w * p[c];
        }
        break;
      }
      case Primitive::Mse: {
        const int a = n.inputs[0], t = n.inputs[1];
        if (!wants(a)) break;
        const Matrix& p = nodes_[a].value();
        const Matrix& tv = nodes_[t].value();
        Matrix& gp = grad_of(a);
        const double w = 2.0 * g(0, 0) / static_cast<double>(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) gp.data()[k] += w * (p.data()[k] - tv.data()[k]);
        break;
      }
      case Primitive::SliceCols: {
        if (!wants(n.inputs[0])) break;
        Matrix& gx = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) gx(r, n.lo + c) += g(r, c);
        break;
      }
      case Primitive::ConcatCols: {
        std::size_t off = 0;
        for (int in : n.inputs) {
          const std::size_t w = nodes_[in].value().cols();
          if (wants(in)) {
            Matrix& gx = grad_of(in);
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < w; ++c) gx(r, c) += g(r, off + c);
          }
          off += w;
        }
        break;
      }
      case Primitive::WeightedSum: {
        const int wid = n.inputs[0];
        const Matrix& w = nodes_[wid].value();
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
          const int tid = n.inputs[k];
          if (wants(wid)) {
            const Matrix& t = nodes_[tid].value();
            double dot = 0.0;
            for (std::size_t e = 0; e < t.size(); ++e) dot += g.data()[e] * t.data()[e];
            grad_of(wid)(0, k - 1) += dot;
          }
          if (wants(tid)) axpy(w(0, k - 1), g, grad_of(tid));
        }
        break;
      }
      case Primitive::Leaf: break;
    }
  }

  NamedGradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Primitive::Leaf || !n.trainable) continue;
    if (grad[i].empty()) grad[i] = Matrix(n.value().rows(), n.value().cols());
    out.emplace(n.name, std::move(grad[i]));
  }
  return out;
}

/// A program records a scalar loss onto the tape it is given.
using Program = std::function<Var(Tape&)>;

struct RecordedProgram {
  Tape tape;
  Var output;
};

inline RecordedProgram record_forward(const Program& program) {
  RecordedProgram r;
  r.output = program(r.tape);
  return r;
}

struct ParamRef {
  std::string name;
  Matrix* matrix = nullptr;
};

/// Central differences, one entry at a time, in parameter then row-major order.
inline NamedGradients finite_diff_grad(const Program& program, std::span<const ParamRef> params,
                                       double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  auto eval = [&] {
    Tape t;
    Var out = program(t);
    const Matrix& v = t.value(out);
    if (v.size() != 1) throw std::invalid_argument("finite_diff_grad: program output is not scalar");
    return v(0, 0);
  };
  NamedGradients out;
  for (const auto& p : params) {
    Matrix& m = *p.matrix;
    Matrix g(m.rows(), m.cols());
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double saved = m.data()[k];
      m.data()[k] = saved + eps;
      const double fp = eval();
      m.data()[k] = saved - eps;
      const double fm = eval();
      m.data()[k] = saved;
      g.data()[k] = (fp - fm) / (2.0 * eps);
    }
    out.emplace(p.name, std::move(g));
  }
  return out;
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;

  /// Entry with the largest absolute error, preferring failing entries.
  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries) {
      if (!w || (e.pass == w->pass ? e.max_abs_err > w->max_abs_err : !e.pass)) w = &e;
    }
    return w;
  }
};

/// Entry passes iff |a - n| <= abs_tol + rel_tol * max(|a|, |n|).
inline GradCheckReport grad_check(const NamedGradients& analytic, const NamedGradients& numeric,
                                  double rel_tol, double abs_tol) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("grad_check: parameter sets differ in size");
  GradCheckReport report;
  for (const auto& [name, a] : analytic) {
    auto it = numeric.find(name);
    if (it == numeric.end()) throw std::invalid_argument("grad_check: missing numeric gradient for " + name);
    const Matrix& n = it->second;
    if (!a.same_shape(n))
      throw ShapeError("grad_check: " + name + " shape " + a.shape_string() + " vs " + n.shape_string());
    GradCheckEntry e{name};
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double av = a.data()[k], nv = n.data()[k];
      const double diff = std::abs(av - nv);
      const double mag = std::max(std::abs(av), std::abs(nv));
      e.max_abs_err = std::max(e.max_abs_err, diff);
      if (mag > 0.0) e.max_rel_err = std::max(e.max_rel_err, diff / mag);
      if (!(diff <= abs_tol + rel_tol * mag)) e.pass = false;
    }
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

inline void write_csv(const GradCheckReport& r, std::ostream& out) {
  out << "parameter_name,max_rel_err,max_abs_err,pass\n";
  for (const auto& e : r.entries)
    out << e.name << ',' << format_real(e.max_rel_err) << ',' << format_real(e.max_abs_err) << ','
        << (e.pass ? 1 : 0) << '\n';
}

}  // namespace lily
