#include <gtest/gtest.h>

#include <sstream>

#include "lily/gradkit.hpp"

using namespace lily;

namespace {

constexpr double kRel = 1e-6, kAbs = 1e-8, kEps = 1e-6;

/// Checks analytic against central-difference gradients for every parameter.
void expect_matches_fd(const Program& program, std::vector<ParamRef> params, double rel = kRel, double abs = kAbs) {
  Tape t;
  Var out = program(t);
  const NamedGradients analytic = t.backward(out);
  const GradCheckReport r = grad_check(analytic, finite_diff_grad(program, params, kEps), rel, abs);
  for (const auto& e : r.entries) EXPECT_TRUE(e.pass) << e.name << " abs " << e.max_abs_err << " rel " << e.max_rel_err;
}

struct Fixture {
  Matrix x = seeded_gaussian(3, 4, 1.0, 1);
  Matrix w = seeded_gaussian(4, 5, 1.0, 2);
  Matrix target3x4 = seeded_gaussian(3, 4, 1.0, 3);
  Matrix target3x5 = seeded_gaussian(3, 5, 1.0, 4);
};

}  // namespace

TEST(Primitives, MatMulGradient) {
  Fixture f;
  expect_matches_fd(
      [&](Tape& t) { return t.mse(t.matmul(t.parameter("x", f.x, true), t.parameter("w", f.w, true)), f.target3x5); },
      {{"x", &f.x}, {"w", &f.w}});
}

TEST(Primitives, TransposeGradient) {
  Fixture f;
  Matrix target = seeded_gaussian(4, 3, 1.0, 9);
  expect_matches_fd([&](Tape& t) { return t.mse(t.transpose(t.parameter("x", f.x, true)), target); }, {{"x", &f.x}});
}

TEST(Primitives, AddGradientIncludingRowBroadcast) {
  Fixture f;
  Matrix b = seeded_gaussian(1, 4, 1.0, 5), y = seeded_gaussian(3, 4, 1.0, 6);
  expect_matches_fd(
      [&](Tape& t) {
        Var s = t.add(t.parameter("x", f.x, true), t.parameter("y", y, true));
        return t.mse(t.add(s, t.parameter("b", b, true)), f.target3x4);
      },
      {{"x", &f.x}, {"y", &y}, {"b", &b}});
}

TEST(Primitives, ScaleGradient) {
  Fixture f;
  expect_matches_fd([&](Tape& t) { return t.mse(t.scale(t.parameter("x", f.x, true), -2.5), f.target3x4); },
                    {{"x", &f.x}});
}

TEST(Primitives, RowSoftmaxGradient) {
  Fixture f;
  expect_matches_fd([&](Tape& t) { return t.mse(t.row_softmax(t.parameter("x", f.x, true)), f.target3x4); },
                    {{"x", &f.x}});
}

TEST(Primitives, SumRowsGradient) {
  Fixture f;
  Matrix target = seeded_gaussian(1, 4, 1.0, 7);
  expect_matches_fd([&](Tape& t) { return t.mse(t.sum_rows(t.parameter("x", f.x, true)), target); }, {{"x", &f.x}});
}

TEST(Primitives, GeluAndReluGradients) {
  Fixture f;
  expect_matches_fd([&](Tape& t) { return t.mse(t.gelu(t.parameter("x", f.x, true)), f.target3x4); }, {{"x", &f.x}});
  // Keep every entry away from the kink at zero.
  for (double& v : f.x.data()) v += v > 0 ? 0.1 : -0.1;
  expect_matches_fd([&](Tape& t) { return t.mse(t.relu(t.parameter("x", f.x, true)), f.target3x4); }, {{"x", &f.x}});
}

TEST(Primitives, LayerNormGradient) {
  Fixture f;
  expect_matches_fd([&](Tape& t) { return t.mse(t.layer_norm(t.parameter("x", f.x, true)), f.target3x4); },
                    {{"x", &f.x}});
}

TEST(Primitives, CrossEntropyGradient) {
  Fixture f;
  const int labels[] = {0, 3, 1};
  expect_matches_fd([&](Tape& t) { return t.cross_entropy(t.parameter("x", f.x, true), labels); }, {{"x", &f.x}});
}

TEST(Primitives, SliceAndConcatGradients) {
  Fixture f;
  Matrix y = seeded_gaussian(3, 2, 1.0, 8);
  Matrix target = seeded_gaussian(3, 5, 1.0, 10);
  expect_matches_fd(
      [&](Tape& t) {
        Var x = t.parameter("x", f.x, true);
        const Var parts[] = {t.slice_cols(x, 1, 4), t.parameter("y", y, true)};
        return t.mse(t.concat_cols(parts), target);
      },
      {{"x", &f.x}, {"y", &y}});
}

TEST(Primitives, WeightedSumGradientForWeightsAndTerms) {
  Matrix w = seeded_gaussian(1, 3, 1.0, 11);
  std::vector<Matrix> terms{seeded_gaussian(2, 4, 1.0, 12), seeded_gaussian(2, 4, 1.0, 13),
                            seeded_gaussian(2, 4, 1.0, 14)};
  Matrix target = seeded_gaussian(2, 4, 1.0, 15);
  expect_matches_fd(
      [&](Tape& t) {
        std::vector<Var> vs;
        for (std::size_t i = 0; i < terms.size(); ++i) vs.push_back(t.parameter("t" + std::to_string(i), terms[i], true));
        return t.mse(t.weighted_sum(t.parameter("w", w, true), vs), target);
      },
      {{"w", &w}, {"t0", &terms[0]}, {"t1", &terms[1]}, {"t2", &terms[2]}});
}

TEST(Primitives, RouterPathGradient) {
  // softmax over experts of column sums of x' R^T, mixing a bank.
  Matrix xp = seeded_gaussian(5, 3, 1.0, 20), r = seeded_gaussian(2, 3, 1.0, 21);
  std::vector<Matrix> bank{seeded_gaussian(3, 4, 1.0, 22), seeded_gaussian(3, 4, 1.0, 23)};
  Matrix target = seeded_gaussian(5, 4, 1.0, 24);
  expect_matches_fd(
      [&](Tape& t) {
        Var x = t.parameter("xp", xp, true);
        Var s = t.row_softmax(t.sum_rows(t.matmul(x, t.transpose(t.parameter("R", r, true)))));
        const Var b[] = {t.parameter("B0", bank[0], true), t.parameter("B1", bank[1], true)};
        return t.mse(t.matmul(x, t.weighted_sum(s, b)), target);
      },
      {{"xp", &xp}, {"R", &r}, {"B0", &bank[0]}, {"B1", &bank[1]}});
}

TEST(Backward, LinearityOfCombinedLosses) {
  Fixture f;
  auto grads = [&](double a, double b) {
    Tape t;
    Var x = t.parameter("x", f.x, true);
    Var l1 = t.mse(t.gelu(x), f.target3x4);
    Var l2 = t.mse(t.row_softmax(x), f.target3x4);
    Var l = a == 0 ? t.scale(l2, b) : b == 0 ? t.scale(l1, a) : t.add(t.scale(l1, a), t.scale(l2, b));
    return t.backward(l).at("x");
  };
  Matrix g1 = grads(1, 0), g2 = grads(0, 1), g = grads(2, -3);
  EXPECT_LE(max_abs_diff(g, add(scale(g1, 2), scale(g2, -3))), 1e-14);
}

TEST(Backward, FrozenLeavesReceiveNoGradientAndUnreachedAreZero) {
  Fixture f;
  Matrix unused(2, 2, 1.0);
  Tape t;
  Var x = t.parameter("x", f.x, false);
  Var w = t.parameter("w", f.w, true);
  t.parameter("unused", unused, true);
  auto g = t.backward(t.mse(t.matmul(x, w), f.target3x5));
  EXPECT_FALSE(g.contains("x"));
  ASSERT_TRUE(g.contains("unused"));
  EXPECT_EQ(g.at("unused"), Matrix(2, 2));
  EXPECT_EQ(g.at("w").rows(), 4u);
}

TEST(Backward, RejectsNonScalarLoss) {
  Fixture f;
  Tape t;
  Var x = t.parameter("x", f.x, true);
  EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Tape, DuplicateParameterNamesRejected) {
  Fixture f;
  Tape t;
  t.parameter("x", f.x, true);
  EXPECT_THROW(t.parameter("x", f.w, true), std::invalid_argument);
}

TEST(Tape, NameDispatchMatchesTypedOpsAndRejectsUnknown) {
  Fixture f;
  Tape t;
  Var x = t.parameter("x", f.x, true), w = t.parameter("w", f.w, true);
  const Var in[] = {x, w};
  EXPECT_EQ(t.value(t.apply("matmul", in)), t.value(t.matmul(x, w)));
  EXPECT_EQ(t.op(t.apply("gelu", std::span<const Var>(in, 1))), Primitive::Gelu);
  try {
    t.apply("conv2d", in);
    FAIL();
  } catch (const UnsupportedPrimitive& e) {
    EXPECT_STREQ(e.what(), "unsupported primitive: conv2d");
  }
  EXPECT_THROW(t.apply("matmul", std::span<const Var>(in, 1)), std::invalid_argument);
}

TEST(Tape, RecordsOpsAndInputs) {
  Fixture f;
  RecordedProgram r = record_forward([&](Tape& t) {
    return t.matmul(t.parameter("x", f.x, true), t.parameter("w", f.w, true));
  });
  EXPECT_EQ(r.tape.size(), 3u);
  EXPECT_EQ(r.tape.op(r.output), Primitive::MatMul);
  EXPECT_EQ(r.tape.inputs(r.output).size(), 2u);
  EXPECT_EQ(r.tape.value(r.output), matmul(f.x, f.w));
}

TEST(Tape, EagerAndTapedForwardsAgreeBitwise) {
  Fixture f;
  Eager e;
  Matrix eager = e.layer_norm(e.gelu(e.matmul(f.x, f.w)));
  Tape t;
  Var v = t.layer_norm(t.gelu(t.matmul(t.parameter("x", f.x, true), t.parameter("w", f.w, true))));
  EXPECT_EQ(t.value(v), eager);
}

TEST(GradCheck, CorruptedBackwardIsDetected) {
  Fixture f;
  Program p = [&](Tape& t) { return t.mse(t.matmul(t.parameter("x", f.x, true), t.parameter("w", f.w, true)), f.target3x5); };
  Tape t;
  Var l = p(t);
  t.corrupt_backward(1.5);
  std::vector<ParamRef> refs{{"x", &f.x}, {"w", &f.w}};
  auto r = grad_check(t.backward(l), finite_diff_grad(p, refs, kEps), 1e-4, 1e-6);
  EXPECT_FALSE(r.pass);
  ASSERT_NE(r.worst(), nullptr);
  EXPECT_FALSE(r.worst()->pass);
}

TEST(GradCheck, ToleranceRuleAndCsv) {
  NamedGradients a{{"p", Matrix::from_rows({{1.0, 0.0}})}, {"q", Matrix::from_rows({{100.0}})}};
  NamedGradients n{{"p", Matrix::from_rows({{1.0 + 5e-5, 5e-7}})}, {"q", Matrix::from_rows({{100.02}})}};
  auto r = grad_check(a, n, 1e-4, 1e-6);
  EXPECT_TRUE(r.entries[0].pass);   // 5e-5 <= 1e-6 + 1e-4 * 1.00005
  EXPECT_FALSE(r.entries[1].pass);  // 0.02 > 1e-6 + 1e-4 * 100.02
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.worst()->name, "q");
  std::ostringstream out;
  write_csv(r, out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "parameter_name,max_rel_err,max_abs_err,pass");
  EXPECT_THROW(grad_check(a, {{"p", Matrix(1, 2)}}, 1e-4, 1e-6), std::invalid_argument);
}

TEST(GradCheck, FiniteDifferenceNeedsScalarOutputAndPositiveStep) {
  Fixture f;
  Program p = [&](Tape& t) { return t.parameter("x", f.x, true); };
  std::vector<ParamRef> refs{{"x", &f.x}};
  EXPECT_THROW(finite_diff_grad(p, refs, kEps), std::invalid_argument);
  EXPECT_THROW(finite_diff_grad(p, refs, 0.0), std::invalid_argument);
}
