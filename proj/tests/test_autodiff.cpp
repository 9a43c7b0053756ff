#include "doctest.h"
#include "test_util.hpp"

#include "ttt/autodiff.hpp"

#include <functional>

using namespace ttt;
using ttt::testing::random_mat;

using V = Var<double>;
using M = Mat<double>;

TEST_CASE("record evaluates eagerly in topological order") {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  const M b = random_mat(3, 2, rng);
  V id = tape.constant(M::Identity(3, 3));
  V vb = tape.constant(b);
  V c = matmul(id, vb);
  CHECK(c.value() == b);

  V d = gelu(c);
  V e = scale(d, 2.0);
  V f = sum_all(e);
  CHECK(tape.size() == 6);
  for (const V& v : {c, d, e, f}) {
    for (int in : tape.inputs(v)) CHECK(in < v.id);
  }
  CHECK(tape.kind(d) == OpKind::Gelu);
}

TEST_CASE("unknown op-kind is rejected") {
  Tape<double> tape;
  V a = tape.constant(M::Ones(2, 2));
  CHECK_THROWS_AS(tape.record(static_cast<OpKind>(999), {a}), std::invalid_argument);
  CHECK_THROWS_AS(op_from_name("conv3d"), std::invalid_argument);
  CHECK(op_from_name("matmul") == OpKind::MatMul);
  CHECK(op_name(OpKind::CausalMask) == "causal_mask");
}

TEST_CASE("backward on closed-form losses") {
  std::mt19937_64 rng(2);
  const M w = random_mat(3, 4, rng);
  const M x = random_mat(4, 1, rng);
  const M y = random_mat(3, 1, rng);

  {
    Tape<double> tape;
    V vw = tape.param(w);
    V unused = tape.param(random_mat(2, 2, rng));
    V loss = sum_all(matmul(vw, tape.constant(x)));
    auto grads = tape.backward(loss);
    M want(3, 4);
    for (Index i = 0; i < 3; ++i) want.row(i) = x.transpose();
    CHECK(grads[vw] == want);
    CHECK(grads[unused].cwiseAbs().maxCoeff() == 0.0);
    CHECK(grads.size() == 2);
  }
  {
    Tape<double> tape;
    V vw = tape.param(w);
    V r = sub(matmul(vw, tape.constant(x)), tape.constant(y));
    V loss = sum_all(hadamard(r, r));
    auto grads = tape.backward(loss);
    const M want = 2.0 * (w * x - y) * x.transpose();
    CHECK((grads[vw] - want).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("backward errors") {
  Tape<double> tape;
  V a = tape.param(M::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(a), AutodiffError);
  V s = sum_all(a);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), AutodiffError);
  CHECK_THROWS_AS(tape.param(M::Ones(1, 1)), AutodiffError);

  Tape<double> other;
  V o = sum_all(other.param(M::Ones(1, 1)));
  Tape<double> third;
  CHECK_THROWS_AS(third.backward(o), AutodiffError);
  CHECK_THROWS_AS(add(o, third.constant(M::Ones(1, 1))), AutodiffError);
}

TEST_CASE("grad_check of a constant function") {
  std::mt19937_64 rng(3);
  TapedScalarFn<double> f = [](Tape<double>& t, const std::vector<V>&) { return t.constant(M::Constant(1, 1, 4.0)); };
  const auto r = grad_check<double>(f, {random_mat(2, 3, rng)});
  CHECK(r.max_rel_err == 0.0);
  CHECK(r.entries == 6);
}

namespace {

// Each case maps random parameters to a matrix-valued expression; the loss is
// sum(R .* expr) with a fixed random R.
struct OpCase {
  const char* name;
  std::vector<std::pair<Index, Index>> shapes;
  std::function<V(const std::vector<V>&)> expr;
};

std::vector<OpCase> op_cases() {
  static const std::vector<int> ids = {2, 0, 2, 3, 1};
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& p) { return matmul(p[0], p[1]); }},
      {"transpose", {{3, 4}}, [](auto& p) { return transpose(p[0]); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& p) { return add(p[0], p[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& p) { return sub(p[0], p[1]); }},
      {"hadamard", {{3, 4}, {3, 4}}, [](auto& p) { return hadamard(p[0], p[1]); }},
      {"hadamard_self", {{3, 4}}, [](auto& p) { return hadamard(p[0], p[0]); }},
      {"scale", {{3, 4}}, [](auto& p) { return scale(p[0], -1.7); }},
      {"add_scalar", {{3, 4}}, [](auto& p) { return add_scalar(p[0], 0.3); }},
      {"pow", {{3, 4}}, [](auto& p) { return elem_pow(add_scalar(hadamard(p[0], p[0]), 0.5), -0.5); }},
      {"scale_cols", {{3, 4}, {1, 4}}, [](auto& p) { return scale_cols(p[0], p[1]); }},
      {"scale_rows", {{3, 4}, {3, 1}}, [](auto& p) { return scale_rows(p[0], p[1]); }},
      {"add_col", {{3, 4}, {3, 1}}, [](auto& p) { return add_col(p[0], p[1]); }},
      {"add_row", {{3, 4}, {1, 4}}, [](auto& p) { return add_row(p[0], p[1]); }},
      {"col_sum", {{3, 4}}, [](auto& p) { return col_sum(p[0]); }},
      {"row_sum", {{3, 4}}, [](auto& p) { return row_sum(p[0]); }},
      {"causal_mask", {{4, 4}}, [](auto& p) { return causal_mask(p[0]); }},
      {"gelu", {{3, 4}}, [](auto& p) { return gelu(p[0]); }},
      {"gelu_prime", {{3, 4}}, [](auto& p) { return gelu_prime(p[0]); }},
      {"sigmoid", {{3, 4}}, [](auto& p) { return sigmoid(p[0]); }},
      {"causal_softmax", {{4, 4}}, [](auto& p) { return causal_softmax_cols(p[0]); }},
      {"slice_rows", {{5, 3}}, [](auto& p) { return slice_rows(p[0], 1, 3); }},
      {"slice_cols", {{3, 5}}, [](auto& p) { return slice_cols(p[0], 2, 2); }},
      {"concat_rows", {{2, 3}, {1, 3}}, [](auto& p) { return concat_rows(std::vector<V>{p[0], p[1], p[0]}); }},
      {"concat_cols", {{3, 2}, {3, 1}}, [](auto& p) { return concat_cols(std::vector<V>{p[1], p[0]}); }},
      {"gather_cols", {{3, 4}}, [](auto& p) { return gather_cols(p[0], std::span<const int>(ids)); }},
      {"causal_conv", {{3, 6}, {3, 3}}, [](auto& p) { return causal_conv1d(p[0], p[1]); }},
      {"cross_entropy", {{5, 5}}, [](auto& p) { return cross_entropy(p[0], std::span<const int>(ids)); }},
      {"layer_norm",
       {{5, 3}, {5, 1}, {5, 1}},
       [](auto& p) { return layer_norm_cols<double>(p[0], p[1], p[2], 1e-6); }},
      {"layer_norm_vjp",
       {{5, 3}, {5, 1}, {5, 3}},
       [](auto& p) { return layer_norm_cols_vjp<double>(p[0], p[1], 1e-6, p[2]).dx; }},
  };
}

}  // namespace

TEST_CASE("every op matches central differences") {
  std::mt19937_64 rng(4);
  for (const auto& oc : op_cases()) {
    CAPTURE(oc.name);
    std::vector<M> params;
    for (auto [r, c] : oc.shapes) params.push_back(random_mat(r, c, rng));
    M weights;
    {
      Tape<double> probe;
      std::vector<V> vars;
      for (const auto& p : params) vars.push_back(probe.constant(p));
      const M& out = oc.expr(vars).value();
      weights = random_mat(out.rows(), out.cols(), rng);
    }
    TapedScalarFn<double> f = [&](Tape<double>& t, const std::vector<V>& ps) {
      return sum_all(hadamard(oc.expr(ps), t.constant(weights)));
    };
    const auto r = grad_check<double>(f, params, 1e-5, 1e-6);
    CHECK(r.max_rel_err <= 1e-6);
  }
}

TEST_CASE("gradient of a sum equals the sum of gradients") {
  std::mt19937_64 rng(5);
  const M w = random_mat(3, 3, rng);
  const M x = random_mat(3, 5, rng);
  auto loss_a = [&](const V& vw) { return sum_all(gelu(matmul(vw, constant_like(vw, x)))); };
  auto loss_b = [&](const V& vw) { return sum_all(sigmoid(transpose(vw))); };

  M ga, gb, gsum;
  {
    Tape<double> t;
    V vw = t.param(w);
    ga = t.backward(loss_a(vw))[vw];
  }
  {
    Tape<double> t;
    V vw = t.param(w);
    gb = t.backward(loss_b(vw))[vw];
  }
  {
    Tape<double> t;
    V vw = t.param(w);
    gsum = t.backward(add(loss_a(vw), loss_b(vw)))[vw];
  }
  CHECK((gsum - (ga + gb)).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("checkpointed segments give the same values and gradients") {
  std::mt19937_64 rng(6);
  const M w = random_mat(4, 4, rng);
  const M x = random_mat(4, 6, rng);
  auto body = [](const std::vector<V>& in) -> std::vector<V> {
    V h = gelu(matmul(in[0], in[1]));
    return {matmul(in[0], h), sum_all(h)};
  };

  M value_plain, grad_plain, value_ckpt, grad_ckpt;
  {
    Tape<double> t;
    V vw = t.param(w);
    auto outs = body({vw, t.constant(x)});
    V loss = add(sum_all(hadamard(outs[0], outs[0])), outs[1]);
    value_plain = loss.value();
    grad_plain = t.backward(loss)[vw];
  }
  {
    Tape<double> t;
    V vw = t.param(w);
    auto outs = checkpoint(std::vector<V>{vw, t.constant(x)}, body);
    CHECK(outs.size() == 2);
    V loss = add(sum_all(hadamard(outs[0], outs[0])), outs[1]);
    value_ckpt = loss.value();
    grad_ckpt = t.backward(loss)[vw];
  }
  CHECK(value_plain == value_ckpt);
  CHECK(ttt::testing::rel_diff(grad_ckpt, grad_plain) <= 1e-12);
}
