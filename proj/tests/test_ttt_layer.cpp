#include "doctest.h"
#include "test_util.hpp"

#include "ttt/autodiff.hpp"
#include "ttt/ttt_layer.hpp"

using namespace ttt;
using ttt::testing::max_abs_diff;
using ttt::testing::random_mat;
using ttt::testing::random_vec;
using ttt::testing::rel_diff;

using M = Mat<double>;
using Weights = InnerWeights<M>;
using Params = TTTLayerParams<double>;

namespace {

Params identity_params(Index d, InnerKind kind, bool bare, Index b, double eta) {
  std::mt19937_64 rng(0);
  Params p = random_layer_params<double>(kind, bare, d, 1, b, rng);
  p.eta_base = eta;
  p.learnable_eta = false;
  auto& h = p.heads[0];
  h.theta_k = h.theta_q = h.theta_v = M::Identity(d, d);
  h.init.w1.setZero();
  if (kind == InnerKind::MLP2) h.init.w2.setZero();
  return p;
}

/// Random parameters with a random W0, LN affine and eta gate.
Params random_params(InnerKind kind, bool bare, Index d, Index heads, Index b, std::mt19937_64& rng) {
  Params p = random_layer_params<double>(kind, bare, d, heads, b, rng);
  for (auto& h : p.heads) {
    const Index hd = h.theta_k.rows();
    h.init.w1 = random_mat(h.init.w1.rows(), h.init.w1.cols(), rng, 0.3);
    if (kind == InnerKind::MLP2) h.init.w2 = random_mat(h.init.w2.rows(), h.init.w2.cols(), rng, 0.3);
    h.ln_gamma = (M::Ones(hd, 1) + random_mat(hd, 1, rng, 0.1));
    h.ln_beta = random_mat(hd, 1, rng, 0.1);
    h.theta_lr = random_mat(1, d, rng, 0.5);
  }
  return p;
}

std::vector<Weights> init_weights(const Params& p) {
  std::vector<Weights> w;
  for (const auto& h : p.heads) w.push_back(h.init);
  return w;
}

Weights step(const Params& p, const Weights& w, const Weights& g, double eta) {
  Weights out;
  out.w1 = w.w1 - eta * g.w1;
  if (p.inner.kind == InnerKind::MLP2) out.w2 = w.w2 - eta * g.w2;
  return out;
}

/// Reference loop: gradients at the anchor given by `anchor_every`
/// (1 = online GD, T = batch GD, b = mini-batch GD).
M reference_loop(const M& x, const Params& p, Index anchor_every, std::vector<Weights>* final_w = nullptr) {
  std::vector<Weights> w = init_weights(p);
  std::vector<Weights> anchor = w;
  M z(x.rows(), x.cols());
  const Index hd = p.head_dim();
  for (Index t = 0; t < x.cols(); ++t) {
    const Vec<double> xt = x.col(t);
    const auto g = inner_grad(p, anchor, xt);
    for (Index h = 0; h < p.num_heads(); ++h) {
      const auto hs = static_cast<size_t>(h);
      w[hs] = step(p, w[hs], g[hs], token_eta(p, h, xt));
      const auto& hp = p.heads[hs];
      z.block(h * hd, t, hd, 1) = inner_model_apply<double>(p.inner, w[hs], hp.theta_q * xt, as_vec<double>(hp.ln_gamma),
                                                            as_vec<double>(hp.ln_beta));
    }
    if ((t + 1) % anchor_every == 0) anchor = w;
  }
  if (final_w != nullptr) *final_w = w;
  return z;
}

double weights_rel_diff(const std::vector<Weights>& a, const std::vector<Weights>& b) {
  double worst = 0;
  for (size_t h = 0; h < a.size(); ++h) {
    worst = std::max(worst, rel_diff(a[h].w1, b[h].w1));
    if (a[h].w2.size() > 0) worst = std::max(worst, rel_diff(a[h].w2, b[h].w2));
  }
  return worst;
}

}  // namespace

TEST_CASE("inner_model_apply") {
  std::mt19937_64 rng(1);
  InnerSpec<double> bare{InnerKind::Linear, true};
  const Vec<double> x = random_vec(4, rng);
  const Vec<double> ones = Vec<double>::Ones(4), zeros = Vec<double>::Zero(4);
  CHECK(inner_model_apply(bare, Weights{M::Zero(4, 4), {}}, x, ones, zeros).cwiseAbs().maxCoeff() == 0.0);
  CHECK(inner_model_apply(bare, Weights{M::Identity(4, 4), {}}, x, ones, zeros) == x);

  // MLP2 with LN and residual against a loop-level re-implementation.
  InnerSpec<double> mlp{InnerKind::MLP2, false};
  const M w1 = random_mat(16, 4, rng), w2 = random_mat(4, 16, rng);
  const Vec<double> gamma = random_vec(4, rng), beta = random_vec(4, rng);
  Vec<double> out(4);
  for (Index i = 0; i < 4; ++i) {
    double acc = 0;
    for (Index k = 0; k < 16; ++k) {
      double pre = 0;
      for (Index j = 0; j < 4; ++j) pre += w1(k, j) * x(j);
      acc += w2(i, k) * 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
    }
    out(i) = acc;
  }
  const double mean = out.mean();
  const double var = (out.array() - mean).square().mean();
  Vec<double> want(4);
  for (Index i = 0; i < 4; ++i) want(i) = x(i) + gamma(i) * (out(i) - mean) / std::sqrt(var + 1e-6) + beta(i);
  CHECK(rel_diff(inner_model_apply(mlp, Weights{w1, w2}, x, gamma, beta), want) <= 1e-13);
}

TEST_CASE("inner_loss") {
  std::mt19937_64 rng(2);
  Params p = identity_params(4, InnerKind::Linear, true, 1, 1.0);
  const Vec<double> x = random_vec(4, rng);
  p.heads[0].theta_k = p.heads[0].theta_v = random_mat(4, 4, rng);
  CHECK(inner_loss(p, {Weights{M::Identity(4, 4), {}}}, x) == doctest::Approx(0.0));
  CHECK(inner_loss(p, {Weights{M::Zero(4, 4), {}}}, x) == doctest::Approx((p.heads[0].theta_v * x).squaredNorm()));
}

TEST_CASE("inner_grad closed forms") {
  std::mt19937_64 rng(3);
  const Params p = identity_params(4, InnerKind::Linear, true, 1, 1.0);
  const Vec<double> x = random_vec(4, rng);
  const auto g = inner_grad(p, init_weights(p), x);
  CHECK(max_abs_diff(g[0].w1, M(-2.0 * x * x.transpose())) <= 1e-15);

  const Params q = random_params(InnerKind::MLP2, false, 4, 1, 1, rng);
  const auto g0 = inner_grad(q, init_weights(q), Vec<double>(Vec<double>::Zero(4)));
  CHECK(g0[0].w1.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g0[0].w2.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("inner_grad matches finite differences of inner_loss") {
  std::mt19937_64 rng(4);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    for (bool bare : {true, false}) {
      CAPTURE(to_string(kind));
      CAPTURE(bare);
      const Params p = random_params(kind, bare, 4, 1, 1, rng);
      const Vec<double> x = random_vec(4, rng);
      std::vector<Weights> w = init_weights(p);
      const auto g = inner_grad(p, w, x);
      const double h = 1e-5;
      auto check_entry = [&](M& target, const M& grad) {
        for (Index i = 0; i < target.size(); ++i) {
          const double saved = target.data()[i];
          target.data()[i] = saved + h;
          const double up = inner_loss(p, w, x);
          target.data()[i] = saved - h;
          const double down = inner_loss(p, w, x);
          target.data()[i] = saved;
          const double fd = (up - down) / (2 * h);
          const double an = grad.data()[i];
          CHECK(std::abs(fd - an) <= 1e-6 * std::max({std::abs(fd), std::abs(an), 1e-2}));
        }
      };
      check_entry(w[0].w1, g[0].w1);
      if (kind == InnerKind::MLP2) check_entry(w[0].w2, g[0].w2);
    }
  }
}

TEST_CASE("eta_gate") {
  Vec<double> x(2);
  x << std::log(3.0), 0.0;
  M theta(1, 2);
  theta << 1.0, 5.0;
  CHECK(eta_gate(x, M(M::Zero(1, 2)), 0.8) == doctest::Approx(0.4));
  CHECK(eta_gate(x, theta, 1.0) == doctest::Approx(0.75).epsilon(1e-15));
  Vec<double> big(2);
  big << 1e3, 0.0;
  CHECK(eta_gate(big, theta, 2.0) == doctest::Approx(2.0));
}

TEST_CASE("ttt_step_primal") {
  std::mt19937_64 rng(5);
  const Vec<double> x = random_vec(5, rng);

  SUBCASE("one step closed form") {
    const Params p = identity_params(5, InnerKind::Linear, true, 1, 0.5);
    TTTState<double> st = initial_state(p);
    const Vec<double> z = ttt_step_primal(st, x, p);
    CHECK(rel_diff(z, Vec<double>(x.squaredNorm() * x)) <= 1e-15);
    CHECK(st.pos == 0);
    CHECK(st.anchor[0].w1 == st.weights[0].w1);
  }

  SUBCASE("zero token leaves the state alone") {
    Params p = random_params(InnerKind::MLP2, false, 4, 1, 4, rng);
    TTTState<double> st = initial_state(p);
    const Vec<double> zero = Vec<double>::Zero(4);
    const Vec<double> z = ttt_step_primal(st, zero, p);
    CHECK(st.weights[0].w1 == p.heads[0].init.w1);
    CHECK(st.weights[0].w2 == p.heads[0].init.w2);
    CHECK(st.pos == 1);
    CHECK(z == inner_model_apply<double>(p.inner, p.heads[0].init, zero, as_vec<double>(p.heads[0].ln_gamma),
                                         as_vec<double>(p.heads[0].ln_beta)));
  }

  SUBCASE("critical step size zeroes the reconstruction loss") {
    Params p = random_params(InnerKind::Linear, true, 6, 1, 1, rng);
    p.learnable_eta = false;
    TTTState<double> st = initial_state(p);
    for (int t = 0; t < 10; ++t) {
      const Vec<double> xt = random_vec(6, rng);
      p.eta_base = 1.0 / (2.0 * (p.heads[0].theta_k * xt).squaredNorm());
      ttt_step_primal(st, xt, p);
      CHECK(inner_loss(p, st.weights, xt) <= 1e-20);
    }
  }
}

TEST_CASE("primal forward matches the gradient-descent reference loops") {
  std::mt19937_64 rng(6);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    const Index d = 8, T = 16;
    const M x = random_mat(d, T, rng, 0.3);
    for (Index b : {Index(1), Index(4), T}) {
      Params p = random_params(kind, false, d, 2, b, rng);
      std::vector<Weights> want_w;
      const M want = reference_loop(x, p, b, &want_w);
      const auto got = ttt_forward_primal(x, p);
      CHECK(rel_diff(got.z, want) <= 1e-12);
      CHECK(weights_rel_diff(got.final_weights, want_w) <= 1e-12);
    }
    // T = b = 1 is a single step.
    Params p1 = random_params(kind, false, d, 1, 1, rng);
    TTTState<double> st = initial_state(p1);
    const M x1 = random_mat(d, 1, rng);
    CHECK(rel_diff(ttt_forward_primal(x1, p1).z.col(0), ttt_step_primal(st, Vec<double>(x1.col(0)), p1)) <= 1e-14);
  }
}

TEST_CASE("streaming steps reproduce the primal forward") {
  std::mt19937_64 rng(7);
  const Params p = random_params(InnerKind::MLP2, false, 8, 2, 4, rng);
  const M x = random_mat(8, 12, rng, 0.5);
  const M want = ttt_forward_primal(x, p).z;
  TTTState<double> st = initial_state(p);
  for (Index t = 0; t < 12; ++t) {
    CHECK(rel_diff(ttt_step_primal(st, Vec<double>(x.col(t)), p), Vec<double>(want.col(t))) <= 1e-12);
  }
}

TEST_CASE("mini-batch convention: gradients at the anchor, steps from the current weights") {
  std::mt19937_64 rng(8);
  const Index T = 8, b = 4;
  const M x = random_mat(4, T, rng, 0.5);
  const Params p = random_params(InnerKind::Linear, true, 4, 1, b, rng);
  const M online = reference_loop(x, p, 1);
  const M anchored = reference_loop(x, p, b);
  CHECK(rel_diff(online, anchored) > 1e-3);
  for (Form form : {Form::Primal, Form::Dual}) {
    const M got = ttt_forward(x, p, form).z;
    CHECK(rel_diff(got, anchored) <= 1e-12);
    CHECK(rel_diff(got, online) > 1e-3);
  }
}

TEST_CASE("dual form equals primal form") {
  std::mt19937_64 rng(9);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    for (bool bare : {true, false}) {
      for (Index d : {4, 8}) {
        for (Index T : {8, 32}) {
          for (Index b : {Index(1), Index(4), T}) {
            CAPTURE(to_string(kind));
            CAPTURE(bare);
            CAPTURE(d);
            CAPTURE(T);
            CAPTURE(b);
            const Params p = random_params(kind, bare, d, 1, b, rng);
            const M x = random_mat(d, T, rng, 0.3);
            const auto primal = ttt_forward_primal(x, p);
            const auto dual = ttt_forward_dual(x, p);
            CHECK(rel_diff(dual.z, primal.z) <= 1e-10);
            CHECK(weights_rel_diff(dual.final_weights, primal.final_weights) <= 1e-10);
          }
        }
      }
    }
  }
}

TEST_CASE("dual form closed form for W0 = 0 and identity views") {
  std::mt19937_64 rng(10);
  const Index T = 6;
  const double eta = 0.3;
  const Params p = identity_params(5, InnerKind::Linear, true, T, eta);
  const M x = random_mat(5, T, rng);
  const M want = 2.0 * eta * x * causal_mask(M(x.transpose() * x));
  CHECK(rel_diff(ttt_forward_dual(x, p).z, want) <= 1e-14);
}

TEST_CASE("causality in both forms") {
  std::mt19937_64 rng(11);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    for (Form form : {Form::Primal, Form::Dual}) {
      const Params p = random_params(kind, false, 8, 2, 4, rng);
      const M x = random_mat(8, 16, rng, 0.5);
      const M base = ttt_forward(x, p, form).z;
      for (Index s = 0; s < 16; ++s) {
        M xp = x;
        xp.col(s) += random_mat(8, 1, rng);
        const M pert = ttt_forward(xp, p, form).z;
        CHECK(pert.leftCols(s) == base.leftCols(s));
      }
    }
  }
}

TEST_CASE("loss contraction for small fixed step sizes") {
  std::mt19937_64 rng(12);
  for (int seq = 0; seq < 10; ++seq) {
    Params p = random_params(InnerKind::Linear, true, 6, 1, 1, rng);
    p.learnable_eta = false;
    TTTState<double> st = initial_state(p);
    for (int t = 0; t < 20; ++t) {
      const Vec<double> x = random_vec(6, rng);
      const double norm2 = (p.heads[0].theta_k * x).squaredNorm();
      p.eta_base = 0.9 / norm2;
      const double before = inner_loss(p, st.weights, x);
      ttt_step_primal(st, x, p);
      CHECK(inner_loss(p, st.weights, x) < before);
    }
  }
}

TEST_CASE("learned step sizes stay inside (0, eta_base)") {
  std::mt19937_64 rng(13);
  Params p = random_params(InnerKind::Linear, false, 8, 2, 4, rng);
  for (int i = 0; i < 200; ++i) {
    const Vec<double> x = random_vec(8, rng, 3.0);
    for (Index h = 0; h < 2; ++h) {
      const double eta = token_eta(p, h, x);
      CHECK(eta > 0.0);
      CHECK(eta < p.eta_base);
    }
  }
}

TEST_CASE("multi-head forward") {
  std::mt19937_64 rng(14);
  const Index d = 16, T = 8;
  const M x = random_mat(d, T, rng, 0.4);

  SUBCASE("four heads equal four sliced single-head layers") {
    for (Form form : {Form::Primal, Form::Dual}) {
      const Params p = random_params(InnerKind::MLP2, false, d, 4, 4, rng);
      const M z = multihead_forward(x, p, form);
      for (Index h = 0; h < 4; ++h) {
        Params single = p;
        single.heads = {p.heads[static_cast<size_t>(h)]};
        // A single-head layer with head_dim 4 over embed_dim 16 is a valid
        // layer only as part of a multi-head stack, so evaluate the head
        // through the sequence kernel directly.
        const auto& hp = single.heads[0];
        const auto views = make_views<double, M>(x, hp.theta_k, hp.theta_q, hp.theta_v, &hp.theta_lr, p.eta_base);
        const auto r = ttt_sequence<double, M>(p.inner, form, p.mini_batch, hp.init, {hp.ln_gamma, hp.ln_beta}, views);
        CHECK(z.middleRows(h * 4, 4) == r.z);
      }
    }
  }

  SUBCASE("one head equals the single-head forward") {
    const Params p = random_params(InnerKind::Linear, false, d, 1, 4, rng);
    CHECK(multihead_forward(x, p, Form::Dual) == ttt_forward_dual(x, p).z);
  }

  SUBCASE("zero projections in one head") {
    Params p = random_params(InnerKind::Linear, false, d, 2, 4, rng);
    auto& h0 = p.heads[0];
    h0.theta_k.setZero();
    h0.theta_q.setZero();
    h0.theta_v.setZero();
    const M z = multihead_forward(x, p, Form::Dual);
    for (Index t = 0; t < T; ++t) CHECK(max_abs_diff(z.block(0, t, 8, 1), h0.ln_beta) <= 1e-15);
    p.inner.bare = true;
    CHECK(multihead_forward(x, p, Form::Dual).topRows(8).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("divisibility") {
    const Params p = random_params(InnerKind::Linear, false, d, 4, 3, rng);
    CHECK_THROWS_AS(ttt_forward_dual(x, p), std::invalid_argument);
    Params bad = random_params(InnerKind::Linear, false, d, 4, 4, rng);
    bad.heads.pop_back();
    CHECK_THROWS_AS(ttt_forward_dual(x, bad), std::invalid_argument);
  }
}

namespace {

/// Outer objective of a single TTT layer: 0.5 * ||Z - R||^2 / T over all
/// layer parameters (projections, W0, eta gate, inner LN).
struct LayerObjective {
  InnerSpec<double> spec;
  Index b;
  double eta_base;
  M x, target;
  bool checkpoint_time = false;
  Form form = Form::Dual;

  Var<double> operator()(Tape<double>& tape, const std::vector<Var<double>>& p) const {
    using V = Var<double>;
    const V vx = tape.constant(x);
    const HeadViews<V> views = make_views<double, V>(vx, p[0], p[1], p[2], &p[3], eta_base);
    InnerWeights<V> init{p[4], spec.kind == InnerKind::MLP2 ? p[7] : V{}};
    const auto r = ttt_sequence<double, V>(spec, form, b, init, {p[5], p[6]}, views, checkpoint_time);
    const V diff = sub(r.z, tape.constant(target));
    return scale(sum_all(hadamard(diff, diff)), 0.5 / static_cast<double>(x.cols()));
  }
};

std::vector<M> flatten(const Params& p) {
  const auto& h = p.heads[0];
  std::vector<M> out = {h.theta_k, h.theta_q, h.theta_v, h.theta_lr, h.init.w1, h.ln_gamma, h.ln_beta};
  if (p.inner.kind == InnerKind::MLP2) out.push_back(h.init.w2);
  return out;
}

}  // namespace

TEST_CASE("taped dual forward equals the eager forward bit for bit") {
  std::mt19937_64 rng(15);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    for (bool ckpt : {false, true}) {
      const Params p = random_params(kind, false, 8, 1, 4, rng);
      const M x = random_mat(8, 16, rng, 0.5);
      Tape<double> tape;
      std::vector<Var<double>> vars;
      for (const auto& m : flatten(p)) vars.push_back(tape.param(m));
      const auto views = make_views<double, Var<double>>(tape.constant(x), vars[0], vars[1], vars[2], &vars[3],
                                                         p.eta_base);
      InnerWeights<Var<double>> init{vars[4], kind == InnerKind::MLP2 ? vars[7] : Var<double>{}};
      const auto r = ttt_sequence<double, Var<double>>(p.inner, Form::Dual, 4, init, {vars[5], vars[6]}, views, ckpt);
      CHECK(r.z.value() == ttt_forward_dual(x, p).z);
    }
  }
}

TEST_CASE("outer-loop gradients through the inner loop") {
  std::mt19937_64 rng(16);
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    CAPTURE(to_string(kind));
    const Params p = random_params(kind, false, 8, 1, 4, rng);
    LayerObjective obj{p.inner, 4, p.eta_base, random_mat(8, 32, rng, 0.5), random_mat(8, 32, rng)};
    const auto r = grad_check<double>(obj, flatten(p));
    CHECK(r.max_rel_err <= 1e-5);

    // Checkpointing through time changes no gradient.
    auto grads = [&](bool ckpt, Form form) {
      LayerObjective o = obj;
      o.checkpoint_time = ckpt;
      o.form = form;
      Tape<double> tape;
      std::vector<Var<double>> vars;
      for (const auto& m : flatten(p)) vars.push_back(tape.param(m));
      const auto g = tape.backward(o(tape, vars));
      std::vector<M> out;
      for (const auto& v : vars) out.push_back(g[v]);
      return out;
    };
    const auto full = grads(false, Form::Dual);
    const auto ckpt = grads(true, Form::Dual);
    const auto primal = grads(false, Form::Primal);
    for (size_t i = 0; i < full.size(); ++i) {
      CHECK(rel_diff(ckpt[i], full[i]) <= 1e-12);
      CHECK(rel_diff(primal[i], full[i]) <= 1e-9);
    }
  }
}
