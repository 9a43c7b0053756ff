#include "ttt/verify.hpp"

#include "ttt/attention.hpp"
#include "ttt/autodiff.hpp"
#include "ttt/backbone.hpp"
#include "ttt/ttt_layer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace ttt {

namespace {

using M = Mat<double>;

M normal(Index r, Index c, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> dist(0.0, std);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Index uniform_index(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

double rel(const M& got, const M& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-300);
}

template <typename Fn>
CheckResult timed(std::string name, double tol, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = std::move(name);
  r.tolerance = tol;
  fn(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

TTTLayerParams<double> random_layer(InnerKind kind, bool bare, Index d, Index b, std::mt19937_64& rng) {
  auto p = random_layer_params<double>(kind, bare, d, 1, b, rng);
  auto& h = p.heads[0];
  h.init.w1 = normal(h.init.w1.rows(), h.init.w1.cols(), rng, 0.3);
  if (kind == InnerKind::MLP2) h.init.w2 = normal(h.init.w2.rows(), h.init.w2.cols(), rng, 0.3);
  h.ln_gamma = M::Ones(d, 1) + normal(d, 1, rng, 0.1);
  h.ln_beta = normal(d, 1, rng, 0.1);
  h.theta_lr = normal(1, d, rng, 0.5);
  return p;
}

// Outer objective of one TTT layer: 0.5 ||Z - R||^2 / T.
struct LayerObjective {
  InnerSpec<double> spec;
  Index b;
  double eta_base;
  M x, target;

  Var<double> operator()(Tape<double>& tape, const std::vector<Var<double>>& p) const {
    using V = Var<double>;
    const V vx = tape.constant(x);
    const HeadViews<V> views = make_views<double, V>(vx, p[0], p[1], p[2], &p[3], eta_base);
    InnerWeights<V> init{p[4], spec.kind == InnerKind::MLP2 ? p[7] : V{}};
    const auto r = ttt_sequence<double, V>(spec, Form::Dual, b, init, {p[5], p[6]}, views, true);
    const V diff = sub(r.z, tape.constant(target));
    return scale(sum_all(hadamard(diff, diff)), 0.5 / static_cast<double>(x.cols()));
  }
};

}  // namespace

CheckResult check_linear_attention_equivalence(Index instances, std::uint64_t seed, double tol,
                                               double gradient_scale) {
  return timed("linear_attention_equivalence", tol, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < instances; ++i) {
      const Index d = uniform_index(rng, 2, 16);
      const Index T = uniform_index(rng, 1, 64);
      const double s = 1.0 / std::sqrt(static_cast<double>(d));
      const AttnParams<double> p{normal(d, d, rng, s), normal(d, d, rng, s), normal(d, d, rng, s)};
      const M x = normal(d, T, rng);
      r.max_error = std::max(r.max_error, linear_attention_gap(x, p, 0, Form::Dual, gradient_scale));
      r.max_error = std::max(r.max_error, linear_attention_gap(x, p, 0, Form::Primal, gradient_scale));
    }
    r.instances = instances;
    r.pass = r.max_error <= tol;
    r.detail = "max abs diff, batch GD (b = T), eta = 1/2, W0 = 0, primal and dual";
  });
}

CheckResult check_kernel_regression_equivalence(Index instances, std::uint64_t seed, double tol) {
  return timed("nadaraya_watson_equivalence", tol, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < instances; ++i) {
      const Index d = uniform_index(rng, 2, 16);
      const Index hd = uniform_index(rng, 1, d);
      const Index T = uniform_index(rng, 1, 64);
      const double s = 1.0 / std::sqrt(static_cast<double>(d));
      const AttnParams<double> p{normal(hd, d, rng, s), normal(hd, d, rng, s), normal(hd, d, rng, s)};
      r.max_error = std::max(r.max_error, kernel_regression_gap(normal(d, T, rng), p));
    }
    r.instances = instances;
    r.pass = r.max_error <= tol;
    r.detail = "max abs diff";
  });
}

CheckResult check_primal_dual(Index seeds, std::uint64_t seed, double tol, double gradient_scale) {
  return timed("primal_dual_equivalence", tol, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    const Index d = 8, T = 16;
    for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
      for (bool bare : {true, false}) {
        for (Index b : {Index(1), Index(4), T}) {
          for (Index s = 0; s < seeds; ++s) {
            auto p = random_layer(kind, bare, d, b, rng);
            p.inner.gradient_scale = gradient_scale;
            const M x = normal(d, T, rng, 0.3);
            const auto primal = ttt_forward(x, p, Form::Primal);
            const auto dual = ttt_forward(x, p, Form::Dual);
            double err = rel(dual.z, primal.z);
            err = std::max(err, rel(dual.final_weights[0].w1, primal.final_weights[0].w1));
            if (kind == InnerKind::MLP2) err = std::max(err, rel(dual.final_weights[0].w2, primal.final_weights[0].w2));
            r.max_error = std::max(r.max_error, err);
            ++r.instances;
          }
        }
      }
    }
    r.pass = r.max_error <= tol;
    r.detail = "relative Frobenius difference of Z and final W, d = 8, T = 16";
  });
}

CheckResult check_outer_gradients(std::uint64_t seed, double tol) {
  return timed("outer_gradient_check", tol, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    const Index d = 8, T = 32, b = 4;
    for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
      // Single layer, every layer parameter.
      const auto p = random_layer(kind, false, d, b, rng);
      const auto& h = p.heads[0];
      LayerObjective obj{p.inner, b, p.eta_base, normal(d, T, rng, 0.5), normal(d, T, rng)};
      std::vector<M> flat = {h.theta_k, h.theta_q, h.theta_v, h.theta_lr, h.init.w1, h.ln_gamma, h.ln_beta};
      if (kind == InnerKind::MLP2) flat.push_back(h.init.w2);
      const auto layer = grad_check<double>(obj, flat);
      r.max_error = std::max(r.max_error, layer.max_rel_err);
      r.instances += static_cast<Index>(layer.entries);

      // Whole model: next-token loss of a one-block byte LM.
      ModelConfig cfg;
      cfg.vocab_size = 256;
      cfg.n_blocks = 1;
      cfg.context = T;
      cfg.block.backbone = BackboneKind::TransformerStyle;
      cfg.block.seq_layer = kind == InnerKind::Linear ? SeqLayerKind::TTTLinear : SeqLayerKind::TTTMLP;
      cfg.block.embed_dim = d;
      cfg.block.heads = 1;
      cfg.block.mini_batch = b;
      auto mp = init_params<double>(cfg, rng);
      for_each_param(cfg, mp, [&](const ParamInfo&, M& m) { m += normal(m.rows(), m.cols(), rng, 0.2); });
      std::vector<int> tokens(static_cast<size_t>(T));
      for (auto& t : tokens) t = static_cast<int>(uniform_index(rng, 0, 255));
      std::vector<M> params;
      for_each_param(cfg, mp, [&](const ParamInfo&, const M& m) { params.push_back(m); });
      TapedScalarFn<double> fn = [&](Tape<double>&, const std::vector<Var<double>>& vars) {
        auto tree = empty_params<Var<double>>(cfg);
        size_t i = 0;
        for_each_param(cfg, tree, [&](const ParamInfo&, Var<double>& v) { v = vars[i++]; });
        return next_token_loss(lm_forward<double>(tokens, cfg, tree, {Form::Dual, true}), tokens);
      };
      const auto model = grad_check<double>(fn, params);
      r.max_error = std::max(r.max_error, model.max_rel_err);
      r.instances += static_cast<Index>(model.entries);
    }
    r.pass = r.max_error <= tol;
    r.detail = "max relative error vs central differences (layer objective and next-token loss, linear and MLP)";
  });
}

CheckResult check_contraction(Index sequences, std::uint64_t seed, double exact_tol) {
  return timed("inner_loop_contraction", exact_tol, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> frac(0.05, 0.95);
    const Index d = 8, T = 32;
    Index violations = 0;
    double worst_ratio = 0;
    for (Index s = 0; s < sequences; ++s) {
      auto p = random_layer(InnerKind::Linear, true, d, 1, rng);
      p.learnable_eta = false;
      TTTState<double> contract = initial_state(p);
      TTTState<double> exact = initial_state(p);
      for (Index t = 0; t < T; ++t) {
        const Vec<double> x = as_vec<double>(normal(d, 1, rng));
        const double k2 = (p.heads[0].theta_k * x).squaredNorm();

        p.eta_base = frac(rng) / k2;
        const double before = inner_loss(p, contract.weights, x);
        ttt_step_primal(contract, x, p);
        const double after = inner_loss(p, contract.weights, x);
        if (!(after < before)) ++violations;
        worst_ratio = std::max(worst_ratio, after / before);

        p.eta_base = 0.5 / k2;
        ttt_step_primal(exact, x, p);
        r.max_error = std::max(r.max_error, inner_loss(p, exact.weights, x));
      }
      r.instances += T;
    }
    r.pass = violations == 0 && r.max_error <= exact_tol;
    r.detail = "max post-step loss at eta = 1/(2||k||^2); " + std::to_string(violations) +
               " non-decreasing steps for eta < 1/||k||^2 (worst loss ratio " + std::to_string(worst_ratio) + ")";
  });
}

CheckResult check_causality(std::uint64_t seed) {
  return timed("causality", 0.0, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    Index violations = 0;
    auto prefix_same = [&](const M& a, const M& b, Index s) {
      ++r.instances;
      const bool same = (a.leftCols(s).array() == b.leftCols(s).array()).all();
      if (!same) {
        ++violations;
        r.max_error = std::max(r.max_error, (a.leftCols(s) - b.leftCols(s)).cwiseAbs().maxCoeff());
      }
    };
    const Index d = 8, T = 16;
    for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
      for (bool bare : {true, false}) {
        for (Form form : {Form::Primal, Form::Dual}) {
          const auto p = random_layer(kind, bare, d, 4, rng);
          const M x = normal(d, T, rng, 0.5);
          const M z = ttt_forward(x, p, form).z;
          for (Index s : {Index(1), Index(5), Index(8), T - 1}) {
            M y = x;
            y.col(s) += normal(d, 1, rng);
            prefix_same(z, ttt_forward(y, p, form).z, s);
          }
        }
      }
    }
    {
      const AttnParams<double> p{normal(4, d, rng, 0.5), normal(4, d, rng, 0.5), normal(4, d, rng, 0.5)};
      const M x = normal(d, T, rng);
      for (Index s : {Index(1), Index(7), T - 1}) {
        M y = x;
        y.col(s) += normal(d, 1, rng);
        prefix_same(linear_attention(x, p), linear_attention(y, p), s);
        prefix_same(softmax_attention(x, p), softmax_attention(y, p), s);
        prefix_same(nadaraya_watson(x, p), nadaraya_watson(y, p), s);
      }
    }
    for (BackboneKind bk : {BackboneKind::TransformerStyle, BackboneKind::MambaStyle}) {
      for (SeqLayerKind lk : {SeqLayerKind::TTTLinear, SeqLayerKind::TTTMLP, SeqLayerKind::SoftmaxAttention}) {
        for (Form form : {Form::Primal, Form::Dual}) {
          ModelConfig cfg;
          cfg.vocab_size = 256;
          cfg.n_blocks = 2;
          cfg.context = T;
          cfg.block.backbone = bk;
          cfg.block.seq_layer = lk;
          cfg.block.embed_dim = d;
          cfg.block.heads = 2;
          cfg.block.mini_batch = 4;
          cfg.positional_embedding = lk == SeqLayerKind::SoftmaxAttention;
          auto mp = init_params<double>(cfg, rng);
          for_each_param(cfg, mp, [&](const ParamInfo&, M& m) { m += normal(m.rows(), m.cols(), rng, 0.2); });
          std::vector<int> tokens(static_cast<size_t>(T));
          for (auto& t : tokens) t = static_cast<int>(uniform_index(rng, 0, 255));
          const M logits = lm_forward<double>(tokens, cfg, mp, {form});
          for (Index s : {Index(1), Index(6), T - 1}) {
            auto other = tokens;
            other[static_cast<size_t>(s)] = (other[static_cast<size_t>(s)] + 101) % 256;
            prefix_same(logits, lm_forward<double>(other, cfg, mp, {form}), s);
          }
        }
      }
    }
    r.pass = violations == 0;
    r.detail = std::to_string(violations) + " prefixes changed (bitwise comparison)";
  });
}

std::vector<CheckResult> run_verify(const VerifyOptions& opt) {
  const Index n = opt.quick ? 20 : 100;
  std::vector<CheckResult> out;
  out.push_back(check_linear_attention_equivalence(n, opt.seed + 1, 1e-12, opt.gradient_scale));
  out.push_back(check_kernel_regression_equivalence(n, opt.seed + 2, 1e-12));
  out.push_back(check_primal_dual(opt.quick ? 5 : 20, opt.seed + 3, 1e-10, opt.gradient_scale));
  if (!opt.quick) out.push_back(check_outer_gradients(opt.seed + 4, 1e-5));
  out.push_back(check_contraction(opt.quick ? 10 : 50, opt.seed + 5, 1e-20));
  out.push_back(check_causality(opt.seed + 6));
  return out;
}

nlohmann::json to_json(const CheckResult& r) {
  return {{"name", r.name},          {"pass", r.pass},          {"max_error", r.max_error},
          {"tolerance", r.tolerance}, {"instances", r.instances}, {"seconds", r.seconds},
          {"detail", r.detail}};
}

nlohmann::json verify_report(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    checks.push_back(to_json(r));
    all = all && r.pass;
  }
  return {{"pass", all}, {"checks", checks}};
}

}  // namespace ttt
