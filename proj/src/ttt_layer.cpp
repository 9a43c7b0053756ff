#include "ttt/ttt_layer.hpp"

#include <cmath>
#include <stdexcept>

namespace ttt {

std::string to_string(InnerKind kind) { return kind == InnerKind::Linear ? "linear" : "mlp"; }

std::string to_string(Form form) { return form == Form::Primal ? "primal" : "dual"; }

InnerKind inner_kind_from_string(const std::string& name) {
  if (name == "linear") return InnerKind::Linear;
  if (name == "mlp") return InnerKind::MLP2;
  throw std::invalid_argument("unknown inner model '" + name + "' (expected linear|mlp)");
}

Form form_from_string(const std::string& name) {
  if (name == "primal") return Form::Primal;
  if (name == "dual") return Form::Dual;
  throw std::invalid_argument("unknown form '" + name + "' (expected primal|dual)");
}

template <typename S>
void TTTLayerParams<S>::validate() const {
  if (heads.empty()) throw std::invalid_argument("TTT layer needs at least one head");
  if (mini_batch < 1) throw std::invalid_argument("mini-batch size must be >= 1");
  if (!(eta_base > S(0))) throw std::invalid_argument("eta_base must be positive");
  const Index hd = head_dim();
  const Index d = embed_dim();
  if (hd * num_heads() != d) {
    throw std::invalid_argument("heads x head_dim (" + std::to_string(num_heads()) + " x " + std::to_string(hd) +
                                ") must equal embed_dim " + std::to_string(d));
  }
  const Index hidden = inner_hidden_dim<S>(inner.kind, hd);
  for (const auto& h : heads) {
    auto need = [](const Mat<S>& m, Index r, Index c, const char* what) {
      if (m.rows() != r || m.cols() != c) {
        throw std::invalid_argument(std::string("TTT head ") + what + " has shape " + shape_str(m) + ", expected " +
                                    shape_str(r, c));
      }
    };
    need(h.theta_k, hd, d, "theta_k");
    need(h.theta_q, hd, d, "theta_q");
    need(h.theta_v, hd, d, "theta_v");
    need(h.init.w1, hidden, hd, "init.w1");
    if (inner.kind == InnerKind::MLP2) need(h.init.w2, hd, hidden, "init.w2");
    need(h.ln_gamma, hd, 1, "ln_gamma");
    need(h.ln_beta, hd, 1, "ln_beta");
    need(h.theta_lr, 1, d, "theta_lr");
  }
}

template <typename S>
TTTLayerParams<S> random_layer_params(InnerKind kind, bool bare, Index embed_dim, Index heads, Index mini_batch,
                                      std::mt19937_64& rng) {
  if (heads < 1 || embed_dim % heads != 0) {
    throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                                std::to_string(heads));
  }
  TTTLayerParams<S> p;
  p.inner.kind = kind;
  p.inner.bare = bare;
  p.mini_batch = mini_batch;
  p.eta_base = default_eta_base<S>(kind);
  const Index hd = embed_dim / heads;
  const Index hidden = inner_hidden_dim<S>(kind, hd);
  std::normal_distribution<double> proj(0.0, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
  auto normal = [&](Index r, Index c) {
    Mat<S> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(proj(rng));
    return m;
  };
  auto uniform = [&](Index r, Index c, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat<S> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(u(rng));
    return m;
  };
  for (Index h = 0; h < heads; ++h) {
    TTTHeadParams<S> hp;
    hp.theta_k = normal(hd, embed_dim);
    hp.theta_q = normal(hd, embed_dim);
    hp.theta_v = normal(hd, embed_dim);
    if (kind == InnerKind::Linear) {
      hp.init.w1 = Mat<S>::Zero(hd, hd);
    } else {
      hp.init.w1 = uniform(hidden, hd, 1.0 / std::sqrt(static_cast<double>(hd)));
      hp.init.w2 = uniform(hd, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
    }
    hp.ln_gamma = Mat<S>::Ones(hd, 1);
    hp.ln_beta = Mat<S>::Zero(hd, 1);
    hp.theta_lr = Mat<S>::Zero(1, embed_dim);
    p.heads.push_back(std::move(hp));
  }
  return p;
}

template <typename S>
TTTState<S> initial_state(const TTTLayerParams<S>& params) {
  TTTState<S> st;
  for (const auto& h : params.heads) {
    st.weights.push_back(h.init);
    st.anchor.push_back(h.init);
  }
  return st;
}

template <typename S>
Vec<S> inner_model_apply(const InnerSpec<S>& spec, const InnerWeights<Mat<S>>& w, const Vec<S>& x,
                         const Vec<S>& ln_gamma, const Vec<S>& ln_beta) {
  const InnerNorm<Mat<S>> ln{as_column<S>(ln_gamma), as_column<S>(ln_beta)};
  return as_vec<S>(inner_apply(spec, w, ln, as_column<S>(x)));
}

namespace {

template <typename S>
InnerNorm<Mat<S>> head_norm(const TTTHeadParams<S>& h) {
  return {h.ln_gamma, h.ln_beta};
}

template <typename S>
void check_weights(const TTTLayerParams<S>& params, const std::vector<InnerWeights<Mat<S>>>& w) {
  if (static_cast<Index>(w.size()) != params.num_heads()) {
    throw std::invalid_argument("expected inner weights for " + std::to_string(params.num_heads()) + " heads, got " +
                                std::to_string(w.size()));
  }
}

}  // namespace

template <typename S>
S inner_loss(const TTTLayerParams<S>& params, const std::vector<InnerWeights<Mat<S>>>& w, const Vec<S>& x) {
  check_weights(params, w);
  const Mat<S> xc = as_column<S>(x);
  S total = 0;
  for (Index h = 0; h < params.num_heads(); ++h) {
    const auto& hp = params.heads[static_cast<size_t>(h)];
    const Mat<S> f = inner_apply(params.inner, w[static_cast<size_t>(h)], head_norm(hp), matmul(hp.theta_k, xc));
    total += (f - matmul(hp.theta_v, xc)).squaredNorm();
  }
  return total;
}

template <typename S>
std::vector<InnerWeights<Mat<S>>> inner_grad(const TTTLayerParams<S>& params,
                                             const std::vector<InnerWeights<Mat<S>>>& anchor, const Vec<S>& x) {
  check_weights(params, anchor);
  const Mat<S> xc = as_column<S>(x);
  std::vector<InnerWeights<Mat<S>>> out;
  for (Index h = 0; h < params.num_heads(); ++h) {
    const auto& hp = params.heads[static_cast<size_t>(h)];
    const Mat<S> train = matmul(hp.theta_k, xc);
    const Mat<S> label = matmul(hp.theta_v, xc);
    const auto bw = inner_backward<S, Mat<S>>(params.inner, anchor[static_cast<size_t>(h)], head_norm(hp), train,
                                               label, nullptr);
    out.push_back(inner_grad_sum(params.inner, bw, train));
  }
  return out;
}

template <typename S>
S eta_gate(const Vec<S>& x, const Mat<S>& theta_lr, S eta_base) {
  if (theta_lr.rows() != 1 || theta_lr.cols() != x.size()) {
    throw DimensionError("eta_gate: theta_lr " + shape_str(theta_lr) + " for input of size " +
                         std::to_string(x.size()));
  }
  return eta_base * scalar::sigmoid(matmul(theta_lr, as_column<S>(x))(0, 0));
}

template <typename S>
S token_eta(const TTTLayerParams<S>& params, Index head, const Vec<S>& x) {
  if (!params.learnable_eta) return params.eta_base;
  return eta_gate(x, params.heads[static_cast<size_t>(head)].theta_lr, params.eta_base);
}

template <typename S>
Vec<S> ttt_step_primal(TTTState<S>& state, const Vec<S>& x, const TTTLayerParams<S>& params) {
  check_weights(params, state.weights);
  const Mat<S> xc = as_column<S>(x);
  std::vector<Mat<S>> parts;
  for (Index h = 0; h < params.num_heads(); ++h) {
    const auto hs = static_cast<size_t>(h);
    const auto& hp = params.heads[hs];
    const Mat<S> train = matmul(hp.theta_k, xc);
    const Mat<S> label = matmul(hp.theta_v, xc);
    const Mat<S> test = matmul(hp.theta_q, xc);
    const Mat<S> eta = Mat<S>::Constant(1, 1, token_eta(params, h, x));
    const auto norm = head_norm(hp);
    const auto bw = inner_backward<S, Mat<S>>(params.inner, state.anchor[hs], norm, train, label, &eta);
    state.weights[hs] = weights_minus(params.inner, state.weights[hs], inner_grad_sum(params.inner, bw, train));
    parts.push_back(inner_apply(params.inner, state.weights[hs], norm, test));
  }
  state.pos += 1;
  if (state.pos == params.mini_batch) {
    state.pos = 0;
    state.anchor = state.weights;
  }
  return as_vec<S>(concat_rows(parts));
}

template <typename S>
LayerOutput<S> ttt_forward(const Mat<S>& x, const TTTLayerParams<S>& params, Form form) {
  params.validate();
  if (x.rows() != params.embed_dim()) {
    throw DimensionError("ttt_forward: input " + shape_str(x) + " for embed_dim " +
                         std::to_string(params.embed_dim()));
  }
  require_divisible(x.cols(), params.mini_batch);
  LayerOutput<S> out;
  std::vector<Mat<S>> parts;
  for (const auto& hp : params.heads) {
    const auto views = make_views<S, Mat<S>>(x, hp.theta_k, hp.theta_q, hp.theta_v,
                                             params.learnable_eta ? &hp.theta_lr : nullptr, params.eta_base);
    const auto r = ttt_sequence<S, Mat<S>>(params.inner, form, params.mini_batch, hp.init, head_norm(hp), views);
    parts.push_back(r.z);
    out.final_weights.push_back(r.final_weights);
  }
  out.z = concat_rows(parts);
  return out;
}

#define TTT_INSTANTIATE(S)                                                                                        \
  template struct TTTLayerParams<S>;                                                                              \
  template TTTLayerParams<S> random_layer_params<S>(InnerKind, bool, Index, Index, Index, std::mt19937_64&);      \
  template TTTState<S> initial_state<S>(const TTTLayerParams<S>&);                                                \
  template Vec<S> inner_model_apply<S>(const InnerSpec<S>&, const InnerWeights<Mat<S>>&, const Vec<S>&,           \
                                       const Vec<S>&, const Vec<S>&);                                             \
  template S inner_loss<S>(const TTTLayerParams<S>&, const std::vector<InnerWeights<Mat<S>>>&, const Vec<S>&);    \
  template std::vector<InnerWeights<Mat<S>>> inner_grad<S>(const TTTLayerParams<S>&,                              \
                                                           const std::vector<InnerWeights<Mat<S>>>&, const Vec<S>&); \
  template S eta_gate<S>(const Vec<S>&, const Mat<S>&, S);                                                        \
  template S token_eta<S>(const TTTLayerParams<S>&, Index, const Vec<S>&);                                        \
  template Vec<S> ttt_step_primal<S>(TTTState<S>&, const Vec<S>&, const TTTLayerParams<S>&);                      \
  template LayerOutput<S> ttt_forward<S>(const Mat<S>&, const TTTLayerParams<S>&, Form);

TTT_INSTANTIATE(double)
TTT_INSTANTIATE(float)

#undef TTT_INSTANTIATE

}  // namespace ttt
