#pragma once

// Test-time-training layer. The hidden state is the weight set of a small
// inner model, trained token by token with gradient descent on the
// reconstruction loss ||f(theta_K x; W) - theta_V x||^2 and read out as
// z = f(theta_Q x; W).
//
// The sequence kernels (`primal_sequence`, `dual_sequence`) are templates
// over the value type so the same code runs on Mat<S> (eager) and Var<S>
// (taped, for outer-loop training).

#include "ttt/tensor.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ttt {

enum class InnerKind { Linear, MLP2 };
enum class Form { Primal, Dual };

std::string to_string(InnerKind kind);
std::string to_string(Form form);
InnerKind inner_kind_from_string(const std::string& name);
Form form_from_string(const std::string& name);

/// Hidden-layer width of the MLP2 inner model relative to head_dim.
inline constexpr Index kMlpExpansion = 4;

template <typename S>
struct InnerSpec {
  InnerKind kind = InnerKind::Linear;
  /// Disables the LN + residual wrapper: f(x) = f_res(x).
  bool bare = false;
  S ln_eps = S(kDefaultLnEps);
  /// Multiplies every inner gradient. Always 1 outside of fault-injection
  /// probes.
  S gradient_scale = S(1);
};

/// Inner-model weights. `w2` is empty for the linear model.
template <typename V>
struct InnerWeights {
  V w1;
  V w2;
};

/// Per-head inputs for a sequence (columns are tokens).
template <typename V>
struct HeadViews {
  V train;  // head_dim x n, theta_K x
  V label;  // head_dim x n, theta_V x
  V test;   // head_dim x n, theta_Q x
  V eta;    // 1 x n, per-token step size
};

template <typename V>
struct InnerNorm {
  V gamma;  // head_dim x 1
  V beta;   // head_dim x 1
};

template <typename V>
struct SequenceResult {
  V z;
  InnerWeights<V> final_weights;
};

// ---------------------------------------------------------------------------
// Generic kernels
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename V>
V inner_wrap(const InnerSpec<S>& spec, const InnerNorm<V>& ln, const V& x, const V& out) {
  if (spec.bare) return out;
  return add(x, layer_norm_cols<S>(out, ln.gamma, ln.beta, spec.ln_eps));
}

}  // namespace detail

/// f(x; W) applied to every column of x.
template <typename S, typename V>
V inner_apply(const InnerSpec<S>& spec, const InnerWeights<V>& w, const InnerNorm<V>& ln, const V& x) {
  if (spec.kind == InnerKind::Linear) return detail::inner_wrap(spec, ln, x, matmul(w.w1, x));
  V h = gelu(matmul(w.w1, x));
  return detail::inner_wrap(spec, ln, x, matmul(w.w2, h));
}

/// Gradient-side factors of the inner loss at fixed weights, for a batch of
/// tokens (columns). With `eta` given, column t is scaled by eta_t, which is
/// what the dual form needs. Per-token gradients are
///   linear: G_t = d_out_t train_t^T
///   MLP2:   G1_t = d_z1_t train_t^T,  G2_t = d_out_t hidden_t^T
template <typename V>
struct InnerBackward {
  V d_out;   // dl/d f_res(x)
  V d_z1;    // MLP2: dl/d (W1 x)
  V z1;      // MLP2 pre-activation
  V hidden;  // MLP2: gelu(z1)
};

template <typename S, typename V>
InnerBackward<V> inner_backward(const InnerSpec<S>& spec, const InnerWeights<V>& w, const InnerNorm<V>& ln,
                                const V& train, const V& label, const V* eta) {
  InnerBackward<V> r;
  V out;
  if (spec.kind == InnerKind::Linear) {
    out = matmul(w.w1, train);
  } else {
    r.z1 = matmul(w.w1, train);
    r.hidden = gelu(r.z1);
    out = matmul(w.w2, r.hidden);
  }
  V f = detail::inner_wrap(spec, ln, train, out);
  V d_f = scale(sub(f, label), S(2) * spec.gradient_scale);
  r.d_out = spec.bare ? d_f : layer_norm_cols_vjp<S>(out, ln.gamma, spec.ln_eps, d_f).dx;
  if (eta != nullptr) r.d_out = scale_cols(r.d_out, *eta);
  if (spec.kind == InnerKind::MLP2) r.d_z1 = hadamard(gelu_prime(r.z1), matmul(transpose(w.w2), r.d_out));
  return r;
}

/// Sum over columns of the (optionally eta-scaled) per-token gradients.
template <typename S, typename V>
InnerWeights<V> inner_grad_sum(const InnerSpec<S>& spec, const InnerBackward<V>& bw, const V& train) {
  InnerWeights<V> g;
  if (spec.kind == InnerKind::Linear) {
    g.w1 = matmul(bw.d_out, transpose(train));
  } else {
    g.w1 = matmul(bw.d_z1, transpose(train));
    g.w2 = matmul(bw.d_out, transpose(bw.hidden));
  }
  return g;
}

template <typename S, typename V>
InnerWeights<V> weights_minus(const InnerSpec<S>& spec, const InnerWeights<V>& w, const InnerWeights<V>& g) {
  InnerWeights<V> out;
  out.w1 = sub(w.w1, g.w1);
  if (spec.kind == InnerKind::MLP2) out.w2 = sub(w.w2, g.w2);
  return out;
}

/// One mini-batch in dual form: the end-of-batch weights and every output
/// token come from matmuls against the anchor weights plus a causally masked
/// correction. Per-token weights and gradients are never formed.
template <typename S, typename V>
SequenceResult<V> dual_chunk(const InnerSpec<S>& spec, const InnerWeights<V>& anchor, const InnerNorm<V>& ln,
                             const HeadViews<V>& views) {
  const InnerBackward<V> bw = inner_backward(spec, anchor, ln, views.train, views.label, &views.eta);
  SequenceResult<V> r;
  r.final_weights = weights_minus(spec, anchor, inner_grad_sum(spec, bw, views.train));

  V out;
  if (spec.kind == InnerKind::Linear) {
    V attn = causal_mask(matmul(transpose(views.train), views.test));
    out = sub(matmul(anchor.w1, views.test), matmul(bw.d_out, attn));
  } else {
    V attn1 = causal_mask(matmul(transpose(views.train), views.test));
    V z1 = sub(matmul(anchor.w1, views.test), matmul(bw.d_z1, attn1));
    V h = gelu(z1);
    V attn2 = causal_mask(matmul(transpose(bw.hidden), h));
    out = sub(matmul(anchor.w2, h), matmul(bw.d_out, attn2));
  }
  r.z = detail::inner_wrap(spec, ln, views.test, out);
  return r;
}

/// One mini-batch in primal form: every gradient is taken at the anchor, the
/// weights are stepped token by token, and each output reads the current
/// weights.
template <typename S, typename V>
SequenceResult<V> primal_chunk(const InnerSpec<S>& spec, const InnerWeights<V>& anchor, const InnerNorm<V>& ln,
                               const HeadViews<V>& views) {
  InnerWeights<V> w = anchor;
  std::vector<V> outs;
  const Index n = views.train.cols();
  outs.reserve(static_cast<size_t>(n));
  for (Index t = 0; t < n; ++t) {
    V xt = slice_cols(views.train, t, 1);
    V yt = slice_cols(views.label, t, 1);
    V et = slice_cols(views.eta, t, 1);
    const InnerBackward<V> bw = inner_backward(spec, anchor, ln, xt, yt, &et);
    w = weights_minus(spec, w, inner_grad_sum(spec, bw, xt));
    outs.push_back(inner_apply(spec, w, ln, slice_cols(views.test, t, 1)));
  }
  return {concat_cols(outs), w};
}

namespace detail {

template <typename V>
std::vector<V> pack_chunk(const InnerWeights<V>& w, const InnerNorm<V>& ln, const HeadViews<V>& v, bool mlp,
                          bool bare) {
  std::vector<V> in = {w.w1, v.train, v.label, v.test, v.eta};
  if (mlp) in.push_back(w.w2);
  if (!bare) {
    in.push_back(ln.gamma);
    in.push_back(ln.beta);
  }
  return in;
}

template <typename V>
void unpack_chunk(const std::vector<V>& in, bool mlp, bool bare, InnerWeights<V>& w, InnerNorm<V>& ln,
                  HeadViews<V>& v) {
  size_t i = 0;
  w.w1 = in[i++];
  v.train = in[i++];
  v.label = in[i++];
  v.test = in[i++];
  v.eta = in[i++];
  if (mlp) w.w2 = in[i++];
  if (!bare) {
    ln.gamma = in[i++];
    ln.beta = in[i++];
  }
}

template <typename V>
HeadViews<V> slice_views(const HeadViews<V>& v, Index start, Index count) {
  return {slice_cols(v.train, start, count), slice_cols(v.label, start, count),
          slice_cols(v.test, start, count), slice_cols(v.eta, start, count)};
}

}  // namespace detail

inline void require_divisible(Index length, Index mini_batch) {
  if (mini_batch < 1) throw std::invalid_argument("mini-batch size must be >= 1");
  if (length % mini_batch != 0) {
    throw std::invalid_argument("sequence length " + std::to_string(length) +
                                " is not divisible by mini-batch size " + std::to_string(mini_batch));
  }
}

/// Runs one head over a whole sequence, mini-batch by mini-batch. With
/// `checkpoint_time` each mini-batch is a checkpoint segment: on a tape only
/// the boundary weights are kept and the interior is recomputed on backward.
template <typename S, typename V>
SequenceResult<V> ttt_sequence(const InnerSpec<S>& spec, Form form, Index mini_batch, const InnerWeights<V>& init,
                               const InnerNorm<V>& ln, const HeadViews<V>& views, bool checkpoint_time = false) {
  const Index length = views.train.cols();
  require_divisible(length, mini_batch);
  const bool mlp = spec.kind == InnerKind::MLP2;
  const bool bare = spec.bare;

  auto body = [spec, form, mlp, bare](const std::vector<V>& in) -> std::vector<V> {
    InnerWeights<V> w;
    InnerNorm<V> norm;
    HeadViews<V> v;
    detail::unpack_chunk(in, mlp, bare, w, norm, v);
    const SequenceResult<V> r =
        form == Form::Dual ? dual_chunk(spec, w, norm, v) : primal_chunk(spec, w, norm, v);
    std::vector<V> out = {r.z, r.final_weights.w1};
    if (mlp) out.push_back(r.final_weights.w2);
    return out;
  };

  InnerWeights<V> w = init;
  std::vector<V> zs;
  for (Index start = 0; start < length; start += mini_batch) {
    const HeadViews<V> chunk = length == mini_batch ? views : detail::slice_views(views, start, mini_batch);
    std::vector<V> in = detail::pack_chunk(w, ln, chunk, mlp, bare);
    std::vector<V> out = checkpoint_time ? checkpoint(in, body) : body(in);
    zs.push_back(out[0]);
    w.w1 = out[1];
    if (mlp) w.w2 = out[2];
  }
  V z = zs.size() == 1 ? zs.front() : concat_cols(zs);
  return {z, w};
}

// ---------------------------------------------------------------------------
// Layer parameters and eager API
// ---------------------------------------------------------------------------

template <typename S>
struct TTTHeadParams {
  Mat<S> theta_k;   // head_dim x embed_dim
  Mat<S> theta_q;   // head_dim x embed_dim
  Mat<S> theta_v;   // head_dim x embed_dim
  InnerWeights<Mat<S>> init;  // W0
  Mat<S> ln_gamma;  // head_dim x 1
  Mat<S> ln_beta;   // head_dim x 1
  Mat<S> theta_lr;  // 1 x embed_dim
};

template <typename S>
struct TTTLayerParams {
  InnerSpec<S> inner;
  Index mini_batch = 16;
  S eta_base = S(1);
  /// When false every token uses eta_base; otherwise eta_base * sigmoid(theta_lr . x).
  bool learnable_eta = true;
  std::vector<TTTHeadParams<S>> heads;

  Index num_heads() const { return static_cast<Index>(heads.size()); }
  Index head_dim() const { return heads.empty() ? 0 : heads.front().theta_k.rows(); }
  Index embed_dim() const { return heads.empty() ? 0 : heads.front().theta_k.cols(); }

  /// Throws std::invalid_argument when shapes or settings are inconsistent.
  void validate() const;
};

/// Default step size: 1 for the linear inner model, 0.1 for the MLP.
template <typename S>
S default_eta_base(InnerKind kind) {
  return kind == InnerKind::Linear ? S(1) : S(0.1);
}

/// Random layer parameters: projections ~ N(0, 1/embed_dim), W0 = 0 for the
/// linear model and U(+-1/sqrt(fan_in)) for the MLP, LN at identity,
/// theta_lr = 0.
template <typename S>
TTTLayerParams<S> random_layer_params(InnerKind kind, bool bare, Index embed_dim, Index heads, Index mini_batch,
                                      std::mt19937_64& rng);

template <typename S>
Index inner_hidden_dim(InnerKind kind, Index head_dim) {
  return kind == InnerKind::Linear ? head_dim : kMlpExpansion * head_dim;
}

/// Hidden state for token-by-token (streaming) evaluation.
template <typename S>
struct TTTState {
  std::vector<InnerWeights<Mat<S>>> weights;  // current W per head
  std::vector<InnerWeights<Mat<S>>> anchor;   // W at the last mini-batch boundary
  Index pos = 0;                              // tokens consumed in the current mini-batch
};

template <typename S>
TTTState<S> initial_state(const TTTLayerParams<S>& params);

template <typename S>
Vec<S> inner_model_apply(const InnerSpec<S>& spec, const InnerWeights<Mat<S>>& w, const Vec<S>& x,
                         const Vec<S>& ln_gamma, const Vec<S>& ln_beta);

/// Reconstruction loss summed over heads.
template <typename S>
S inner_loss(const TTTLayerParams<S>& params, const std::vector<InnerWeights<Mat<S>>>& w, const Vec<S>& x);

/// Exact gradient of inner_loss with respect to every head's weights.
template <typename S>
std::vector<InnerWeights<Mat<S>>> inner_grad(const TTTLayerParams<S>& params,
                                             const std::vector<InnerWeights<Mat<S>>>& anchor, const Vec<S>& x);

template <typename S>
S eta_gate(const Vec<S>& x, const Mat<S>& theta_lr, S eta_base);

/// Step size the layer applies to token x in head h.
template <typename S>
S token_eta(const TTTLayerParams<S>& params, Index head, const Vec<S>& x);

/// Consumes one token: gradient at the anchor, step from the current
/// weights, read out with the stepped weights. Returns z (embed_dim).
template <typename S>
Vec<S> ttt_step_primal(TTTState<S>& state, const Vec<S>& x, const TTTLayerParams<S>& params);

template <typename S>
struct LayerOutput {
  Mat<S> z;                                         // embed_dim x T
  std::vector<InnerWeights<Mat<S>>> final_weights;  // per head
};

template <typename S>
LayerOutput<S> ttt_forward(const Mat<S>& x, const TTTLayerParams<S>& params, Form form);

template <typename S>
LayerOutput<S> ttt_forward_primal(const Mat<S>& x, const TTTLayerParams<S>& params) {
  return ttt_forward(x, params, Form::Primal);
}

template <typename S>
LayerOutput<S> ttt_forward_dual(const Mat<S>& x, const TTTLayerParams<S>& params) {
  return ttt_forward(x, params, Form::Dual);
}

/// Heads run independently; outputs are stacked in head order.
template <typename S>
Mat<S> multihead_forward(const Mat<S>& x, const TTTLayerParams<S>& params, Form form) {
  return ttt_forward(x, params, form).z;
}

/// Builds the per-head views for a sequence x (embed_dim x T).
template <typename S, typename V>
HeadViews<V> make_views(const V& x, const V& theta_k, const V& theta_q, const V& theta_v, const V* theta_lr,
                        S eta_base) {
  HeadViews<V> v;
  v.train = matmul(theta_k, x);
  v.label = matmul(theta_v, x);
  v.test = matmul(theta_q, x);
  if (theta_lr != nullptr) {
    v.eta = scale(sigmoid(matmul(*theta_lr, x)), eta_base);
  } else {
    v.eta = constant_like(x, Mat<S>(Mat<S>::Constant(1, x.cols(), eta_base)));
  }
  return v;
}

}  // namespace ttt
