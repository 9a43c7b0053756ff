#include "ttt/attention.hpp"

#include <cmath>

namespace ttt {

template <typename S>
void AttnParams<S>::validate() const {
  if (theta_k.rows() != theta_q.rows() || theta_k.cols() != theta_q.cols() || theta_v.cols() != theta_k.cols()) {
    throw DimensionError("AttnParams: theta_k " + shape_str(theta_k) + ", theta_q " + shape_str(theta_q) +
                         ", theta_v " + shape_str(theta_v));
  }
}

namespace {

template <typename S>
void check_input(const Mat<S>& x, const AttnParams<S>& p) {
  p.validate();
  if (x.rows() != p.theta_k.cols()) {
    throw DimensionError("attention input " + shape_str(x) + " for projections " + shape_str(p.theta_k));
  }
}

}  // namespace

template <typename S>
Mat<S> linear_attention(const Mat<S>& x, const AttnParams<S>& p) {
  check_input(x, p);
  const Mat<S> k = matmul(p.theta_k, x);
  const Mat<S> q = matmul(p.theta_q, x);
  const Mat<S> v = matmul(p.theta_v, x);
  Mat<S> state = Mat<S>::Zero(v.rows(), k.rows());
  Mat<S> z(v.rows(), x.cols());
  for (Index t = 0; t < x.cols(); ++t) {
    state.noalias() += v.col(t) * k.col(t).transpose();
    z.col(t).noalias() = state * q.col(t);
  }
  return z;
}

template <typename S>
Mat<S> softmax_attention(const Mat<S>& x, const AttnParams<S>& p) {
  check_input(x, p);
  const Mat<S> k = matmul(p.theta_k, x);
  const Mat<S> q = matmul(p.theta_q, x);
  const Mat<S> v = matmul(p.theta_v, x);
  return matmul(v, causal_softmax_cols(matmul(transpose(k), q)));
}

template <typename S>
Mat<S> nadaraya_watson_weights(const Mat<S>& x, const AttnParams<S>& p, S kernel_scale) {
  check_input(x, p);
  const Mat<S> k = matmul(p.theta_k, x);
  const Mat<S> q = matmul(p.theta_q, x);
  const Index n = x.cols();
  Mat<S> w = Mat<S>::Zero(n, n);
  for (Index t = 0; t < n; ++t) {
    // kappa(x_t, x_s) = c * exp(k_s . q_t), shifted by the largest exponent
    // so the quotient is evaluated without overflow.
    S shift = k.col(0).dot(q.col(t));
    for (Index s = 1; s <= t; ++s) shift = std::max(shift, k.col(s).dot(q.col(t)));
    S total = 0;
    for (Index s = 0; s <= t; ++s) {
      w(s, t) = kernel_scale * std::exp(k.col(s).dot(q.col(t)) - shift);
      total += w(s, t);
    }
    for (Index s = 0; s <= t; ++s) w(s, t) /= total;
  }
  return w;
}

template <typename S>
Mat<S> nadaraya_watson(const Mat<S>& x, const AttnParams<S>& p, S kernel_scale) {
  const Mat<S> w = nadaraya_watson_weights(x, p, kernel_scale);
  const Mat<S> y = matmul(p.theta_v, x);
  Mat<S> z = Mat<S>::Zero(y.rows(), x.cols());
  for (Index t = 0; t < x.cols(); ++t) {
    for (Index s = 0; s <= t; ++s) z.col(t) += w(s, t) * y.col(s);
  }
  return z;
}

template <typename S>
TTTLayerParams<S> linear_attention_equivalent(const AttnParams<S>& p, Index mini_batch) {
  p.validate();
  const Index hd = p.theta_k.rows();
  const Index d = p.theta_k.cols();
  TTTLayerParams<S> layer;
  layer.inner.kind = InnerKind::Linear;
  layer.inner.bare = true;
  layer.mini_batch = mini_batch;
  layer.eta_base = S(0.5);
  layer.learnable_eta = false;
  TTTHeadParams<S> h;
  h.theta_k = p.theta_k;
  h.theta_q = p.theta_q;
  h.theta_v = p.theta_v;
  h.init.w1 = Mat<S>::Zero(hd, hd);
  h.ln_gamma = Mat<S>::Ones(hd, 1);
  h.ln_beta = Mat<S>::Zero(hd, 1);
  h.theta_lr = Mat<S>::Zero(1, d);
  layer.heads.push_back(std::move(h));
  return layer;
}

template <typename S>
S linear_attention_gap(const Mat<S>& x, const AttnParams<S>& p, Index mini_batch, Form form,
                       S gradient_scale) {
  // Runs the single-head sequence kernel directly so projections may be
  // low rank (a one-head layer would require head_dim == embed_dim).
  TTTLayerParams<S> layer = linear_attention_equivalent(p, mini_batch > 0 ? mini_batch : x.cols());
  layer.inner.gradient_scale = gradient_scale;
  const auto& h = layer.heads.front();
  const auto views = make_views<S, Mat<S>>(x, h.theta_k, h.theta_q, h.theta_v, nullptr, layer.eta_base);
  const auto r = ttt_sequence<S, Mat<S>>(layer.inner, form, layer.mini_batch, h.init, {h.ln_gamma, h.ln_beta}, views);
  const Mat<S> z_attn = linear_attention(x, p);
  return x.cols() == 0 ? S(0) : (r.z - z_attn).cwiseAbs().maxCoeff();
}

template <typename S>
S kernel_regression_gap(const Mat<S>& x, const AttnParams<S>& p) {
  return (nadaraya_watson(x, p) - softmax_attention(x, p)).cwiseAbs().maxCoeff();
}

#define TTT_INSTANTIATE(S)                                                                             \
  template struct AttnParams<S>;                                                                       \
  template Mat<S> linear_attention<S>(const Mat<S>&, const AttnParams<S>&);                            \
  template Mat<S> softmax_attention<S>(const Mat<S>&, const AttnParams<S>&);                           \
  template Mat<S> nadaraya_watson_weights<S>(const Mat<S>&, const AttnParams<S>&, S);                  \
  template Mat<S> nadaraya_watson<S>(const Mat<S>&, const AttnParams<S>&, S);                          \
  template TTTLayerParams<S> linear_attention_equivalent<S>(const AttnParams<S>&, Index);              \
  template S linear_attention_gap<S>(const Mat<S>&, const AttnParams<S>&, Index, Form, S);                   \
  template S kernel_regression_gap<S>(const Mat<S>&, const AttnParams<S>&);

TTT_INSTANTIATE(double)
TTT_INSTANTIATE(float)

#undef TTT_INSTANTIATE

}  // namespace ttt
