#pragma once

// Reference sequence layers used as equivalence oracles for the TTT layer:
// (unnormalized) linear attention, causal softmax attention and the
// Nadaraya-Watson estimator with an exponential kernel.

#include "ttt/tensor.hpp"
#include "ttt/ttt_layer.hpp"

namespace ttt {

/// Key/query/value projections, each head_dim x embed_dim.
template <typename S>
struct AttnParams {
  Mat<S> theta_k;
  Mat<S> theta_q;
  Mat<S> theta_v;

  void validate() const;
};

/// z_t = sum_{s<=t} v_s k_s^T q_t, evaluated with the running state
/// sum v_s k_s^T.
template <typename S>
Mat<S> linear_attention(const Mat<S>& x, const AttnParams<S>& p);

/// z_t = V softmax over s<=t of k_s^T q_t. No 1/sqrt(d) scaling.
template <typename S>
Mat<S> softmax_attention(const Mat<S>& x, const AttnParams<S>& p);

/// Normalized kernel weights of the estimator: column t holds
/// kappa(x_t, x_s) / sum_s' kappa(x_t, x_s') for s <= t, zero above.
/// `kernel_scale` is the proportionality constant of the kernel.
template <typename S>
Mat<S> nadaraya_watson_weights(const Mat<S>& x, const AttnParams<S>& p, S kernel_scale = S(1));

/// Kernel-weighted average of the label views theta_V x_s, s <= t.
template <typename S>
Mat<S> nadaraya_watson(const Mat<S>& x, const AttnParams<S>& p, S kernel_scale = S(1));

/// TTT layer configured as linear model, W0 = 0, fixed step 1/2 and the
/// given mini-batch size (defaults to T, i.e. batch GD).
template <typename S>
TTTLayerParams<S> linear_attention_equivalent(const AttnParams<S>& p, Index mini_batch);

/// max |Z_ttt - Z_linear_attention| for the configuration above.
/// `gradient_scale` is forwarded to the inner loop (1 outside mutation probes).
template <typename S>
S linear_attention_gap(const Mat<S>& x, const AttnParams<S>& p, Index mini_batch = 0, Form form = Form::Dual,
                       S gradient_scale = S(1));

/// max |Z_nadaraya_watson - Z_softmax_attention|.
template <typename S>
S kernel_regression_gap(const Mat<S>& x, const AttnParams<S>& p);

}  // namespace ttt
