#pragma once

// Byte-level language model built from residual blocks around a sequence
// layer (TTT-Linear, TTT-MLP or softmax attention). Two block flavors:
//
//   TransformerStyle:  X += Wo LN(seq(LN X))          (LN before Wo only for TTT)
//   MambaStyle:        U = LN X
//                      KQ = theta_KQ U, keys = conv_k(KQ), queries = conv_q(KQ)
//                      X += Wo (gelu(W_gate U) * LN(seq(keys, queries, theta_V U)))
//
// each followed by X += W2 gelu(W1 LN X). The forward pass is written once
// over the value type, so it runs eagerly on Mat<S> and taped on Var<S>.

#include "ttt/autodiff.hpp"
#include "ttt/tensor.hpp"
#include "ttt/ttt_layer.hpp"

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ttt {

enum class BackboneKind { TransformerStyle, MambaStyle };
enum class SeqLayerKind { TTTLinear, TTTMLP, SoftmaxAttention };

std::string to_string(BackboneKind kind);
std::string to_string(SeqLayerKind kind);
BackboneKind backbone_kind_from_string(const std::string& name);
SeqLayerKind seq_layer_kind_from_string(const std::string& name);

inline bool is_ttt(SeqLayerKind kind) { return kind != SeqLayerKind::SoftmaxAttention; }

struct BlockConfig {
  BackboneKind backbone = BackboneKind::MambaStyle;
  SeqLayerKind seq_layer = SeqLayerKind::TTTLinear;
  Index embed_dim = 64;
  Index heads = 4;
  /// Hidden width of the block MLP; 0 means 4 * embed_dim.
  Index mlp_hidden = 0;
  Index conv_width = 4;

  // TTT layer settings; ignored for softmax attention.
  Index mini_batch = 16;
  /// Inner-loop base step size; 0 picks 1 (linear) or 0.1 (MLP).
  double eta_base = 0;
  bool learnable_eta = true;
  /// When false, W0 stays at its initial value (zero for the linear model).
  bool learnable_init = true;
  /// Drops the LN + residual wrapper around the inner model.
  bool bare = false;

  Index head_dim() const { return heads > 0 ? embed_dim / heads : 0; }
  Index mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * embed_dim; }
  InnerKind inner_kind() const { return seq_layer == SeqLayerKind::TTTMLP ? InnerKind::MLP2 : InnerKind::Linear; }
  double resolved_eta_base() const { return eta_base > 0 ? eta_base : default_eta_base<double>(inner_kind()); }

  void validate() const;
};

struct ModelConfig {
  Index vocab_size = 256;
  Index n_blocks = 2;
  BlockConfig block;
  Index context = 64;
  /// Learned absolute positional embedding (context x embed_dim table).
  bool positional_embedding = false;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename V>
struct SeqHeadParams {
  V theta_k;   // head_dim x embed_dim; the combined key/query projection in MambaStyle
  V theta_q;   // TransformerStyle only
  V theta_v;
  V init_w1;   // TTT: W0
  V init_w2;   // TTT-MLP: W0 second layer
  V ln_gamma;  // TTT inner LN (absent in bare mode)
  V ln_beta;
  V theta_lr;  // 1 x embed_dim, learnable step size
};

template <typename V>
struct BlockParams {
  V seq_ln_gamma, seq_ln_beta;
  std::vector<SeqHeadParams<V>> heads;
  V conv_k, conv_q;  // MambaStyle: embed_dim x conv_width
  V gate;            // MambaStyle: embed_dim x embed_dim
  V out_ln_gamma, out_ln_beta;  // TTT layers only
  V wo;
  V mlp_ln_gamma, mlp_ln_beta;
  V mlp_w1, mlp_w2;
};

template <typename V>
struct ModelParams {
  V embed;  // embed_dim x vocab
  V pos;    // embed_dim x context (optional)
  std::vector<BlockParams<V>> blocks;
  V final_ln_gamma, final_ln_beta;
  V head;   // vocab x embed_dim
};

struct ParamInfo {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  /// Updated by the optimizer.
  bool trainable = true;
};

namespace detail {

template <typename P, typename Fn>
void visit_params(const ModelConfig& cfg, P& p, Fn&& fn) {
  const BlockConfig& b = cfg.block;
  const Index d = b.embed_dim;
  const Index hd = b.head_dim();
  const bool ttt = is_ttt(b.seq_layer);
  const bool mamba = b.backbone == BackboneKind::MambaStyle;
  const Index inner_hidden = inner_hidden_dim<double>(b.inner_kind(), hd);
  auto visit = [&](std::string name, Index r, Index c, auto& v, bool trainable = true) {
    fn(ParamInfo{std::move(name), r, c, trainable}, v);
  };

  visit("embed", d, cfg.vocab_size, p.embed);
  if (cfg.positional_embedding) visit("pos", d, cfg.context, p.pos);
  for (Index i = 0; i < static_cast<Index>(p.blocks.size()); ++i) {
    auto& blk = p.blocks[static_cast<size_t>(i)];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    visit(pre + "seq_ln.gamma", d, 1, blk.seq_ln_gamma);
    visit(pre + "seq_ln.beta", d, 1, blk.seq_ln_beta);
    for (Index h = 0; h < static_cast<Index>(blk.heads.size()); ++h) {
      auto& hp = blk.heads[static_cast<size_t>(h)];
      const std::string hpre = pre + "heads." + std::to_string(h) + ".";
      visit(hpre + (mamba ? "theta_kq" : "theta_k"), hd, d, hp.theta_k);
      if (!mamba) visit(hpre + "theta_q", hd, d, hp.theta_q);
      visit(hpre + "theta_v", hd, d, hp.theta_v);
      if (ttt) {
        visit(hpre + "init.w1", inner_hidden, hd, hp.init_w1, b.learnable_init);
        if (b.seq_layer == SeqLayerKind::TTTMLP) visit(hpre + "init.w2", hd, inner_hidden, hp.init_w2, b.learnable_init);
        if (!b.bare) {
          visit(hpre + "ln.gamma", hd, 1, hp.ln_gamma);
          visit(hpre + "ln.beta", hd, 1, hp.ln_beta);
        }
        if (b.learnable_eta) visit(hpre + "theta_lr", 1, d, hp.theta_lr);
      }
    }
    if (mamba) {
      visit(pre + "conv_k", d, b.conv_width, blk.conv_k);
      visit(pre + "conv_q", d, b.conv_width, blk.conv_q);
      visit(pre + "gate", d, d, blk.gate);
    }
    if (ttt) {
      visit(pre + "out_ln.gamma", d, 1, blk.out_ln_gamma);
      visit(pre + "out_ln.beta", d, 1, blk.out_ln_beta);
    }
    visit(pre + "wo", d, d, blk.wo);
    visit(pre + "mlp_ln.gamma", d, 1, blk.mlp_ln_gamma);
    visit(pre + "mlp_ln.beta", d, 1, blk.mlp_ln_beta);
    visit(pre + "mlp.w1", b.mlp_width(), d, blk.mlp_w1);
    visit(pre + "mlp.w2", d, b.mlp_width(), blk.mlp_w2);
  }
  visit("final_ln.gamma", d, 1, p.final_ln_gamma);
  visit("final_ln.beta", d, 1, p.final_ln_beta);
  visit("head", cfg.vocab_size, d, p.head);
}

}  // namespace detail

/// Calls fn(ParamInfo, V&) for every parameter the config uses, in a fixed
/// order. Blocks and heads must already be sized (see `empty_params`).
template <typename V, typename Fn>
void for_each_param(const ModelConfig& cfg, ModelParams<V>& p, Fn&& fn) {
  detail::visit_params(cfg, p, fn);
}

template <typename V, typename Fn>
void for_each_param(const ModelConfig& cfg, const ModelParams<V>& p, Fn&& fn) {
  detail::visit_params(cfg, p, fn);
}

/// Parameter tree with the right number of blocks and heads, values unset.
template <typename V>
ModelParams<V> empty_params(const ModelConfig& cfg) {
  ModelParams<V> p;
  p.blocks.resize(static_cast<size_t>(cfg.n_blocks));
  for (auto& b : p.blocks) b.heads.resize(static_cast<size_t>(cfg.block.heads));
  return p;
}

/// Every parameter shape the config implies, in visiting order.
std::vector<ParamInfo> param_layout(const ModelConfig& cfg);

/// Number of scalar parameters, from the closed-form count in the README.
Index param_count(const ModelConfig& cfg);

/// Random initialization. Residual output projections are N(0, 0.02^2 / (2
/// n_blocks)), the output head is zero, LNs start at identity, theta_lr at 0,
/// W0 is U(+-1/sqrt(fan_in)) except for the bare linear model (W0 = 0).
template <typename S>
ModelParams<Mat<S>> init_params(const ModelConfig& cfg, std::mt19937_64& rng);

/// Sets every residual-branch output projection (Wo, MLP W2) to zero, which
/// makes each block an identity map.
template <typename S>
void zero_residual_branches(ModelParams<Mat<S>>& p);

/// Re-creates the parameter tree as tape variables. Non-trainable parameters
/// are recorded as constants.
template <typename S>
ModelParams<Var<S>> bind_params(const ModelConfig& cfg, const ModelParams<Mat<S>>& p, Tape<S>& tape);

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardOptions {
  Form form = Form::Dual;
  /// Each TTT mini-batch becomes a checkpoint segment (taped runs only).
  bool checkpoint_time = false;
  /// Multiplies the inner step size; used for the step-size warmup.
  double eta_scale = 1.0;
};

void check_tokens(std::span<const int> tokens, Index vocab_size);

namespace detail {

template <typename S, typename V>
V ln(const V& x, const V& g, const V& b) {
  return layer_norm_cols<S>(x, g, b, S(kDefaultLnEps));
}

template <typename S, typename V>
V seq_head(const BlockConfig& cfg, const SeqHeadParams<V>& hp, const V& u, const V& keys, const V& queries,
           const V& values, const ForwardOptions& opt) {
  if (!is_ttt(cfg.seq_layer)) return matmul(values, causal_softmax_cols(matmul(transpose(keys), queries)));

  InnerSpec<S> spec;
  spec.kind = cfg.inner_kind();
  spec.bare = cfg.bare;
  const S eta_base = static_cast<S>(cfg.resolved_eta_base() * opt.eta_scale);
  HeadViews<V> views;
  views.train = keys;
  views.test = queries;
  views.label = values;
  if (cfg.learnable_eta) {
    views.eta = scale(sigmoid(matmul(hp.theta_lr, u)), eta_base);
  } else {
    views.eta = constant_like(u, Mat<S>(Mat<S>::Constant(1, u.cols(), eta_base)));
  }
  InnerWeights<V> init{hp.init_w1, hp.init_w2};
  InnerNorm<V> norm{hp.ln_gamma, hp.ln_beta};
  return ttt_sequence<S, V>(spec, opt.form, cfg.mini_batch, init, norm, views, opt.checkpoint_time).z;
}

}  // namespace detail

/// One residual block on X (embed_dim x T).
template <typename S, typename V>
V block_forward(const V& x, const BlockConfig& cfg, const BlockParams<V>& p, const ForwardOptions& opt = {}) {
  const Index hd = cfg.head_dim();
  const bool mamba = cfg.backbone == BackboneKind::MambaStyle;
  const V u = detail::ln<S>(x, p.seq_ln_gamma, p.seq_ln_beta);

  V keys_all, queries_all;
  if (mamba) {
    std::vector<V> kq;
    for (const auto& hp : p.heads) kq.push_back(matmul(hp.theta_k, u));
    const V stream = kq.size() == 1 ? kq.front() : concat_rows(kq);
    keys_all = causal_conv1d(stream, p.conv_k);
    queries_all = causal_conv1d(stream, p.conv_q);
  }
  std::vector<V> zs;
  for (Index h = 0; h < static_cast<Index>(p.heads.size()); ++h) {
    const auto& hp = p.heads[static_cast<size_t>(h)];
    const V keys = mamba ? slice_rows(keys_all, h * hd, hd) : matmul(hp.theta_k, u);
    const V queries = mamba ? slice_rows(queries_all, h * hd, hd) : matmul(hp.theta_q, u);
    zs.push_back(detail::seq_head<S>(cfg, hp, u, keys, queries, matmul(hp.theta_v, u), opt));
  }
  V z = zs.size() == 1 ? zs.front() : concat_rows(zs);
  if (is_ttt(cfg.seq_layer)) z = detail::ln<S>(z, p.out_ln_gamma, p.out_ln_beta);
  if (mamba) z = hadamard(gelu(matmul(p.gate, u)), z);
  V y = add(x, matmul(p.wo, z));

  const V m = detail::ln<S>(y, p.mlp_ln_gamma, p.mlp_ln_beta);
  return add(y, matmul(p.mlp_w2, gelu(matmul(p.mlp_w1, m))));
}

/// Logits (vocab x T) for a token sequence.
template <typename S, typename V>
V lm_forward(std::span<const int> tokens, const ModelConfig& cfg, const ModelParams<V>& p,
             const ForwardOptions& opt = {}) {
  check_tokens(tokens, cfg.vocab_size);
  if (cfg.positional_embedding && static_cast<Index>(tokens.size()) > cfg.context) {
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds the positional table (" + std::to_string(cfg.context) + ")");
  }
  V x = gather_cols(p.embed, tokens);
  if (cfg.positional_embedding) x = add(x, slice_cols(p.pos, 0, static_cast<Index>(tokens.size())));
  for (const auto& blk : p.blocks) x = block_forward<S>(x, cfg.block, blk, opt);
  return matmul(p.head, detail::ln<S>(x, p.final_ln_gamma, p.final_ln_beta));
}

/// Mean cross-entropy of logits column t against token t+1 (1x1).
template <typename V>
V next_token_loss(const V& logits, std::span<const int> tokens) {
  const Index n = static_cast<Index>(tokens.size());
  if (n < 2) throw std::invalid_argument("next-token loss needs at least 2 tokens, got " + std::to_string(n));
  if (logits.cols() != n) {
    throw DimensionError("logits " + shape_str(logits.rows(), logits.cols()) + " for " + std::to_string(n) +
                         " tokens");
  }
  return cross_entropy(slice_cols(logits, 0, n - 1), tokens.subspan(1));
}

/// Per-position negative log-likelihood of token t+1 given the prefix
/// through t, t = 0..T-2.
template <typename S>
std::vector<S> next_token_nll(const Mat<S>& logits, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// Streaming decoding
// ---------------------------------------------------------------------------

/// Token-by-token evaluation with recurrent state: TTT inner weights, conv
/// history and (for attention) the key/value cache. Always uses the primal
/// update, so its logits match the full-sequence forward.
template <typename S>
class StreamingDecoder {
 public:
  StreamingDecoder(const ModelConfig& cfg, const ModelParams<Mat<S>>& params);

  /// Consumes one token and returns the logits for the next one (vocab).
  Vec<S> step(int token);
  Index position() const { return pos_; }
  void reset();

 private:
  struct HeadState {
    InnerWeights<Mat<S>> weights;
    InnerWeights<Mat<S>> anchor;
    Mat<S> keys;    // attention cache, head_dim x t
    Mat<S> values;
  };
  struct BlockState {
    std::vector<HeadState> heads;
    Mat<S> history;  // last conv_width-1 columns of the key/query stream
  };

  Mat<S> block_step(const Mat<S>& x, const BlockParams<Mat<S>>& p, BlockState& st);

  const ModelConfig cfg_;
  const ModelParams<Mat<S>>& p_;
  std::vector<BlockState> state_;
  Index pos_ = 0;
};

}  // namespace ttt
