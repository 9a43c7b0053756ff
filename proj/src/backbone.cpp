#include "ttt/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace ttt {

std::string to_string(BackboneKind kind) { return kind == BackboneKind::MambaStyle ? "mamba" : "transformer"; }

std::string to_string(SeqLayerKind kind) {
  switch (kind) {
    case SeqLayerKind::TTTLinear: return "ttt_linear";
    case SeqLayerKind::TTTMLP: return "ttt_mlp";
    case SeqLayerKind::SoftmaxAttention: return "attention";
  }
  return "?";
}

BackboneKind backbone_kind_from_string(const std::string& name) {
  if (name == "transformer") return BackboneKind::TransformerStyle;
  if (name == "mamba") return BackboneKind::MambaStyle;
  throw std::invalid_argument("unknown backbone '" + name + "' (expected transformer|mamba)");
}

SeqLayerKind seq_layer_kind_from_string(const std::string& name) {
  if (name == "ttt_linear") return SeqLayerKind::TTTLinear;
  if (name == "ttt_mlp") return SeqLayerKind::TTTMLP;
  if (name == "attention") return SeqLayerKind::SoftmaxAttention;
  throw std::invalid_argument("unknown sequence layer '" + name + "' (expected ttt_linear|ttt_mlp|attention)");
}

void BlockConfig::validate() const {
  if (embed_dim < 1 || heads < 1) throw std::invalid_argument("embed_dim and heads must be positive");
  if (embed_dim % heads != 0) {
    throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                                std::to_string(heads));
  }
  if (conv_width < 1) throw std::invalid_argument("conv_width must be >= 1");
  if (mlp_hidden < 0) throw std::invalid_argument("mlp_hidden must be >= 0");
  if (is_ttt(seq_layer)) {
    if (mini_batch < 1) throw std::invalid_argument("mini_batch must be >= 1");
    if (eta_base < 0) throw std::invalid_argument("eta_base must be >= 0");
    if (!bare && head_dim() < 2) throw std::invalid_argument("inner layer norm needs head_dim >= 2");
  }
}

void ModelConfig::validate() const {
  block.validate();
  if (vocab_size < 1) throw std::invalid_argument("vocab_size must be positive");
  if (n_blocks < 0) throw std::invalid_argument("n_blocks must be >= 0");
  if (context < 2) throw std::invalid_argument("context must be >= 2");
  if (is_ttt(block.seq_layer) && n_blocks > 0 && context % block.mini_batch != 0) {
    throw std::invalid_argument("context " + std::to_string(context) + " is not divisible by mini_batch " +
                                std::to_string(block.mini_batch));
  }
}

std::vector<ParamInfo> param_layout(const ModelConfig& cfg) {
  auto p = empty_params<int>(cfg);
  std::vector<ParamInfo> out;
  for_each_param(cfg, p, [&](const ParamInfo& info, int&) { out.push_back(info); });
  return out;
}

Index param_count(const ModelConfig& cfg) {
  const BlockConfig& b = cfg.block;
  const Index d = b.embed_dim;
  const Index hd = b.head_dim();
  const Index v = cfg.vocab_size;
  const bool ttt = is_ttt(b.seq_layer);
  const bool mamba = b.backbone == BackboneKind::MambaStyle;

  Index per_head = (mamba ? 2 : 3) * hd * d;
  if (ttt) {
    per_head += b.seq_layer == SeqLayerKind::TTTMLP ? 2 * kMlpExpansion * hd * hd : hd * hd;
    if (!b.bare) per_head += 2 * hd;
    if (b.learnable_eta) per_head += d;
  }
  Index per_block = 2 * d + b.heads * per_head + d * d + 2 * d + 2 * b.mlp_width() * d;
  if (mamba) per_block += 2 * d * b.conv_width + d * d;
  if (ttt) per_block += 2 * d;

  Index total = 2 * v * d + 2 * d + cfg.n_blocks * per_block;
  if (cfg.positional_embedding) total += cfg.context * d;
  return total;
}

void check_tokens(std::span<const int> tokens, Index vocab_size) {
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab_size) {
      throw std::out_of_range("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                              " outside vocabulary of " + std::to_string(vocab_size));
    }
  }
}

template <typename S>
ModelParams<Mat<S>> init_params(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  auto p = empty_params<Mat<S>>(cfg);
  const double d = static_cast<double>(cfg.block.embed_dim);
  const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<Index>(cfg.n_blocks, 1)));
  auto normal = [&](Mat<S>& m, const ParamInfo& info, double std) {
    std::normal_distribution<double> dist(0.0, std);
    m.resize(info.rows, info.cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  };
  auto uniform = [&](Mat<S>& m, const ParamInfo& info, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    m.resize(info.rows, info.cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  };
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };

  for_each_param(cfg, p, [&](const ParamInfo& info, Mat<S>& m) {
    const std::string& n = info.name;
    if (ends_with(n, ".gamma")) {
      m = Mat<S>::Ones(info.rows, info.cols);
    } else if (ends_with(n, ".beta") || ends_with(n, "theta_lr") || n == "head") {
      m = Mat<S>::Zero(info.rows, info.cols);
    } else if (n == "embed" || n == "pos") {
      normal(m, info, 0.02);
    } else if (ends_with(n, ".wo") || ends_with(n, "mlp.w2")) {
      normal(m, info, resid_std);
    } else if (ends_with(n, "init.w1") || ends_with(n, "init.w2")) {
      // A bare linear f starts at W0 = 0 (plain linear attention). With the
      // LN wrapper W0 = 0 would sit where LN(W0 k) has a 1/sqrt(eps) Jacobian.
      if (cfg.block.seq_layer == SeqLayerKind::TTTLinear && cfg.block.bare) {
        m = Mat<S>::Zero(info.rows, info.cols);
      } else {
        uniform(m, info, 1.0 / std::sqrt(static_cast<double>(info.cols)));
      }
    } else if (ends_with(n, "conv_k") || ends_with(n, "conv_q")) {
      // Starts near a pass-through of the current token (last tap).
      normal(m, info, 0.02);
      m.col(info.cols - 1).array() += S(1);
    } else {
      normal(m, info, 1.0 / std::sqrt(d));
    }
  });
  return p;
}

template <typename S>
void zero_residual_branches(ModelParams<Mat<S>>& p) {
  for (auto& b : p.blocks) {
    b.wo.setZero();
    b.mlp_w2.setZero();
  }
}

template <typename S>
ModelParams<Var<S>> bind_params(const ModelConfig& cfg, const ModelParams<Mat<S>>& p, Tape<S>& tape) {
  auto out = empty_params<Var<S>>(cfg);
  // Both walks visit the same slots in the same order.
  std::vector<const Mat<S>*> values;
  for_each_param(cfg, p, [&](const ParamInfo& info, const Mat<S>& m) {
    if (m.rows() != info.rows || m.cols() != info.cols) {
      throw DimensionError("parameter " + info.name + " has shape " + shape_str(m) + ", expected " +
                           shape_str(info.rows, info.cols));
    }
    values.push_back(&m);
  });
  size_t i = 0;
  for_each_param(cfg, out, [&](const ParamInfo& info, Var<S>& v) {
    const Mat<S>& m = *values[i++];
    v = info.trainable ? tape.param(m) : tape.constant(m);
  });
  return out;
}

template <typename S>
std::vector<S> next_token_nll(const Mat<S>& logits, std::span<const int> tokens) {
  const Index n = static_cast<Index>(tokens.size());
  if (n < 2) throw std::invalid_argument("next-token loss needs at least 2 tokens, got " + std::to_string(n));
  if (logits.cols() != n) throw DimensionError("logits " + shape_str(logits) + " for " + std::to_string(n) + " tokens");
  const Mat<S> lp = log_softmax_cols(Mat<S>(logits.leftCols(n - 1)));
  std::vector<S> out(static_cast<size_t>(n - 1));
  for (Index t = 0; t + 1 < n; ++t) out[static_cast<size_t>(t)] = -lp(tokens[static_cast<size_t>(t + 1)], t);
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
StreamingDecoder<S>::StreamingDecoder(const ModelConfig& cfg, const ModelParams<Mat<S>>& params)
    : cfg_(cfg), p_(params) {
  cfg_.validate();
  reset();
}

template <typename S>
void StreamingDecoder<S>::reset() {
  pos_ = 0;
  state_.assign(p_.blocks.size(), {});
  const Index d = cfg_.block.embed_dim;
  for (size_t i = 0; i < p_.blocks.size(); ++i) {
    auto& st = state_[i];
    st.history = Mat<S>::Zero(d, cfg_.block.conv_width - 1);
    for (const auto& hp : p_.blocks[i].heads) {
      HeadState hs;
      hs.weights = {hp.init_w1, hp.init_w2};
      hs.anchor = hs.weights;
      st.heads.push_back(std::move(hs));
    }
  }
}

template <typename S>
Mat<S> StreamingDecoder<S>::block_step(const Mat<S>& x, const BlockParams<Mat<S>>& p, BlockState& st) {
  const BlockConfig& cfg = cfg_.block;
  const Index hd = cfg.head_dim();
  const bool mamba = cfg.backbone == BackboneKind::MambaStyle;
  const Mat<S> u = detail::ln<S>(x, p.seq_ln_gamma, p.seq_ln_beta);

  Mat<S> keys_all, queries_all;
  if (mamba) {
    std::vector<Mat<S>> kq;
    for (const auto& hp : p.heads) kq.push_back(matmul(hp.theta_k, u));
    const Mat<S> current = concat_rows(kq);
    Mat<S> window(current.rows(), cfg.conv_width);
    window << st.history, current;
    keys_all = p.conv_k.cwiseProduct(window).rowwise().sum();
    queries_all = p.conv_q.cwiseProduct(window).rowwise().sum();
    if (cfg.conv_width > 1) st.history = window.rightCols(cfg.conv_width - 1);
  }

  InnerSpec<S> spec;
  spec.kind = cfg.inner_kind();
  spec.bare = cfg.bare;
  const bool boundary = is_ttt(cfg.seq_layer) && (pos_ + 1) % cfg.mini_batch == 0;

  std::vector<Mat<S>> zs;
  for (Index h = 0; h < static_cast<Index>(p.heads.size()); ++h) {
    const auto& hp = p.heads[static_cast<size_t>(h)];
    HeadState& hs = st.heads[static_cast<size_t>(h)];
    const Mat<S> k = mamba ? slice_rows(keys_all, h * hd, hd) : matmul(hp.theta_k, u);
    const Mat<S> q = mamba ? slice_rows(queries_all, h * hd, hd) : matmul(hp.theta_q, u);
    const Mat<S> v = matmul(hp.theta_v, u);
    if (!is_ttt(cfg.seq_layer)) {
      hs.keys.conservativeResize(hd, hs.keys.cols() + 1);
      hs.keys.rightCols(1) = k;
      hs.values.conservativeResize(hd, hs.values.cols() + 1);
      hs.values.rightCols(1) = v;
      zs.push_back(matmul(hs.values, softmax_cols(matmul(transpose(hs.keys), q))));
      continue;
    }
    const S eta_base = static_cast<S>(cfg.resolved_eta_base());
    const Mat<S> eta = cfg.learnable_eta ? Mat<S>(scale(sigmoid(matmul(hp.theta_lr, u)), eta_base))
                                         : Mat<S>(Mat<S>::Constant(1, 1, eta_base));
    const InnerNorm<Mat<S>> norm{hp.ln_gamma, hp.ln_beta};
    const auto bw = inner_backward<S, Mat<S>>(spec, hs.anchor, norm, k, v, &eta);
    hs.weights = weights_minus(spec, hs.weights, inner_grad_sum(spec, bw, k));
    zs.push_back(inner_apply(spec, hs.weights, norm, q));
    if (boundary) hs.anchor = hs.weights;
  }
  Mat<S> z = concat_rows(zs);
  if (is_ttt(cfg.seq_layer)) z = detail::ln<S>(z, p.out_ln_gamma, p.out_ln_beta);
  if (mamba) z = hadamard(gelu(matmul(p.gate, u)), z);
  const Mat<S> y = add(x, matmul(p.wo, z));
  const Mat<S> m = detail::ln<S>(y, p.mlp_ln_gamma, p.mlp_ln_beta);
  return add(y, matmul(p.mlp_w2, gelu(matmul(p.mlp_w1, m))));
}

template <typename S>
Vec<S> StreamingDecoder<S>::step(int token) {
  const int tok[1] = {token};
  check_tokens(tok, cfg_.vocab_size);
  if (cfg_.positional_embedding && pos_ >= cfg_.context) {
    throw std::invalid_argument("streaming position " + std::to_string(pos_) + " exceeds the positional table");
  }
  Mat<S> x = p_.embed.col(token);
  if (cfg_.positional_embedding) x += p_.pos.col(pos_);
  for (size_t i = 0; i < p_.blocks.size(); ++i) x = block_step(x, p_.blocks[i], state_[i]);
  ++pos_;
  return as_vec<S>(matmul(p_.head, detail::ln<S>(x, p_.final_ln_gamma, p_.final_ln_beta)));
}

#define TTT_INSTANTIATE(S)                                                                        \
  template ModelParams<Mat<S>> init_params<S>(const ModelConfig&, std::mt19937_64&);              \
  template void zero_residual_branches<S>(ModelParams<Mat<S>>&);                                  \
  template ModelParams<Var<S>> bind_params<S>(const ModelConfig&, const ModelParams<Mat<S>>&, Tape<S>&); \
  template std::vector<S> next_token_nll<S>(const Mat<S>&, std::span<const int>);                 \
  template class StreamingDecoder<S>;

TTT_INSTANTIATE(double)
TTT_INSTANTIATE(float)

#undef TTT_INSTANTIATE

}  // namespace ttt
