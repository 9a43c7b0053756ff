#include "ttt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace ttt {

namespace fs = std::filesystem;

Corpus corpus_for(const TrainConfig& cfg) {
  if (!cfg.data.path.empty()) return load_corpus(cfg.data.path, cfg.model.context, cfg.data.split_frac);
  return chunk_corpus(synthetic_corpus(cfg.data.synthetic_bytes, cfg.data.synthetic_seed), cfg.model.context,
                      cfg.data.split_frac);
}

std::vector<OptimSlot> optim_slots(const ModelConfig& cfg) {
  std::vector<OptimSlot> slots;
  for (const auto& info : param_layout(cfg)) {
    if (info.trainable) slots.push_back({info.name, info.rows > 1 && info.cols > 1});
  }
  return slots;
}

template <typename S>
std::vector<Mat<S>*> trainable_ptrs(const ModelConfig& cfg, ModelParams<Mat<S>>& params) {
  std::vector<Mat<S>*> out;
  for_each_param(cfg, params, [&](const ParamInfo& info, Mat<S>& m) {
    if (info.trainable) out.push_back(&m);
  });
  return out;
}

template <typename S>
BatchGradient<S> batch_gradient(const ModelConfig& cfg, const ModelParams<Mat<S>>& params,
                                const std::vector<const Sequence*>& seqs, const ForwardOptions& opt) {
  BatchGradient<S> out;
  for (const auto& info : param_layout(cfg)) {
    if (info.trainable) out.grads.push_back(Mat<S>::Zero(info.rows, info.cols));
  }
  for (const Sequence* seq : seqs) {
    Tape<S> tape;
    const auto vars = bind_params(cfg, params, tape);
    const Var<S> loss = next_token_loss(lm_forward<S>(*seq, cfg, vars, opt), *seq);
    out.loss += static_cast<double>(loss.value()(0, 0));
    const GradMap<S> g = tape.backward(loss);
    size_t i = 0;
    for_each_param(cfg, vars, [&](const ParamInfo& info, const Var<S>& v) {
      if (info.trainable) out.grads[i++] += g[v];
    });
  }
  if (!seqs.empty()) {
    const S inv = S(1) / static_cast<S>(seqs.size());
    for (auto& g : out.grads) g *= inv;
    out.loss /= static_cast<double>(seqs.size());
  }
  return out;
}

template <typename S>
EvalResult evaluate(const ModelConfig& cfg, const ModelParams<Mat<S>>& params, const std::vector<Sequence>& seqs,
                    Index max_sequences, const ForwardOptions& opt) {
  EvalResult r;
  const Index n = max_sequences > 0 ? std::min<Index>(max_sequences, static_cast<Index>(seqs.size()))
                                    : static_cast<Index>(seqs.size());
  if (n == 0) throw std::invalid_argument("evaluate: no sequences");
  double total = 0;
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    const Sequence& s = seqs[static_cast<size_t>(i)];
    const std::vector<S> nll = next_token_nll(lm_forward<S>(s, cfg, params, opt), s);
    if (r.per_index_nll.empty()) r.per_index_nll.assign(nll.size(), 0.0);
    if (nll.size() != r.per_index_nll.size()) throw std::invalid_argument("evaluate: sequences differ in length");
    for (size_t t = 0; t < nll.size(); ++t) {
      r.per_index_nll[t] += static_cast<double>(nll[t]);
      total += static_cast<double>(nll[t]);
    }
    count += static_cast<Index>(nll.size());
  }
  for (auto& v : r.per_index_nll) v /= static_cast<double>(n);
  r.sequences = n;
  r.mean_nll = total / static_cast<double>(count);
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

template <typename S>
Checkpoint<S> make_checkpoint(const TrainConfig& cfg, const ModelParams<Mat<S>>& params, const AdamW<S>* opt,
                              std::uint64_t step) {
  Checkpoint<S> ck;
  ck.config_json = to_json(cfg).dump();
  ck.step = step;
  for_each_param(cfg.model, params, [&](const ParamInfo& info, const Mat<S>& m) {
    ck.tensors.push_back({info.name, m});
  });
  const auto layout = param_layout(cfg.model);
  size_t k = 0;
  for (const auto& info : layout) {
    if (!info.trainable) continue;
    const bool have = opt != nullptr && !opt->state().m.empty();
    ck.tensors.push_back({"adam.m." + info.name, have ? opt->state().m[k] : Mat<S>(Mat<S>::Zero(info.rows, info.cols))});
    ck.tensors.push_back({"adam.v." + info.name, have ? opt->state().v[k] : Mat<S>(Mat<S>::Zero(info.rows, info.cols))});
    ++k;
  }
  Mat<S> t(1, 1);
  t(0, 0) = static_cast<S>(opt != nullptr ? opt->state().step : 0);
  ck.tensors.push_back({"adam.step", t});
  return ck;
}

template <typename S>
ModelParams<Mat<S>> params_from_checkpoint(const ModelConfig& cfg, const Checkpoint<S>& ckpt) {
  auto p = empty_params<Mat<S>>(cfg);
  for_each_param(cfg, p, [&](const ParamInfo& info, Mat<S>& m) {
    const Mat<S>& stored = ckpt.get(info.name);
    if (stored.rows() != info.rows || stored.cols() != info.cols) {
      throw CheckpointError("tensor " + info.name + " has shape " + shape_str(stored) + " in the checkpoint, model expects " +
                            shape_str(info.rows, info.cols));
    }
    m = stored;
  });
  return p;
}

template <typename S>
void restore_optimizer(const ModelConfig& cfg, const Checkpoint<S>& ckpt, AdamW<S>& opt) {
  auto& st = opt.state();
  st.m.clear();
  st.v.clear();
  for (const auto& info : param_layout(cfg)) {
    if (!info.trainable) continue;
    st.m.push_back(ckpt.get("adam.m." + info.name));
    st.v.push_back(ckpt.get("adam.v." + info.name));
  }
  st.step = static_cast<long long>(ckpt.get("adam.step")(0, 0));
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string ckpt_name(Index step) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(6) << std::setfill('0') << step << ".bin";
  return os.str();
}

}  // namespace

template <typename S>
TrainSummary train(const TrainConfig& cfg, const Corpus& corpus, std::ostream* log) {
  using Clock = std::chrono::steady_clock;
  cfg.validate();
  const ModelConfig& mc = cfg.model;
  const fs::path dir(cfg.output.dir);
  fs::create_directories(dir);

  std::mt19937_64 rng(cfg.run.seed);
  ModelParams<Mat<S>> params = init_params<S>(mc, rng);
  AdamW<S> opt({cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, cfg.optim.weight_decay, cfg.optim.grad_clip},
               optim_slots(mc));
  const std::vector<Mat<S>*> ptrs = trainable_ptrs(mc, params);
  BatchSampler sampler(static_cast<Index>(corpus.train.size()), cfg.run.seed ^ 0x9e3779b97f4a7c15ULL);
  const Index per_batch = cfg.run.batch_tokens(mc.context) / mc.context;
  const bool eta_warmup = mc.block.seq_layer == SeqLayerKind::TTTMLP && cfg.run.eta_warmup_frac > 0;

  TrainSummary summary;
  summary.param_count = param_count(mc);
  summary.metrics_path = (dir / "metrics.csv").string();
  std::ofstream metrics(summary.metrics_path, std::ios::trunc);
  std::ofstream timing(dir / "timing.csv", std::ios::trunc);
  if (!metrics || !timing) throw std::runtime_error("cannot write metrics into " + dir.string());
  metrics << "step,loss,lr,grad_norm,eta_scale,val_nll,val_ppl\n";
  timing << "step,ms\n";

  auto save = [&](Index step) {
    const std::string path = (dir / ckpt_name(step)).string();
    save_checkpoint(path, make_checkpoint(cfg, params, &opt, static_cast<std::uint64_t>(step)));
    summary.checkpoints.push_back(path);
  };
  save(0);

  const auto start = Clock::now();
  std::vector<double> step_ms;
  EvalResult last_eval;
  bool have_eval = false;
  for (Index step = 1; step <= cfg.run.steps; ++step) {
    const auto t0 = Clock::now();
    const double eta_scale =
        eta_warmup ? std::min(1.0, static_cast<double>(step) / (cfg.run.eta_warmup_frac * static_cast<double>(cfg.run.steps)))
                   : 1.0;
    const ForwardOptions fwd{cfg.run.form, cfg.run.checkpoint_time, eta_scale};
    std::vector<const Sequence*> batch;
    for (Index i : sampler.next(per_batch)) batch.push_back(&corpus.train[static_cast<size_t>(i)]);

    BatchGradient<S> bg = batch_gradient(mc, params, batch, fwd);
    if (!std::isfinite(bg.loss)) {
      metrics << step << "," << fmt(bg.loss) << ",,,,,\n";
      throw NumericError("non-finite training loss at step " + std::to_string(step));
    }
    const double lr = lr_schedule(static_cast<double>(step), static_cast<double>(cfg.run.steps), cfg.optim.peak_lr,
                                  cfg.optim.end_lr, cfg.optim.warmup_frac);
    const double norm = opt.step(ptrs, bg.grads, lr);
    summary.final_loss = bg.loss;

    const bool do_eval = cfg.run.eval_interval > 0 && (step % cfg.run.eval_interval == 0 || step == cfg.run.steps);
    metrics << step << "," << fmt(bg.loss) << "," << fmt(lr) << "," << fmt(norm) << "," << fmt(eta_scale) << ",";
    if (do_eval) {
      last_eval = evaluate<S>(mc, params, corpus.val, cfg.run.eval_sequences, fwd);
      have_eval = true;
      metrics << fmt(last_eval.mean_nll) << "," << fmt(last_eval.perplexity);
      if (log) *log << "step " << step << "  loss " << bg.loss << "  val_ppl " << last_eval.perplexity << "\n";
    } else {
      metrics << ",";
    }
    metrics << "\n";
    metrics.flush();

    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    step_ms.push_back(ms);
    timing << step << "," << fmt(ms) << "\n";

    if ((cfg.run.checkpoint_interval > 0 && step % cfg.run.checkpoint_interval == 0) || step == cfg.run.steps) {
      save(step);
    }
  }

  if (!have_eval) last_eval = evaluate<S>(mc, params, corpus.val, cfg.run.eval_sequences, {cfg.run.form});
  summary.steps = cfg.run.steps;
  summary.final_eval = last_eval;
  summary.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  if (!step_ms.empty()) {
    std::vector<double> sorted = step_ms;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
    summary.median_ms_per_step = sorted[sorted.size() / 2];
  }

  nlohmann::json js = {{"config", to_json(cfg)},
                       {"config_digest", fnv1a64(to_json(cfg).dump())},
                       {"param_count", summary.param_count},
                       {"steps", summary.steps},
                       {"final_train_loss", summary.final_loss},
                       {"val_nll", last_eval.mean_nll},
                       {"val_perplexity", last_eval.perplexity},
                       {"val_sequences", last_eval.sequences},
                       {"per_index_nll", last_eval.per_index_nll},
                       {"wall_seconds", summary.wall_seconds},
                       {"median_ms_per_step", summary.median_ms_per_step},
                       {"checkpoints", summary.checkpoints},
                       {"metrics", summary.metrics_path}};
  std::ofstream(dir / "summary.json", std::ios::trunc) << js.dump(2) << "\n";
  return summary;
}

TrainSummary train_with_precision(const TrainConfig& cfg, const Corpus& corpus, std::ostream* log) {
  return cfg.run.precision == Precision::F32 ? train<float>(cfg, corpus, log) : train<double>(cfg, corpus, log);
}

template <typename S>
std::string generate(const ModelConfig& cfg, const ModelParams<Mat<S>>& params, const std::string& prompt, Index n,
                     double temperature, std::uint64_t seed) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must not be empty");
  StreamingDecoder<S> dec(cfg, params);
  std::mt19937_64 rng(seed);
  Vec<S> logits;
  for (unsigned char c : prompt) logits = dec.step(c);
  std::string out;
  for (Index i = 0; i < n; ++i) {
    Index next = 0;
    if (temperature <= 0) {
      logits.maxCoeff(&next);
    } else {
      Eigen::VectorXd p = (logits.template cast<double>() / temperature).array().exp().matrix();
      p /= p.sum();
      const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
      double acc = 0;
      next = p.size() - 1;
      for (Index k = 0; k < p.size(); ++k) {
        acc += p[k];
        if (u < acc) {
          next = k;
          break;
        }
      }
    }
    out += static_cast<char>(next);
    if (cfg.positional_embedding && dec.position() >= cfg.context) break;
    logits = dec.step(static_cast<int>(next));
  }
  return out;
}

#define TTT_INSTANTIATE(S)                                                                                      \
  template std::vector<Mat<S>*> trainable_ptrs<S>(const ModelConfig&, ModelParams<Mat<S>>&);                    \
  template BatchGradient<S> batch_gradient<S>(const ModelConfig&, const ModelParams<Mat<S>>&,                   \
                                              const std::vector<const Sequence*>&, const ForwardOptions&);      \
  template EvalResult evaluate<S>(const ModelConfig&, const ModelParams<Mat<S>>&, const std::vector<Sequence>&, \
                                  Index, const ForwardOptions&);                                                \
  template Checkpoint<S> make_checkpoint<S>(const TrainConfig&, const ModelParams<Mat<S>>&, const AdamW<S>*,    \
                                            std::uint64_t);                                                     \
  template ModelParams<Mat<S>> params_from_checkpoint<S>(const ModelConfig&, const Checkpoint<S>&);             \
  template void restore_optimizer<S>(const ModelConfig&, const Checkpoint<S>&, AdamW<S>&);                      \
  template TrainSummary train<S>(const TrainConfig&, const Corpus&, std::ostream*);                             \
  template std::string generate<S>(const ModelConfig&, const ModelParams<Mat<S>>&, const std::string&, Index,   \
                                   double, std::uint64_t);

TTT_INSTANTIATE(double)
TTT_INSTANTIATE(float)

#undef TTT_INSTANTIATE

}  // namespace ttt
