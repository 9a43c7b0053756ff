#pragma once

// Outer-loop training, evaluation and decoding for the byte-level model.

#include "ttt/backbone.hpp"
#include "ttt/checkpoint.hpp"
#include "ttt/config.hpp"
#include "ttt/corpus.hpp"
#include "ttt/optim.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace ttt {

/// Corpus named by the config: the file at data.path, or the synthetic
/// corpus when the path is empty.
Corpus corpus_for(const TrainConfig& cfg);

/// Optimizer slots for the trainable parameters, in layout order. Only
/// matrices (both dimensions > 1) are weight-decayed.
std::vector<OptimSlot> optim_slots(const ModelConfig& cfg);

template <typename S>
std::vector<Mat<S>*> trainable_ptrs(const ModelConfig& cfg, ModelParams<Mat<S>>& params);

template <typename S>
struct BatchGradient {
  double loss = 0;            // mean next-token loss over the sequences
  std::vector<Mat<S>> grads;  // mean gradient per trainable parameter
};

/// Loss and gradient over a batch. Sequences are processed one tape at a
/// time and accumulated in the given order, so the result does not depend
/// on scheduling.
template <typename S>
BatchGradient<S> batch_gradient(const ModelConfig& cfg, const ModelParams<Mat<S>>& params,
                                const std::vector<const Sequence*>& seqs, const ForwardOptions& opt);

struct EvalResult {
  double mean_nll = 0;
  double perplexity = 0;
  /// Mean NLL of predicting token t+1, t = 0..T-2, across sequences.
  std::vector<double> per_index_nll;
  Index sequences = 0;
};

/// `max_sequences` = 0 evaluates every sequence.
template <typename S>
EvalResult evaluate(const ModelConfig& cfg, const ModelParams<Mat<S>>& params, const std::vector<Sequence>& seqs,
                    Index max_sequences = 0, const ForwardOptions& opt = {});

template <typename S>
Checkpoint<S> make_checkpoint(const TrainConfig& cfg, const ModelParams<Mat<S>>& params, const AdamW<S>* opt,
                              std::uint64_t step);

/// Parameters from a checkpoint; throws CheckpointError naming the first
/// missing or mis-shaped tensor.
template <typename S>
ModelParams<Mat<S>> params_from_checkpoint(const ModelConfig& cfg, const Checkpoint<S>& ckpt);

/// Restores optimizer moments and step count saved by make_checkpoint.
template <typename S>
void restore_optimizer(const ModelConfig& cfg, const Checkpoint<S>& ckpt, AdamW<S>& opt);

struct TrainSummary {
  Index steps = 0;
  double final_loss = 0;
  EvalResult final_eval;
  Index param_count = 0;
  double wall_seconds = 0;
  double median_ms_per_step = 0;
  std::vector<std::string> checkpoints;
  std::string metrics_path;
};

/// Runs the configured training job, writing into cfg.output.dir:
///   metrics.csv   step,loss,lr,grad_norm,eta_scale,val_nll,val_ppl
///   timing.csv    step,ms
///   summary.json  final metrics, per-index NLL, timing
///   ckpt_<step>.bin
/// metrics.csv holds no timing, so equal configs produce identical files.
/// Throws NumericError on a non-finite loss or gradient; checkpoints already
/// written are kept.
template <typename S>
TrainSummary train(const TrainConfig& cfg, const Corpus& corpus, std::ostream* log = nullptr);

TrainSummary train_with_precision(const TrainConfig& cfg, const Corpus& corpus, std::ostream* log = nullptr);

/// Feeds `prompt` through the streaming decoder and appends `n` bytes,
/// greedy when temperature <= 0 and sampled otherwise.
template <typename S>
std::string generate(const ModelConfig& cfg, const ModelParams<Mat<S>>& params, const std::string& prompt, Index n,
                     double temperature = 0.0, std::uint64_t seed = 0);

}  // namespace ttt
