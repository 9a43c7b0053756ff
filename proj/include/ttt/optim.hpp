#pragma once

// AdamW with decoupled weight decay and global-norm clipping, plus the
// warmup + cosine learning-rate schedule.

#include "ttt/tensor.hpp"

#include <string>
#include <vector>

namespace ttt {

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  /// Global L2 norm bound on the gradient; <= 0 disables clipping.
  double grad_clip = 1.0;
};

template <typename S>
struct AdamWState {
  std::vector<Mat<S>> m;
  std::vector<Mat<S>> v;
  long long step = 0;
};

/// One slot per optimized tensor. `decay` is false for vectors (LN gains and
/// biases, theta_lr) which are exempt from weight decay.
struct OptimSlot {
  std::string name;
  bool decay = true;
};

template <typename S>
class AdamW {
 public:
  AdamW(AdamWParams hp, std::vector<OptimSlot> slots);

  /// Clips `grads` in place, then updates `params`. Returns the pre-clip
  /// global gradient norm. Throws NumericError naming the first parameter
  /// whose gradient is not finite.
  double step(std::vector<Mat<S>*> params, std::vector<Mat<S>>& grads, double lr);

  const AdamWState<S>& state() const { return state_; }
  AdamWState<S>& state() { return state_; }
  const std::vector<OptimSlot>& slots() const { return slots_; }

 private:
  AdamWParams hp_;
  std::vector<OptimSlot> slots_;
  AdamWState<S> state_;
};

/// Rescales grads so their joint L2 norm is at most max_norm. Returns the
/// norm before scaling.
template <typename S>
double clip_global_norm(std::vector<Mat<S>>& grads, double max_norm);

/// Linear warmup 0 -> peak over warmup_frac * total steps, then cosine
/// decay peak -> end at step == total.
double lr_schedule(double step, double total, double peak, double end, double warmup_frac);

}  // namespace ttt
