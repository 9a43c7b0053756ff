#include "ttt/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ttt {

template <typename S>
AdamW<S>::AdamW(AdamWParams hp, std::vector<OptimSlot> slots) : hp_(hp), slots_(std::move(slots)) {}

template <typename S>
double clip_global_norm(std::vector<Mat<S>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S factor = static_cast<S>(max_norm / norm);
    for (auto& g : grads) g *= factor;
  }
  return norm;
}

template <typename S>
double AdamW<S>::step(std::vector<Mat<S>*> params, std::vector<Mat<S>>& grads, double lr) {
  if (params.size() != slots_.size() || grads.size() != slots_.size()) {
    throw std::invalid_argument("AdamW: expected " + std::to_string(slots_.size()) + " tensors, got " +
                                std::to_string(params.size()) + " params and " + std::to_string(grads.size()) +
                                " gradients");
  }
  for (size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params[i]->rows() || grads[i].cols() != params[i]->cols()) {
      throw DimensionError("AdamW: gradient " + shape_str(grads[i]) + " for parameter " + slots_[i].name + " " +
                           shape_str(*params[i]));
    }
    if (!all_finite(grads[i])) throw NumericError("non-finite gradient for parameter " + slots_[i].name);
  }
  if (state_.m.empty()) {
    for (const Mat<S>* p : params) {
      state_.m.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      state_.v.push_back(Mat<S>::Zero(p->rows(), p->cols()));
    }
  }
  const double norm = clip_global_norm(grads, hp_.grad_clip);
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const S b1 = static_cast<S>(hp_.beta1);
  const S b2 = static_cast<S>(hp_.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(hp_.beta1, t));
  const S c2 = static_cast<S>(1.0 - std::pow(hp_.beta2, t));
  const S eps = static_cast<S>(hp_.eps);
  const S lr_s = static_cast<S>(lr);
  for (size_t i = 0; i < params.size(); ++i) {
    Mat<S>& p = *params[i];
    Mat<S>& m = state_.m[i];
    Mat<S>& v = state_.v[i];
    const Mat<S>& g = grads[i];
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    if (slots_[i].decay && hp_.weight_decay != 0) p *= S(1) - lr_s * static_cast<S>(hp_.weight_decay);
    p.array() -= lr_s * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
  return norm;
}

double lr_schedule(double step, double total, double peak, double end, double warmup_frac) {
  if (total <= 0) return peak;
  const double warmup = warmup_frac * total;
  if (step < warmup) return peak * step / warmup;
  const double span = total - warmup;
  const double progress = span > 0 ? std::min(1.0, (step - warmup) / span) : 1.0;
  return end + (peak - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template class AdamW<double>;
template class AdamW<float>;
template double clip_global_norm<double>(std::vector<Mat<double>>&, double);
template double clip_global_norm<float>(std::vector<Mat<float>>&, double);

}  // namespace ttt
