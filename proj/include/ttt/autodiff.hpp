#pragma once

// Define-by-run reverse-mode differentiation for the outer loop.
//
// A Tape records nodes eagerly: every node stores its forward value, its
// inputs and whatever attributes its backward rule needs. Only first-order
// rules exist; inner-loop gradients are expressed with ordinary ops (see
// ttt_layer.hpp), so differentiating through them is a single reverse sweep.

#include "ttt/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ttt {

enum class OpKind : int {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Hadamard,
  Scale,
  AddScalar,
  Pow,
  ScaleCols,
  ScaleRows,
  AddCol,
  AddRow,
  ColSum,
  RowSum,
  Sum,
  CausalMask,
  Gelu,
  GeluPrime,
  Sigmoid,
  CausalSoftmax,
  SliceRows,
  SliceCols,
  ConcatRows,
  ConcatCols,
  GatherCols,
  CausalConv,
  CrossEntropy,
  Checkpoint,
  TupleGet,
  kCount
};

std::string_view op_name(OpKind kind);

/// Looks an op up by name; throws std::invalid_argument for unknown names.
OpKind op_from_name(std::string_view name);

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Per-op attributes. Only the fields an op needs are populated.
template <typename S>
struct OpAttr {
  S scalar = S(0);
  Index start = 0;
  Index count = 0;
  std::vector<int> ids;
};

/// Gradients keyed by parameter node id.
template <typename S>
class GradMap {
 public:
  const Mat<S>& operator[](const Var<S>& param) const {
    auto it = grads_.find(param.id);
    if (it == grads_.end()) throw AutodiffError("GradMap: node " + std::to_string(param.id) + " is not a parameter");
    return it->second;
  }
  bool contains(const Var<S>& param) const { return grads_.count(param.id) != 0; }
  size_t size() const { return grads_.size(); }

  std::unordered_map<int, Mat<S>>& raw() { return grads_; }

 private:
  std::unordered_map<int, Mat<S>> grads_;
};

template <typename S>
class Tape {
 public:
  using CheckpointFn = std::function<std::vector<Var<S>>(const std::vector<Var<S>>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> param(Mat<S> value) { return leaf(std::move(value), true); }
  Var<S> constant(Mat<S> value) { return leaf(std::move(value), false); }

  const Mat<S>& value(const Var<S>& v) const {
    check_owned(v);
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  size_t size() const { return nodes_.size(); }
  OpKind kind(const Var<S>& v) const { return nodes_[static_cast<size_t>(v.id)].op; }
  const std::vector<int>& inputs(const Var<S>& v) const { return nodes_[static_cast<size_t>(v.id)].inputs; }

  /// Records an op and computes its value eagerly.
  Var<S> record(OpKind op, std::vector<Var<S>> inputs, OpAttr<S> attr = {});

  /// Records `fn(inputs)` as a single node whose intermediate activations are
  /// discarded and recomputed during backward.
  std::vector<Var<S>> checkpoint(const std::vector<Var<S>>& inputs, CheckpointFn fn);

  /// Reverse sweep from a scalar node. Returns the gradient for every
  /// parameter leaf (zeros for parameters the loss does not reach).
  GradMap<S> backward(const Var<S>& loss);

  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<int> inputs;
    Mat<S> value;
    Mat<S> grad;
    OpAttr<S> attr;
    bool is_param = false;
    bool requires_grad = false;
    bool has_grad = false;
    // Checkpoint nodes only.
    std::shared_ptr<CheckpointFn> fn;
    std::vector<Mat<S>> out_grads;
  };

  Var<S> leaf(Mat<S> value, bool is_param);
  Var<S> push(Node node);
  void check_owned(const Var<S>& v) const;
  Mat<S>& grad_slot(int id);
  void accumulate(int id, const Mat<S>& g);
  void backward_node(int id);
  void sweep(std::span<const std::pair<int, Mat<S>>> seeds);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Op vocabulary on Var<S>
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
Tape<S>* tape_of(const Var<S>& a) {
  if (!a.valid()) throw AutodiffError("op on a detached Var");
  return a.tape;
}
template <typename S>
Tape<S>* tape_of(const Var<S>& a, const Var<S>& b) {
  if (tape_of(a) != tape_of(b)) throw AutodiffError("op mixes Vars from different tapes");
  return a.tape;
}
}  // namespace detail

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  return detail::tape_of(a, b)->record(OpKind::MatMul, {a, b});
}
template <typename S>
Var<S> transpose(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::Transpose, {a});
}
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return detail::tape_of(a, b)->record(OpKind::Add, {a, b});
}
template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return detail::tape_of(a, b)->record(OpKind::Sub, {a, b});
}
template <typename S>
Var<S> hadamard(const Var<S>& a, const Var<S>& b) {
  return detail::tape_of(a, b)->record(OpKind::Hadamard, {a, b});
}
template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  OpAttr<S> attr;
  attr.scalar = s;
  return detail::tape_of(a)->record(OpKind::Scale, {a}, attr);
}
template <typename S>
Var<S> add_scalar(const Var<S>& a, S s) {
  OpAttr<S> attr;
  attr.scalar = s;
  return detail::tape_of(a)->record(OpKind::AddScalar, {a}, attr);
}
template <typename S>
Var<S> elem_pow(const Var<S>& a, S p) {
  OpAttr<S> attr;
  attr.scalar = p;
  return detail::tape_of(a)->record(OpKind::Pow, {a}, attr);
}
template <typename S>
Var<S> scale_cols(const Var<S>& a, const Var<S>& row) {
  return detail::tape_of(a, row)->record(OpKind::ScaleCols, {a, row});
}
template <typename S>
Var<S> scale_rows(const Var<S>& a, const Var<S>& col) {
  return detail::tape_of(a, col)->record(OpKind::ScaleRows, {a, col});
}
template <typename S>
Var<S> add_col(const Var<S>& a, const Var<S>& col) {
  return detail::tape_of(a, col)->record(OpKind::AddCol, {a, col});
}
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  return detail::tape_of(a, row)->record(OpKind::AddRow, {a, row});
}
template <typename S>
Var<S> col_sum(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::ColSum, {a});
}
template <typename S>
Var<S> row_sum(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::RowSum, {a});
}
template <typename S>
Var<S> sum_all(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::Sum, {a});
}
template <typename S>
Var<S> causal_mask(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::CausalMask, {a});
}
template <typename S>
Var<S> gelu(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::Gelu, {a});
}
template <typename S>
Var<S> gelu_prime(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::GeluPrime, {a});
}
template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::Sigmoid, {a});
}
template <typename S>
Var<S> causal_softmax_cols(const Var<S>& a) {
  return detail::tape_of(a)->record(OpKind::CausalSoftmax, {a});
}
template <typename S>
Var<S> slice_rows(const Var<S>& a, Index start, Index count) {
  OpAttr<S> attr;
  attr.start = start;
  attr.count = count;
  return detail::tape_of(a)->record(OpKind::SliceRows, {a}, attr);
}
template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  OpAttr<S> attr;
  attr.start = start;
  attr.count = count;
  return detail::tape_of(a)->record(OpKind::SliceCols, {a}, attr);
}
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  return detail::tape_of(parts.front())->record(OpKind::ConcatRows, parts);
}
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  return detail::tape_of(parts.front())->record(OpKind::ConcatCols, parts);
}
template <typename S>
Var<S> gather_cols(const Var<S>& table, std::span<const int> ids) {
  OpAttr<S> attr;
  attr.ids.assign(ids.begin(), ids.end());
  return detail::tape_of(table)->record(OpKind::GatherCols, {table}, attr);
}
template <typename S>
Var<S> causal_conv1d(const Var<S>& x, const Var<S>& kernels) {
  return detail::tape_of(x, kernels)->record(OpKind::CausalConv, {x, kernels});
}
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, std::span<const int> targets) {
  OpAttr<S> attr;
  attr.ids.assign(targets.begin(), targets.end());
  return detail::tape_of(logits)->record(OpKind::CrossEntropy, {logits}, attr);
}
template <typename S>
Var<S> constant_like(const Var<S>& ref, Mat<S> value) {
  return detail::tape_of(ref)->constant(std::move(value));
}
template <typename S, typename Fn>
std::vector<Var<S>> checkpoint(const std::vector<Var<S>>& inputs, Fn&& fn) {
  if (inputs.empty()) throw AutodiffError("checkpoint: no inputs");
  return detail::tape_of(inputs.front())
      ->checkpoint(inputs, typename Tape<S>::CheckpointFn(std::forward<Fn>(fn)));
}

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(const Var<S>& a, S s) {
  return scale(a, s);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

template <typename S>
using TapedScalarFn = std::function<Var<S>(Tape<S>&, const std::vector<Var<S>>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  size_t entries = 0;
};

/// Compares tape gradients of `f` against central differences for every
/// entry of every parameter. The relative error of an entry is
/// |tape - fd| / max(|tape|, |fd|, floor), so entries whose gradient is
/// below `floor` are judged on absolute error.
template <typename S>
GradCheckResult grad_check(const TapedScalarFn<S>& f, const std::vector<Mat<S>>& params,
                           S step = S(1e-5), S floor = S(1e-3));

extern template class Tape<double>;
extern template class Tape<float>;
extern template GradCheckResult grad_check<double>(const TapedScalarFn<double>&,
                                                   const std::vector<Mat<double>>&, double, double);

}  // namespace ttt
