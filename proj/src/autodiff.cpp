#include "ttt/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace ttt {

namespace {

constexpr std::array<std::string_view, static_cast<size_t>(OpKind::kCount)> kOpNames = {
    "leaf",       "matmul",     "transpose",     "add",        "sub",        "hadamard",
    "scale",      "add_scalar", "pow",           "scale_cols", "scale_rows", "add_col",
    "add_row",    "col_sum",    "row_sum",       "sum",        "causal_mask", "gelu",
    "gelu_prime", "sigmoid",    "causal_softmax", "slice_rows", "slice_cols", "concat_rows",
    "concat_cols", "gather_cols", "causal_conv", "cross_entropy", "checkpoint", "tuple_get"};

}  // namespace

std::string_view op_name(OpKind kind) {
  const auto i = static_cast<size_t>(kind);
  if (i >= kOpNames.size()) throw std::invalid_argument("unknown op-kind " + std::to_string(i));
  return kOpNames[i];
}

OpKind op_from_name(std::string_view name) {
  for (size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  throw std::invalid_argument("unknown op-kind '" + std::string(name) + "'");
}

template <typename S>
void Tape<S>::check_owned(const Var<S>& v) const {
  if (v.tape != this || v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw AutodiffError("Var does not belong to this tape");
  }
}

template <typename S>
Var<S> Tape<S>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::leaf(Mat<S> value, bool is_param) {
  if (backward_done_) throw AutodiffError("tape already consumed by backward");
  Node n;
  n.op = OpKind::Leaf;
  n.value = std::move(value);
  n.is_param = is_param;
  n.requires_grad = is_param;
  return push(std::move(n));
}

template <typename S>
Var<S> Tape<S>::record(OpKind op, std::vector<Var<S>> inputs, OpAttr<S> attr) {
  if (backward_done_) throw AutodiffError("tape already consumed by backward");
  for (const auto& in : inputs) check_owned(in);
  auto val = [&](size_t i) -> const Mat<S>& { return nodes_[static_cast<size_t>(inputs[i].id)].value; };

  Mat<S> out;
  switch (op) {
    case OpKind::MatMul: out = ttt::matmul(val(0), val(1)); break;
    case OpKind::Transpose: out = ttt::transpose(val(0)); break;
    case OpKind::Add: out = ttt::add(val(0), val(1)); break;
    case OpKind::Sub: out = ttt::sub(val(0), val(1)); break;
    case OpKind::Hadamard: out = ttt::hadamard(val(0), val(1)); break;
    case OpKind::Scale: out = ttt::scale(val(0), attr.scalar); break;
    case OpKind::AddScalar: out = ttt::add_scalar(val(0), attr.scalar); break;
    case OpKind::Pow: out = ttt::elem_pow(val(0), attr.scalar); break;
    case OpKind::ScaleCols: out = ttt::scale_cols(val(0), val(1)); break;
    case OpKind::ScaleRows: out = ttt::scale_rows(val(0), val(1)); break;
    case OpKind::AddCol: out = ttt::add_col(val(0), val(1)); break;
    case OpKind::AddRow: out = ttt::add_row(val(0), val(1)); break;
    case OpKind::ColSum: out = ttt::col_sum(val(0)); break;
    case OpKind::RowSum: out = ttt::row_sum(val(0)); break;
    case OpKind::Sum: out = ttt::sum_all(val(0)); break;
    case OpKind::CausalMask: out = ttt::causal_mask(val(0)); break;
    case OpKind::Gelu: out = ttt::gelu(val(0)); break;
    case OpKind::GeluPrime: out = ttt::gelu_prime(val(0)); break;
    case OpKind::Sigmoid: out = ttt::sigmoid(val(0)); break;
    case OpKind::CausalSoftmax: out = ttt::causal_softmax_cols(val(0)); break;
    case OpKind::SliceRows: out = ttt::slice_rows(val(0), attr.start, attr.count); break;
    case OpKind::SliceCols: out = ttt::slice_cols(val(0), attr.start, attr.count); break;
    case OpKind::ConcatRows:
    case OpKind::ConcatCols: {
      std::vector<Mat<S>> parts;
      parts.reserve(inputs.size());
      for (size_t i = 0; i < inputs.size(); ++i) parts.push_back(val(i));
      out = op == OpKind::ConcatRows ? ttt::concat_rows(parts) : ttt::concat_cols(parts);
      attr.ids.clear();
      for (const auto& p : parts) attr.ids.push_back(static_cast<int>(op == OpKind::ConcatRows ? p.rows() : p.cols()));
      break;
    }
    case OpKind::GatherCols: out = ttt::gather_cols(val(0), std::span<const int>(attr.ids)); break;
    case OpKind::CausalConv: out = ttt::causal_conv1d(val(0), val(1)); break;
    case OpKind::CrossEntropy: out = ttt::cross_entropy(val(0), std::span<const int>(attr.ids)); break;
    case OpKind::Leaf:
    case OpKind::Checkpoint:
    case OpKind::TupleGet:
      throw AutodiffError(std::string("record: op-kind '") + std::string(op_name(op)) +
                          "' cannot be recorded directly");
    default:
      throw std::invalid_argument("record: unknown op-kind " + std::to_string(static_cast<int>(op)));
  }

  Node n;
  n.op = op;
  n.value = std::move(out);
  n.attr = std::move(attr);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(in.id)].requires_grad;
  }
  return push(std::move(n));
}

template <typename S>
std::vector<Var<S>> Tape<S>::checkpoint(const std::vector<Var<S>>& inputs, CheckpointFn fn) {
  if (backward_done_) throw AutodiffError("tape already consumed by backward");
  for (const auto& in : inputs) check_owned(in);

  std::vector<Mat<S>> outs;
  {
    Tape<S> scratch;
    std::vector<Var<S>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(scratch.constant(value(in)));
    for (const auto& o : fn(leaves)) outs.push_back(scratch.value(o));
  }

  Node n;
  n.op = OpKind::Checkpoint;
  n.fn = std::make_shared<CheckpointFn>(std::move(fn));
  for (const auto& in : inputs) {
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(in.id)].requires_grad;
  }
  n.out_grads.resize(outs.size());
  const bool rg = n.requires_grad;
  const Var<S> parent = push(std::move(n));

  std::vector<Var<S>> result;
  result.reserve(outs.size());
  for (size_t i = 0; i < outs.size(); ++i) {
    Node g;
    g.op = OpKind::TupleGet;
    g.inputs = {parent.id};
    g.attr.start = static_cast<Index>(i);
    g.value = std::move(outs[i]);
    g.requires_grad = rg;
    result.push_back(push(std::move(g)));
  }
  return result;
}

template <typename S>
Mat<S>& Tape<S>::grad_slot(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad) {
    n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename S>
void Tape<S>::accumulate(int id, const Mat<S>& g) {
  if (!nodes_[static_cast<size_t>(id)].requires_grad) return;
  grad_slot(id) += g;
}

template <typename S>
void Tape<S>::backward_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  if (n.op == OpKind::Checkpoint) {
    bool any = false;
    for (const auto& g : n.out_grads) any = any || g.size() > 0;
    if (!any) return;
  } else if (!n.has_grad) {
    return;
  }
  const Mat<S>& g = n.grad;
  auto in = [&](size_t i) { return n.inputs[i]; };
  auto val = [&](size_t i) -> const Mat<S>& { return nodes_[static_cast<size_t>(n.inputs[i])].value; };
  auto needs = [&](size_t i) { return nodes_[static_cast<size_t>(n.inputs[i])].requires_grad; };

  switch (n.op) {
    case OpKind::Leaf: break;
    case OpKind::MatMul:
      if (needs(0)) grad_slot(in(0)).noalias() += g * val(1).transpose();
      if (needs(1)) grad_slot(in(1)).noalias() += val(0).transpose() * g;
      break;
    case OpKind::Transpose: accumulate(in(0), g.transpose()); break;
    case OpKind::Add:
      accumulate(in(0), g);
      accumulate(in(1), g);
      break;
    case OpKind::Sub:
      accumulate(in(0), g);
      if (needs(1)) grad_slot(in(1)) -= g;
      break;
    case OpKind::Hadamard:
      if (needs(0)) grad_slot(in(0)) += g.cwiseProduct(val(1));
      if (needs(1)) grad_slot(in(1)) += g.cwiseProduct(val(0));
      break;
    case OpKind::Scale: if (needs(0)) grad_slot(in(0)) += g * n.attr.scalar; break;
    case OpKind::AddScalar: accumulate(in(0), g); break;
    case OpKind::Pow: {
      const S p = n.attr.scalar;
      if (needs(0)) grad_slot(in(0)).array() += g.array() * p * val(0).array().pow(p - S(1));
      break;
    }
    case OpKind::ScaleCols:
      if (needs(0)) grad_slot(in(0)) += ttt::scale_cols(g, val(1));
      if (needs(1)) grad_slot(in(1)) += g.cwiseProduct(val(0)).colwise().sum();
      break;
    case OpKind::ScaleRows:
      if (needs(0)) grad_slot(in(0)) += ttt::scale_rows(g, val(1));
      if (needs(1)) grad_slot(in(1)) += g.cwiseProduct(val(0)).rowwise().sum();
      break;
    case OpKind::AddCol:
      accumulate(in(0), g);
      if (needs(1)) grad_slot(in(1)) += g.rowwise().sum();
      break;
    case OpKind::AddRow:
      accumulate(in(0), g);
      if (needs(1)) grad_slot(in(1)) += g.colwise().sum();
      break;
    case OpKind::ColSum:
      if (needs(0)) grad_slot(in(0)).rowwise() += g.row(0);
      break;
    case OpKind::RowSum:
      if (needs(0)) grad_slot(in(0)).colwise() += g.col(0);
      break;
    case OpKind::Sum:
      if (needs(0)) grad_slot(in(0)).array() += g(0, 0);
      break;
    case OpKind::CausalMask: accumulate(in(0), ttt::causal_mask(g)); break;
    case OpKind::Gelu: if (needs(0)) grad_slot(in(0)) += g.cwiseProduct(ttt::gelu_prime(val(0))); break;
    case OpKind::GeluPrime: if (needs(0)) grad_slot(in(0)) += g.cwiseProduct(ttt::gelu_second(val(0))); break;
    case OpKind::Sigmoid:
      if (needs(0)) grad_slot(in(0)).array() += g.array() * n.value.array() * (S(1) - n.value.array());
      break;
    case OpKind::CausalSoftmax: {
      if (!needs(0)) break;
      const Mat<S>& p = n.value;
      Mat<S> pg = p.cwiseProduct(g);
      Mat<S> dot = pg.colwise().sum();
      Mat<S> ds = pg;
      for (Index i = 0; i < ds.rows(); ++i) ds.row(i).array() -= p.row(i).array() * dot.row(0).array();
      grad_slot(in(0)) += ds;
      break;
    }
    case OpKind::SliceRows: if (needs(0)) grad_slot(in(0)).middleRows(n.attr.start, n.attr.count) += g; break;
    case OpKind::SliceCols: if (needs(0)) grad_slot(in(0)).middleCols(n.attr.start, n.attr.count) += g; break;
    case OpKind::ConcatRows: {
      Index at = 0;
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const Index r = n.attr.ids[i];
        if (needs(i)) grad_slot(in(i)) += g.middleRows(at, r);
        at += r;
      }
      break;
    }
    case OpKind::ConcatCols: {
      Index at = 0;
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const Index c = n.attr.ids[i];
        if (needs(i)) grad_slot(in(i)) += g.middleCols(at, c);
        at += c;
      }
      break;
    }
    case OpKind::GatherCols: {
      if (!needs(0)) break;
      Mat<S>& dt = grad_slot(in(0));
      for (Index j = 0; j < g.cols(); ++j) dt.col(n.attr.ids[static_cast<size_t>(j)]) += g.col(j);
      break;
    }
    case OpKind::CausalConv: {
      const Mat<S>& x = val(0);
      const Mat<S>& k = val(1);
      const Index w = k.cols();
      Mat<S> dx = Mat<S>::Zero(x.rows(), x.cols());
      Mat<S> dk = Mat<S>::Zero(k.rows(), k.cols());
      for (Index c = 0; c < x.rows(); ++c) {
        for (Index t = 0; t < x.cols(); ++t) {
          const S gt = g(c, t);
          for (Index j = 0; j < w; ++j) {
            const Index src = t - (w - 1) + j;
            if (src < 0) continue;
            dx(c, src) += k(c, j) * gt;
            dk(c, j) += x(c, src) * gt;
          }
        }
      }
      accumulate(in(0), dx);
      accumulate(in(1), dk);
      break;
    }
    case OpKind::CrossEntropy: {
      if (!needs(0)) break;
      const Mat<S>& logits = val(0);
      Mat<S> d = ttt::log_softmax_cols(logits).array().exp().matrix();
      for (Index j = 0; j < d.cols(); ++j) d(n.attr.ids[static_cast<size_t>(j)], j) -= S(1);
      grad_slot(in(0)) += d * (g(0, 0) / static_cast<S>(logits.cols()));
      break;
    }
    case OpKind::TupleGet: {
      Node& parent = nodes_[static_cast<size_t>(in(0))];
      Mat<S>& slot = parent.out_grads[static_cast<size_t>(n.attr.start)];
      if (slot.size() == 0) {
        slot = g;
      } else {
        slot += g;
      }
      break;
    }
    case OpKind::Checkpoint: {
      Tape<S> replay;
      std::vector<Var<S>> leaves;
      leaves.reserve(n.inputs.size());
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        leaves.push_back(needs(i) ? replay.param(val(i)) : replay.constant(val(i)));
      }
      const std::vector<Var<S>> outs = (*n.fn)(leaves);
      std::vector<std::pair<int, Mat<S>>> seeds;
      for (size_t i = 0; i < outs.size(); ++i) {
        if (n.out_grads[i].size() > 0) seeds.emplace_back(outs[i].id, n.out_grads[i]);
      }
      replay.sweep(seeds);
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const auto& ln = replay.nodes_[static_cast<size_t>(leaves[i].id)];
        if (needs(i) && ln.has_grad) accumulate(in(i), ln.grad);
      }
      n.out_grads.clear();
      break;
    }
    default:
      throw std::invalid_argument("backward: unknown op-kind " + std::to_string(static_cast<int>(n.op)));
  }
}

template <typename S>
void Tape<S>::sweep(std::span<const std::pair<int, Mat<S>>> seeds) {
  if (backward_done_) throw AutodiffError("backward already ran on this tape; re-record the forward pass");
  backward_done_ = true;
  int last = -1;
  for (const auto& [id, g] : seeds) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
      throw DimensionError("backward seed shape " + shape_str(g) + " for node " + shape_str(n.value));
    }
    if (n.requires_grad) grad_slot(id) += g;
    last = std::max(last, id);
  }
  for (int id = last; id >= 0; --id) backward_node(id);
}

template <typename S>
GradMap<S> Tape<S>::backward(const Var<S>& loss) {
  if (loss.tape != this) throw AutodiffError("backward: loss is detached from this tape");
  check_owned(loss);
  const Mat<S>& lv = nodes_[static_cast<size_t>(loss.id)].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw AutodiffError("backward: loss must be scalar, got " + shape_str(lv));
  }
  const std::pair<int, Mat<S>> seed{loss.id, Mat<S>::Ones(1, 1)};
  sweep(std::span<const std::pair<int, Mat<S>>>(&seed, 1));

  GradMap<S> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.is_param) continue;
    out.raw().emplace(static_cast<int>(i), n.has_grad ? n.grad : Mat<S>::Zero(n.value.rows(), n.value.cols()));
  }
  return out;
}

template <typename S>
GradCheckResult grad_check(const TapedScalarFn<S>& f, const std::vector<Mat<S>>& params, S step,
                           S floor) {
  std::vector<Mat<S>> analytic;
  {
    Tape<S> tape;
    std::vector<Var<S>> vars;
    for (const auto& p : params) vars.push_back(tape.param(p));
    const Var<S> loss = f(tape, vars);
    const GradMap<S> grads = tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(grads[v]);
  }

  auto eval = [&](const std::vector<Mat<S>>& ps) {
    Tape<S> tape;
    std::vector<Var<S>> vars;
    for (const auto& p : ps) vars.push_back(tape.constant(p));
    return f(tape, vars).value()(0, 0);
  };

  GradCheckResult result;
  std::vector<Mat<S>> work = params;
  for (size_t k = 0; k < work.size(); ++k) {
    for (Index i = 0; i < work[k].size(); ++i) {
      S& entry = work[k].data()[i];
      const S saved = entry;
      entry = saved + step;
      const S up = eval(work);
      entry = saved - step;
      const S down = eval(work);
      entry = saved;
      const double fd = static_cast<double>((up - down) / (S(2) * step));
      const double an = static_cast<double>(analytic[k].data()[i]);
      const double abs_err = std::abs(fd - an);
      const double denom = std::max({std::abs(fd), std::abs(an), static_cast<double>(floor)});
      result.max_abs_err = std::max(result.max_abs_err, abs_err);
      result.max_rel_err = std::max(result.max_rel_err, abs_err / denom);
      ++result.entries;
    }
  }
  return result;
}

template class Tape<double>;
template class Tape<float>;
template GradCheckResult grad_check<double>(const TapedScalarFn<double>&, const std::vector<Mat<double>>&,
                                            double, double);
template GradCheckResult grad_check<float>(const TapedScalarFn<float>&, const std::vector<Mat<float>>&,
                                           float, float);

}  // namespace ttt
