#pragma once

// Dense kernels shared by every module. A tensor is an Eigen row-major matrix
// templated on the scalar; vectors are carried as d x 1 (column) or 1 x n
// (row) matrices so that one op vocabulary covers the whole library.
//
// The same free-function vocabulary is overloaded for ttt::Var in
// autodiff.hpp, which lets layer code be written once as a template over the
// value type and run either eagerly or on a tape.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ttt {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

template <typename Derived>
void check_finite(const Eigen::DenseBase<Derived>& m, const std::string& what) {
  if (!all_finite(m)) throw NumericError(what + ": non-finite value");
}

/// Builds a tensor from row-major data. In checked mode non-finite entries are
/// rejected.
template <typename Scalar>
Mat<Scalar> make_tensor(Index rows, Index cols, std::span<const Scalar> data,
                        bool checked = true) {
  if (rows < 0 || cols < 0 || rows * cols != static_cast<Index>(data.size())) {
    throw DimensionError("make_tensor: shape " + shape_str(rows, cols) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  Mat<Scalar> m = Eigen::Map<const Mat<Scalar>>(data.data(), rows, cols);
  if (checked) check_finite(m, "make_tensor");
  return m;
}

template <typename Scalar>
Mat<Scalar> as_column(const Vec<Scalar>& v) {
  return Mat<Scalar>(v);
}

template <typename Scalar>
Vec<Scalar> as_vec(const Mat<Scalar>& m) {
  return Eigen::Map<const Vec<Scalar>>(m.data(), m.size());
}

// ---------------------------------------------------------------------------
// Scalar maps
// ---------------------------------------------------------------------------

namespace scalar {

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S>
S normal_pdf(S x) {
  return std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * std::numbers::pi_v<S>);
}

template <typename S>
S gelu_prime(S x) {
  return S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>)) + x * normal_pdf(x);
}

template <typename S>
S gelu_second(S x) {
  return normal_pdf(x) * (S(2) - x * x);
}

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// Op vocabulary on Mat<S>
// ---------------------------------------------------------------------------

template <typename S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a) + " x " + shape_str(b));
  }
  Mat<S> c(a.rows(), b.cols());
  c.noalias() = a * b;
  return c;
}

template <typename S>
Mat<S> transpose(const Mat<S>& a) {
  return a.transpose();
}

namespace detail {
template <typename S>
void require_same_shape(const Mat<S>& a, const Mat<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}
}  // namespace detail

template <typename S>
Mat<S> add(const Mat<S>& a, const Mat<S>& b) {
  detail::require_same_shape(a, b, "add");
  return a + b;
}

template <typename S>
Mat<S> sub(const Mat<S>& a, const Mat<S>& b) {
  detail::require_same_shape(a, b, "sub");
  return a - b;
}

template <typename S>
Mat<S> hadamard(const Mat<S>& a, const Mat<S>& b) {
  detail::require_same_shape(a, b, "hadamard");
  return a.cwiseProduct(b);
}

template <typename S>
Mat<S> scale(const Mat<S>& a, S s) {
  return a * s;
}

template <typename S>
Mat<S> add_scalar(const Mat<S>& a, S s) {
  return (a.array() + s).matrix();
}

template <typename S>
Mat<S> elem_pow(const Mat<S>& a, S p) {
  return a.array().pow(p).matrix();
}

/// a(i,j) * row(0,j)
template <typename S>
Mat<S> scale_cols(const Mat<S>& a, const Mat<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("scale_cols: " + shape_str(a) + " by " + shape_str(row));
  }
  Mat<S> out = a;
  for (Index i = 0; i < out.rows(); ++i) out.row(i).array() *= row.row(0).array();
  return out;
}

/// a(i,j) * col(i,0)
template <typename S>
Mat<S> scale_rows(const Mat<S>& a, const Mat<S>& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("scale_rows: " + shape_str(a) + " by " + shape_str(col));
  }
  Mat<S> out = a;
  for (Index i = 0; i < out.rows(); ++i) out.row(i) *= col(i, 0);
  return out;
}

/// a(i,j) + col(i,0)
template <typename S>
Mat<S> add_col(const Mat<S>& a, const Mat<S>& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("add_col: " + shape_str(a) + " plus " + shape_str(col));
  }
  Mat<S> out = a;
  for (Index i = 0; i < out.rows(); ++i) out.row(i).array() += col(i, 0);
  return out;
}

/// a(i,j) + row(0,j)
template <typename S>
Mat<S> add_row(const Mat<S>& a, const Mat<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: " + shape_str(a) + " plus " + shape_str(row));
  }
  Mat<S> out = a;
  for (Index i = 0; i < out.rows(); ++i) out.row(i) += row;
  return out;
}

template <typename S>
Mat<S> col_sum(const Mat<S>& a) {
  return a.colwise().sum();
}

template <typename S>
Mat<S> row_sum(const Mat<S>& a) {
  return a.rowwise().sum();
}

template <typename S>
Mat<S> sum_all(const Mat<S>& a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.sum();
  return out;
}

/// Keeps entries with row <= col (source step s <= query step t) and zeroes
/// the rest.
template <typename S>
Mat<S> causal_mask(const Mat<S>& m) {
  if (m.rows() != m.cols()) throw DimensionError("causal_mask: non-square " + shape_str(m));
  return m.template triangularView<Eigen::Upper>();
}

template <typename S>
Mat<S> gelu(const Mat<S>& a) {
  return a.unaryExpr([](S x) { return scalar::gelu(x); });
}

template <typename S>
Mat<S> gelu_prime(const Mat<S>& a) {
  return a.unaryExpr([](S x) { return scalar::gelu_prime(x); });
}

template <typename S>
Mat<S> gelu_second(const Mat<S>& a) {
  return a.unaryExpr([](S x) { return scalar::gelu_second(x); });
}

template <typename S>
Mat<S> sigmoid(const Mat<S>& a) {
  return a.unaryExpr([](S x) { return scalar::sigmoid(x); });
}

/// Column-wise softmax with max subtraction.
template <typename S>
Mat<S> softmax_cols(const Mat<S>& m) {
  Mat<S> out(m.rows(), m.cols());
  for (Index j = 0; j < m.cols(); ++j) {
    const S mx = m.col(j).maxCoeff();
    S total = 0;
    for (Index i = 0; i < m.rows(); ++i) {
      out(i, j) = std::exp(m(i, j) - mx);
      total += out(i, j);
    }
    out.col(j) /= total;
  }
  return out;
}

/// Column t is a softmax over rows s <= t; rows s > t get weight 0.
template <typename S>
Mat<S> causal_softmax_cols(const Mat<S>& m) {
  if (m.rows() != m.cols()) throw DimensionError("causal_softmax_cols: non-square " + shape_str(m));
  Mat<S> out = Mat<S>::Zero(m.rows(), m.cols());
  for (Index t = 0; t < m.cols(); ++t) {
    S mx = m(0, t);
    for (Index s = 1; s <= t; ++s) mx = std::max(mx, m(s, t));
    S total = 0;
    for (Index s = 0; s <= t; ++s) {
      out(s, t) = std::exp(m(s, t) - mx);
      total += out(s, t);
    }
    for (Index s = 0; s <= t; ++s) out(s, t) /= total;
  }
  return out;
}

template <typename S>
Mat<S> slice_rows(const Mat<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_str(a));
  }
  return a.middleRows(start, count);
}

template <typename S>
Mat<S> slice_cols(const Mat<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_str(a));
  }
  return a.middleCols(start, count);
}

template <typename S>
Mat<S> concat_rows(const std::vector<Mat<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<S> out(rows, parts.front().cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

template <typename S>
Mat<S> concat_cols(const std::vector<Mat<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat<S> out(parts.front().rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return out;
}

/// Selects columns of a table (e.g. an embedding matrix d x vocab).
template <typename S>
Mat<S> gather_cols(const Mat<S>& table, std::span<const int> ids) {
  Mat<S> out(table.rows(), static_cast<Index>(ids.size()));
  for (Index j = 0; j < out.cols(); ++j) {
    const int id = ids[static_cast<size_t>(j)];
    if (id < 0 || id >= table.cols()) {
      throw DimensionError("gather_cols: id " + std::to_string(id) + " outside " +
                           shape_str(table));
    }
    out.col(j) = table.col(id);
  }
  return out;
}

/// Depthwise causal convolution: out(c,t) = sum_j k(c,j) * x(c, t-(w-1)+j),
/// zero-padded on the left.
template <typename S>
Mat<S> causal_conv1d(const Mat<S>& x, const Mat<S>& kernels) {
  if (kernels.rows() != x.rows() || kernels.cols() < 1) {
    throw DimensionError("causal_conv1d: kernels " + shape_str(kernels) + " for input " +
                         shape_str(x));
  }
  const Index w = kernels.cols();
  Mat<S> out = Mat<S>::Zero(x.rows(), x.cols());
  for (Index c = 0; c < x.rows(); ++c) {
    for (Index t = 0; t < x.cols(); ++t) {
      S acc = 0;
      for (Index j = 0; j < w; ++j) {
        const Index src = t - (w - 1) + j;
        if (src >= 0) acc += kernels(c, j) * x(c, src);
      }
      out(c, t) = acc;
    }
  }
  return out;
}

/// Column-wise log-softmax.
template <typename S>
Mat<S> log_softmax_cols(const Mat<S>& logits) {
  Mat<S> out(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const S mx = logits.col(j).maxCoeff();
    S total = 0;
    for (Index i = 0; i < logits.rows(); ++i) total += std::exp(logits(i, j) - mx);
    const S lse = mx + std::log(total);
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

/// Mean negative log-likelihood of targets[j] under column j of logits.
template <typename S>
Mat<S> cross_entropy(const Mat<S>& logits, std::span<const int> targets) {
  if (static_cast<Index>(targets.size()) != logits.cols() || logits.cols() == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits));
  }
  const Mat<S> logp = log_softmax_cols(logits);
  S total = 0;
  for (Index j = 0; j < logits.cols(); ++j) {
    const int y = targets[static_cast<size_t>(j)];
    if (y < 0 || y >= logits.rows()) throw DimensionError("cross_entropy: target out of range");
    total -= logp(y, j);
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(logits.cols());
  return out;
}

template <typename S>
Mat<S> constant_like(const Mat<S>&, Mat<S> value) {
  return value;
}

/// Runs `fn` on `inputs`. The tape overload stores only the inputs and
/// replays `fn` during the backward sweep.
template <typename S, typename Fn>
std::vector<Mat<S>> checkpoint(const std::vector<Mat<S>>& inputs, Fn&& fn) {
  return fn(inputs);
}

// ---------------------------------------------------------------------------
// Layer normalization, written once over the op vocabulary so the eager and
// taped paths produce identical bits.
// ---------------------------------------------------------------------------

inline constexpr double kDefaultLnEps = 1e-6;

template <typename V, typename S>
struct LayerNormParts {
  V centered;
  V inv_std;  // 1 x n
  V normalized;
};

/// Normalizes each column of x (d x n) and applies gamma, beta (d x 1).
template <typename S, typename V>
LayerNormParts<V, S> layer_norm_parts(const V& x, S eps) {
  const Index d = x.rows();
  if (d < 2) throw DegenerateInputError("layer_norm: needs at least 2 features, got " + std::to_string(d));
  if (!(eps >= S(0))) throw DegenerateInputError("layer_norm: eps must be non-negative");
  const S inv_d = S(1) / static_cast<S>(d);
  V mean = scale(col_sum(x), inv_d);
  V centered = add_row(x, scale(mean, S(-1)));
  V var = scale(col_sum(hadamard(centered, centered)), inv_d);
  V inv_std = elem_pow(add_scalar(var, eps), S(-0.5));
  V normalized = scale_cols(centered, inv_std);
  return {centered, inv_std, normalized};
}

template <typename S, typename V>
V layer_norm_cols(const V& x, const V& gamma, const V& beta, S eps) {
  auto parts = layer_norm_parts<S>(x, eps);
  return add_col(scale_rows(parts.normalized, gamma), beta);
}

template <typename V>
struct LayerNormGrads {
  V dx;
  V dgamma;
  V dbeta;
};

/// Vector-Jacobian product of layer_norm_cols for upstream g (d x n).
template <typename S, typename V>
LayerNormGrads<V> layer_norm_cols_vjp(const V& x, const V& gamma, S eps, const V& upstream) {
  auto parts = layer_norm_parts<S>(x, eps);
  const S inv_d = S(1) / static_cast<S>(x.rows());
  V g_hat = scale_rows(upstream, gamma);
  V mean_g = scale(col_sum(g_hat), inv_d);
  V mean_gx = scale(col_sum(hadamard(g_hat, parts.normalized)), inv_d);
  V inner = sub(add_row(g_hat, scale(mean_g, S(-1))), scale_cols(parts.normalized, mean_gx));
  V dx = scale_cols(inner, parts.inv_std);
  V dgamma = row_sum(hadamard(upstream, parts.normalized));
  V dbeta = row_sum(upstream);
  return {dx, dgamma, dbeta};
}

template <typename S>
Vec<S> layer_norm(const Vec<S>& x, const Vec<S>& gamma, const Vec<S>& beta,
                  S eps = S(kDefaultLnEps)) {
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw DimensionError("layer_norm: x, gamma, beta extents differ");
  }
  return as_vec<S>(layer_norm_cols<S>(as_column<S>(x), as_column<S>(gamma), as_column<S>(beta), eps));
}

template <typename S>
struct LayerNormVjp {
  Vec<S> dx;
  Vec<S> dgamma;
  Vec<S> dbeta;
};

template <typename S>
LayerNormVjp<S> layer_norm_vjp(const Vec<S>& x, const Vec<S>& gamma, const Vec<S>& /*beta*/,
                               S eps, const Vec<S>& upstream) {
  if (gamma.size() != x.size() || upstream.size() != x.size()) {
    throw DimensionError("layer_norm_vjp: extents differ");
  }
  auto g = layer_norm_cols_vjp<S>(as_column<S>(x), as_column<S>(gamma), eps, as_column<S>(upstream));
  return {as_vec<S>(g.dx), as_vec<S>(g.dgamma), as_vec<S>(g.dbeta)};
}

}  // namespace ttt
