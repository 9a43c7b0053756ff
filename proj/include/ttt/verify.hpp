#pragma once

// Executable property checks: the two attention equivalences, primal/dual
// agreement, outer-loop gradient correctness, inner-loop contraction and
// causality. Each returns the worst observed error; the caller owns the
// tolerance.

#include "ttt/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace ttt {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_error = 0;
  double tolerance = 0;
  Index instances = 0;
  double seconds = 0;
  std::string detail;
};

/// max |Z_ttt - Z_linear_attention| over random instances (d <= 16, T <= 64)
/// of the batch-GD, W0 = 0, step-1/2 linear layer. `gradient_scale` != 1
/// injects a fault into the inner gradient.
CheckResult check_linear_attention_equivalence(Index instances, std::uint64_t seed, double tol,
                                               double gradient_scale = 1.0);

/// max |Z_nadaraya_watson - Z_softmax_attention| over random instances.
CheckResult check_kernel_regression_equivalence(Index instances, std::uint64_t seed, double tol);

/// Worst relative (Frobenius) difference of outputs and final weights
/// between the primal and dual forms over {linear, MLP} x {bare, LN +
/// residual} x b in {1, 4, T} x `seeds`.
CheckResult check_primal_dual(Index seeds, std::uint64_t seed, double tol, double gradient_scale = 1.0);

/// Central-difference check of the taped gradient of (a) a single TTT layer
/// objective and (b) the full next-token loss of a one-block model, for both
/// inner models at d = 8, T = 32, b = 4. Reports the max relative error.
CheckResult check_outer_gradients(std::uint64_t seed, double tol);

/// Linear bare inner model, online GD with fixed per-token steps. Fails if
/// any step with eta < 1/||k||^2 does not reduce the token's loss, or if the
/// step eta = 1/(2 ||k||^2) leaves a loss above `exact_tol`.
CheckResult check_contraction(Index sequences, std::uint64_t seed, double exact_tol);

/// Perturbs the input at position s and requires every output before s to
/// be bitwise unchanged, for the layer in both forms, the attention oracles
/// and the full model over every backbone x sequence layer x form.
CheckResult check_causality(std::uint64_t seed);

struct VerifyOptions {
  bool quick = false;
  std::uint64_t seed = 0;
  /// Fault-injection probe: multiplies every inner gradient (1 = off).
  double gradient_scale = 1.0;
};

std::vector<CheckResult> run_verify(const VerifyOptions& opt);

nlohmann::json to_json(const CheckResult& r);
nlohmann::json verify_report(const std::vector<CheckResult>& results);

}  // namespace ttt
