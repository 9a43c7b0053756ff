#include <doctest.h>

#include "ttt/verify.hpp"

using namespace ttt;

TEST_CASE("quick verification passes and reports JSON") {
  const auto results = run_verify({.quick = true, .seed = 3});
  CHECK(results.size() >= 5);
  for (const auto& r : results) {
    INFO(r.name << " error " << r.max_error << " tol " << r.tolerance << " " << r.detail);
    CHECK(r.pass);
  }
  const auto report = verify_report(results);
  CHECK(report.at("pass").get<bool>());
  CHECK(nlohmann::json::parse(report.dump()) == report);
}

TEST_CASE("a flipped inner gradient is caught") {
  const auto r = check_linear_attention_equivalence(10, 7, 1e-12, -1.0);
  CHECK_FALSE(r.pass);
  CHECK(r.max_error > 1e-3);

  const auto pd = check_primal_dual(2, 7, 1e-10, -1.0);
  INFO(pd.detail);
  // Flipping the sign in both forms keeps them consistent with each other.
  CHECK(pd.pass);
}

TEST_CASE("contraction and causality hold on fresh seeds") {
  CHECK(check_contraction(5, 11, 1e-20).pass);
  CHECK(check_causality(11).pass);
  CHECK(check_kernel_regression_equivalence(10, 11, 1e-12).pass);
}
