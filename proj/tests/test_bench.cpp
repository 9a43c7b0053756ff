#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "ttt/bench.hpp"

using namespace ttt;
namespace fs = std::filesystem;

TEST_CASE("bench spec parsing") {
  const auto s = bench_spec_from_json(nlohmann::json::parse(R"({"d": 8, "T": 32, "b": [1, 8, 32], "kind": "mlp"})"));
  CHECK(s.d == 8);
  CHECK(s.b == std::vector<Index>{1, 8, 32});
  CHECK(s.kind == InnerKind::MLP2);
  CHECK(bench_spec_from_json(to_json(s)).b == s.b);

  CHECK_THROWS_AS(bench_spec_from_json(nlohmann::json::parse(R"({"reps": 2})")), ConfigError);
  CHECK_THROWS_AS(bench_spec_from_json(nlohmann::json::parse(R"({"T": 30, "b": [4]})")), ConfigError);
  CHECK_THROWS_AS(bench_spec_from_json(nlohmann::json::parse(R"({"dd": 4})")), ConfigError);
  CHECK_THROWS_AS(bench_spec_from_json(nlohmann::json::parse(R"({"b": "16"})")), ConfigError);
  CHECK_THROWS_AS(bench_spec_from_json(nlohmann::json::parse(R"({"precision": "f16"})")), ConfigError);
}

TEST_CASE("time curve fit recovers a known decomposition") {
  const std::vector<Index> b = {1, 2, 4, 8, 16, 32};
  std::vector<double> ms;
  for (Index v : b) ms.push_back(3.0 + 0.5 * static_cast<double>(v) + 8.0 / static_cast<double>(v));
  const TimeFit fit = fit_time_curve(b, ms);
  REQUIRE(fit.valid);
  CHECK(fit.c0 == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(fit.c1 == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(fit.c2 == doctest::Approx(8.0).epsilon(1e-9));
  CHECK(fit.crossover == doctest::Approx(4.0).epsilon(1e-9));
  CHECK_FALSE(fit_time_curve({1, 2}, {1.0, 2.0}).valid);
}

TEST_CASE("forms bench reports equivalent paths and a fixed CSV schema") {
  for (InnerKind kind : {InnerKind::Linear, InnerKind::MLP2}) {
    for (Precision p : {Precision::F64, Precision::F32}) {
      BenchSpec spec;
      spec.d = 8;
      spec.T = 32;
      spec.b = {1, 4, 32};
      spec.kind = kind;
      spec.reps = 3;
      spec.precision = p;
      const BenchReport r = bench_forms(spec);
      REQUIRE(r.rows.size() == 6);
      for (const auto& row : r.rows) {
        CHECK(row.median_ms > 0);
        CHECK(row.rel_diff <= equivalence_tolerance(p));
      }
      std::ostringstream a, b;
      write_forms_csv(a, r);
      write_forms_csv(b, bench_forms(spec));
      // Everything but the timing columns is reproducible.
      auto strip = [](const std::string& s) {
        std::istringstream in(s);
        std::string line, out;
        while (std::getline(in, line)) {
          if (line.rfind("# fit", 0) == 0) continue;
          std::istringstream fields(line);
          std::string form, bs;
          std::getline(fields, form, ',');
          std::getline(fields, bs, ',');
          out += form + "," + bs + "\n";
        }
        return out;
      };
      CHECK(strip(a.str()) == strip(b.str()));
      CHECK(a.str().find("threads=") != std::string::npos);
      CHECK(a.str().find("form,b,median_ms,speedup,rel_diff\n") != std::string::npos);
    }
  }
}

TEST_CASE("mini-batch sweep trains one run per b and seed") {
  const fs::path dir = fs::temp_directory_path() / "ttt_test_sweep";
  fs::remove_all(dir);
  TrainConfig cfg;
  cfg.model.n_blocks = 1;
  cfg.model.context = 16;
  cfg.model.block.embed_dim = 8;
  cfg.model.block.heads = 2;
  cfg.run.steps = 3;
  cfg.run.tokens_per_batch = 32;
  cfg.run.eval_interval = 0;
  cfg.run.eval_sequences = 2;
  cfg.data.synthetic_bytes = 16 * 20;
  cfg.output.dir = dir.string();
  const auto rows = sweep_b(cfg, {4, 16}, {0, 1, 2});
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.ppl.size() == 3);
    CHECK(r.median_ppl > 1.0);
    CHECK(r.median_ppl < 256.5);
  }
  CHECK(fs::exists(dir / "b16_s2" / "metrics.csv"));
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  CHECK(csv.str().rfind("b,median_val_ppl,median_ms_per_step,ppl_per_seed\n", 0) == 0);
  fs::remove_all(dir);
}
