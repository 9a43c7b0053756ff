#pragma once

// Wall-clock comparison of the primal and dual forms of one TTT head, and
// the inner mini-batch size sweep over short training runs.

#include "ttt/config.hpp"
#include "ttt/ttt_layer.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ttt {

struct BenchSpec {
  Index d = 64;  // head dim
  Index T = 512;
  std::vector<Index> b = {1, 4, 16, 64};
  InnerKind kind = InnerKind::Linear;
  bool bare = false;
  Index reps = 5;
  Index warmup = 1;
  Precision precision = Precision::F64;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

BenchSpec bench_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BenchSpec& s);

/// Thrown when the two forms disagree; nothing gets timed in that case.
struct EquivalenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormTiming {
  Form form = Form::Dual;
  Index b = 0;
  double median_ms = 0;
  /// primal median / this median at the same b.
  double speedup = 0;
  /// Relative difference of Z against the primal output at the same b.
  double rel_diff = 0;
};

/// Least-squares fit of the dual-form time curve t(b) = c0 + c1 b + c2 / b.
/// `crossover` = sqrt(c2 / c1) when both slopes are positive, else 0.
struct TimeFit {
  double c0 = 0, c1 = 0, c2 = 0;
  double crossover = 0;
  bool valid = false;
};

struct BenchReport {
  BenchSpec spec;
  int threads = 1;
  double equivalence_tol = 0;
  std::vector<FormTiming> rows;
  TimeFit fit;
};

/// Equivalence tolerance between timed paths for a precision.
double equivalence_tolerance(Precision p);

/// Times primal and dual forward passes of a single head (head_dim = d) for
/// each b. Throws EquivalenceError if the outputs differ by more than the
/// precision's tolerance.
BenchReport bench_forms(const BenchSpec& spec);

TimeFit fit_time_curve(const std::vector<Index>& b, const std::vector<double>& ms);

/// CSV: comment lines with the run parameters and thread count, then
/// form,b,median_ms,speedup,rel_diff.
void write_forms_csv(std::ostream& out, const BenchReport& report);

struct SweepRow {
  Index b = 0;
  double median_ppl = 0;
  double median_ms_per_step = 0;
  std::vector<double> ppl;  // one per seed
};

/// Trains `base` once per (b, seed) and reports median validation
/// perplexity and step time. Runs go to <output.dir>/b<b>_s<seed>.
std::vector<SweepRow> sweep_b(const TrainConfig& base, const std::vector<Index>& b,
                              const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr);

/// CSV: b,median_val_ppl,median_ms_per_step,ppl_per_seed (';' separated).
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace ttt
