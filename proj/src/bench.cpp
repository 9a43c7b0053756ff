#include "ttt/bench.hpp"

#include "ttt/train.hpp"

#include <Eigen/Core>
#include <Eigen/QR>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <ostream>
#include <random>

namespace ttt {

using nlohmann::json;

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double time_ms(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

const char* const kSpecKeys[] = {"d", "T", "b", "kind", "bare", "reps", "warmup", "precision", "seed"};

template <typename S>
BenchReport run_forms(const BenchSpec& spec) {
  BenchReport report;
  report.spec = spec;
  report.threads = Eigen::nbThreads();
  report.equivalence_tol = equivalence_tolerance(spec.precision);

  std::mt19937_64 rng(spec.seed);
  auto layer = random_layer_params<S>(spec.kind, spec.bare, spec.d, 1, spec.b.front(), rng);
  const auto& h = layer.heads.front();
  Mat<S> x(spec.d, spec.T);
  std::normal_distribution<S> normal(S(0), S(1));
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  const S eta_base = default_eta_base<S>(spec.kind);
  const HeadViews<Mat<S>> views = make_views<S, Mat<S>>(x, h.theta_k, h.theta_q, h.theta_v, &h.theta_lr, eta_base);
  const InnerNorm<Mat<S>> ln{h.ln_gamma, h.ln_beta};
  InnerSpec<S> inner = layer.inner;

  for (Index b : spec.b) {
    auto run = [&](Form form) { return ttt_sequence<S, Mat<S>>(inner, form, b, h.init, ln, views).z; };
    const Mat<S> zp = run(Form::Primal);
    const Mat<S> zd = run(Form::Dual);
    const double diff = static_cast<double>((zd - zp).norm() / std::max(zp.norm(), S(1e-30)));
    if (!(diff <= report.equivalence_tol)) {
      throw EquivalenceError("primal and dual outputs differ at b=" + std::to_string(b) + ": rel " +
                             std::to_string(diff) + " > " + std::to_string(report.equivalence_tol));
    }
    double medians[2];
    for (int f = 0; f < 2; ++f) {
      const Form form = f == 0 ? Form::Primal : Form::Dual;
      for (Index w = 0; w < spec.warmup; ++w) run(form);
      std::vector<double> ms;
      for (Index r = 0; r < spec.reps; ++r) {
        ms.push_back(time_ms([&] {
          const Mat<S> z = run(form);
          if (!z.allFinite()) throw NumericError("non-finite bench output");
        }));
      }
      medians[f] = median(ms);
    }
    report.rows.push_back({Form::Primal, b, medians[0], 1.0, 0.0});
    report.rows.push_back({Form::Dual, b, medians[1], medians[0] / medians[1], diff});
  }

  std::vector<Index> bs;
  std::vector<double> dual_ms;
  for (const auto& r : report.rows) {
    if (r.form == Form::Dual) {
      bs.push_back(r.b);
      dual_ms.push_back(r.median_ms);
    }
  }
  report.fit = fit_time_curve(bs, dual_ms);
  return report;
}

}  // namespace

void BenchSpec::validate() const {
  if (d < 1 || T < 1) throw ConfigError("bench: d and T must be positive");
  if (reps < 3) throw ConfigError("bench: reps must be >= 3");
  if (warmup < 0) throw ConfigError("bench: warmup must be >= 0");
  if (b.empty()) throw ConfigError("bench: b list is empty");
  for (Index v : b) {
    if (v < 1 || T % v != 0) {
      throw ConfigError("bench: T=" + std::to_string(T) + " not divisible by b=" + std::to_string(v));
    }
  }
}

json to_json(const BenchSpec& s) {
  return json{{"d", s.d},
              {"T", s.T},
              {"b", s.b},
              {"kind", to_string(s.kind)},
              {"bare", s.bare},
              {"reps", s.reps},
              {"warmup", s.warmup},
              {"precision", to_string(s.precision)},
              {"seed", s.seed}};
}

BenchSpec bench_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("bench spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(std::begin(kSpecKeys), std::end(kSpecKeys), it.key()) == std::end(kSpecKeys)) {
      throw ConfigError("unknown bench key '" + it.key() + "'");
    }
  }
  BenchSpec s;
  try {
    s.d = j.value("d", s.d);
    s.T = j.value("T", s.T);
    if (j.contains("b")) s.b = j.at("b").get<std::vector<Index>>();
    if (j.contains("kind")) s.kind = inner_kind_from_string(j.at("kind").get<std::string>());
    s.bare = j.value("bare", s.bare);
    s.reps = j.value("reps", s.reps);
    s.warmup = j.value("warmup", s.warmup);
    if (j.contains("precision")) s.precision = precision_from_string(j.at("precision").get<std::string>());
    s.seed = j.value("seed", s.seed);
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bench spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  s.validate();
  return s;
}

double equivalence_tolerance(Precision p) { return p == Precision::F64 ? 1e-9 : 1e-3; }

BenchReport bench_forms(const BenchSpec& spec) {
  spec.validate();
  return spec.precision == Precision::F64 ? run_forms<double>(spec) : run_forms<float>(spec);
}

TimeFit fit_time_curve(const std::vector<Index>& b, const std::vector<double>& ms) {
  TimeFit fit;
  if (b.size() != ms.size() || b.size() < 3) return fit;
  const Index n = static_cast<Index>(b.size());
  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    const double bi = static_cast<double>(b[static_cast<size_t>(i)]);
    a.row(i) << 1.0, bi, 1.0 / bi;
    y(i) = ms[static_cast<size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < 3) return fit;
  const Eigen::Vector3d c = qr.solve(y);
  fit.c0 = c(0);
  fit.c1 = c(1);
  fit.c2 = c(2);
  fit.valid = true;
  fit.crossover = (c(1) > 0 && c(2) > 0) ? std::sqrt(c(2) / c(1)) : 0.0;
  return fit;
}

void write_forms_csv(std::ostream& out, const BenchReport& r) {
  out << "# bench=forms threads=" << r.threads << " d=" << r.spec.d << " T=" << r.spec.T
      << " kind=" << to_string(r.spec.kind) << " bare=" << (r.spec.bare ? 1 : 0) << " reps=" << r.spec.reps
      << " warmup=" << r.spec.warmup << " precision=" << to_string(r.spec.precision) << " seed=" << r.spec.seed
      << " equivalence_tol=" << r.equivalence_tol << "\n";
  if (r.fit.valid) {
    out << "# fit dual_ms(b) = " << r.fit.c0 << " + " << r.fit.c1 << "*b + " << r.fit.c2 << "/b crossover_b="
        << r.fit.crossover << "\n";
  }
  out << "form,b,median_ms,speedup,rel_diff\n";
  for (const auto& row : r.rows) {
    out << to_string(row.form) << ',' << row.b << ',' << row.median_ms << ',' << row.speedup << ',' << row.rel_diff
        << '\n';
  }
}

std::vector<SweepRow> sweep_b(const TrainConfig& base, const std::vector<Index>& b,
                              const std::vector<std::uint64_t>& seeds, std::ostream* log) {
  if (seeds.empty()) throw ConfigError("sweep_b: no seeds");
  const Corpus corpus = corpus_for(base);
  std::vector<SweepRow> rows;
  for (Index mb : b) {
    SweepRow row;
    row.b = mb;
    std::vector<double> ms;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.model.block.mini_batch = mb;
      cfg.run.seed = seed;
      cfg.output.dir = (std::filesystem::path(base.output.dir) /
                        ("b" + std::to_string(mb) + "_s" + std::to_string(seed)))
                           .string();
      cfg.validate();
      const TrainSummary s = train_with_precision(cfg, corpus, nullptr);
      row.ppl.push_back(s.final_eval.perplexity);
      ms.push_back(s.median_ms_per_step);
      if (log) {
        *log << "sweep b=" << mb << " seed=" << seed << " val_ppl=" << s.final_eval.perplexity
             << " ms/step=" << s.median_ms_per_step << '\n';
      }
    }
    row.median_ppl = median(row.ppl);
    row.median_ms_per_step = median(ms);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "b,median_val_ppl,median_ms_per_step,ppl_per_seed\n";
  for (const auto& r : rows) {
    out << r.b << ',' << r.median_ppl << ',' << r.median_ms_per_step << ',';
    for (size_t i = 0; i < r.ppl.size(); ++i) out << (i ? ";" : "") << r.ppl[i];
    out << '\n';
  }
}

}  // namespace ttt
