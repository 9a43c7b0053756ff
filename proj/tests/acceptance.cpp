// Acceptance run: one PASS/FAIL line per criterion. Every tolerance and
// budget used in a verdict is a constant in this file.
//
//   acceptance            run all criteria
//   acceptance 1 4 9      run a subset

#include "ttt/bench.hpp"
#include "ttt/train.hpp"
#include "ttt/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>

using namespace ttt;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 20240705;

// Criteria 1-6.
constexpr Index kOracleInstances = 100;
constexpr double kEquivalenceTol = 1e-12;
constexpr double kEquivalenceSeconds = 10.0;
constexpr Index kPrimalDualSeeds = 20;
constexpr double kPrimalDualTol = 1e-10;
constexpr double kPrimalDualSeconds = 60.0;
constexpr double kGradCheckTol = 1e-5;
constexpr double kGradCheckSeconds = 120.0;
constexpr Index kContractionSequences = 50;
constexpr double kExactStepLoss = 1e-20;

// Criterion 7.
constexpr Index kAblationSeeds = 3;
constexpr Index kAblationSteps = 500;
constexpr double kAblationSeconds = 30.0 * 60.0;

// Criterion 8.
constexpr Index kBenchDim = 256;
constexpr Index kBenchLength = 2048;
constexpr Index kBenchMiniBatch = 16;
constexpr Index kBenchReps = 5;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Verdict from_check(const CheckResult& r, double max_seconds) {
  const bool in_time = max_seconds <= 0 || r.seconds < max_seconds;
  std::string d = "max_err=" + fmt(r.max_error) + " tol=" + fmt(r.tolerance) + " n=" + std::to_string(r.instances) +
                  " time=" + fmt(r.seconds) + "s";
  if (max_seconds > 0) d += " (limit " + fmt(max_seconds) + "s)";
  return {r.pass && in_time, d};
}

fs::path work_dir() {
  const fs::path p = fs::temp_directory_path() / "ttt_acceptance";
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Toy language model for the ablation: transformer backbone, TTT-Linear with
// learnable W0 and a fixed step size, as in the rows of the ablation table.
// The step is sized for head_dim 16: eta ||k||^2 ~ 1/16 per token, so a
// 16-token mini-batch stays inside the contraction range.
TrainConfig toy_config(Index mini_batch, bool bare, std::uint64_t seed, const fs::path& dir) {
  TrainConfig c;
  c.model.block.backbone = BackboneKind::TransformerStyle;
  c.model.block.seq_layer = SeqLayerKind::TTTLinear;
  c.model.block.embed_dim = 64;
  c.model.block.heads = 4;
  c.model.n_blocks = 2;
  c.model.context = 128;
  c.model.block.mini_batch = mini_batch;
  c.model.block.bare = bare;
  c.model.block.learnable_eta = false;
  c.model.block.eta_base = 1.0 / 256.0;
  c.run.steps = kAblationSteps;
  c.run.tokens_per_batch = 2048;
  c.run.eval_interval = 0;
  c.run.eval_sequences = 200;
  c.run.seed = seed;
  c.run.precision = Precision::F32;
  c.data.synthetic_bytes = 1 << 21;
  c.output.dir = dir.string();
  return c;
}

Verdict criterion_ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = work_dir() / "ablation";
  fs::remove_all(root);
  const Index T = toy_config(16, false, 0, root).model.context;
  const Corpus corpus = corpus_for(toy_config(16, false, 0, root));

  auto run = [&](Index b, bool bare, std::uint64_t seed) {
    const std::string name = (bare ? "bare_b" : "ln_b") + std::to_string(b) + "_s" + std::to_string(seed);
    TrainConfig cfg = toy_config(b, bare, seed, root / name);
    double ppl;
    try {
      ppl = train_with_precision(cfg, corpus).final_eval.perplexity;
    } catch (const NumericError&) {
      ppl = std::numeric_limits<double>::infinity();  // diverged
    }
    std::cerr << "  ablation " << name << " val_ppl=" << ppl << "\n";
    return ppl;
  };

  std::vector<double> ln16, lnT, bareT;
  for (std::uint64_t s = 0; s < kAblationSeeds; ++s) {
    ln16.push_back(run(16, false, s));
    lnT.push_back(run(T, false, s));
    bareT.push_back(run(T, true, s));
  }
  const double m16 = median3(ln16), mT = median3(lnT), mBare = median3(bareT);
  const double secs = seconds_since(t0);
  const bool ok = m16 < mT && mT < mBare && secs <= kAblationSeconds;
  std::ostringstream d;
  const TrainConfig shown = toy_config(16, false, 0, root);
  d << "params=" << param_count(shown.model) << " tokens/run=" << kAblationSteps * shown.run.tokens_per_batch
    << " median val ppl: b=16 " << fmt(m16) << ", b=T " << fmt(mT) << ", bare b=T " << fmt(mBare) << "; time=" << fmt(secs) << "s";
  return {ok, d.str()};
}

Verdict criterion_bench() {
  BenchSpec spec;
  spec.d = kBenchDim;
  spec.T = kBenchLength;
  spec.b = {kBenchMiniBatch};
  spec.reps = kBenchReps;
  spec.warmup = 1;
  spec.seed = kSeed;
  try {
    const BenchReport r = bench_forms(spec);
    double primal = 0, dual = 0;
    for (const auto& row : r.rows) (row.form == Form::Primal ? primal : dual) = row.median_ms;
    return {dual < primal, "primal " + fmt(primal) + " ms, dual " + fmt(dual) + " ms, ratio " + fmt(primal / dual) +
                               "x, threads=" + std::to_string(r.threads)};
  } catch (const EquivalenceError& e) {
    return {false, e.what()};
  }
}

TrainConfig small_run(const fs::path& dir) {
  TrainConfig c;
  c.model.block.backbone = BackboneKind::MambaStyle;
  c.model.block.seq_layer = SeqLayerKind::TTTMLP;
  c.model.block.embed_dim = 16;
  c.model.block.heads = 2;
  c.model.n_blocks = 2;
  c.model.context = 32;
  c.model.block.mini_batch = 8;
  c.run.steps = 12;
  c.run.tokens_per_batch = 128;
  c.run.eval_interval = 4;
  c.run.eval_sequences = 8;
  c.run.checkpoint_interval = 6;
  c.data.synthetic_bytes = 1 << 15;
  c.output.dir = dir.string();
  return c;
}

Verdict criterion_determinism() {
  const fs::path a = work_dir() / "det_a", b = work_dir() / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const TrainConfig ca = small_run(a), cb = small_run(b);
  train<double>(ca, corpus_for(ca));
  train<double>(cb, corpus_for(cb));
  const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
  const bool same = !ma.empty() && ma == mb;
  // The config blobs differ in output.dir, so compare the tensors.
  const auto ka = load_checkpoint<double>((a / "ckpt_000012.bin").string());
  const auto kb = load_checkpoint<double>((b / "ckpt_000012.bin").string());
  bool ckpt_same = ka.tensors.size() == kb.tensors.size();
  for (size_t i = 0; ckpt_same && i < ka.tensors.size(); ++i) {
    const auto& x = ka.tensors[i].value;
    const auto& y = kb.tensors[i].value;
    ckpt_same = ka.tensors[i].name == kb.tensors[i].name && x.rows() == y.rows() && x.cols() == y.cols() &&
                std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<size_t>(x.size())) == 0;
  }
  return {same && ckpt_same, std::string("metrics.csv ") + (same ? "identical" : "DIFFERS") + " (" +
                                 std::to_string(ma.size()) + " bytes), final checkpoint tensors " +
                                 (ckpt_same ? "identical" : "DIFFERS")};
}

template <typename Fn>
bool rejects(Fn&& fn) {
  try {
    fn();
  } catch (const CheckpointError&) {
    return true;
  }
  return false;
}

Verdict criterion_checkpoint() {
  const fs::path dir = work_dir() / "ckpt";
  fs::remove_all(dir);
  const TrainConfig cfg = small_run(dir);
  train<double>(cfg, corpus_for(cfg));
  const fs::path file = dir / "ckpt_000012.bin";
  const std::string bytes = slurp(file);

  // load -> rebuild params and optimizer -> save gives the same bytes.
  const auto ckpt = load_checkpoint<double>(file.string());
  const auto params = params_from_checkpoint(cfg.model, ckpt);
  AdamW<double> opt({cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, cfg.optim.weight_decay, cfg.optim.grad_clip},
                    optim_slots(cfg.model));
  restore_optimizer(cfg.model, ckpt, opt);
  const std::string again = encode_checkpoint(make_checkpoint(cfg, params, &opt, ckpt.step));
  const bool roundtrip = again == bytes;

  const fs::path bad = dir / "bad.bin";
  auto write = [&](const std::string& s) {
    std::ofstream(bad, std::ios::binary) << s;
    return bad.string();
  };
  std::string magic = bytes;
  magic[0] = 'X';
  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x10);
  const bool r_magic = rejects([&] { load_checkpoint<double>(write(magic)); });
  const bool r_flip = rejects([&] { load_checkpoint<double>(write(flipped)); });
  const bool r_trunc = rejects([&] { load_checkpoint<double>(write(bytes.substr(0, bytes.size() - 100))); });
  const bool r_dtype = rejects([&] { load_checkpoint<float>(file.string()); });
  ModelConfig other = cfg.model;
  other.block.embed_dim = 32;
  const bool r_shape = rejects([&] { params_from_checkpoint(other, ckpt); });

  const bool ok = roundtrip && r_magic && r_flip && r_trunc && r_dtype && r_shape;
  std::ostringstream d;
  d << "re-encode " << (roundtrip ? "bit-exact" : "DIFFERS") << " (" << bytes.size()
    << " bytes); rejected: magic=" << r_magic << " bitflip=" << r_flip << " truncation=" << r_trunc
    << " dtype=" << r_dtype << " shape=" << r_shape;
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"TTT-Linear batch GD equals linear attention",
       [] {
         return from_check(check_linear_attention_equivalence(kOracleInstances, kSeed + 1, kEquivalenceTol),
                           kEquivalenceSeconds);
       }},
      {"Nadaraya-Watson equals softmax attention",
       [] {
         return from_check(check_kernel_regression_equivalence(kOracleInstances, kSeed + 2, kEquivalenceTol),
                           kEquivalenceSeconds);
       }},
      {"primal/dual equivalence grid",
       [] { return from_check(check_primal_dual(kPrimalDualSeeds, kSeed + 3, kPrimalDualTol), kPrimalDualSeconds); }},
      {"outer-loss gradient check",
       [] { return from_check(check_outer_gradients(kSeed + 4, kGradCheckTol), kGradCheckSeconds); }},
      {"inner-loop contraction",
       [] { return from_check(check_contraction(kContractionSequences, kSeed + 5, kExactStepLoss), 0); }},
      {"causality", [] { return from_check(check_causality(kSeed + 6), 0); }},
      {"toy ablations: b=16 < b=T and LN+residual < bare", criterion_ablation},
      {"bench: dual faster than primal (d=256, T=2048, b=16)", criterion_bench},
      {"determinism: identical metrics.csv", criterion_determinism},
      {"checkpoint roundtrip and corruption rejection", criterion_checkpoint},
  };

  bool all = true;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << " -- " << v.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
