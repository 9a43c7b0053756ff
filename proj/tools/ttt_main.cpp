// Command-line front end: train, eval, verify, bench, generate, corpus.
//
// Exit codes: 0 success, 1 verification failure, 2 config or usage error,
// 3 numeric abort.

#include "ttt/bench.hpp"
#include "ttt/train.hpp"
#include "ttt/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace ttt;
using nlohmann::json;

namespace {

constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

int cmd_train(const std::string& config_path) {
  TrainConfig cfg = load_config(config_path);
  apply_precision_env(cfg);
  cfg.validate();
  const TrainSummary s = train_with_precision(cfg, corpus_for(cfg), &std::cerr);
  std::cout << json{{"steps", s.steps},
                    {"final_loss", s.final_loss},
                    {"val_nll", s.final_eval.mean_nll},
                    {"val_ppl", s.final_eval.perplexity},
                    {"param_count", s.param_count},
                    {"median_ms_per_step", s.median_ms_per_step},
                    {"metrics", s.metrics_path}}
                   .dump(2)
            << '\n';
  return 0;
}

template <typename S>
int eval_with(const std::string& ckpt_path, const std::string& data_path, Index max_sequences) {
  const Checkpoint<S> ckpt = load_checkpoint<S>(ckpt_path);
  const TrainConfig cfg = config_from_json(json::parse(ckpt.config_json));
  const auto params = params_from_checkpoint(cfg.model, ckpt);
  const Corpus c = load_corpus(data_path, cfg.model.context, cfg.data.split_frac);
  std::vector<Sequence> all = c.train;
  all.insert(all.end(), c.val.begin(), c.val.end());
  const EvalResult r = evaluate(cfg.model, params, all, max_sequences);
  std::cout << json{{"step", ckpt.step},
                    {"sequences", r.sequences},
                    {"mean_nll", r.mean_nll},
                    {"perplexity", r.perplexity},
                    {"per_index_nll", r.per_index_nll}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, Index max_sequences) {
  return peek_checkpoint(ckpt).dtype == DType::F32 ? eval_with<float>(ckpt, data, max_sequences)
                                                   : eval_with<double>(ckpt, data, max_sequences);
}

template <typename S>
int generate_with(const std::string& ckpt_path, const std::string& prompt, Index n, double temperature,
                  std::uint64_t seed) {
  const Checkpoint<S> ckpt = load_checkpoint<S>(ckpt_path);
  const TrainConfig cfg = config_from_json(json::parse(ckpt.config_json));
  const auto params = params_from_checkpoint(cfg.model, ckpt);
  std::cout << prompt << generate(cfg.model, params, prompt, n, temperature, seed) << '\n';
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt, Index n, double temperature,
                 std::uint64_t seed) {
  return peek_checkpoint(ckpt).dtype == DType::F32 ? generate_with<float>(ckpt, prompt, n, temperature, seed)
                                                   : generate_with<double>(ckpt, prompt, n, temperature, seed);
}

int cmd_verify(const VerifyOptions& opt, const std::string& out_path) {
  const auto results = run_verify(opt);
  const json report = verify_report(results);
  std::cout << report.dump(2) << '\n';
  if (!out_path.empty()) write_text(out_path, report.dump(2) + "\n");
  return report.at("pass").get<bool>() ? 0 : kExitVerify;
}

// Spec file: {"mode": "forms", ...BenchSpec fields} or
// {"mode": "sweep_b", "config": {...train config...}, "b": [...], "seeds": [...]}.
int cmd_bench(const std::string& spec_path, const std::string& out_path) {
  json j = read_json_file(spec_path);
  if (!j.is_object()) throw ConfigError("bench spec must be a JSON object");
  const std::string mode = j.value("mode", std::string("forms"));
  j.erase("mode");
  std::ostringstream csv;
  if (mode == "forms") {
    write_forms_csv(csv, bench_forms(bench_spec_from_json(j)));
  } else if (mode == "sweep_b") {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "config" && it.key() != "b" && it.key() != "seeds") {
        throw ConfigError("unknown sweep_b key '" + it.key() + "'");
      }
    }
    TrainConfig cfg = config_from_json(j.value("config", json::object()));
    apply_precision_env(cfg);
    std::vector<Index> bs;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    try {
      bs = j.at("b").get<std::vector<Index>>();
      if (j.contains("seeds")) seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("sweep_b: ") + e.what());
    }
    write_sweep_csv(csv, sweep_b(cfg, bs, seeds, &std::cerr));
  } else {
    throw ConfigError("unknown bench mode '" + mode + "' (expected forms|sweep_b)");
  }
  std::cout << csv.str();
  if (!out_path.empty()) write_text(out_path, csv.str());
  return 0;
}

int cmd_corpus(const std::string& out, Index bytes, std::uint64_t seed) {
  if (bytes < 1) throw ConfigError("--bytes must be positive");
  write_text(out, synthetic_corpus(bytes, seed));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time training layers: training, verification and benchmarks"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);

  std::string ckpt_path, data_path;
  Index max_sequences = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a byte file");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "Byte corpus")->required()->check(CLI::ExistingFile);
  eval->add_option("--max-sequences", max_sequences, "Cap on evaluated sequences (0 = all)");

  VerifyOptions vopt;
  std::string verify_out;
  auto* verify = app.add_subcommand("verify", "Run the equivalence, gradient and causality checks");
  verify->add_flag("--quick", vopt.quick, "Smaller instance counts, no gradient check");
  verify->add_option("--seed", vopt.seed, "Random seed");
  verify->add_option("--out", verify_out, "Also write the JSON report here");
  verify->add_option("--inject-gradient-scale", vopt.gradient_scale)->group("");

  std::string bench_spec, bench_out;
  auto* bench = app.add_subcommand("bench", "Primal/dual timing or mini-batch sweep");
  bench->add_option("--spec", bench_spec, "Bench spec JSON")->required()->check(CLI::ExistingFile);
  bench->add_option("--out", bench_out, "Also write the CSV here");

  std::string prompt;
  Index n_generate = 64;
  double temperature = 0.0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "Continue a prompt with a trained checkpoint");
  gen->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", prompt, "Prompt bytes")->required();
  gen->add_option("--n", n_generate, "Bytes to generate");
  gen->add_option("--temperature", temperature, "0 = greedy");
  gen->add_option("--seed", gen_seed, "Sampling seed");

  std::string corpus_out;
  Index corpus_bytes = 1 << 20;
  std::uint64_t corpus_seed = 1;
  auto* corpus = app.add_subcommand("corpus", "Write the synthetic byte corpus");
  corpus->add_option("--out", corpus_out, "Output file")->required();
  corpus->add_option("--bytes", corpus_bytes, "Size in bytes");
  corpus->add_option("--seed", corpus_seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(config_path);
    if (*eval) return cmd_eval(ckpt_path, data_path, max_sequences);
    if (*verify) return cmd_verify(vopt, verify_out);
    if (*bench) return cmd_bench(bench_spec, bench_out);
    if (*gen) return cmd_generate(ckpt_path, prompt, n_generate, temperature, gen_seed);
    if (*corpus) return cmd_corpus(corpus_out, corpus_bytes, corpus_seed);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const EquivalenceError& e) {
    std::cerr << "bench aborted: " << e.what() << '\n';
    return kExitVerify;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
