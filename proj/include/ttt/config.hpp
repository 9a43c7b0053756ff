#pragma once

// Training configuration and its JSON form. Every field has a default;
// unknown keys are rejected so a typo never silently falls back to one.

#include "ttt/backbone.hpp"
#include "ttt/ttt_layer.hpp"

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ttt {

/// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Precision { F32, F64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& name);

struct OptimConfig {
  double peak_lr = 3e-3;
  double end_lr = 1e-5;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
};

struct RunConfig {
  Index steps = 200;
  /// Tokens per optimizer step; 0 means 32 * context.
  Index tokens_per_batch = 0;
  std::uint64_t seed = 0;
  /// Validation every this many steps (and always at the last step); 0 disables.
  Index eval_interval = 50;
  /// Cap on validation sequences per evaluation; 0 uses all of them.
  Index eval_sequences = 0;
  /// Checkpoint every this many steps; step 0 and the final step are always saved.
  Index checkpoint_interval = 0;
  /// Linear warmup of the inner step size for TTT-MLP, as a fraction of steps.
  double eta_warmup_frac = 0.1;
  Form form = Form::Dual;
  /// Recompute each TTT mini-batch on backward instead of storing it.
  bool checkpoint_time = false;
  Precision precision = Precision::F64;

  Index batch_tokens(Index context) const { return tokens_per_batch > 0 ? tokens_per_batch : 32 * context; }
};

struct DataConfig {
  /// Byte corpus; when empty a synthetic corpus is generated in memory.
  std::string path;
  double split_frac = 0.9;
  Index synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 1;
};

struct OutputConfig {
  std::string dir = "runs/default";
};

struct TrainConfig {
  ModelConfig model;
  OptimConfig optim;
  RunConfig run;
  DataConfig data;
  OutputConfig output;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);

/// Parses a config, filling defaults. Throws ConfigError on unknown keys,
/// wrong types or invalid values.
TrainConfig config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::string& path);

/// Applies TTT_PRECISION={f32,f64} when set.
void apply_precision_env(TrainConfig& cfg);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const void* data, size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);

}  // namespace ttt
