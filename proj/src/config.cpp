#include "ttt/config.hpp"

#include <cstdlib>
#include <fstream>

namespace ttt {

using nlohmann::json;

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + name + "' (expected f32|f64)");
}

json to_json(const ModelConfig& m) {
  const BlockConfig& b = m.block;
  return json{{"backbone", to_string(b.backbone)},
              {"seq_layer", to_string(b.seq_layer)},
              {"vocab_size", m.vocab_size},
              {"n_blocks", m.n_blocks},
              {"embed_dim", b.embed_dim},
              {"heads", b.heads},
              {"mlp_hidden", b.mlp_hidden},
              {"conv_width", b.conv_width},
              {"context", m.context},
              {"mini_batch", b.mini_batch},
              {"eta_base", b.eta_base},
              {"learnable_eta", b.learnable_eta},
              {"learnable_init", b.learnable_init},
              {"bare", b.bare},
              {"positional_embedding", m.positional_embedding}};
}

json to_json(const TrainConfig& c) {
  return json{
      {"model", to_json(c.model)},
      {"optim",
       {{"peak_lr", c.optim.peak_lr},
        {"end_lr", c.optim.end_lr},
        {"warmup_frac", c.optim.warmup_frac},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"weight_decay", c.optim.weight_decay},
        {"grad_clip", c.optim.grad_clip}}},
      {"train",
       {{"steps", c.run.steps},
        {"tokens_per_batch", c.run.tokens_per_batch},
        {"seed", c.run.seed},
        {"eval_interval", c.run.eval_interval},
        {"eval_sequences", c.run.eval_sequences},
        {"checkpoint_interval", c.run.checkpoint_interval},
        {"eta_warmup_frac", c.run.eta_warmup_frac},
        {"form", to_string(c.run.form)},
        {"checkpoint_time", c.run.checkpoint_time},
        {"precision", to_string(c.run.precision)}}},
      {"data",
       {{"path", c.data.path},
        {"split_frac", c.data.split_frac},
        {"synthetic_bytes", c.data.synthetic_bytes},
        {"synthetic_seed", c.data.synthetic_seed}}},
      {"output", {{"dir", c.output.dir}}}};
}

namespace {

void check_keys(const json& j, const json& defaults, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) {
      throw ConfigError("unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
  }
}

// Defaults overridden by j. Keys must exist in `defaults` and values must
// have the same JSON type (integers are accepted where floats are expected).
json merged(const json& j, const json& defaults, const std::string& where) {
  check_keys(j, defaults, where);
  json out = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const json& def = defaults.at(it.key());
    const json& val = it.value();
    const bool ok = (def.is_boolean() && val.is_boolean()) || (def.is_string() && val.is_string()) ||
                    (def.is_number_integer() && val.is_number_integer()) ||
                    (def.is_number_float() && val.is_number());
    if (!ok) {
      throw ConfigError("key '" + where + "." + it.key() + "' has type " + val.type_name() + ", expected " +
                        def.type_name());
    }
    out[it.key()] = val;
  }
  return out;
}

template <typename T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

template <typename Fn>
auto translate(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig model_from_merged(const json& m) {
  ModelConfig c;
  c.block.backbone = backbone_kind_from_string(get<std::string>(m, "backbone"));
  c.block.seq_layer = seq_layer_kind_from_string(get<std::string>(m, "seq_layer"));
  c.vocab_size = get<Index>(m, "vocab_size");
  c.n_blocks = get<Index>(m, "n_blocks");
  c.block.embed_dim = get<Index>(m, "embed_dim");
  c.block.heads = get<Index>(m, "heads");
  c.block.mlp_hidden = get<Index>(m, "mlp_hidden");
  c.block.conv_width = get<Index>(m, "conv_width");
  c.context = get<Index>(m, "context");
  c.block.mini_batch = get<Index>(m, "mini_batch");
  c.block.eta_base = get<double>(m, "eta_base");
  c.block.learnable_eta = get<bool>(m, "learnable_eta");
  c.block.learnable_init = get<bool>(m, "learnable_init");
  c.block.bare = get<bool>(m, "bare");
  c.positional_embedding = get<bool>(m, "positional_embedding");
  return c;
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  return translate([&] {
    ModelConfig c = model_from_merged(merged(j, to_json(ModelConfig{}), "model"));
    c.validate();
    return c;
  });
}

TrainConfig config_from_json(const json& j) {
  return translate([&] {
    const TrainConfig def;
    const json d = to_json(def);
    check_keys(j, d, "");
    TrainConfig c;
    c.model = model_from_merged(merged(j.value("model", json::object()), d.at("model"), "model"));

    const json o = merged(j.value("optim", json::object()), d.at("optim"), "optim");
    c.optim.peak_lr = get<double>(o, "peak_lr");
    c.optim.end_lr = get<double>(o, "end_lr");
    c.optim.warmup_frac = get<double>(o, "warmup_frac");
    c.optim.beta1 = get<double>(o, "beta1");
    c.optim.beta2 = get<double>(o, "beta2");
    c.optim.eps = get<double>(o, "eps");
    c.optim.weight_decay = get<double>(o, "weight_decay");
    c.optim.grad_clip = get<double>(o, "grad_clip");

    const json t = merged(j.value("train", json::object()), d.at("train"), "train");
    c.run.steps = get<Index>(t, "steps");
    c.run.tokens_per_batch = get<Index>(t, "tokens_per_batch");
    c.run.seed = get<std::uint64_t>(t, "seed");
    c.run.eval_interval = get<Index>(t, "eval_interval");
    c.run.eval_sequences = get<Index>(t, "eval_sequences");
    c.run.checkpoint_interval = get<Index>(t, "checkpoint_interval");
    c.run.eta_warmup_frac = get<double>(t, "eta_warmup_frac");
    c.run.form = form_from_string(get<std::string>(t, "form"));
    c.run.checkpoint_time = get<bool>(t, "checkpoint_time");
    c.run.precision = precision_from_string(get<std::string>(t, "precision"));

    const json da = merged(j.value("data", json::object()), d.at("data"), "data");
    c.data.path = get<std::string>(da, "path");
    c.data.split_frac = get<double>(da, "split_frac");
    c.data.synthetic_bytes = get<Index>(da, "synthetic_bytes");
    c.data.synthetic_seed = get<std::uint64_t>(da, "synthetic_seed");

    const json out = merged(j.value("output", json::object()), d.at("output"), "output");
    c.output.dir = get<std::string>(out, "dir");

    c.validate();
    return c;
  });
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void TrainConfig::validate() const {
  translate([&] {
    model.validate();
    return 0;
  });
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(optim.peak_lr > 0, "optim.peak_lr must be positive");
  require(optim.end_lr >= 0 && optim.end_lr <= optim.peak_lr, "optim.end_lr must lie in [0, peak_lr]");
  require(optim.warmup_frac > 0 && optim.warmup_frac < 1, "optim.warmup_frac must lie in (0, 1)");
  require(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1, "optim betas must lie in [0, 1)");
  require(optim.eps > 0, "optim.eps must be positive");
  require(optim.weight_decay >= 0, "optim.weight_decay must be >= 0");
  require(optim.grad_clip > 0, "optim.grad_clip must be positive");
  require(run.steps >= 0, "train.steps must be >= 0");
  require(run.tokens_per_batch >= 0, "train.tokens_per_batch must be >= 0");
  require(run.batch_tokens(model.context) % model.context == 0,
          "train.tokens_per_batch " + std::to_string(run.tokens_per_batch) + " is not divisible by context " +
              std::to_string(model.context));
  require(run.eval_interval >= 0 && run.eval_sequences >= 0 && run.checkpoint_interval >= 0,
          "train intervals must be >= 0");
  require(run.eta_warmup_frac >= 0 && run.eta_warmup_frac < 1, "train.eta_warmup_frac must lie in [0, 1)");
  require(data.split_frac > 0 && data.split_frac < 1, "data.split_frac must lie in (0, 1)");
  require(data.synthetic_bytes >= 0, "data.synthetic_bytes must be >= 0");
  require(!output.dir.empty(), "output.dir must not be empty");
}

void apply_precision_env(TrainConfig& cfg) {
  if (const char* env = std::getenv("TTT_PRECISION"); env != nullptr && *env != '\0') {
    cfg.run.precision = precision_from_string(env);
  }
}

std::uint64_t fnv1a64(const void* data, size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace ttt
