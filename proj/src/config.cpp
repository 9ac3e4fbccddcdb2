#include "remask/config.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "remask/error.hpp"
#include "remask/rng.hpp"

namespace remask {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* ctx) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) throw ConfigError(std::string(ctx) + ": unknown field \"" + item.key() + "\"");
  }
}

template <class V>
void fetch(const json& j, const char* key, V& out, const char* ctx) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(ctx) + "." + key + ": " + e.what());
  }
}

PairSource pair_source_from_name(std::string_view name) {
  if (name == "real-errors") return PairSource::RealErrors;
  if (name == "semantic-perturb") return PairSource::SemanticPerturb;
  if (name == "importance-perturb") return PairSource::ImportancePerturb;
  throw std::invalid_argument("unknown pair source: " + std::string(name));
}

JointVariant joint_variant_from_name(std::string_view name) {
  if (name == "mask-target") return JointVariant::MaskTarget;
  if (name == "binary-head") return JointVariant::BinaryHead;
  throw std::invalid_argument("unknown joint variant: " + std::string(name));
}

template <class Enum, Enum (*Parse)(std::string_view)>
void fetch_enum(const json& j, const char* key, Enum& out, const char* ctx) {
  if (!j.contains(key)) return;
  std::string s;
  fetch(j, key, s, ctx);
  try {
    out = Parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(ctx) + "." + key + ": " + e.what());
  }
}

json optim_to_json(const OptimConfig& o) {
  return {{"peak_lr", o.peak_lr},         {"warmup_steps", o.warmup_steps},
          {"total_steps", o.total_steps}, {"beta1", o.beta1},
          {"beta2", o.beta2},             {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"clip_norm", o.clip_norm}};
}

void optim_from_json(const json& j, OptimConfig& o, const char* ctx) {
  check_keys(j, {"peak_lr", "warmup_steps", "total_steps", "beta1", "beta2", "eps", "weight_decay", "clip_norm"},
             ctx);
  fetch(j, "peak_lr", o.peak_lr, ctx);
  fetch(j, "warmup_steps", o.warmup_steps, ctx);
  fetch(j, "total_steps", o.total_steps, ctx);
  fetch(j, "beta1", o.beta1, ctx);
  fetch(j, "beta2", o.beta2, ctx);
  fetch(j, "eps", o.eps, ctx);
  fetch(j, "weight_decay", o.weight_decay, ctx);
  fetch(j, "clip_norm", o.clip_norm, ctx);
}

json loss_to_json(const LossConfig& l) {
  return {{"weight", weight_fn_name(l.weight)}, {"eps", l.eps}};
}

void loss_from_json(const json& j, LossConfig& l, const char* ctx) {
  check_keys(j, {"weight", "eps"}, ctx);
  fetch_enum<WeightFn, weight_fn_from_name>(j, "weight", l.weight, ctx);
  fetch(j, "eps", l.eps, ctx);
}

}  // namespace

const char* weight_fn_name(WeightFn w) {
  switch (w) {
    case WeightFn::Constant: return "constant";
    case WeightFn::InverseT: return "inverse-t";
  }
  throw std::invalid_argument("bad weight fn value");
}

WeightFn weight_fn_from_name(std::string_view name) {
  if (name == "constant") return WeightFn::Constant;
  if (name == "inverse-t") return WeightFn::InverseT;
  throw std::invalid_argument("unknown loss weight: " + std::string(name));
}

std::string config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"d_model", cfg.model.d_model},
                {"n_heads", cfg.model.n_heads},       {"n_layers", cfg.model.n_layers},
                {"max_positions", cfg.model.max_positions}, {"mask_id", cfg.model.mask_id},
                {"eos_id", cfg.model.eos_id},         {"bos_id", cfg.model.bos_id},
                {"prompt_pad_id", cfg.model.prompt_pad_id}};
  j["data"] = {{"l_max", cfg.data.l_max}, {"w_arith", cfg.data.w_arith}, {"w_sort", cfg.data.w_sort},
               {"w_copy", cfg.data.w_copy}, {"seed", cfg.data.seed}};
  j["n_train"] = cfg.n_train;
  j["n_eval"] = cfg.n_eval;
  j["loss"] = loss_to_json(cfg.loss);
  j["instruct"] = {{"steps", cfg.instruct_steps}, {"batch", cfg.instruct_batch},
                   {"optim", optim_to_json(cfg.instruct_optim)}};
  j["introspect"] = {{"steps", cfg.introspect.steps},
                     {"batch", cfg.introspect.batch},
                     {"optim", optim_to_json(cfg.introspect.optim)},
                     {"source", pair_source_name(cfg.introspect.source)},
                     {"perturb_pp", cfg.introspect.perturb.pp},
                     {"exclude_eos_labels", cfg.introspect.exclude_eos_labels},
                     {"seed", cfg.introspect.seed}};
  j["joint"] = {{"variant", joint_variant_name(cfg.joint.variant)},
                {"alpha", cfg.joint.alpha},
                {"cold_start_fraction", cfg.joint.cold_start_fraction},
                {"steps", cfg.joint.steps},
                {"batch", cfg.joint.batch},
                {"optim", optim_to_json(cfg.joint.optim)},
                {"loss", loss_to_json(cfg.joint.loss)},
                {"seed", cfg.joint.seed}};
  j["inference"] = {{"s0", cfg.inference.s0},
                    {"rounds", cfg.inference.rounds},
                    {"threshold", cfg.inference.threshold},
                    {"response_length", cfg.inference.response_length},
                    {"pin_trailing_eos", cfg.inference.pin_trailing_eos},
                    {"mask_id", cfg.inference.mask_id},
                    {"eos_id", cfg.inference.eos_id}};
  j["eval_rounds"] = cfg.eval_rounds;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  check_keys(j,
             {"seed", "model", "data", "n_train", "n_eval", "loss", "instruct", "introspect", "joint",
              "inference", "eval_rounds", "out_dir"},
             "config");

  RunConfig cfg;
  fetch(j, "seed", cfg.seed, "config");
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, {"vocab_size", "d_model", "n_heads", "n_layers", "max_positions", "mask_id", "eos_id",
                   "bos_id", "prompt_pad_id"},
               "model");
    fetch(m, "vocab_size", cfg.model.vocab_size, "model");
    fetch(m, "d_model", cfg.model.d_model, "model");
    fetch(m, "n_heads", cfg.model.n_heads, "model");
    fetch(m, "n_layers", cfg.model.n_layers, "model");
    fetch(m, "max_positions", cfg.model.max_positions, "model");
    fetch(m, "mask_id", cfg.model.mask_id, "model");
    fetch(m, "eos_id", cfg.model.eos_id, "model");
    fetch(m, "bos_id", cfg.model.bos_id, "model");
    fetch(m, "prompt_pad_id", cfg.model.prompt_pad_id, "model");
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"l_max", "w_arith", "w_sort", "w_copy", "seed"}, "data");
    fetch(d, "l_max", cfg.data.l_max, "data");
    fetch(d, "w_arith", cfg.data.w_arith, "data");
    fetch(d, "w_sort", cfg.data.w_sort, "data");
    fetch(d, "w_copy", cfg.data.w_copy, "data");
    fetch(d, "seed", cfg.data.seed, "data");
  }
  fetch(j, "n_train", cfg.n_train, "config");
  fetch(j, "n_eval", cfg.n_eval, "config");
  if (j.contains("loss")) loss_from_json(j["loss"], cfg.loss, "loss");
  if (j.contains("instruct")) {
    const json& s = j["instruct"];
    check_keys(s, {"steps", "batch", "optim"}, "instruct");
    fetch(s, "steps", cfg.instruct_steps, "instruct");
    fetch(s, "batch", cfg.instruct_batch, "instruct");
    if (s.contains("optim")) optim_from_json(s["optim"], cfg.instruct_optim, "instruct.optim");
  }
  if (j.contains("introspect")) {
    const json& s = j["introspect"];
    check_keys(s, {"steps", "batch", "optim", "source", "perturb_pp", "exclude_eos_labels", "seed"},
               "introspect");
    fetch(s, "steps", cfg.introspect.steps, "introspect");
    fetch(s, "batch", cfg.introspect.batch, "introspect");
    if (s.contains("optim")) optim_from_json(s["optim"], cfg.introspect.optim, "introspect.optim");
    fetch_enum<PairSource, pair_source_from_name>(s, "source", cfg.introspect.source, "introspect");
    fetch(s, "perturb_pp", cfg.introspect.perturb.pp, "introspect");
    fetch(s, "exclude_eos_labels", cfg.introspect.exclude_eos_labels, "introspect");
    fetch(s, "seed", cfg.introspect.seed, "introspect");
  }
  if (j.contains("joint")) {
    const json& s = j["joint"];
    check_keys(s, {"variant", "alpha", "cold_start_fraction", "steps", "batch", "optim", "loss", "seed"},
               "joint");
    fetch_enum<JointVariant, joint_variant_from_name>(s, "variant", cfg.joint.variant, "joint");
    fetch(s, "alpha", cfg.joint.alpha, "joint");
    fetch(s, "cold_start_fraction", cfg.joint.cold_start_fraction, "joint");
    fetch(s, "steps", cfg.joint.steps, "joint");
    fetch(s, "batch", cfg.joint.batch, "joint");
    if (s.contains("optim")) optim_from_json(s["optim"], cfg.joint.optim, "joint.optim");
    if (s.contains("loss")) loss_from_json(s["loss"], cfg.joint.loss, "joint.loss");
    fetch(s, "seed", cfg.joint.seed, "joint");
  }
  if (j.contains("inference")) {
    const json& s = j["inference"];
    check_keys(s, {"s0", "rounds", "threshold", "response_length", "pin_trailing_eos", "mask_id", "eos_id"},
               "inference");
    fetch(s, "s0", cfg.inference.s0, "inference");
    fetch(s, "rounds", cfg.inference.rounds, "inference");
    fetch(s, "threshold", cfg.inference.threshold, "inference");
    fetch(s, "response_length", cfg.inference.response_length, "inference");
    fetch(s, "pin_trailing_eos", cfg.inference.pin_trailing_eos, "inference");
    fetch(s, "mask_id", cfg.inference.mask_id, "inference");
    fetch(s, "eos_id", cfg.inference.eos_id, "inference");
  }
  fetch(j, "eval_rounds", cfg.eval_rounds, "config");
  fetch(j, "out_dir", cfg.out_dir, "config");
  return cfg;
}

uint64_t config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.out_dir.clear();
  return fnv1a64(config_to_json(c));
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open config for writing: " + path);
  f << config_to_json(cfg);
  if (!f) throw ConfigError("short write to config: " + path);
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json(text);
}

InferenceConfig effective_inference(const RunConfig& cfg) {
  InferenceConfig inf = cfg.inference;
  if (inf.response_length == 0) inf.response_length = cfg.data.l_max;
  return inf;
}

void RunConfig::validate() const {
  model.validate();
  effective_inference(*this).validate();
  if (inference.mask_id != model.mask_id || inference.eos_id != model.eos_id)
    throw ConfigError("inference token ids must match the model's mask/eos ids");
  if (n_train < 1 || n_eval < 1) throw ConfigError("n_train and n_eval must be positive");
  if (data.l_max < 8) throw ConfigError("data.l_max must be at least 8");
  if (data.w_arith < 0 || data.w_sort < 0 || data.w_copy < 0 ||
      data.w_arith + data.w_sort + data.w_copy <= 0)
    throw ConfigError("task mixture weights must be nonnegative with positive sum");
  if (loss.eps <= 0) throw ConfigError("loss.eps must be positive");
  if (instruct_steps < 1 || instruct_batch < 1) throw ConfigError("instruct steps/batch must be positive");
  if (introspect.steps < 1 || introspect.batch < 1)
    throw ConfigError("introspect steps/batch must be positive");
  if (introspect.perturb.pp < 0 || introspect.perturb.pp > 1)
    throw ConfigError("introspect.perturb_pp must lie in [0, 1]");
  if (joint.steps < 1 || joint.batch < 1) throw ConfigError("joint steps/batch must be positive");
  if (joint.alpha < 0) throw ConfigError("joint.alpha must be nonnegative");
  if (joint.cold_start_fraction < 0 || joint.cold_start_fraction > 1)
    throw ConfigError("joint.cold_start_fraction must lie in [0, 1]");
  if (joint.loss.eps <= 0) throw ConfigError("joint.loss.eps must be positive");
  if (eval_rounds.empty()) throw ConfigError("eval_rounds must list at least one depth");
  for (int64_t r : eval_rounds)
    if (r < 1) throw ConfigError("eval_rounds entries must be at least 1");
  if (out_dir.empty()) throw ConfigError("out_dir must be set");
}

}  // namespace remask
