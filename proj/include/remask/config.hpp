#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "remask/diffusion.hpp"
#include "remask/inference.hpp"
#include "remask/introspect.hpp"
#include "remask/model.hpp"
#include "remask/tasks.hpp"

namespace remask {

// Warmup-then-cosine schedule whose horizon follows the owning stage's step
// count (total_steps 0 = derive at run time).
inline OptimConfig stage_optim(double peak_lr, int64_t warmup) {
  OptimConfig o;
  o.peak_lr = peak_lr;
  o.warmup_steps = warmup;
  o.total_steps = 0;
  return o;
}

inline IntrospectTrainConfig default_introspect_cfg() {
  IntrospectTrainConfig c;
  c.optim = stage_optim(1e-3, 30);
  return c;
}

inline JointTrainConfig default_joint_cfg() {
  JointTrainConfig c;
  c.optim = stage_optim(3e-4, 60);
  return c;
}

// Everything a run needs; (RunConfig, code version) pins every artifact.
// Sub-config seeds left at 0 are derived from the master seed per stage, so
// one number reproduces the whole pipeline while explicit overrides remain
// possible.
struct RunConfig {
  uint64_t seed = 1;
  BackboneConfig model;
  DataConfig data;
  int64_t n_train = 20000;
  int64_t n_eval = 500;
  LossConfig loss;

  int64_t instruct_steps = 1400;
  int64_t instruct_batch = 8;
  OptimConfig instruct_optim = stage_optim(3e-4, 100);

  IntrospectTrainConfig introspect = default_introspect_cfg();
  JointTrainConfig joint = default_joint_cfg();
  InferenceConfig inference;

  std::vector<int64_t> eval_rounds = {1, 3, 6};
  std::string out_dir = "out";

  void validate() const;  // ConfigError on violation
};

// Canonical form: keys sorted, every field present, shortest round-trip
// number formatting. Two configs are identical iff their canonical dumps are.
std::string config_to_json(const RunConfig& cfg);

// Starts from defaults and overwrites the keys present, so partial files
// work; unknown keys are rejected to catch typos. Throws CorruptFileError on
// malformed JSON, ConfigError on unknown/invalid fields.
RunConfig config_from_json(const std::string& text);

// Identity of the computation: hash of the canonical dump with the output
// directory blanked, so relocating a run's artifacts doesn't change it.
uint64_t config_hash(const RunConfig& cfg);

void save_config(const std::string& path, const RunConfig& cfg);
RunConfig load_config(const std::string& path);

// The inference settings a run actually executes: response_length left at 0
// means "as long as the data's padded responses", i.e. data.l_max.
InferenceConfig effective_inference(const RunConfig& cfg);

const char* weight_fn_name(WeightFn w);
WeightFn weight_fn_from_name(std::string_view name);  // throws std::invalid_argument

}  // namespace remask
