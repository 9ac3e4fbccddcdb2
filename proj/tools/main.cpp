#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "remask/config.hpp"
#include "remask/error.hpp"
#include "remask/harness.hpp"
#include "remask/rng.hpp"

using namespace remask;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  int64_t steps = 0;
  int64_t n_train = 0;
  int64_t n_eval = 0;

  CLI::Option* out_dir_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* n_train_opt = nullptr;
  CLI::Option* n_eval_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "run configuration file (JSON)")->check(CLI::ExistingFile);
  o.out_dir_opt = cmd->add_option("--out-dir", o.out_dir, "artifact directory override");
  o.seed_opt = cmd->add_option("--seed", o.seed, "master seed override");
  o.n_train_opt = cmd->add_option("--n-train", o.n_train, "training corpus size override");
  o.n_eval_opt = cmd->add_option("--n-eval", o.n_eval, "eval corpus size override");
}

RunConfig resolve(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.out_dir_opt && *o.out_dir_opt) cfg.out_dir = o.out_dir;
  if (o.seed_opt && *o.seed_opt) cfg.seed = o.seed;
  if (o.n_train_opt && *o.n_train_opt) cfg.n_train = o.n_train;
  if (o.n_eval_opt && *o.n_eval_opt) cfg.n_eval = o.n_eval;
  return cfg;
}

int do_stage(Stage stage, const RunConfig& cfg) {
  Checkpoint<float> ckpt = run_stage<float>(stage, cfg);
  std::printf("%s: %s (checkpoint %s, %lld steps)\n", stage_name(stage),
              checkpoint_path(cfg, stage).c_str(), checkpoint_id(ckpt).c_str(),
              static_cast<long long>(ckpt.step));
  return 0;
}

void print_report(const MetricsReport& r) {
  std::printf("checkpoint %s  config %s  eval size %lld\n", r.checkpoint.c_str(), r.config_hash.c_str(),
              static_cast<long long>(r.n_eval));
  std::printf("%8s %10s %12s %12s\n", "rounds", "accuracy", "mean budget", "overhead");
  for (const RoundMetrics& rm : r.rounds) {
    std::printf("%8lld %9.2f%% %12.2f %11.2f%%\n", static_cast<long long>(rm.rounds), 100.0 * rm.accuracy,
                rm.mean_budget, rm.overhead_pct);
    for (const auto& [kind, acc] : rm.accuracy_by_kind) std::printf("%20s %6.2f%%\n", kind.c_str(), 100.0 * acc);
  }
  std::printf("reference overhead (full-scale system): %.2f%% / %.2f%%\n", kReferenceOverheadPct[0],
              kReferenceOverheadPct[1]);
  if (r.has_detection) {
    std::printf("detection @%.2f: precision %.3f recall %.3f f1 %.3f | best f1 %.3f auc %.3f (%lld/%lld errors)\n",
                r.detection_threshold, r.detection.precision, r.detection.recall, r.detection.f1,
                r.detection.best_f1, r.detection.auc, static_cast<long long>(r.detection.n_pos),
                static_cast<long long>(r.detection.n_total));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-diffusion sequence model with recursive self-correction"};
  app.require_subcommand(1);

  CommonOpts instruct_opts;
  CLI::App* cmd_instruct = app.add_subcommand("train-instruct", "train the backbone on the unmasking objective");
  add_common(cmd_instruct, instruct_opts);
  instruct_opts.steps_opt = cmd_instruct->add_option("--steps", instruct_opts.steps, "training steps override");

  CommonOpts introspect_opts;
  CLI::App* cmd_introspect =
      app.add_subcommand("train-introspect", "train the error detector on the frozen backbone's mistakes");
  add_common(cmd_introspect, introspect_opts);
  introspect_opts.steps_opt =
      cmd_introspect->add_option("--steps", introspect_opts.steps, "training steps override");

  CommonOpts ablate_opts;
  std::string regime;
  CLI::App* cmd_ablate = app.add_subcommand("ablate", "train a controlled variant of the detector recipe");
  cmd_ablate->add_option("regime", regime, "semantic | importance | joint | bc-joint")->required();
  add_common(cmd_ablate, ablate_opts);
  ablate_opts.steps_opt = cmd_ablate->add_option("--steps", ablate_opts.steps, "training steps override");

  CommonOpts infer_opts;
  std::string infer_ckpt, prompt, kind_name, trace_path;
  int difficulty = 1;
  uint64_t task_seed = 0;
  int64_t rounds_override = 0, s0_override = 0;
  double threshold_override = -1.0;
  CLI::App* cmd_infer = app.add_subcommand("infer", "run recursive inference on one prompt");
  add_common(cmd_infer, infer_opts);
  cmd_infer->add_option("--checkpoint", infer_ckpt, "checkpoint to load")->required()->check(CLI::ExistingFile);
  auto* prompt_opt = cmd_infer->add_option("--prompt", prompt, "task prompt text, e.g. \"a 7 + 8 - 3\"");
  auto* kind_opt = cmd_infer->add_option("--kind", kind_name, "generate the prompt: arith-chain | sort | mapped-copy");
  cmd_infer->add_option("--difficulty", difficulty, "difficulty for --kind");
  cmd_infer->add_option("--task-seed", task_seed, "generation seed for --kind");
  cmd_infer->add_option("--trace", trace_path, "trace output path (default <out-dir>/infer-trace.jsonl)");
  cmd_infer->add_option("--rounds", rounds_override, "max recursion depth override");
  cmd_infer->add_option("--s0", s0_override, "first-round denoise steps override");
  cmd_infer->add_option("--threshold", threshold_override, "remask confidence threshold override");

  CommonOpts eval_opts;
  std::string eval_ckpt;
  std::vector<int64_t> eval_rounds;
  CLI::App* cmd_eval = app.add_subcommand("evaluate", "score a checkpoint over the eval corpus");
  add_common(cmd_eval, eval_opts);
  cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint to load")->required()->check(CLI::ExistingFile);
  auto* rounds_opt = cmd_eval->add_option("--rounds", eval_rounds, "recursion depths to sweep");

  CommonOpts report_opts;
  CLI::App* cmd_report = app.add_subcommand("report", "print the metrics report for a run directory");
  add_common(cmd_report, report_opts);

  CommonOpts gen_opts;
  std::string gen_out, split = "train";
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "write the task corpus to a dataset file");
  add_common(cmd_gen, gen_opts);
  cmd_gen->add_option("--out", gen_out, "dataset output path")->required();
  cmd_gen->add_option("--split", split, "train | eval")->check(CLI::IsMember({"train", "eval"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_instruct) {
      RunConfig cfg = resolve(instruct_opts);
      if (*instruct_opts.steps_opt) cfg.instruct_steps = instruct_opts.steps;
      return do_stage(Stage::Instruct, cfg);
    }

    if (*cmd_introspect) {
      RunConfig cfg = resolve(introspect_opts);
      if (*introspect_opts.steps_opt) cfg.introspect.steps = introspect_opts.steps;
      return do_stage(Stage::Introspect, cfg);
    }

    if (*cmd_ablate) {
      RunConfig cfg = resolve(ablate_opts);
      Stage stage;
      if (regime == "semantic") stage = Stage::AblateSemantic;
      else if (regime == "importance") stage = Stage::AblateImportance;
      else if (regime == "joint") stage = Stage::AblateJoint;
      else if (regime == "bc-joint") stage = Stage::AblateBcJoint;
      else throw ConfigError("unknown ablation regime: " + regime + " (want semantic | importance | joint | bc-joint)");
      if (*ablate_opts.steps_opt) {
        cfg.introspect.steps = ablate_opts.steps;
        cfg.joint.steps = ablate_opts.steps;
      }
      return do_stage(stage, cfg);
    }

    if (*cmd_infer) {
      RunConfig cfg = resolve(infer_opts);
      Vocabulary vocab;
      TaskExample ex;
      bool scored = false;
      if (*kind_opt) {
        ex = example_from_seed(task_kind_from_name(kind_name), difficulty, task_seed);
        prompt = ex.prompt;
        scored = true;
      } else if (!*prompt_opt) {
        throw ConfigError("infer needs --prompt or --kind");
      }

      Checkpoint<float> ckpt = load_checkpoint<float>(infer_ckpt);
      InferenceConfig inf = effective_inference(cfg);
      if (rounds_override > 0) inf.rounds = rounds_override;
      if (s0_override > 0) inf.s0 = s0_override;
      if (threshold_override >= 0) inf.threshold = threshold_override;
      inf.validate();

      IntrospectionModel<float>* intro = ckpt.intro ? &*ckpt.intro : nullptr;
      BackboneSource<float> source(ckpt.backbone, intro, vocab.encode(prompt),
                                   intro ? ScoreMode::IntrospectionHead : ScoreMode::MaskProbability);
      InferenceResult res = recursive_infer(source, inf);
      const std::string decoded = vocab.decode(res.tokens);

      if (trace_path.empty()) trace_path = cfg.out_dir + "/infer-trace.jsonl";
      std::filesystem::create_directories(std::filesystem::path(trace_path).parent_path());
      TraceHeader header;
      header.s0 = inf.s0;
      header.rounds = inf.rounds;
      header.threshold = inf.threshold;
      header.seed = cfg.seed;
      header.checkpoint = checkpoint_id(ckpt);
      write_trace(trace_path, header, res.trace);

      std::printf("prompt:  %s\n", prompt.c_str());
      std::printf("output:  %s\n", decoded.c_str());
      if (scored) {
        std::printf("gold:    %s\n", ex.gold.c_str());
        std::printf("correct: %s\n", score_exact_match(decoded, ex).correct ? "yes" : "no");
      }
      std::printf("stopped: %s after %lld forward passes (trace %s)\n", res.trace.back().reason.c_str(),
                  static_cast<long long>(forward_pass_budget(res.trace)), trace_path.c_str());
      return 0;
    }

    if (*cmd_eval) {
      RunConfig cfg = resolve(eval_opts);
      if (*rounds_opt) cfg.eval_rounds = eval_rounds;
      cfg.validate();
      Checkpoint<float> ckpt = load_checkpoint<float>(eval_ckpt);
      Corpus corpus = make_corpus(cfg.data, cfg.n_train, cfg.n_eval);
      MetricsReport report = evaluate(ckpt, corpus.eval, Vocabulary(), cfg);
      write_report(cfg.out_dir + "/report.json", report);
      print_report(report);
      std::printf("report: %s/report.json\n", cfg.out_dir.c_str());
      return 0;
    }

    if (*cmd_report) {
      RunConfig cfg = resolve(report_opts);
      print_report(read_report(cfg.out_dir + "/report.json"));
      return 0;
    }

    if (*cmd_gen) {
      RunConfig cfg = resolve(gen_opts);
      Corpus corpus = make_corpus(cfg.data, cfg.n_train, cfg.n_eval);
      const auto& examples = split == "train" ? corpus.train : corpus.eval;
      write_dataset(gen_out, examples);
      std::printf("%s: %zu %s examples\n", gen_out.c_str(), examples.size(), split.c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
