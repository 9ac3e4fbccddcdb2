#include "remask/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "remask/diffusion.hpp"
#include "remask/error.hpp"
#include "remask/introspect.hpp"
#include "remask/optim.hpp"
#include "remask/rng.hpp"
#include "remask/tensor.hpp"

namespace remask {

using nlohmann::json;
namespace fs = std::filesystem;

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Instruct: return "instruct";
    case Stage::Introspect: return "introspect";
    case Stage::AblateSemantic: return "ablate-semantic";
    case Stage::AblateImportance: return "ablate-importance";
    case Stage::AblateJoint: return "ablate-joint";
    case Stage::AblateBcJoint: return "ablate-bc-joint";
  }
  return "?";
}

Stage stage_from_name(std::string_view name) {
  for (Stage s : {Stage::Instruct, Stage::Introspect, Stage::AblateSemantic, Stage::AblateImportance,
                  Stage::AblateJoint, Stage::AblateBcJoint})
    if (name == stage_name(s)) return s;
  throw std::invalid_argument("unknown stage: " + std::string(name));
}

std::string checkpoint_path(const RunConfig& cfg, Stage s) {
  return cfg.out_dir + "/" + stage_name(s) + ".ckpt";
}

namespace {

std::string hex16(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace

template <class T>
void train_instruct(Backbone<T>& model, std::span<const TaskExample> data, const Vocabulary& vocab,
                    const RunConfig& cfg, const std::function<void(int64_t, double)>& on_step) {
  if (data.empty()) throw ConfigError("instruct training needs a non-empty dataset");
  Rng rng(mix_seed(cfg.seed, "instruct-train"));
  OptimConfig ocfg = cfg.instruct_optim;
  if (ocfg.total_steps <= 0) ocfg.total_steps = cfg.instruct_steps;
  AdamW<T> opt(ocfg);
  model.register_params(opt);

  for (int64_t step = 0; step < cfg.instruct_steps; ++step) {
    double batch_loss = 0.0;
    for (int64_t b = 0; b < cfg.instruct_batch; ++b) {
      const TaskExample& ex = data[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
      std::vector<int32_t> prompt = vocab.encode(ex.prompt);
      std::vector<int32_t> x0 = dynamic_length_pad(vocab.encode(ex.gold), cfg.data.l_max, rng);
      MaskedSequence xt = forward_noise(x0, rng.uniform01(), model.cfg.mask_id, rng);

      Tape<T> tape;
      BackboneOut<T> fwd = backbone_forward(tape, model, prompt, xt.tokens);
      NodeId loss = unmask_loss(tape, fwd.logits, x0, xt, cfg.loss);
      loss = tape.scale(loss, T(1) / static_cast<T>(cfg.instruct_batch));
      batch_loss += static_cast<double>(tape.value(loss).values[0]);
      tape.backward(loss);
    }
    opt.step();
    if (on_step) on_step(step, batch_loss / static_cast<double>(cfg.instruct_batch));
  }
}

template <class T>
Checkpoint<T> run_stage(Stage stage, const RunConfig& cfg) {
  cfg.validate();
  Vocabulary vocab;
  if (cfg.model.vocab_size < vocab.size())
    throw ConfigError("model vocab_size is smaller than the task vocabulary (" +
                      std::to_string(vocab.size()) + ")");
  fs::create_directories(cfg.out_dir);
  Corpus corpus = make_corpus(cfg.data, cfg.n_train, cfg.n_eval);

  const std::string loss_path = cfg.out_dir + "/" + stage_name(stage) + "-loss.jsonl";
  std::ofstream loss_f(loss_path, std::ios::trunc);
  if (!loss_f) throw ConfigError("cannot open loss log for writing: " + loss_path);
  auto on_step = [&](int64_t step, double loss) {
    if (!std::isfinite(loss))
      throw NonFiniteError(std::string(stage_name(stage)) + ": non-finite loss at step " +
                           std::to_string(step));
    loss_f << json{{"step", step}, {"loss", loss}}.dump() << "\n" << std::flush;
  };

  Checkpoint<T> out;
  out.stage = stage_name(stage);
  out.config_hash = config_hash(cfg);
  out.seed = cfg.seed;

  if (stage == Stage::Instruct) {
    out.backbone = Backbone<T>(cfg.model);
    Rng init(mix_seed(cfg.seed, "model-init"));
    out.backbone.init(init);
    train_instruct(out.backbone, corpus.train, vocab, cfg, on_step);
    out.step = cfg.instruct_steps;
    out.rng_state = Rng(mix_seed(cfg.seed, "instruct-train")).save_state();
  } else {
    const std::string base_path = checkpoint_path(cfg, Stage::Instruct);
    if (!fs::exists(base_path))
      throw ConfigError(std::string(stage_name(stage)) +
                        " requires the instruct checkpoint; run train-instruct first (missing " + base_path +
                        ")");
    Checkpoint<T> base = load_checkpoint<T>(base_path);
    out.backbone = std::move(base.backbone);

    const bool detector_stage =
        stage == Stage::Introspect || stage == Stage::AblateSemantic || stage == Stage::AblateImportance;
    if (detector_stage) {
      // One shared init stream across detector regimes keeps their budgets
      // and starting points identical; only the label source differs.
      Rng irng(mix_seed(cfg.seed, "intro-init"));
      out.intro = init_introspection_from_backbone(out.backbone, irng);
      IntrospectTrainConfig tcfg = cfg.introspect;
      tcfg.source = stage == Stage::Introspect      ? PairSource::RealErrors
                    : stage == Stage::AblateSemantic ? PairSource::SemanticPerturb
                                                     : PairSource::ImportancePerturb;
      if (tcfg.seed == 0) tcfg.seed = mix_seed(cfg.seed, "introspect-data");
      train_introspection(out.backbone, *out.intro, corpus.train, vocab, cfg.data.l_max, tcfg, on_step);
      out.step = tcfg.steps;
      out.rng_state = Rng(mix_seed(tcfg.seed, "introspect-train")).save_state();
    } else {
      JointTrainConfig jcfg = cfg.joint;
      jcfg.variant = stage == Stage::AblateJoint ? JointVariant::MaskTarget : JointVariant::BinaryHead;
      if (jcfg.seed == 0) jcfg.seed = mix_seed(cfg.seed, "joint-data");
      IntrospectionModel<T>* ip = nullptr;
      if (stage == Stage::AblateBcJoint) {
        Rng irng(mix_seed(cfg.seed, "intro-init"));
        out.intro = init_introspection_from_backbone(out.backbone, irng);
        ip = &*out.intro;
      }
      train_joint(out.backbone, ip, corpus.train, vocab, cfg.data.l_max, jcfg, on_step);
      out.step = jcfg.steps;
      out.rng_state = Rng(mix_seed(jcfg.seed, "joint-train")).save_state();
    }
  }

  loss_f.close();
  save_checkpoint(checkpoint_path(cfg, stage), out);
  return out;
}

DetectionMetrics detection_metrics(std::span<const double> scores, std::span<const uint8_t> labels,
                                   double threshold) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("detection_metrics: scores and labels differ in length");
  DetectionMetrics m;
  m.n_total = static_cast<int64_t>(scores.size());
  for (uint8_t y : labels) m.n_pos += y;
  const int64_t n_neg = m.n_total - m.n_pos;

  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    if (pred && labels[i]) ++tp;
    if (pred && !labels[i]) ++fp;
    if (!pred && labels[i]) ++fn;
  }
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = 2 * tp + fp + fn ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;

  // Best F1 over all cuts: sort by score descending and treat each distinct
  // score as "predict positive at score >= this"; equal-score runs can only
  // be taken whole, which the boundary check enforces.
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  int64_t run_tp = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    run_tp += labels[order[k]];
    const bool boundary = k + 1 == order.size() || scores[order[k + 1]] < scores[order[k]];
    if (!boundary) continue;
    const int64_t pred_pos = static_cast<int64_t>(k) + 1;
    const int64_t denom = pred_pos + m.n_pos;  // = 2tp + fp + fn
    if (denom > 0) m.best_f1 = std::max(m.best_f1, 2.0 * static_cast<double>(run_tp) / static_cast<double>(denom));
  }

  // Rank statistic with average ranks on ties; 0.5 when a class is missing.
  if (m.n_pos == 0 || n_neg == 0) {
    m.auc = 0.5;
    return m;
  }
  std::vector<size_t> asc = order;
  std::reverse(asc.begin(), asc.end());
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < asc.size()) {
    size_t j = i;
    while (j + 1 < asc.size() && scores[asc[j + 1]] == scores[asc[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[asc[k]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  m.auc = (pos_rank_sum - 0.5 * static_cast<double>(m.n_pos) * static_cast<double>(m.n_pos + 1)) /
          (static_cast<double>(m.n_pos) * static_cast<double>(n_neg));
  return m;
}

template <class T>
MetricsReport evaluate(Checkpoint<T>& ckpt, std::span<const TaskExample> eval_set, const Vocabulary& vocab,
                       const RunConfig& cfg) {
  if (eval_set.empty()) throw ConfigError("evaluate needs a non-empty eval set");
  fs::create_directories(cfg.out_dir);
  InferenceConfig inf = effective_inference(cfg);

  MetricsReport report;
  report.checkpoint = checkpoint_id(ckpt);
  report.config_hash = hex16(config_hash(cfg));
  report.n_eval = static_cast<int64_t>(eval_set.size());

  IntrospectionModel<T>* intro = ckpt.intro ? &*ckpt.intro : nullptr;
  const ScoreMode mode = intro ? ScoreMode::IntrospectionHead : ScoreMode::MaskProbability;

  for (int64_t r : cfg.eval_rounds) {
    InferenceConfig round_cfg = inf;
    round_cfg.rounds = r;
    round_cfg.validate();

    RoundMetrics rm;
    rm.rounds = r;
    rm.eval_file = "eval-r" + std::to_string(r) + ".jsonl";
    const std::string eval_path = cfg.out_dir + "/" + rm.eval_file;
    std::ofstream ef(eval_path, std::ios::trunc);
    if (!ef) throw ConfigError("cannot open eval log for writing: " + eval_path);

    int64_t n_correct = 0;
    int64_t budget_sum = 0;
    std::map<std::string, std::pair<int64_t, int64_t>> by_kind;  // kind -> (correct, total)

    for (size_t i = 0; i < eval_set.size(); ++i) {
      const TaskExample& ex = eval_set[i];
      BackboneSource<T> source(ckpt.backbone, intro, vocab.encode(ex.prompt), mode);
      InferenceResult res = recursive_infer(source, round_cfg);
      const std::string decoded = vocab.decode(res.tokens);
      const MatchResult match = score_exact_match(decoded, ex);
      const int64_t budget = forward_pass_budget(res.trace);

      n_correct += match.correct;
      budget_sum += budget;
      auto& kc = by_kind[task_kind_name(ex.kind)];
      kc.first += match.correct;
      kc.second += 1;

      ef << json{{"seed", ex.seed},
                 {"kind", task_kind_name(ex.kind)},
                 {"difficulty", ex.difficulty},
                 {"prompt", ex.prompt},
                 {"gold", ex.gold},
                 {"output", decoded},
                 {"correct", match.correct},
                 {"extracted", match.extracted},
                 {"budget", budget},
                 {"trace_checksum", hex16(trace_checksum(res.trace))}}
                .dump()
         << "\n";

      if (i == 0) {
        TraceHeader header;
        header.s0 = round_cfg.s0;
        header.rounds = round_cfg.rounds;
        header.threshold = round_cfg.threshold;
        header.seed = cfg.seed;
        header.checkpoint = report.checkpoint;
        write_trace(cfg.out_dir + "/trace-r" + std::to_string(r) + ".jsonl", header, res.trace);
      }
    }

    rm.accuracy = static_cast<double>(n_correct) / static_cast<double>(eval_set.size());
    for (const auto& [kind, counts] : by_kind)
      rm.accuracy_by_kind[kind] = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    rm.mean_budget = static_cast<double>(budget_sum) / static_cast<double>(eval_set.size());
    rm.overhead_pct = 100.0 * (rm.mean_budget - static_cast<double>(inf.s0)) / static_cast<double>(inf.s0);
    report.rounds.push_back(std::move(rm));
  }

  if (intro) {
    Rng rng(mix_seed(cfg.seed, "eval-detect"));
    std::vector<CorrectionPair> pairs =
        build_correction_batch(ckpt.backbone, eval_set, vocab, cfg.data.l_max, rng);
    report.detection_file = "detect.jsonl";
    const std::string detect_path = cfg.out_dir + "/" + report.detection_file;
    std::ofstream df(detect_path, std::ios::trunc);
    if (!df) throw ConfigError("cannot open detection log for writing: " + detect_path);

    std::vector<double> scores;
    std::vector<uint8_t> labels;
    for (const CorrectionPair& pair : pairs) {
      BackboneSource<T> source(ckpt.backbone, intro, pair.prompt, ScoreMode::IntrospectionHead);
      std::vector<double> s = source.error_scores(pair.x_pred);
      df << json{{"scores", s}, {"labels", pair.y}}.dump() << "\n";
      scores.insert(scores.end(), s.begin(), s.end());
      labels.insert(labels.end(), pair.y.begin(), pair.y.end());
    }
    report.has_detection = true;
    report.detection_threshold = inf.threshold;
    report.detection = detection_metrics(scores, labels, inf.threshold);
  }
  return report;
}

std::string report_to_json(const MetricsReport& report) {
  json rounds = json::array();
  for (const RoundMetrics& rm : report.rounds) {
    rounds.push_back({{"rounds", rm.rounds},
                      {"accuracy", rm.accuracy},
                      {"accuracy_by_kind", rm.accuracy_by_kind},
                      {"mean_budget", rm.mean_budget},
                      {"overhead_pct", rm.overhead_pct},
                      {"eval_file", rm.eval_file}});
  }
  json j;
  j["checkpoint"] = report.checkpoint;
  j["config_hash"] = report.config_hash;
  j["n_eval"] = report.n_eval;
  j["rounds"] = rounds;
  j["reference_overhead_pct"] = {kReferenceOverheadPct[0], kReferenceOverheadPct[1]};
  if (report.has_detection) {
    j["detection"] = {{"precision", report.detection.precision},
                      {"recall", report.detection.recall},
                      {"f1", report.detection.f1},
                      {"best_f1", report.detection.best_f1},
                      {"auc", report.detection.auc},
                      {"n_pos", report.detection.n_pos},
                      {"n_total", report.detection.n_total},
                      {"threshold", report.detection_threshold},
                      {"file", report.detection_file}};
  } else {
    j["detection"] = nullptr;
  }
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("report is not valid JSON: ") + e.what());
  }
  MetricsReport report;
  try {
    j.at("checkpoint").get_to(report.checkpoint);
    j.at("config_hash").get_to(report.config_hash);
    j.at("n_eval").get_to(report.n_eval);
    for (const json& r : j.at("rounds")) {
      RoundMetrics rm;
      r.at("rounds").get_to(rm.rounds);
      r.at("accuracy").get_to(rm.accuracy);
      r.at("accuracy_by_kind").get_to(rm.accuracy_by_kind);
      r.at("mean_budget").get_to(rm.mean_budget);
      r.at("overhead_pct").get_to(rm.overhead_pct);
      r.at("eval_file").get_to(rm.eval_file);
      report.rounds.push_back(std::move(rm));
    }
    if (!j.at("detection").is_null()) {
      const json& d = j["detection"];
      report.has_detection = true;
      d.at("precision").get_to(report.detection.precision);
      d.at("recall").get_to(report.detection.recall);
      d.at("f1").get_to(report.detection.f1);
      d.at("best_f1").get_to(report.detection.best_f1);
      d.at("auc").get_to(report.detection.auc);
      d.at("n_pos").get_to(report.detection.n_pos);
      d.at("n_total").get_to(report.detection.n_total);
      d.at("threshold").get_to(report.detection_threshold);
      d.at("file").get_to(report.detection_file);
    }
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("report is missing fields: ") + e.what());
  }
  return report;
}

void write_report(const std::string& path, const MetricsReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open report for writing: " + path);
  f << report_to_json(report);
  if (!f) throw ConfigError("short write to report: " + path);
}

MetricsReport read_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw CorruptFileError("cannot open report: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return report_from_json(text);
}

template void train_instruct(Backbone<float>&, std::span<const TaskExample>, const Vocabulary&,
                             const RunConfig&, const std::function<void(int64_t, double)>&);
template void train_instruct(Backbone<double>&, std::span<const TaskExample>, const Vocabulary&,
                             const RunConfig&, const std::function<void(int64_t, double)>&);
template Checkpoint<float> run_stage(Stage, const RunConfig&);
template Checkpoint<double> run_stage(Stage, const RunConfig&);
template MetricsReport evaluate(Checkpoint<float>&, std::span<const TaskExample>, const Vocabulary&,
                                const RunConfig&);
template MetricsReport evaluate(Checkpoint<double>&, std::span<const TaskExample>, const Vocabulary&,
                                const RunConfig&);

}  // namespace remask
