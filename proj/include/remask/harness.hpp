#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "remask/checkpoint.hpp"
#include "remask/config.hpp"
#include "remask/inference.hpp"
#include "remask/tasks.hpp"

namespace remask {

// The staged protocol: instruct trains the backbone on the unmasking
// objective; introspect trains the error detector on the frozen backbone's
// own mistakes; the ablate stages swap that recipe for a controlled variant
// (perturbation-labelled detectors, or joint objectives that unfreeze the
// backbone).
enum class Stage : uint8_t {
  Instruct,
  Introspect,
  AblateSemantic,
  AblateImportance,
  AblateJoint,
  AblateBcJoint,
};

const char* stage_name(Stage s);
Stage stage_from_name(std::string_view name);  // throws std::invalid_argument

std::string checkpoint_path(const RunConfig& cfg, Stage s);

// Unmasking-objective training over the task mixture: each step draws a
// batch, pads/noises each gold response at t ~ U(0,1), and descends the
// masked cross-entropy. `on_step` sees (step, mean batch loss).
template <class T>
void train_instruct(Backbone<T>& model, std::span<const TaskExample> data, const Vocabulary& vocab,
                    const RunConfig& cfg, const std::function<void(int64_t, double)>& on_step = {});

// Runs one stage end to end: builds the corpus, trains per the stage's
// contract, writes <stage>.ckpt and <stage>-loss.jsonl under cfg.out_dir, and
// returns the checkpoint. Non-instruct stages load instruct.ckpt first and
// throw ConfigError if it is missing.
template <class T>
Checkpoint<T> run_stage(Stage stage, const RunConfig& cfg);

// Binary detection quality of per-position error scores. precision/recall/f1
// use the given threshold (strict >, matching inference selection); best_f1
// sweeps all distinct score cuts; auc is the rank statistic (probability a
// random error outscores a random non-error), with average ranks on ties and
// 0.5 when one class is empty.
struct DetectionMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double best_f1 = 0.0;
  double auc = 0.0;
  int64_t n_pos = 0;
  int64_t n_total = 0;

  bool operator==(const DetectionMetrics&) const = default;
};

DetectionMetrics detection_metrics(std::span<const double> scores, std::span<const uint8_t> labels,
                                   double threshold);

struct RoundMetrics {
  int64_t rounds = 0;
  double accuracy = 0.0;  // exact-match rate over the eval set
  std::map<std::string, double> accuracy_by_kind;
  double mean_budget = 0.0;    // mean forward passes per example, counted from traces
  double overhead_pct = 0.0;   // vs the single-round budget s0
  std::string eval_file;       // per-example rows backing these numbers

  bool operator==(const RoundMetrics&) const = default;
};

// Reference overhead percentages reported by the full-scale system this
// desk-scale build mirrors, emitted alongside our counted numbers for
// context.
inline constexpr double kReferenceOverheadPct[2] = {8.10, 10.30};

struct MetricsReport {
  std::string checkpoint;  // checkpoint_id of the evaluated model
  std::string config_hash;   // 16-hex identity of the RunConfig
  int64_t n_eval = 0;
  std::vector<RoundMetrics> rounds;
  bool has_detection = false;  // detector head present and scored
  DetectionMetrics detection;
  double detection_threshold = 0.0;
  std::string detection_file;

  bool operator==(const MetricsReport&) const = default;
};

// Runs recursive inference at every requested depth over the eval set,
// scores exact match, counts forward passes, and (when the checkpoint
// carries a detector) measures detection quality on freshly built
// correction pairs. Writes eval-r<R>.jsonl, trace-r<R>.jsonl (first
// example's full trace), and detect.jsonl under cfg.out_dir.
template <class T>
MetricsReport evaluate(Checkpoint<T>& ckpt, std::span<const TaskExample> eval_set, const Vocabulary& vocab,
                       const RunConfig& cfg);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);  // CorruptFileError on malformed input
void write_report(const std::string& path, const MetricsReport& report);
MetricsReport read_report(const std::string& path);

extern template void train_instruct(Backbone<float>&, std::span<const TaskExample>, const Vocabulary&,
                                    const RunConfig&, const std::function<void(int64_t, double)>&);
extern template void train_instruct(Backbone<double>&, std::span<const TaskExample>, const Vocabulary&,
                                    const RunConfig&, const std::function<void(int64_t, double)>&);
extern template Checkpoint<float> run_stage(Stage, const RunConfig&);
extern template Checkpoint<double> run_stage(Stage, const RunConfig&);
extern template MetricsReport evaluate(Checkpoint<float>&, std::span<const TaskExample>, const Vocabulary&,
                                       const RunConfig&);
extern template MetricsReport evaluate(Checkpoint<double>&, std::span<const TaskExample>, const Vocabulary&,
                                       const RunConfig&);

}  // namespace remask
