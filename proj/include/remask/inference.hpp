#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "remask/diffusion.hpp"

namespace remask {

struct InferenceConfig {
  int64_t s0 = 8;              // denoise steps for the first round
  int64_t rounds = 2;          // maximum recursion depth R
  double threshold = 0.4;      // confidence threshold c, strict >
  int64_t response_length = 0;
  bool pin_trailing_eos = false;  // keep the trailing EOS run out of remasking
  int32_t mask_id = 0;
  int32_t eos_id = 1;

  void validate() const;  // ConfigError on violation
};

// Mutable loop state: round counter r (counting down), the working sequence,
// the current step budget S, and the last erroneous count e.
struct InferenceState {
  int64_t r = 0;
  MaskedSequence x;
  int64_t s = 0;
  int64_t e = 0;
};

enum class Phase : uint8_t { Unmask, Introspect, Remask, Terminate };
const char* phase_name(Phase p);
Phase phase_from_name(const std::string& name);  // ConfigError on unknown

struct TraceEvent {
  int64_t step = 0;   // strictly increasing within a trace
  int64_t round = 0;  // the r value at emission time
  Phase phase = Phase::Unmask;
  std::vector<int64_t> positions;  // committed / selected / remasked positions
  std::vector<int32_t> tokens;     // unmask: committed; remask: tokens overwritten by MASK
  std::vector<double> scores;      // introspect only: full per-position scores
  std::string reason;              // terminate only: "no-errors" | "depth-exhausted"

  bool operator==(const TraceEvent&) const = default;
};

// {i : scores[i] > c}, strict inequality. Scores must lie in [0,1].
std::vector<int64_t> select_erroneous(std::span<const double> scores, double c);

// S = e // 2 + 1. e must be >= 1: a zero count terminates the loop before
// this is ever consulted.
int64_t update_steps(int64_t e);

struct InferenceResult {
  std::vector<int32_t> tokens;
  std::vector<TraceEvent> trace;
  InferenceState final_state;
};

// The recursive unmask -> introspect -> remask loop. Starts from an all-MASK
// response of cfg.response_length and runs at most cfg.rounds rounds: denoise
// S steps, stop if this was the last round, score the filled sequence, select
// positions above threshold, stop if none, remask them and shrink S. Every
// phase appends a TraceEvent; the terminate event is always last and carries
// the reason.
InferenceResult recursive_infer(ProposalSource& source, const InferenceConfig& cfg);

// Backbone forward passes a completed trace spent: one per unmask event (each
// denoise step is one pass) plus one per introspect event.
int64_t forward_pass_budget(std::span<const TraceEvent> trace);

struct TraceHeader {
  int64_t s0 = 0;
  int64_t rounds = 0;
  double threshold = 0.0;
  uint64_t seed = 0;
  std::string checkpoint;

  bool operator==(const TraceHeader&) const = default;
};

// Line-delimited JSON: one header record, then one record per event. Field
// names are pinned in docs/formats.md.
void write_trace(const std::string& path, const TraceHeader& header, std::span<const TraceEvent> events);
std::pair<TraceHeader, std::vector<TraceEvent>> read_trace(const std::string& path);

// FNV-1a over every event field in emission order; two traces are
// bit-identical iff their digests match.
uint64_t trace_checksum(std::span<const TraceEvent> events);

}  // namespace remask
