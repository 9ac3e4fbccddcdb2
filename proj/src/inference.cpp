#include "remask/inference.hpp"

#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "remask/error.hpp"
#include "remask/rng.hpp"

namespace remask {

using nlohmann::json;

void InferenceConfig::validate() const {
  if (rounds < 1) throw ConfigError("inference: rounds must be >= 1");
  if (s0 < 1) throw ConfigError("inference: s0 must be >= 1");
  if (threshold < 0.0 || threshold > 1.0) throw ConfigError("inference: threshold must lie in [0,1]");
  if (response_length < 1) throw ConfigError("inference: response_length must be >= 1");
  if (mask_id == eos_id) throw ConfigError("inference: mask_id and eos_id collide");
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Unmask: return "unmask";
    case Phase::Introspect: return "introspect";
    case Phase::Remask: return "remask";
    case Phase::Terminate: return "terminate";
  }
  return "?";
}

Phase phase_from_name(const std::string& name) {
  if (name == "unmask") return Phase::Unmask;
  if (name == "introspect") return Phase::Introspect;
  if (name == "remask") return Phase::Remask;
  if (name == "terminate") return Phase::Terminate;
  throw ConfigError("unknown trace phase '" + name + "'");
}

std::vector<int64_t> select_erroneous(std::span<const double> scores, double c) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] < 0.0 || scores[i] > 1.0)
      throw std::invalid_argument("select_erroneous: score " + std::to_string(scores[i]) +
                                  " at position " + std::to_string(i) + " is outside [0,1]");
    if (scores[i] > c) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

int64_t update_steps(int64_t e) {
  if (e < 1) throw std::invalid_argument("update_steps: the loop must terminate before e reaches 0");
  return e / 2 + 1;
}

namespace {

// First index of the maximal trailing EOS run, or len when there is none.
int64_t trailing_eos_start(std::span<const int32_t> tokens, int32_t eos_id) {
  int64_t i = static_cast<int64_t>(tokens.size());
  while (i > 0 && tokens[static_cast<size_t>(i - 1)] == eos_id) --i;
  return i;
}

}  // namespace

InferenceResult recursive_infer(ProposalSource& source, const InferenceConfig& cfg) {
  cfg.validate();

  InferenceResult res;
  InferenceState& st = res.final_state;
  st.x.tokens.assign(static_cast<size_t>(cfg.response_length), cfg.mask_id);
  st.x.mask_flags.assign(static_cast<size_t>(cfg.response_length), 1);
  st.x.t = 1.0;
  st.s = cfg.s0;
  st.e = 0;

  int64_t step_idx = 0;
  for (st.r = cfg.rounds; st.r >= 1; --st.r) {
    denoise_sample(source, st.x, st.s, [&](const DenoiseStep& ds) {
      TraceEvent ev;
      ev.step = step_idx++;
      ev.round = st.r;
      ev.phase = Phase::Unmask;
      ev.positions = ds.positions;
      ev.tokens = ds.tokens;
      res.trace.push_back(std::move(ev));
      // fold the committed tokens back into the working sequence
      for (size_t k = 0; k < ds.positions.size(); ++k) {
        st.x.tokens[static_cast<size_t>(ds.positions[k])] = ds.tokens[k];
        st.x.mask_flags[static_cast<size_t>(ds.positions[k])] = 0;
      }
    });

    if (st.r == 1) {
      TraceEvent ev;
      ev.step = step_idx++;
      ev.round = st.r;
      ev.phase = Phase::Terminate;
      ev.reason = "depth-exhausted";
      res.trace.push_back(std::move(ev));
      break;
    }

    std::vector<double> scores = source.error_scores(st.x.tokens);
    if (scores.size() != st.x.tokens.size())
      throw Error("recursive_infer: score vector length " + std::to_string(scores.size()) +
                  " does not match the sequence length " + std::to_string(st.x.tokens.size()));
    std::vector<int64_t> erroneous = select_erroneous(scores, cfg.threshold);
    if (cfg.pin_trailing_eos) {
      int64_t pin_from = trailing_eos_start(st.x.tokens, cfg.eos_id);
      std::erase_if(erroneous, [&](int64_t i) { return i >= pin_from; });
    }

    TraceEvent intro;
    intro.step = step_idx++;
    intro.round = st.r;
    intro.phase = Phase::Introspect;
    intro.positions = erroneous;
    intro.scores = scores;
    res.trace.push_back(std::move(intro));

    if (erroneous.empty()) {
      TraceEvent ev;
      ev.step = step_idx++;
      ev.round = st.r;
      ev.phase = Phase::Terminate;
      ev.reason = "no-errors";
      res.trace.push_back(std::move(ev));
      break;
    }

    TraceEvent remask;
    remask.step = step_idx++;
    remask.round = st.r;
    remask.phase = Phase::Remask;
    remask.positions = erroneous;
    for (int64_t i : erroneous) {
      remask.tokens.push_back(st.x.tokens[static_cast<size_t>(i)]);
      st.x.tokens[static_cast<size_t>(i)] = cfg.mask_id;
      st.x.mask_flags[static_cast<size_t>(i)] = 1;
    }
    res.trace.push_back(std::move(remask));

    st.e = static_cast<int64_t>(erroneous.size());
    st.s = update_steps(st.e);
  }

  res.tokens = st.x.tokens;
  return res;
}

int64_t forward_pass_budget(std::span<const TraceEvent> trace) {
  int64_t n = 0;
  for (const TraceEvent& ev : trace)
    if (ev.phase == Phase::Unmask || ev.phase == Phase::Introspect) ++n;
  return n;
}

namespace {

json event_to_json(const TraceEvent& ev) {
  json j{{"type", "event"},
         {"step", ev.step},
         {"round", ev.round},
         {"phase", phase_name(ev.phase)},
         {"positions", ev.positions}};
  if (ev.phase == Phase::Unmask || ev.phase == Phase::Remask) j["tokens"] = ev.tokens;
  if (ev.phase == Phase::Introspect) j["scores"] = ev.scores;
  if (ev.phase == Phase::Terminate) j["reason"] = ev.reason;
  return j;
}

TraceEvent event_from_json(const json& j, const std::string& path, size_t line_no) {
  try {
    TraceEvent ev;
    ev.step = j.at("step").get<int64_t>();
    ev.round = j.at("round").get<int64_t>();
    ev.phase = phase_from_name(j.at("phase").get<std::string>());
    ev.positions = j.at("positions").get<std::vector<int64_t>>();
    if (j.contains("tokens")) ev.tokens = j.at("tokens").get<std::vector<int32_t>>();
    if (j.contains("scores")) ev.scores = j.at("scores").get<std::vector<double>>();
    if (j.contains("reason")) ev.reason = j.at("reason").get<std::string>();
    return ev;
  } catch (const json::exception& e) {
    throw CorruptFileError(path + ":" + std::to_string(line_no) + ": bad trace event: " + e.what());
  }
}

}  // namespace

void write_trace(const std::string& path, const TraceHeader& header, std::span<const TraceEvent> events) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open trace file for writing: " + path);
  json h{{"type", "header"}, {"s0", header.s0},     {"rounds", header.rounds},
         {"threshold", header.threshold}, {"seed", header.seed}, {"checkpoint", header.checkpoint}};
  out << h.dump() << "\n";
  for (const TraceEvent& ev : events) out << event_to_json(ev).dump() << "\n";
  if (!out) throw ConfigError("short write to trace file: " + path);
}

std::pair<TraceHeader, std::vector<TraceEvent>> read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorruptFileError("cannot open trace file: " + path);
  std::string line;
  size_t line_no = 0;
  TraceHeader header;
  bool have_header = false;
  std::vector<TraceEvent> events;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw CorruptFileError(path + ":" + std::to_string(line_no) + ": not valid JSON");
    std::string type = j.value("type", "");
    if (type == "header") {
      if (have_header) throw CorruptFileError(path + ": duplicate header record");
      try {
        header.s0 = j.at("s0").get<int64_t>();
        header.rounds = j.at("rounds").get<int64_t>();
        header.threshold = j.at("threshold").get<double>();
        header.seed = j.at("seed").get<uint64_t>();
        header.checkpoint = j.at("checkpoint").get<std::string>();
      } catch (const json::exception& e) {
        throw CorruptFileError(path + ":" + std::to_string(line_no) + ": bad trace header: " + e.what());
      }
      have_header = true;
    } else if (type == "event") {
      events.push_back(event_from_json(j, path, line_no));
    } else {
      throw CorruptFileError(path + ":" + std::to_string(line_no) + ": unknown record type '" + type + "'");
    }
  }
  if (!have_header) throw CorruptFileError(path + ": missing header record");
  return {header, events};
}

uint64_t trace_checksum(std::span<const TraceEvent> events) {
  Fnv64 h;
  for (const TraceEvent& ev : events) {
    h.update(&ev.step, sizeof ev.step);
    h.update(&ev.round, sizeof ev.round);
    uint8_t p = static_cast<uint8_t>(ev.phase);
    h.update(&p, sizeof p);
    h.update(ev.positions.data(), ev.positions.size() * sizeof(int64_t));
    h.update(ev.tokens.data(), ev.tokens.size() * sizeof(int32_t));
    h.update(ev.scores.data(), ev.scores.size() * sizeof(double));
    h.update(ev.reason);
  }
  return h.digest();
}

}  // namespace remask
