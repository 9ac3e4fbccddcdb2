#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "remask/inference.hpp"
#include "remask/introspect.hpp"
#include "trace_oracle.hpp"

using namespace remask;
using namespace remask::testing;

namespace {

// Delegating source that records every mask pattern the engine exposes to
// the model, so remask soundness can be checked from the outside.
class RecordingSource : public ProposalSource {
 public:
  explicit RecordingSource(ProposalSource& inner) : inner_(inner) {}
  Proposal propose(const MaskedSequence& xt) override {
    seen_masks.push_back(xt.mask_flags);
    return inner_.propose(xt);
  }
  std::vector<double> error_scores(std::span<const int32_t> x_pred) override {
    scored_sequences.emplace_back(x_pred.begin(), x_pred.end());
    return inner_.error_scores(x_pred);
  }
  std::vector<std::vector<uint8_t>> seen_masks;
  std::vector<std::vector<int32_t>> scored_sequences;

 private:
  ProposalSource& inner_;
};

Proposal uniform_proposal(int64_t len, int32_t token, double conf) {
  Proposal p;
  p.tokens.assign(static_cast<size_t>(len), token);
  p.confidence.assign(static_cast<size_t>(len), conf);
  return p;
}

void check_trace_shape(const std::vector<TraceEvent>& trace) {
  REQUIRE(!trace.empty());
  for (size_t i = 0; i < trace.size(); ++i) REQUIRE(trace[i].step == static_cast<int64_t>(i));
  REQUIRE(trace.back().phase == Phase::Terminate);
  // within each round: a run of unmask events, then introspect, then remask
  // (or a terminate ending the trace)
  for (size_t i = 0; i + 1 < trace.size(); ++i) {
    Phase cur = trace[i].phase, nxt = trace[i + 1].phase;
    if (cur == Phase::Unmask) REQUIRE((nxt == Phase::Unmask || nxt == Phase::Introspect || nxt == Phase::Terminate));
    if (cur == Phase::Introspect) REQUIRE((nxt == Phase::Remask || nxt == Phase::Terminate));
    if (cur == Phase::Remask) REQUIRE(nxt == Phase::Unmask);
    REQUIRE(cur != Phase::Terminate);
  }
}

}  // namespace

TEST_CASE("erroneous-position selection is a strict threshold") {
  std::vector<double> scores{0.39, 0.40, 0.41};
  CHECK(select_erroneous(scores, 0.4) == std::vector<int64_t>{2});

  std::vector<double> low{0.1, 0.4, 0.0};
  CHECK(select_erroneous(low, 0.4).empty());

  std::vector<double> some{0.0, 0.001, 0.0};
  CHECK(select_erroneous(some, 0.0) == std::vector<int64_t>{1});

  std::vector<double> bad{0.5, 1.2};
  CHECK_THROWS_AS((void)select_erroneous(bad, 0.4), std::invalid_argument);
  std::vector<double> neg{-0.1};
  CHECK_THROWS_AS((void)select_erroneous(neg, 0.4), std::invalid_argument);
  CHECK(select_erroneous({}, 0.4).empty());
}

TEST_CASE("step budget update is floor halving plus one") {
  CHECK(update_steps(1) == 1);
  CHECK(update_steps(2) == 2);
  CHECK(update_steps(4) == 3);
  CHECK(update_steps(5) == 3);
  CHECK(update_steps(9) == 5);
  CHECK_THROWS_AS((void)update_steps(0), std::invalid_argument);
  CHECK_THROWS_AS((void)update_steps(-3), std::invalid_argument);
}

TEST_CASE("config validation rejects out-of-range settings") {
  InferenceConfig good;
  good.response_length = 8;
  CHECK_NOTHROW(good.validate());
  auto reject = [&](auto mutate) {
    InferenceConfig cfg = good;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  };
  reject([](InferenceConfig& c) { c.rounds = 0; });
  reject([](InferenceConfig& c) { c.s0 = 0; });
  reject([](InferenceConfig& c) { c.threshold = -0.01; });
  reject([](InferenceConfig& c) { c.threshold = 1.01; });
  reject([](InferenceConfig& c) { c.response_length = 0; });
  reject([](InferenceConfig& c) { c.eos_id = c.mask_id; });
}

TEST_CASE("a single round is plain denoising with no introspection") {
  InferenceConfig cfg;
  cfg.rounds = 1;
  cfg.s0 = 4;
  cfg.response_length = 8;

  std::vector<Proposal> props(4, uniform_proposal(8, 5, 0.9));
  ScriptedSource src(props, {});
  auto res = recursive_infer(src, cfg);

  check_trace_shape(res.trace);
  int64_t unmask = 0, introspect = 0;
  for (const TraceEvent& ev : res.trace) {
    unmask += ev.phase == Phase::Unmask;
    introspect += ev.phase == Phase::Introspect;
  }
  CHECK(unmask == 4);
  CHECK(introspect == 0);
  CHECK(res.trace.back().reason == "depth-exhausted");
  CHECK(res.tokens == std::vector<int32_t>(8, 5));
  CHECK(forward_pass_budget(res.trace) == 4);

  // identical to running the sampler directly
  ScriptedSource again(props, {});
  MaskedSequence x;
  x.tokens.assign(8, 0);
  x.mask_flags.assign(8, 1);
  x.t = 1.0;
  CHECK(denoise_sample(again, x, 4) == res.tokens);
}

TEST_CASE("all-clear introspection scores end the loop with the first-pass output") {
  InferenceConfig cfg;
  cfg.rounds = 3;
  cfg.s0 = 2;
  cfg.response_length = 6;

  std::vector<Proposal> props(2, uniform_proposal(6, 7, 0.5));
  ScriptedSource src(props, {std::vector<double>(6, 0.0)});
  auto res = recursive_infer(src, cfg);

  check_trace_shape(res.trace);
  CHECK(res.trace.back().reason == "no-errors");
  CHECK(res.tokens == std::vector<int32_t>(6, 7));
  // 2 unmask + 1 introspect + terminate
  REQUIRE(res.trace.size() == 4);
  CHECK(res.trace[2].phase == Phase::Introspect);
  CHECK(res.trace[2].positions.empty());
  CHECK(res.trace[2].scores == std::vector<double>(6, 0.0));
  CHECK(forward_pass_budget(res.trace) == 3);
}

TEST_CASE("the documented two-round budget example counts eleven forward passes") {
  InferenceConfig cfg;
  cfg.rounds = 2;
  cfg.s0 = 8;
  cfg.response_length = 8;

  // round one: 8 steps; three positions flagged -> S becomes 3//2+1 = 2
  std::vector<Proposal> props(10, uniform_proposal(8, 4, 0.5));
  std::vector<double> scores(8, 0.0);
  scores[1] = scores[4] = scores[6] = 0.9;
  ScriptedSource src(props, {scores});
  auto res = recursive_infer(src, cfg);

  check_trace_shape(res.trace);
  CHECK(res.final_state.e == 3);
  CHECK(res.final_state.s == 2);
  CHECK(forward_pass_budget(res.trace) == 11);
  CHECK(res.trace.back().reason == "depth-exhausted");
}

TEST_CASE("remasking reopens exactly the flagged positions") {
  InferenceConfig cfg;
  cfg.rounds = 2;
  cfg.s0 = 1;
  cfg.response_length = 5;

  std::vector<Proposal> props;
  props.push_back(uniform_proposal(5, 8, 0.5));  // first fill: all 8s
  props.push_back(uniform_proposal(5, 9, 0.5));  // refills of remasked spots: 9s
  props.push_back(uniform_proposal(5, 9, 0.5));  // (two flagged -> S = 2 steps)
  std::vector<double> scores{0.9, 0.0, 0.9, 0.0, 0.0};
  ScriptedSource inner(props, {scores});
  RecordingSource src(inner);
  auto res = recursive_infer(src, cfg);

  // the later propose calls must see masks exactly at still-open flagged spots
  REQUIRE(src.seen_masks.size() == 3);
  CHECK(src.seen_masks[0] == std::vector<uint8_t>(5, 1));
  CHECK(src.seen_masks[1] == std::vector<uint8_t>{1, 0, 1, 0, 0});
  CHECK(src.seen_masks[2] == std::vector<uint8_t>{0, 0, 1, 0, 0});
  CHECK(src.scored_sequences == std::vector<std::vector<int32_t>>{{8, 8, 8, 8, 8}});
  CHECK(res.tokens == std::vector<int32_t>{9, 8, 9, 8, 8});

  // the remask event records the overwritten tokens
  bool found = false;
  for (const TraceEvent& ev : res.trace)
    if (ev.phase == Phase::Remask) {
      found = true;
      CHECK(ev.positions == std::vector<int64_t>{0, 2});
      CHECK(ev.tokens == std::vector<int32_t>{8, 8});
    }
  CHECK(found);
}

TEST_CASE("the trailing EOS run can be pinned against remasking") {
  InferenceConfig cfg;
  cfg.rounds = 2;
  cfg.s0 = 1;
  cfg.response_length = 6;

  Proposal fill = uniform_proposal(6, 5, 0.5);
  fill.tokens[4] = fill.tokens[5] = cfg.eos_id;  // ... 5 5 5 5 EOS EOS
  std::vector<double> scores{0.0, 0.9, 0.0, 0.0, 0.9, 0.9};

  SUBCASE("unpinned: EOS positions are fair game") {
    // three flagged -> the refill round runs S = 2 steps
    ScriptedSource src({fill, uniform_proposal(6, 3, 0.5), uniform_proposal(6, 3, 0.5)}, {scores});
    auto res = recursive_infer(src, cfg);
    for (const TraceEvent& ev : res.trace)
      if (ev.phase == Phase::Remask) CHECK(ev.positions == std::vector<int64_t>{1, 4, 5});
    CHECK(res.tokens == std::vector<int32_t>{5, 3, 5, 5, 3, 3});
  }
  SUBCASE("pinned: only content positions are reopened") {
    InferenceConfig pinned = cfg;
    pinned.pin_trailing_eos = true;
    ScriptedSource src({fill, uniform_proposal(6, 3, 0.5)}, {scores});
    auto res = recursive_infer(src, pinned);
    for (const TraceEvent& ev : res.trace)
      if (ev.phase == Phase::Remask) CHECK(ev.positions == std::vector<int64_t>{1});
    CHECK(res.tokens == std::vector<int32_t>{5, 3, 5, 5, 1, 1});
    CHECK(res.final_state.e == 1);
  }
}

TEST_CASE("a three-round scripted scenario replays the hand-built reference event list") {
  InferenceConfig cfg;
  cfg.rounds = 3;
  cfg.s0 = 3;
  cfg.response_length = 8;
  cfg.threshold = 0.4;

  // round r=3: 3 steps, then 5 flagged -> S=3; r=2: 3 steps, 1 flagged -> S=1;
  // r=1: 1 step, forced stop
  std::vector<Proposal> props;
  for (int k = 0; k < 7; ++k) {
    Proposal p;
    for (int64_t i = 0; i < 8; ++i) {
      p.tokens.push_back(static_cast<int32_t>(3 + (k + i) % 5));
      p.confidence.push_back(0.1 * static_cast<double>(1 + (3 * k + i) % 9));
    }
    props.push_back(std::move(p));
  }
  std::vector<double> s1(8, 0.0);
  s1[0] = s1[2] = s1[3] = s1[5] = s1[7] = 0.8;
  std::vector<double> s2(8, 0.0);
  s2[4] = 0.95;

  ScriptedSource engine_src(props, {s1, s2});
  auto got = recursive_infer(engine_src, cfg);
  SimResult want = simulate_reference(props, {s1, s2}, cfg);

  REQUIRE(got.trace.size() == want.events.size());
  for (size_t i = 0; i < want.events.size(); ++i) CHECK(got.trace[i] == want.events[i]);
  CHECK(got.tokens == want.tokens);
  CHECK(trace_checksum(got.trace) == trace_checksum(want.events));
  CHECK(got.final_state.e == 1);
  CHECK(got.final_state.s == 1);
  // budget: 3 + 1 + 3 + 1 + 1 = 9
  CHECK(forward_pass_budget(got.trace) == 9);
}

TEST_CASE("randomized scripted scenarios conform to the reference simulation") {
  Rng rng(2024);
  int terminated_early = 0, exhausted = 0;
  for (int trial = 0; trial < 60; ++trial) {
    ScriptedScenario sc = random_scenario(rng);
    ScriptedSource src(sc.proposals, sc.scores);
    auto got = recursive_infer(src, sc.cfg);
    SimResult want = simulate_reference(sc.proposals, sc.scores, sc.cfg);

    REQUIRE(got.trace.size() == want.events.size());
    for (size_t i = 0; i < want.events.size(); ++i) REQUIRE(got.trace[i] == want.events[i]);
    REQUIRE(got.tokens == want.tokens);
    check_trace_shape(got.trace);

    // no MASK tokens survive, and the round count respects the depth cap
    for (int32_t tok : got.tokens) REQUIRE(tok != sc.cfg.mask_id);
    std::set<int64_t> rounds;
    for (const TraceEvent& ev : got.trace) rounds.insert(ev.round);
    REQUIRE(static_cast<int64_t>(rounds.size()) <= sc.cfg.rounds);
    (got.trace.back().reason == "no-errors" ? terminated_early : exhausted) += 1;
  }
  // the random mix must exercise both termination reasons
  CHECK(terminated_early > 5);
  CHECK(exhausted > 5);
}

TEST_CASE("trace files round-trip through the line-delimited format") {
  InferenceConfig cfg;
  cfg.rounds = 2;
  cfg.s0 = 2;
  cfg.response_length = 5;
  std::vector<Proposal> props(4, uniform_proposal(5, 6, 0.7));
  std::vector<double> scores{0.9, 0.0, 0.0, 0.5, 0.0};
  ScriptedSource src(props, {scores});
  auto res = recursive_infer(src, cfg);

  TraceHeader header;
  header.s0 = cfg.s0;
  header.rounds = cfg.rounds;
  header.threshold = cfg.threshold;
  header.seed = 99;
  header.checkpoint = "ckpt-abc";

  const std::string path = "/tmp/remask_trace_test.jsonl";
  write_trace(path, header, res.trace);
  auto [h2, events2] = read_trace(path);
  CHECK(h2 == header);
  REQUIRE(events2.size() == res.trace.size());
  for (size_t i = 0; i < events2.size(); ++i) CHECK(events2[i] == res.trace[i]);
  CHECK(trace_checksum(events2) == trace_checksum(res.trace));

  SUBCASE("corrupt and incomplete files are rejected") {
    FILE* f = fopen(path.c_str(), "a");
    fputs("{not json\n", f);
    fclose(f);
    CHECK_THROWS_AS((void)read_trace(path), CorruptFileError);

    write_trace(path, header, res.trace);
    f = fopen(path.c_str(), "a");
    fputs("{\"type\":\"event\",\"step\":1}\n", f);
    fclose(f);
    CHECK_THROWS_AS((void)read_trace(path), CorruptFileError);

    f = fopen(path.c_str(), "w");
    fputs("{\"type\":\"event\",\"step\":0,\"round\":1,\"phase\":\"unmask\",\"positions\":[]}\n", f);
    fclose(f);
    CHECK_THROWS_AS((void)read_trace(path), CorruptFileError);  // missing header
    std::remove(path.c_str());
  }
}

TEST_CASE("a model-driven run is reproducible and obeys the trace grammar") {
  Vocabulary vocab;
  BackboneConfig bc;
  bc.vocab_size = 44;
  bc.d_model = 16;
  bc.n_heads = 2;
  bc.n_layers = 2;
  bc.max_positions = 48;
  Rng init(77);
  Backbone<double> backbone(bc);
  backbone.init(init);
  IntrospectionModel<double> intro = init_introspection_from_backbone(backbone, init);

  TaskExample ex = example_from_seed(TaskKind::ArithChain, 1, 5);
  std::vector<int32_t> prompt = vocab.encode(ex.prompt);

  InferenceConfig cfg;
  cfg.rounds = 3;
  cfg.s0 = 4;
  cfg.response_length = 12;

  BackboneSource<double> src1(backbone, &intro, prompt);
  auto r1 = recursive_infer(src1, cfg);
  BackboneSource<double> src2(backbone, &intro, prompt);
  auto r2 = recursive_infer(src2, cfg);

  check_trace_shape(r1.trace);
  CHECK(r1.tokens == r2.tokens);
  CHECK(trace_checksum(r1.trace) == trace_checksum(r2.trace));
  CHECK(forward_pass_budget(r1.trace) == src1.propose_calls() + src1.score_calls());
  for (int32_t tok : r1.tokens) CHECK(tok != bc.mask_id);
  // introspection scores recorded in the trace are probabilities
  for (const TraceEvent& ev : r1.trace)
    if (ev.phase == Phase::Introspect) {
      REQUIRE(ev.scores.size() == static_cast<size_t>(cfg.response_length));
      for (double s : ev.scores) {
        CHECK(s > 0.0);
        CHECK(s < 1.0);
      }
    }
}

TEST_CASE("phase names round-trip") {
  for (Phase p : {Phase::Unmask, Phase::Introspect, Phase::Remask, Phase::Terminate})
    CHECK(phase_from_name(phase_name(p)) == p);
  CHECK_THROWS_AS((void)phase_from_name("noise"), ConfigError);
}
