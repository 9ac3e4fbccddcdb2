#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "remask/model.hpp"
#include "remask/rng.hpp"
#include "remask/tensor.hpp"

namespace remask {

struct MaskedSequence {
  std::vector<int32_t> tokens;
  std::vector<uint8_t> mask_flags;  // true = position is currently MASK
  double t = 0.0;

  int64_t length() const { return static_cast<int64_t>(tokens.size()); }
  int64_t masked_count() const;
  void validate(int32_t mask_id) const;  // flags[i] ⇔ tokens[i]==mask_id

  static MaskedSequence all_masked(int64_t length, int32_t mask_id);
  static MaskedSequence from_tokens(std::vector<int32_t> tokens, int32_t mask_id);
};

enum class WeightFn : uint8_t { Constant, InverseT };

struct LossConfig {
  WeightFn weight = WeightFn::Constant;
  double eps = 1e-3;
};

// Constant: 1. InverseT: min(1, eps / max(t, eps)) — proportional to 1/t but
// scaled into (0, 1] so both choices satisfy the weight-range invariant.
double loss_weight(const LossConfig& cfg, double t);

// Each position of x0 independently becomes MASK with probability t.
MaskedSequence forward_noise(std::span<const int32_t> x0, double t, int32_t mask_id, Rng& rng);

// -w(t) * sum over masked positions of log p(x0_i | logits). Exactly zero
// (value and gradient) at unmasked positions.
template <class T>
NodeId unmask_loss(Tape<T>& tape, NodeId logits, std::span<const int32_t> x0, const MaskedSequence& xt,
                   const LossConfig& cfg);

struct Proposal {
  std::vector<int32_t> tokens;      // per position: argmax token, MASK excluded
  std::vector<double> confidence;   // per position: probability of that token
};

// One denoising proposal step plus (optionally) per-position error scores.
// Implementations bind the prompt and any models; the sampler and the
// recursive engine are written against this interface so scripted scenarios
// drive the exact production code path.
class ProposalSource {
 public:
  virtual ~ProposalSource() = default;
  virtual Proposal propose(const MaskedSequence& xt) = 0;
  virtual std::vector<double> error_scores(std::span<const int32_t> x_pred) = 0;
};

enum class ScoreMode : uint8_t {
  IntrospectionHead,  // dedicated error head on penultimate features
  MaskProbability,    // p(MASK | position) from the vocabulary head
};

template <class T>
class BackboneSource : public ProposalSource {
 public:
  BackboneSource(Backbone<T>& backbone, IntrospectionModel<T>* intro, std::vector<int32_t> prompt_ids,
                 ScoreMode mode = ScoreMode::IntrospectionHead);

  Proposal propose(const MaskedSequence& xt) override;
  std::vector<double> error_scores(std::span<const int32_t> x_pred) override;

  int64_t propose_calls() const { return propose_calls_; }
  int64_t score_calls() const { return score_calls_; }

 private:
  Backbone<T>& backbone_;
  IntrospectionModel<T>* intro_;
  std::vector<int32_t> prompt_;
  ScoreMode mode_;
  int64_t propose_calls_ = 0;
  int64_t score_calls_ = 0;
};

// Replays pre-scripted results; throws Error when a call arrives with no
// scripted entry left. Used by sampler/engine conformance tests.
class ScriptedSource : public ProposalSource {
 public:
  ScriptedSource(std::vector<Proposal> proposals, std::vector<std::vector<double>> scores);
  Proposal propose(const MaskedSequence& xt) override;
  std::vector<double> error_scores(std::span<const int32_t> x_pred) override;
  size_t proposals_left() const { return proposals_.size(); }
  size_t scores_left() const { return scores_.size(); }

 private:
  std::deque<Proposal> proposals_;
  std::deque<std::vector<double>> scores_;
};

// Single forward pass: masked positions take the proposed token, unmasked
// positions are copied verbatim.
std::vector<int32_t> predict_full(ProposalSource& source, const MaskedSequence& xt);

struct DenoiseStep {
  int64_t step = 0;                 // 0-indexed within this denoise call
  std::vector<int64_t> positions;   // committed this step
  std::vector<int32_t> tokens;
  std::vector<double> confidences;
};

// S forward passes; step s commits ceil(remaining / (S - s)) masked positions
// with the highest proposal confidence (ties: lowest index). After the last
// step no masks remain.
std::vector<int32_t> denoise_sample(ProposalSource& source, MaskedSequence x_start, int64_t steps,
                                    const std::function<void(const DenoiseStep&)>& on_step = {});

extern template class BackboneSource<float>;
extern template class BackboneSource<double>;
extern template NodeId unmask_loss(Tape<float>&, NodeId, std::span<const int32_t>, const MaskedSequence&,
                                   const LossConfig&);
extern template NodeId unmask_loss(Tape<double>&, NodeId, std::span<const int32_t>, const MaskedSequence&,
                                   const LossConfig&);

}  // namespace remask
