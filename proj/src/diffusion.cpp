#include "remask/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "remask/error.hpp"

namespace remask {

int64_t MaskedSequence::masked_count() const {
  return std::count(mask_flags.begin(), mask_flags.end(), uint8_t(1));
}

void MaskedSequence::validate(int32_t mask_id) const {
  if (tokens.size() != mask_flags.size()) throw Error("masked sequence: flag/token length mismatch");
  for (size_t i = 0; i < tokens.size(); ++i)
    if ((tokens[i] == mask_id) != static_cast<bool>(mask_flags[i]))
      throw Error("masked sequence: mask flag inconsistent with token at position " + std::to_string(i));
}

MaskedSequence MaskedSequence::all_masked(int64_t length, int32_t mask_id) {
  MaskedSequence s;
  s.tokens.assign(static_cast<size_t>(length), mask_id);
  s.mask_flags.assign(static_cast<size_t>(length), 1);
  s.t = 1.0;
  return s;
}

MaskedSequence MaskedSequence::from_tokens(std::vector<int32_t> tokens, int32_t mask_id) {
  MaskedSequence s;
  s.mask_flags.resize(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) s.mask_flags[i] = tokens[i] == mask_id;
  s.tokens = std::move(tokens);
  return s;
}

double loss_weight(const LossConfig& cfg, double t) {
  switch (cfg.weight) {
    case WeightFn::Constant: return 1.0;
    case WeightFn::InverseT: return std::min(1.0, cfg.eps / std::max(t, cfg.eps));
  }
  return 1.0;
}

MaskedSequence forward_noise(std::span<const int32_t> x0, double t, int32_t mask_id, Rng& rng) {
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("forward_noise: t must lie in [0,1]");
  for (int32_t tok : x0)
    if (tok == mask_id) throw std::invalid_argument("forward_noise: x0 already contains the MASK id");
  MaskedSequence s;
  s.t = t;
  s.tokens.assign(x0.begin(), x0.end());
  s.mask_flags.assign(x0.size(), 0);
  for (size_t i = 0; i < s.tokens.size(); ++i) {
    if (rng.bernoulli(t)) {
      s.tokens[i] = mask_id;
      s.mask_flags[i] = 1;
    }
  }
  return s;
}

template <class T>
NodeId unmask_loss(Tape<T>& tape, NodeId logits, std::span<const int32_t> x0, const MaskedSequence& xt,
                   const LossConfig& cfg) {
  const auto& L = tape.value(logits);
  if (L.shape.size() != 2 || L.shape[0] != static_cast<int64_t>(x0.size()) ||
      x0.size() != xt.mask_flags.size())
    throw std::invalid_argument("unmask_loss: logits/x0/mask shapes disagree");
  NodeId logp = tape.log_softmax_rows(logits);
  NodeId picked = tape.pick_per_row(logp, std::vector<int32_t>(x0.begin(), x0.end()));
  NodeId masked = tape.masked_sum(picked, xt.mask_flags);
  return tape.scale(masked, -loss_weight(cfg, xt.t));
}

namespace {

// Stable softmax row -> probabilities, plus argmax over non-MASK tokens.
void row_proposal(const double* logits, int64_t v, int32_t mask_id, int32_t& token, double& confidence) {
  double mx = logits[0];
  for (int64_t j = 1; j < v; ++j) mx = std::max(mx, logits[j]);
  double denom = 0;
  for (int64_t j = 0; j < v; ++j) denom += std::exp(logits[j] - mx);
  int32_t best = mask_id == 0 ? 1 : 0;
  for (int64_t j = 0; j < v; ++j) {
    if (j == mask_id) continue;
    if (logits[j] > logits[best]) best = static_cast<int32_t>(j);
  }
  token = best;
  confidence = std::exp(logits[best] - mx) / denom;
}

}  // namespace

template <class T>
BackboneSource<T>::BackboneSource(Backbone<T>& backbone, IntrospectionModel<T>* intro,
                                  std::vector<int32_t> prompt_ids, ScoreMode mode)
    : backbone_(backbone), intro_(intro), prompt_(std::move(prompt_ids)), mode_(mode) {
  if (mode_ == ScoreMode::IntrospectionHead && intro_ == nullptr)
    throw ConfigError("backbone source: introspection-head scoring requires an introspection model");
}

template <class T>
Proposal BackboneSource<T>::propose(const MaskedSequence& xt) {
  ++propose_calls_;
  Tape<T> tape;
  auto out = backbone_forward(tape, backbone_, prompt_, xt.tokens);
  const Tensor<T>& logits = tape.value(out.logits);
  int64_t l = logits.shape[0], v = logits.shape[1];
  Proposal p;
  p.tokens.resize(static_cast<size_t>(l));
  p.confidence.resize(static_cast<size_t>(l));
  std::vector<double> row(static_cast<size_t>(v));
  for (int64_t i = 0; i < l; ++i) {
    for (int64_t j = 0; j < v; ++j) row[static_cast<size_t>(j)] = static_cast<double>(logits.at(i, j));
    row_proposal(row.data(), v, backbone_.cfg.mask_id, p.tokens[static_cast<size_t>(i)],
                 p.confidence[static_cast<size_t>(i)]);
  }
  return p;
}

template <class T>
std::vector<double> BackboneSource<T>::error_scores(std::span<const int32_t> x_pred) {
  ++score_calls_;
  Tape<T> tape;
  auto out = backbone_forward(tape, backbone_, prompt_, x_pred);
  int64_t l = tape.value(out.logits).shape[0];
  std::vector<double> scores(static_cast<size_t>(l));
  if (mode_ == ScoreMode::IntrospectionHead) {
    NodeId s = introspect_scores(tape, *intro_, out.penultimate, backbone_.cfg.n_heads);
    const Tensor<T>& sv = tape.value(s);
    for (int64_t i = 0; i < l; ++i) scores[static_cast<size_t>(i)] = static_cast<double>(sv.values[static_cast<size_t>(i)]);
  } else {
    NodeId probs = tape.softmax_rows(out.logits);
    const Tensor<T>& pv = tape.value(probs);
    for (int64_t i = 0; i < l; ++i)
      scores[static_cast<size_t>(i)] = static_cast<double>(pv.at(i, backbone_.cfg.mask_id));
  }
  return scores;
}

ScriptedSource::ScriptedSource(std::vector<Proposal> proposals, std::vector<std::vector<double>> scores)
    : proposals_(proposals.begin(), proposals.end()), scores_(scores.begin(), scores.end()) {}

Proposal ScriptedSource::propose(const MaskedSequence& xt) {
  if (proposals_.empty()) throw Error("scripted source: propose called past the end of the script");
  Proposal p = std::move(proposals_.front());
  proposals_.pop_front();
  if (p.tokens.size() != xt.tokens.size())
    throw Error("scripted source: proposal length does not match the sequence");
  return p;
}

std::vector<double> ScriptedSource::error_scores(std::span<const int32_t> x_pred) {
  if (scores_.empty()) throw Error("scripted source: error_scores called past the end of the script");
  std::vector<double> s = std::move(scores_.front());
  scores_.pop_front();
  if (s.size() != x_pred.size()) throw Error("scripted source: score length does not match the sequence");
  return s;
}

std::vector<int32_t> predict_full(ProposalSource& source, const MaskedSequence& xt) {
  Proposal p = source.propose(xt);
  std::vector<int32_t> out = xt.tokens;
  for (size_t i = 0; i < out.size(); ++i)
    if (xt.mask_flags[i]) out[i] = p.tokens[i];
  return out;
}

std::vector<int32_t> denoise_sample(ProposalSource& source, MaskedSequence x, int64_t steps,
                                    const std::function<void(const DenoiseStep&)>& on_step) {
  if (steps <= 0) throw std::invalid_argument("denoise_sample: steps must be >= 1");
  for (int64_t s = 0; s < steps; ++s) {
    Proposal prop = source.propose(x);
    int64_t remaining = x.masked_count();
    int64_t commit = (remaining + (steps - s) - 1) / (steps - s);  // ceil

    std::vector<int64_t> masked_positions;
    masked_positions.reserve(static_cast<size_t>(remaining));
    for (size_t i = 0; i < x.mask_flags.size(); ++i)
      if (x.mask_flags[i]) masked_positions.push_back(static_cast<int64_t>(i));
    std::stable_sort(masked_positions.begin(), masked_positions.end(), [&](int64_t a, int64_t b) {
      return prop.confidence[static_cast<size_t>(a)] > prop.confidence[static_cast<size_t>(b)];
    });  // stable: equal confidence keeps ascending position order

    DenoiseStep ev;
    ev.step = s;
    for (int64_t idx = 0; idx < commit; ++idx) {
      int64_t pos = masked_positions[static_cast<size_t>(idx)];
      x.tokens[static_cast<size_t>(pos)] = prop.tokens[static_cast<size_t>(pos)];
      x.mask_flags[static_cast<size_t>(pos)] = 0;
      ev.positions.push_back(pos);
      ev.tokens.push_back(prop.tokens[static_cast<size_t>(pos)]);
      ev.confidences.push_back(prop.confidence[static_cast<size_t>(pos)]);
    }
    if (on_step) on_step(ev);
  }
  if (x.masked_count() != 0) throw Error("denoise_sample: masks remained after the final step");
  return x.tokens;
}

template class BackboneSource<float>;
template class BackboneSource<double>;
template NodeId unmask_loss(Tape<float>&, NodeId, std::span<const int32_t>, const MaskedSequence&,
                            const LossConfig&);
template NodeId unmask_loss(Tape<double>&, NodeId, std::span<const int32_t>, const MaskedSequence&,
                            const LossConfig&);

}  // namespace remask
