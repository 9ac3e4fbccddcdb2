#include "remask/introspect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "remask/error.hpp"

namespace remask {

std::vector<uint8_t> make_labels(std::span<const int32_t> x_pred, std::span<const int32_t> x0) {
  if (x_pred.size() != x0.size())
    throw std::invalid_argument("make_labels: sequence lengths differ (" + std::to_string(x_pred.size()) +
                                " vs " + std::to_string(x0.size()) + ")");
  std::vector<uint8_t> y(x_pred.size());
  for (size_t i = 0; i < y.size(); ++i) y[i] = x_pred[i] != x0[i];
  return y;
}

template <class T>
NodeId introspection_loss(Tape<T>& tape, NodeId scores, std::span<const uint8_t> y,
                          std::span<const uint8_t> include) {
  return tape.bce_mean(scores, std::vector<uint8_t>(y.begin(), y.end()),
                       std::vector<uint8_t>(include.begin(), include.end()), 1e-7);
}

template <class T>
CorrectionPair make_correction_pair(Backbone<T>& backbone, const TaskExample& example, const Vocabulary& vocab,
                                    int64_t l_max, Rng& rng) {
  CorrectionPair pair;
  pair.prompt = vocab.encode(example.prompt);
  pair.x0 = dynamic_length_pad(vocab.encode(example.gold), l_max, rng);
  double t = rng.uniform01();
  MaskedSequence xt = forward_noise(pair.x0, t, backbone.cfg.mask_id, rng);
  BackboneSource<T> source(backbone, nullptr, pair.prompt, ScoreMode::MaskProbability);
  pair.x_pred = predict_full(source, xt);
  pair.y = make_labels(pair.x_pred, pair.x0);
  return pair;
}

template <class T>
std::vector<CorrectionPair> build_correction_batch(Backbone<T>& backbone, std::span<const TaskExample> examples,
                                                   const Vocabulary& vocab, int64_t l_max, Rng& rng) {
  std::vector<CorrectionPair> out;
  out.reserve(examples.size());
  for (const TaskExample& ex : examples) out.push_back(make_correction_pair(backbone, ex, vocab, l_max, rng));
  return out;
}

template <class T>
std::vector<double> semantic_distribution(const Tensor<T>& embeddings, int32_t token) {
  int64_t v = embeddings.shape[0], d = embeddings.shape[1];
  if (token < 0 || token >= v) throw std::invalid_argument("semantic_distribution: token id out of range");

  std::vector<double> norms(static_cast<size_t>(v), 0.0);
  for (int64_t i = 0; i < v; ++i) {
    double sq = 0;
    for (int64_t j = 0; j < d; ++j) {
      double x = static_cast<double>(embeddings.at(i, j));
      sq += x * x;
    }
    if (sq == 0.0)
      throw std::invalid_argument("semantic_distribution: embedding row " + std::to_string(i) +
                                  " has zero norm");
    norms[static_cast<size_t>(i)] = std::sqrt(sq);
  }

  std::vector<double> sim(static_cast<size_t>(v), 0.0);
  double mx = -2.0;
  for (int64_t j = 0; j < v; ++j) {
    if (j == token) continue;
    double dot = 0;
    for (int64_t k = 0; k < d; ++k)
      dot += static_cast<double>(embeddings.at(token, k)) * static_cast<double>(embeddings.at(j, k));
    sim[static_cast<size_t>(j)] = dot / (norms[static_cast<size_t>(token)] * norms[static_cast<size_t>(j)]);
    mx = std::max(mx, sim[static_cast<size_t>(j)]);
  }

  std::vector<double> probs(static_cast<size_t>(v), 0.0);
  double denom = 0;
  for (int64_t j = 0; j < v; ++j) {
    if (j == token) continue;
    probs[static_cast<size_t>(j)] = std::exp(sim[static_cast<size_t>(j)] - mx);
    denom += probs[static_cast<size_t>(j)];
  }
  for (double& p : probs) p /= denom;
  return probs;
}

namespace {

int32_t sample_from(const std::vector<double>& probs, Rng& rng) {
  double u = rng.uniform01();
  double acc = 0;
  int32_t last_positive = -1;
  for (size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0) continue;
    last_positive = static_cast<int32_t>(j);
    acc += probs[j];
    if (u < acc) return last_positive;
  }
  return last_positive;  // u landed on accumulated roundoff past the last bucket
}

}  // namespace

template <class T>
std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(std::span<const int32_t> x0,
                                                                       const Tensor<T>& embeddings, double pp,
                                                                       Rng& rng) {
  if (pp < 0.0 || pp > 1.0) throw std::invalid_argument("semantic_perturb: pp must lie in [0,1]");
  std::vector<int32_t> out(x0.begin(), x0.end());
  std::vector<uint8_t> labels(x0.size(), 0);
  for (size_t i = 0; i < out.size(); ++i) {
    if (!rng.bernoulli(pp)) continue;
    out[i] = sample_from(semantic_distribution(embeddings, out[i]), rng);
    labels[i] = 1;
  }
  return {std::move(out), std::move(labels)};
}

std::vector<double> make_frequency_importance(std::span<const TaskExample> examples, const Vocabulary& vocab) {
  std::vector<int64_t> counts(static_cast<size_t>(vocab.size()), 1);  // +1 smoothing
  int64_t total = vocab.size();
  for (const TaskExample& ex : examples)
    for (int32_t id : vocab.encode(ex.gold)) {
      ++counts[static_cast<size_t>(id)];
      ++total;
    }
  std::vector<double> importance(counts.size());
  for (size_t i = 0; i < counts.size(); ++i)
    importance[i] = std::log(static_cast<double>(total) / static_cast<double>(counts[i]));
  return importance;
}

std::vector<double> importance_probabilities(std::span<const int32_t> x0, std::span<const double> importance,
                                             double pp) {
  std::vector<double> probs(x0.size(), 0.0);
  if (x0.empty()) return probs;
  double mx = -1e300;
  for (size_t i = 0; i < x0.size(); ++i) {
    probs[i] = importance[static_cast<size_t>(x0[i])];
    mx = std::max(mx, probs[i]);
  }
  double denom = 0;
  for (double& p : probs) {
    p = std::exp(p - mx);
    denom += p;
  }
  double scale = pp * static_cast<double>(x0.size()) / denom;
  for (double& p : probs) p = std::min(1.0, p * scale);
  return probs;
}

template <class T>
std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(std::span<const int32_t> x0,
                                                                         std::span<const double> importance,
                                                                         const Tensor<T>& embeddings, double pp,
                                                                         Rng& rng) {
  std::vector<double> probs = importance_probabilities(x0, importance, pp);
  std::vector<int32_t> out(x0.begin(), x0.end());
  std::vector<uint8_t> labels(x0.size(), 0);
  for (size_t i = 0; i < out.size(); ++i) {
    if (!rng.bernoulli(probs[i])) continue;
    out[i] = sample_from(semantic_distribution(embeddings, out[i]), rng);
    labels[i] = 1;
  }
  return {std::move(out), std::move(labels)};
}

const char* pair_source_name(PairSource s) {
  switch (s) {
    case PairSource::RealErrors: return "real-errors";
    case PairSource::SemanticPerturb: return "semantic-perturb";
    case PairSource::ImportancePerturb: return "importance-perturb";
  }
  return "?";
}

template <class T>
IntrospectSample make_introspect_sample(Backbone<T>& backbone, const TaskExample& example,
                                        const Vocabulary& vocab, int64_t l_max,
                                        const IntrospectTrainConfig& cfg,
                                        std::span<const double> importance, Rng& rng) {
  IntrospectSample s;
  if (cfg.source == PairSource::RealErrors) {
    CorrectionPair pair = make_correction_pair(backbone, example, vocab, l_max, rng);
    s.prompt = std::move(pair.prompt);
    s.input = std::move(pair.x_pred);
    s.x0 = std::move(pair.x0);
    s.y = std::move(pair.y);
    return s;
  }
  s.prompt = vocab.encode(example.prompt);
  s.x0 = dynamic_length_pad(vocab.encode(example.gold), l_max, rng);
  if (cfg.source == PairSource::SemanticPerturb) {
    auto [input, y] = semantic_perturb<T>(s.x0, backbone.tok_emb, cfg.perturb.pp, rng);
    s.input = std::move(input);
    s.y = std::move(y);
  } else {
    auto [input, y] = importance_perturb<T>(s.x0, importance, backbone.tok_emb, cfg.perturb.pp, rng);
    s.input = std::move(input);
    s.y = std::move(y);
  }
  return s;
}

template <class T>
void train_introspection(Backbone<T>& backbone, IntrospectionModel<T>& intro,
                         std::span<const TaskExample> data, const Vocabulary& vocab, int64_t l_max,
                         const IntrospectTrainConfig& cfg,
                         const std::function<void(int64_t, double)>& on_step) {
  if (data.empty()) throw ConfigError("introspection training: empty dataset");
  Rng rng(mix_seed(cfg.seed, "introspect-train"));
  std::vector<double> importance;
  if (cfg.source == PairSource::ImportancePerturb)
    importance = make_frequency_importance(data, vocab);

  OptimConfig ocfg = cfg.optim;
  if (ocfg.total_steps <= 0) ocfg.total_steps = cfg.steps;
  AdamW<T> opt(ocfg);
  intro.register_params(opt);

  const uint64_t frozen = backbone.checksum();
  for (int64_t step = 0; step < cfg.steps; ++step) {
    double batch_loss = 0;
    for (int64_t b = 0; b < cfg.batch; ++b) {
      const TaskExample& ex = data[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
      IntrospectSample sample = make_introspect_sample(backbone, ex, vocab, l_max, cfg, importance, rng);

      std::vector<uint8_t> include(sample.y.size(), 1);
      if (cfg.exclude_eos_labels)
        for (size_t i = 0; i < include.size(); ++i)
          include[i] = sample.x0[i] != backbone.cfg.eos_id;

      Tape<T> tape;
      auto out = backbone_forward(tape, backbone, sample.prompt, sample.input);
      // detach the features: the backbone is frozen, so skip its backward
      NodeId pen = tape.constant(tape.value(out.penultimate));
      NodeId scores = introspect_scores(tape, intro, pen, backbone.cfg.n_heads);
      NodeId loss = introspection_loss(tape, scores, sample.y, include);
      batch_loss += static_cast<double>(tape.value(loss).values[0]);
      tape.backward(tape.scale(loss, 1.0 / static_cast<double>(cfg.batch)));
    }
    opt.step();
    if (backbone.checksum() != frozen)
      throw Error("introspection training modified the frozen backbone");
    if (on_step) on_step(step, batch_loss / static_cast<double>(cfg.batch));
  }
}

const char* joint_variant_name(JointVariant v) {
  switch (v) {
    case JointVariant::MaskTarget: return "mask-target";
    case JointVariant::BinaryHead: return "binary-head";
  }
  return "?";
}

template <class T>
JointLossOut<T> joint_loss(Tape<T>& tape, JointVariant variant, NodeId logits, NodeId scores,
                           std::span<const int32_t> x0, const MaskedSequence& xt,
                           std::span<const int32_t> x_pred, double alpha, const LossConfig& loss_cfg,
                           int32_t mask_id) {
  if (x0.size() != x_pred.size() || x0.size() != xt.mask_flags.size())
    throw std::invalid_argument("joint_loss: sequence lengths disagree");
  double w = loss_weight(loss_cfg, xt.t);

  NodeId logp = tape.log_softmax_rows(logits);
  NodeId lu = tape.scale(
      tape.masked_sum(tape.pick_per_row(logp, std::vector<int32_t>(x0.begin(), x0.end())), xt.mask_flags), -w);

  JointLossOut<T> out;
  out.unmask = lu;
  if (variant == JointVariant::MaskTarget) {
    std::vector<int32_t> targets(x0.begin(), x0.end());
    for (size_t i = 0; i < targets.size(); ++i)
      if (x_pred[i] != x0[i]) targets[i] = mask_id;
    out.aux = tape.scale(tape.masked_sum(tape.pick_per_row(logp, targets), xt.mask_flags), -w);
  } else {
    if (scores < 0) throw std::invalid_argument("joint_loss: binary-head variant needs scores");
    std::vector<uint8_t> y = make_labels(x_pred, x0);
    std::vector<uint8_t> include(y.size(), 1);
    out.aux = introspection_loss(tape, scores, y, include);
  }
  out.total = tape.add(lu, tape.scale(out.aux, alpha));
  return out;
}

namespace {

// Predictions committed from this forward's own logits: argmax over non-MASK
// tokens at masked positions, verbatim copies elsewhere.
template <class T>
std::vector<int32_t> commit_from_logits(const Tensor<T>& logits, const MaskedSequence& xt, int32_t mask_id) {
  std::vector<int32_t> out = xt.tokens;
  int64_t v = logits.shape[1];
  for (int64_t i = 0; i < logits.shape[0]; ++i) {
    if (!xt.mask_flags[static_cast<size_t>(i)]) continue;
    int32_t best = mask_id == 0 ? 1 : 0;
    for (int64_t j = 0; j < v; ++j) {
      if (j == mask_id) continue;
      if (logits.at(i, j) > logits.at(i, best)) best = static_cast<int32_t>(j);
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

}  // namespace

template <class T>
void train_joint(Backbone<T>& backbone, IntrospectionModel<T>* intro, std::span<const TaskExample> data,
                 const Vocabulary& vocab, int64_t l_max, const JointTrainConfig& cfg,
                 const std::function<void(int64_t, double)>& on_step) {
  if (data.empty()) throw ConfigError("joint training: empty dataset");
  if (cfg.variant == JointVariant::BinaryHead && intro == nullptr)
    throw ConfigError("joint training: binary-head variant needs an introspection model");

  Rng rng(mix_seed(cfg.seed, "joint-train"));
  OptimConfig ocfg = cfg.optim;
  if (ocfg.total_steps <= 0) ocfg.total_steps = cfg.steps;
  AdamW<T> opt(ocfg);
  backbone.register_params(opt);
  if (cfg.variant == JointVariant::BinaryHead) intro->register_params(opt);

  int64_t cold_steps =
      cfg.variant == JointVariant::BinaryHead
          ? static_cast<int64_t>(std::ceil(cfg.cold_start_fraction * static_cast<double>(cfg.steps)))
          : 0;

  for (int64_t step = 0; step < cfg.steps; ++step) {
    bool cold = step < cold_steps;
    double batch_loss = 0;
    for (int64_t b = 0; b < cfg.batch; ++b) {
      const TaskExample& ex = data[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
      std::vector<int32_t> prompt = vocab.encode(ex.prompt);
      std::vector<int32_t> x0 = dynamic_length_pad(vocab.encode(ex.gold), l_max, rng);
      MaskedSequence xt = forward_noise(x0, rng.uniform01(), backbone.cfg.mask_id, rng);

      Tape<T> tape;
      auto fwd = backbone_forward(tape, backbone, prompt, xt.tokens);
      std::vector<int32_t> x_pred = commit_from_logits(tape.value(fwd.logits), xt, backbone.cfg.mask_id);

      NodeId loss;
      if (cold) {
        loss = unmask_loss(tape, fwd.logits, x0, xt, cfg.loss);
      } else if (cfg.variant == JointVariant::BinaryHead) {
        NodeId scores = introspect_scores(tape, *intro, fwd.penultimate, backbone.cfg.n_heads);
        loss = joint_loss(tape, cfg.variant, fwd.logits, scores, x0, xt, x_pred, cfg.alpha, cfg.loss,
                          backbone.cfg.mask_id)
                   .total;
      } else {
        loss = joint_loss(tape, cfg.variant, fwd.logits, NodeId{-1}, x0, xt, x_pred, cfg.alpha, cfg.loss,
                          backbone.cfg.mask_id)
                   .total;
      }
      batch_loss += static_cast<double>(tape.value(loss).values[0]);
      tape.backward(tape.scale(loss, 1.0 / static_cast<double>(cfg.batch)));
    }
    opt.step();
    if (on_step) on_step(step, batch_loss / static_cast<double>(cfg.batch));
  }
}

template NodeId introspection_loss(Tape<float>&, NodeId, std::span<const uint8_t>, std::span<const uint8_t>);
template NodeId introspection_loss(Tape<double>&, NodeId, std::span<const uint8_t>, std::span<const uint8_t>);
template CorrectionPair make_correction_pair(Backbone<float>&, const TaskExample&, const Vocabulary&, int64_t,
                                             Rng&);
template CorrectionPair make_correction_pair(Backbone<double>&, const TaskExample&, const Vocabulary&, int64_t,
                                             Rng&);
template std::vector<CorrectionPair> build_correction_batch(Backbone<float>&, std::span<const TaskExample>,
                                                            const Vocabulary&, int64_t, Rng&);
template std::vector<CorrectionPair> build_correction_batch(Backbone<double>&, std::span<const TaskExample>,
                                                            const Vocabulary&, int64_t, Rng&);
template std::vector<double> semantic_distribution(const Tensor<float>&, int32_t);
template std::vector<double> semantic_distribution(const Tensor<double>&, int32_t);
template std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(std::span<const int32_t>,
                                                                                const Tensor<float>&, double,
                                                                                Rng&);
template std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(std::span<const int32_t>,
                                                                                const Tensor<double>&, double,
                                                                                Rng&);
template std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(std::span<const int32_t>,
                                                                                  std::span<const double>,
                                                                                  const Tensor<float>&, double,
                                                                                  Rng&);
template std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(std::span<const int32_t>,
                                                                                  std::span<const double>,
                                                                                  const Tensor<double>&, double,
                                                                                  Rng&);
template IntrospectSample make_introspect_sample(Backbone<float>&, const TaskExample&, const Vocabulary&,
                                                 int64_t, const IntrospectTrainConfig&, std::span<const double>,
                                                 Rng&);
template IntrospectSample make_introspect_sample(Backbone<double>&, const TaskExample&, const Vocabulary&,
                                                 int64_t, const IntrospectTrainConfig&, std::span<const double>,
                                                 Rng&);
template void train_introspection(Backbone<float>&, IntrospectionModel<float>&, std::span<const TaskExample>,
                                  const Vocabulary&, int64_t, const IntrospectTrainConfig&,
                                  const std::function<void(int64_t, double)>&);
template void train_introspection(Backbone<double>&, IntrospectionModel<double>&, std::span<const TaskExample>,
                                  const Vocabulary&, int64_t, const IntrospectTrainConfig&,
                                  const std::function<void(int64_t, double)>&);
template JointLossOut<float> joint_loss(Tape<float>&, JointVariant, NodeId, NodeId, std::span<const int32_t>,
                                        const MaskedSequence&, std::span<const int32_t>, double,
                                        const LossConfig&, int32_t);
template JointLossOut<double> joint_loss(Tape<double>&, JointVariant, NodeId, NodeId, std::span<const int32_t>,
                                         const MaskedSequence&, std::span<const int32_t>, double,
                                         const LossConfig&, int32_t);
template void train_joint(Backbone<float>&, IntrospectionModel<float>*, std::span<const TaskExample>,
                          const Vocabulary&, int64_t, const JointTrainConfig&,
                          const std::function<void(int64_t, double)>&);
template void train_joint(Backbone<double>&, IntrospectionModel<double>*, std::span<const TaskExample>,
                          const Vocabulary&, int64_t, const JointTrainConfig&,
                          const std::function<void(int64_t, double)>&);

}  // namespace remask
