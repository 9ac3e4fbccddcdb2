#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "remask/diffusion.hpp"
#include "remask/model.hpp"
#include "remask/optim.hpp"
#include "remask/tasks.hpp"

namespace remask {

struct CorrectionPair {
  std::vector<int32_t> prompt;
  std::vector<int32_t> x_pred;
  std::vector<int32_t> x0;
  std::vector<uint8_t> y;  // 1 where x_pred differs from x0
};

// y[i] = 1 iff x_pred[i] != x0[i]. Length mismatch throws.
std::vector<uint8_t> make_labels(std::span<const int32_t> x_pred, std::span<const int32_t> x0);

// Mean binary cross-entropy over the response positions where include[i] is
// set (pass all-ones for the plain mean over the whole response). Scores are
// clamped to [1e-7, 1-1e-7].
template <class T>
NodeId introspection_loss(Tape<T>& tape, NodeId scores, std::span<const uint8_t> y,
                          std::span<const uint8_t> include);

// Per example: x0 = dynamically padded gold, t ~ U(0,1), forward noise,
// one full-fill pass through the frozen backbone, mismatch labels.
template <class T>
CorrectionPair make_correction_pair(Backbone<T>& backbone, const TaskExample& example, const Vocabulary& vocab,
                                    int64_t l_max, Rng& rng);

template <class T>
std::vector<CorrectionPair> build_correction_batch(Backbone<T>& backbone, std::span<const TaskExample> examples,
                                                   const Vocabulary& vocab, int64_t l_max, Rng& rng);

// Replacement distribution for `token`: softmax over cosine similarities of
// its embedding row to every other row, exactly zero at the token itself.
template <class T>
std::vector<double> semantic_distribution(const Tensor<T>& embeddings, int32_t token);

struct PerturbationConfig {
  double pp = 0.1;
};

// Each position independently perturbed with probability pp; replacement
// drawn from semantic_distribution of the original token. Returns the
// perturbed sequence and 1-labels at replaced positions.
template <class T>
std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(std::span<const int32_t> x0,
                                                                       const Tensor<T>& embeddings, double pp,
                                                                       Rng& rng);

// Token importance = log inverse corpus frequency of the token over the gold
// responses (rarer = more important); +1 smoothing over the whole vocabulary.
std::vector<double> make_frequency_importance(std::span<const TaskExample> examples, const Vocabulary& vocab);

// Per-position probabilities: softmax of importance over the sequence,
// scaled by pp * L (so the expected perturbed count matches the uniform
// mode), clamped to 1.
std::vector<double> importance_probabilities(std::span<const int32_t> x0, std::span<const double> importance,
                                             double pp);

template <class T>
std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(std::span<const int32_t> x0,
                                                                         std::span<const double> importance,
                                                                         const Tensor<T>& embeddings, double pp,
                                                                         Rng& rng);

enum class PairSource : uint8_t { RealErrors, SemanticPerturb, ImportancePerturb };
const char* pair_source_name(PairSource s);

struct IntrospectTrainConfig {
  int64_t steps = 300;
  int64_t batch = 8;
  OptimConfig optim;
  PairSource source = PairSource::RealErrors;
  PerturbationConfig perturb;
  bool exclude_eos_labels = false;  // drop positions where x0 is EOS padding from the loss
  uint64_t seed = 0;
};

// One training pair for the introspection head: the sequence its forward
// pass consumes, plus labels. For RealErrors input==x_pred; for the
// perturbation regimes input==perturbed gold.
struct IntrospectSample {
  std::vector<int32_t> prompt;
  std::vector<int32_t> input;
  std::vector<int32_t> x0;
  std::vector<uint8_t> y;
};

template <class T>
IntrospectSample make_introspect_sample(Backbone<T>& backbone, const TaskExample& example,
                                        const Vocabulary& vocab, int64_t l_max,
                                        const IntrospectTrainConfig& cfg,
                                        std::span<const double> importance, Rng& rng);

// Decoupled stage: only introspection parameters are optimized; the backbone
// checksum is asserted unchanged after every step (Error on violation).
// on_step, when set, receives (step index, mean batch loss).
template <class T>
void train_introspection(Backbone<T>& backbone, IntrospectionModel<T>& intro,
                         std::span<const TaskExample> data, const Vocabulary& vocab, int64_t l_max,
                         const IntrospectTrainConfig& cfg,
                         const std::function<void(int64_t, double)>& on_step = {});

enum class JointVariant : uint8_t { MaskTarget, BinaryHead };
const char* joint_variant_name(JointVariant v);

template <class T>
struct JointLossOut {
  NodeId total;
  NodeId unmask;
  NodeId aux;
};

// Single-forward joint objective: the unmasking loss plus alpha times either
// the mask-target cross-entropy (targets swap to MASK where x_pred is wrong;
// same masked-sum form and w(t) weight as the unmasking term) or the mean BCE
// on introspection scores. `scores` may be -1 for the mask-target variant.
template <class T>
JointLossOut<T> joint_loss(Tape<T>& tape, JointVariant variant, NodeId logits, NodeId scores,
                           std::span<const int32_t> x0, const MaskedSequence& xt,
                           std::span<const int32_t> x_pred, double alpha, const LossConfig& loss_cfg,
                           int32_t mask_id);

struct JointTrainConfig {
  JointVariant variant = JointVariant::MaskTarget;
  double alpha = 0.5;
  double cold_start_fraction = 0.1;  // BinaryHead: L_U-only warm phase
  int64_t steps = 600;
  int64_t batch = 8;
  OptimConfig optim;
  LossConfig loss;
  uint64_t seed = 0;
};

// Joint regimes update the backbone (and, for BinaryHead, the introspection
// parameters) together. `intro` must be non-null for BinaryHead.
template <class T>
void train_joint(Backbone<T>& backbone, IntrospectionModel<T>* intro, std::span<const TaskExample> data,
                 const Vocabulary& vocab, int64_t l_max, const JointTrainConfig& cfg,
                 const std::function<void(int64_t, double)>& on_step = {});

extern template NodeId introspection_loss(Tape<float>&, NodeId, std::span<const uint8_t>,
                                          std::span<const uint8_t>);
extern template NodeId introspection_loss(Tape<double>&, NodeId, std::span<const uint8_t>,
                                          std::span<const uint8_t>);
extern template CorrectionPair make_correction_pair(Backbone<float>&, const TaskExample&, const Vocabulary&,
                                                    int64_t, Rng&);
extern template CorrectionPair make_correction_pair(Backbone<double>&, const TaskExample&, const Vocabulary&,
                                                    int64_t, Rng&);
extern template std::vector<CorrectionPair> build_correction_batch(Backbone<float>&,
                                                                   std::span<const TaskExample>,
                                                                   const Vocabulary&, int64_t, Rng&);
extern template std::vector<CorrectionPair> build_correction_batch(Backbone<double>&,
                                                                   std::span<const TaskExample>,
                                                                   const Vocabulary&, int64_t, Rng&);
extern template std::vector<double> semantic_distribution(const Tensor<float>&, int32_t);
extern template std::vector<double> semantic_distribution(const Tensor<double>&, int32_t);
extern template std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(
    std::span<const int32_t>, const Tensor<float>&, double, Rng&);
extern template std::pair<std::vector<int32_t>, std::vector<uint8_t>> semantic_perturb(
    std::span<const int32_t>, const Tensor<double>&, double, Rng&);
extern template std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(
    std::span<const int32_t>, std::span<const double>, const Tensor<float>&, double, Rng&);
extern template std::pair<std::vector<int32_t>, std::vector<uint8_t>> importance_perturb(
    std::span<const int32_t>, std::span<const double>, const Tensor<double>&, double, Rng&);
extern template IntrospectSample make_introspect_sample(Backbone<float>&, const TaskExample&, const Vocabulary&,
                                                        int64_t, const IntrospectTrainConfig&,
                                                        std::span<const double>, Rng&);
extern template IntrospectSample make_introspect_sample(Backbone<double>&, const TaskExample&,
                                                        const Vocabulary&, int64_t,
                                                        const IntrospectTrainConfig&, std::span<const double>,
                                                        Rng&);
extern template void train_introspection(Backbone<float>&, IntrospectionModel<float>&,
                                         std::span<const TaskExample>, const Vocabulary&, int64_t,
                                         const IntrospectTrainConfig&,
                                         const std::function<void(int64_t, double)>&);
extern template void train_introspection(Backbone<double>&, IntrospectionModel<double>&,
                                         std::span<const TaskExample>, const Vocabulary&, int64_t,
                                         const IntrospectTrainConfig&,
                                         const std::function<void(int64_t, double)>&);
extern template JointLossOut<float> joint_loss(Tape<float>&, JointVariant, NodeId, NodeId,
                                               std::span<const int32_t>, const MaskedSequence&,
                                               std::span<const int32_t>, double, const LossConfig&, int32_t);
extern template JointLossOut<double> joint_loss(Tape<double>&, JointVariant, NodeId, NodeId,
                                                std::span<const int32_t>, const MaskedSequence&,
                                                std::span<const int32_t>, double, const LossConfig&, int32_t);
extern template void train_joint(Backbone<float>&, IntrospectionModel<float>*, std::span<const TaskExample>,
                                 const Vocabulary&, int64_t, const JointTrainConfig&,
                                 const std::function<void(int64_t, double)>&);
extern template void train_joint(Backbone<double>&, IntrospectionModel<double>*, std::span<const TaskExample>,
                                 const Vocabulary&, int64_t, const JointTrainConfig&,
                                 const std::function<void(int64_t, double)>&);

}  // namespace remask
