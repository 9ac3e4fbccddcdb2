#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "remask/optim.hpp"
#include "remask/rng.hpp"
#include "remask/tensor.hpp"

namespace remask {

struct BackboneConfig {
  int32_t vocab_size = 44;
  int32_t d_model = 128;
  int32_t n_heads = 4;
  int32_t n_layers = 4;
  int32_t max_positions = 96;
  int32_t mask_id = 0;
  int32_t eos_id = 1;
  int32_t bos_id = 2;
  int32_t prompt_pad_id = 1;  // shares EOS; prompts are never padded here

  int32_t head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError
};

// One pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
template <class T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;  // GELU MLP, ratio 4

  void allocate(int32_t d_model);
  void init(Rng& rng, double weight_std);
  void copy_from(const BlockParams& other);

  // Fixed traversal order; `prefix` namespaces the tensor names.
  void for_each(const std::string& prefix,
                const std::function<void(const std::string&, Tensor<T>*)>& fn);
  int64_t param_count() const;
};

template <class T>
struct Backbone {
  BackboneConfig cfg;
  Tensor<T> tok_emb;  // (V, d)
  Tensor<T> pos_emb;  // (max_positions, d)
  std::vector<BlockParams<T>> blocks;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head_w;  // (d, V)
  Tensor<T> head_b;  // (V)

  explicit Backbone(BackboneConfig config = {});
  void init(Rng& rng, double weight_std = 0.02);

  void for_each_param(const std::function<void(const std::string&, Tensor<T>*)>& fn);
  void register_params(AdamW<T>& opt);
  int64_t param_count() const;
  uint64_t checksum() const;  // FNV over raw value bytes in registry order
};

// One transformer block plus a per-position error-probability head.
template <class T>
struct IntrospectionModel {
  int32_t d_model = 0;
  BlockParams<T> block;
  Tensor<T> head_w;  // (d, 1)
  Tensor<T> head_b;  // (1)

  void allocate(int32_t d);
  void for_each_param(const std::function<void(const std::string&, Tensor<T>*)>& fn);
  void register_params(AdamW<T>& opt);
  int64_t param_count() const;
  uint64_t checksum() const;
};

// Block copied bit-for-bit from the final backbone block; projection head
// weights ~ normal(0, 0.02), bias 0.
template <class T>
IntrospectionModel<T> init_introspection_from_backbone(const Backbone<T>& backbone, Rng& rng);

// Runs one block over a (L, d) feature node already on the tape.
template <class T>
NodeId block_forward(Tape<T>& tape, BlockParams<T>& p, NodeId x, int32_t n_heads);

template <class T>
struct BackboneOut {
  NodeId logits;       // (response length, V)
  NodeId penultimate;  // (response length, d): input to the final block
  int64_t resp_start;  // row offset of the response inside the full sequence
};

// Input layout: [prompt][BOS][response]. Logits and penultimate features are
// returned for response positions only.
template <class T>
BackboneOut<T> backbone_forward(Tape<T>& tape, Backbone<T>& model, std::span<const int32_t> prompt_ids,
                                std::span<const int32_t> response_ids);

// Per-position error probabilities from response-position penultimate
// features: block -> linear -> sigmoid, shape (L, 1). Prompt positions are
// never scored because they are never part of `penultimate`.
template <class T>
NodeId introspect_scores(Tape<T>& tape, IntrospectionModel<T>& model, NodeId penultimate, int32_t n_heads);

extern template struct BlockParams<float>;
extern template struct BlockParams<double>;
extern template struct Backbone<float>;
extern template struct Backbone<double>;
extern template struct IntrospectionModel<float>;
extern template struct IntrospectionModel<double>;
extern template IntrospectionModel<float> init_introspection_from_backbone(const Backbone<float>&, Rng&);
extern template IntrospectionModel<double> init_introspection_from_backbone(const Backbone<double>&, Rng&);
extern template NodeId block_forward(Tape<float>&, BlockParams<float>&, NodeId, int32_t);
extern template NodeId block_forward(Tape<double>&, BlockParams<double>&, NodeId, int32_t);
extern template BackboneOut<float> backbone_forward(Tape<float>&, Backbone<float>&, std::span<const int32_t>,
                                                    std::span<const int32_t>);
extern template BackboneOut<double> backbone_forward(Tape<double>&, Backbone<double>&, std::span<const int32_t>,
                                                     std::span<const int32_t>);
extern template NodeId introspect_scores(Tape<float>&, IntrospectionModel<float>&, NodeId, int32_t);
extern template NodeId introspect_scores(Tape<double>&, IntrospectionModel<double>&, NodeId, int32_t);

}  // namespace remask
