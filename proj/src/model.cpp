#include "remask/model.hpp"

#include <cmath>

#include "remask/error.hpp"

namespace remask {

void BackboneConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || vocab_size <= 0 || max_positions <= 0)
    throw ConfigError("backbone config: all extents must be positive");
  if (d_model % n_heads != 0) throw ConfigError("backbone config: d_model must be divisible by n_heads");
  if (mask_id < 0 || mask_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size || bos_id < 0 ||
      bos_id >= vocab_size)
    throw ConfigError("backbone config: special token ids must lie in [0, vocab_size)");
  if (mask_id == eos_id) throw ConfigError("backbone config: MASK and EOS ids must differ");
}

template <class T>
void BlockParams<T>::allocate(int32_t d) {
  int64_t dm = d, dh = 4 * dm;
  ln1_g = Tensor<T>::full({dm}, T(1));
  ln1_b = Tensor<T>::zeros({dm});
  wq = Tensor<T>::zeros({dm, dm});
  bq = Tensor<T>::zeros({dm});
  wk = Tensor<T>::zeros({dm, dm});
  bk = Tensor<T>::zeros({dm});
  wv = Tensor<T>::zeros({dm, dm});
  bv = Tensor<T>::zeros({dm});
  wo = Tensor<T>::zeros({dm, dm});
  bo = Tensor<T>::zeros({dm});
  ln2_g = Tensor<T>::full({dm}, T(1));
  ln2_b = Tensor<T>::zeros({dm});
  w1 = Tensor<T>::zeros({dm, dh});
  b1 = Tensor<T>::zeros({dh});
  w2 = Tensor<T>::zeros({dh, dm});
  b2 = Tensor<T>::zeros({dm});
}

template <class T>
void BlockParams<T>::init(Rng& rng, double weight_std) {
  for (Tensor<T>* w : {&wq, &wk, &wv, &wo, &w1, &w2})
    for (auto& v : w->values) v = static_cast<T>(rng.normal(0.0, weight_std));
}

template <class T>
void BlockParams<T>::copy_from(const BlockParams& other) {
  auto cp = [](Tensor<T>& dst, const Tensor<T>& src) {
    dst.shape = src.shape;
    dst.values = src.values;
    dst.grad.clear();
  };
  cp(ln1_g, other.ln1_g);
  cp(ln1_b, other.ln1_b);
  cp(wq, other.wq);
  cp(bq, other.bq);
  cp(wk, other.wk);
  cp(bk, other.bk);
  cp(wv, other.wv);
  cp(bv, other.bv);
  cp(wo, other.wo);
  cp(bo, other.bo);
  cp(ln2_g, other.ln2_g);
  cp(ln2_b, other.ln2_b);
  cp(w1, other.w1);
  cp(b1, other.b1);
  cp(w2, other.w2);
  cp(b2, other.b2);
}

template <class T>
void BlockParams<T>::for_each(const std::string& prefix,
                              const std::function<void(const std::string&, Tensor<T>*)>& fn) {
  fn(prefix + ".ln1.g", &ln1_g);
  fn(prefix + ".ln1.b", &ln1_b);
  fn(prefix + ".attn.wq", &wq);
  fn(prefix + ".attn.bq", &bq);
  fn(prefix + ".attn.wk", &wk);
  fn(prefix + ".attn.bk", &bk);
  fn(prefix + ".attn.wv", &wv);
  fn(prefix + ".attn.bv", &bv);
  fn(prefix + ".attn.wo", &wo);
  fn(prefix + ".attn.bo", &bo);
  fn(prefix + ".ln2.g", &ln2_g);
  fn(prefix + ".ln2.b", &ln2_b);
  fn(prefix + ".mlp.w1", &w1);
  fn(prefix + ".mlp.b1", &b1);
  fn(prefix + ".mlp.w2", &w2);
  fn(prefix + ".mlp.b2", &b2);
}

template <class T>
int64_t BlockParams<T>::param_count() const {
  int64_t n = 0;
  for (const Tensor<T>* t : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1,
                             &b1, &w2, &b2})
    n += t->numel();
  return n;
}

template <class T>
Backbone<T>::Backbone(BackboneConfig config) : cfg(config) {
  cfg.validate();
  int64_t d = cfg.d_model;
  tok_emb = Tensor<T>::zeros({cfg.vocab_size, d});
  pos_emb = Tensor<T>::zeros({cfg.max_positions, d});
  blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& b : blocks) b.allocate(cfg.d_model);
  lnf_g = Tensor<T>::full({d}, T(1));
  lnf_b = Tensor<T>::zeros({d});
  head_w = Tensor<T>::zeros({d, cfg.vocab_size});
  head_b = Tensor<T>::zeros({cfg.vocab_size});
}

template <class T>
void Backbone<T>::init(Rng& rng, double weight_std) {
  for (auto& v : tok_emb.values) v = static_cast<T>(rng.normal(0.0, weight_std));
  for (auto& v : pos_emb.values) v = static_cast<T>(rng.normal(0.0, weight_std));
  for (auto& b : blocks) b.init(rng, weight_std);
  for (auto& v : head_w.values) v = static_cast<T>(rng.normal(0.0, weight_std));
}

template <class T>
void Backbone<T>::for_each_param(const std::function<void(const std::string&, Tensor<T>*)>& fn) {
  fn("tok_emb", &tok_emb);
  fn("pos_emb", &pos_emb);
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].for_each("block" + std::to_string(i), fn);
  fn("lnf.g", &lnf_g);
  fn("lnf.b", &lnf_b);
  fn("head.w", &head_w);
  fn("head.b", &head_b);
}

template <class T>
void Backbone<T>::register_params(AdamW<T>& opt) {
  for_each_param([&](const std::string& name, Tensor<T>* t) { opt.add_param(name, t); });
}

template <class T>
int64_t Backbone<T>::param_count() const {
  int64_t n = 0;
  const_cast<Backbone<T>*>(this)->for_each_param(
      [&](const std::string&, Tensor<T>* t) { n += t->numel(); });
  return n;
}

template <class T>
uint64_t Backbone<T>::checksum() const {
  Fnv64 h;
  const_cast<Backbone<T>*>(this)->for_each_param([&](const std::string& name, Tensor<T>* t) {
    h.update(name.data(), name.size());
    h.update(t->values.data(), t->values.size() * sizeof(T));
  });
  return h.digest();
}

template <class T>
void IntrospectionModel<T>::allocate(int32_t d) {
  d_model = d;
  block.allocate(d);
  head_w = Tensor<T>::zeros({d, 1});
  head_b = Tensor<T>::zeros({1});
}

template <class T>
void IntrospectionModel<T>::for_each_param(const std::function<void(const std::string&, Tensor<T>*)>& fn) {
  block.for_each("introspect.block", fn);
  fn("introspect.head.w", &head_w);
  fn("introspect.head.b", &head_b);
}

template <class T>
void IntrospectionModel<T>::register_params(AdamW<T>& opt) {
  for_each_param([&](const std::string& name, Tensor<T>* t) { opt.add_param(name, t); });
}

template <class T>
int64_t IntrospectionModel<T>::param_count() const {
  return block.param_count() + head_w.numel() + head_b.numel();
}

template <class T>
uint64_t IntrospectionModel<T>::checksum() const {
  Fnv64 h;
  const_cast<IntrospectionModel<T>*>(this)->for_each_param([&](const std::string& name, Tensor<T>* t) {
    h.update(name.data(), name.size());
    h.update(t->values.data(), t->values.size() * sizeof(T));
  });
  return h.digest();
}

template <class T>
IntrospectionModel<T> init_introspection_from_backbone(const Backbone<T>& backbone, Rng& rng) {
  IntrospectionModel<T> m;
  m.allocate(backbone.cfg.d_model);
  m.block.copy_from(backbone.blocks.back());
  for (auto& v : m.head_w.values) v = static_cast<T>(rng.normal(0.0, 0.02));
  // head bias stays 0
  return m;
}

template <class T>
NodeId block_forward(Tape<T>& tape, BlockParams<T>& p, NodeId x, int32_t n_heads) {
  int64_t d = p.wq.shape[0];
  int64_t dh = d / n_heads;

  NodeId h = tape.layer_norm(x, tape.leaf(&p.ln1_g), tape.leaf(&p.ln1_b));
  NodeId q = tape.add_rowvec(tape.matmul(h, tape.leaf(&p.wq)), tape.leaf(&p.bq));
  NodeId k = tape.add_rowvec(tape.matmul(h, tape.leaf(&p.wk)), tape.leaf(&p.bk));
  NodeId v = tape.add_rowvec(tape.matmul(h, tape.leaf(&p.wv)), tape.leaf(&p.bv));

  std::vector<NodeId> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int32_t hd = 0; hd < n_heads; ++hd) {
    int64_t c0 = hd * dh, c1 = (hd + 1) * dh;
    NodeId qh = tape.slice_cols(q, c0, c1);
    NodeId kh = tape.slice_cols(k, c0, c1);
    NodeId vh = tape.slice_cols(v, c0, c1);
    NodeId att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(tape.matmul(att, vh));
  }
  NodeId merged = tape.concat_cols(heads);
  NodeId attn_out = tape.add_rowvec(tape.matmul(merged, tape.leaf(&p.wo)), tape.leaf(&p.bo));
  NodeId x1 = tape.add(x, attn_out);

  NodeId m = tape.layer_norm(x1, tape.leaf(&p.ln2_g), tape.leaf(&p.ln2_b));
  NodeId mid = tape.gelu(tape.add_rowvec(tape.matmul(m, tape.leaf(&p.w1)), tape.leaf(&p.b1)));
  NodeId mlp_out = tape.add_rowvec(tape.matmul(mid, tape.leaf(&p.w2)), tape.leaf(&p.b2));
  return tape.add(x1, mlp_out);
}

template <class T>
BackboneOut<T> backbone_forward(Tape<T>& tape, Backbone<T>& model, std::span<const int32_t> prompt_ids,
                                std::span<const int32_t> response_ids) {
  const auto& cfg = model.cfg;
  int64_t total = static_cast<int64_t>(prompt_ids.size()) + 1 + static_cast<int64_t>(response_ids.size());
  if (total > cfg.max_positions)
    throw std::invalid_argument("backbone_forward: sequence length " + std::to_string(total) +
                                " exceeds max_positions " + std::to_string(cfg.max_positions));
  if (response_ids.empty()) throw std::invalid_argument("backbone_forward: empty response");

  std::vector<int32_t> ids;
  ids.reserve(static_cast<size_t>(total));
  ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
  ids.push_back(cfg.bos_id);
  ids.insert(ids.end(), response_ids.begin(), response_ids.end());
  std::vector<int32_t> pos(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) pos[static_cast<size_t>(i)] = static_cast<int32_t>(i);

  NodeId x = tape.add(tape.embed_gather(tape.leaf(&model.tok_emb), ids),
                      tape.embed_gather(tape.leaf(&model.pos_emb), pos));

  NodeId pen_full = x;
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    if (i + 1 == model.blocks.size()) pen_full = x;  // input to the final block
    x = block_forward(tape, model.blocks[i], x, cfg.n_heads);
  }

  NodeId final_h = tape.layer_norm(x, tape.leaf(&model.lnf_g), tape.leaf(&model.lnf_b));
  NodeId all_logits = tape.add_rowvec(tape.matmul(final_h, tape.leaf(&model.head_w)), tape.leaf(&model.head_b));

  int64_t resp_start = static_cast<int64_t>(prompt_ids.size()) + 1;
  BackboneOut<T> out;
  out.logits = tape.slice_rows(all_logits, resp_start, total);
  out.penultimate = tape.slice_rows(pen_full, resp_start, total);
  out.resp_start = resp_start;
  return out;
}

template <class T>
NodeId introspect_scores(Tape<T>& tape, IntrospectionModel<T>& model, NodeId penultimate, int32_t n_heads) {
  NodeId h = block_forward(tape, model.block, penultimate, n_heads);
  NodeId logit = tape.add_rowvec(tape.matmul(h, tape.leaf(&model.head_w)), tape.leaf(&model.head_b));
  return tape.sigmoid(logit);
}

template struct BlockParams<float>;
template struct BlockParams<double>;
template struct Backbone<float>;
template struct Backbone<double>;
template struct IntrospectionModel<float>;
template struct IntrospectionModel<double>;
template IntrospectionModel<float> init_introspection_from_backbone(const Backbone<float>&, Rng&);
template IntrospectionModel<double> init_introspection_from_backbone(const Backbone<double>&, Rng&);
template NodeId block_forward(Tape<float>&, BlockParams<float>&, NodeId, int32_t);
template NodeId block_forward(Tape<double>&, BlockParams<double>&, NodeId, int32_t);
template BackboneOut<float> backbone_forward(Tape<float>&, Backbone<float>&, std::span<const int32_t>,
                                             std::span<const int32_t>);
template BackboneOut<double> backbone_forward(Tape<double>&, Backbone<double>&, std::span<const int32_t>,
                                              std::span<const int32_t>);
template NodeId introspect_scores(Tape<float>&, IntrospectionModel<float>&, NodeId, int32_t);
template NodeId introspect_scores(Tape<double>&, IntrospectionModel<double>&, NodeId, int32_t);

}  // namespace remask
