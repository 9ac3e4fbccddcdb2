#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "remask/error.hpp"

namespace remask {

using NodeId = int32_t;
using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. `grad` stays empty until a backward pass (or an
// explicit zero_grad) touches it; when present it shape-matches `values`.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> v);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, T fill);

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& at(int64_t i, int64_t j) { return values[i * cols() + j]; }
  T at(int64_t i, int64_t j) const { return values[i * cols() + j]; }

  void ensure_grad();  // allocate zero grad buffer if absent
  void zero_grad();
  bool all_finite() const;
};

enum class Prim : uint8_t {
  Leaf,
  Constant,
  MatMul,
  MatMulNT,
  Add,
  AddRowVec,
  Scale,
  Mul,
  Softmax,
  LogSoftmax,
  LayerNorm,
  Gelu,
  Sigmoid,
  Log,
  EmbedGather,
  PickPerRow,
  MaskedSum,
  BceMean,
  SliceRows,
  SliceCols,
  ConcatCols,
};

const char* prim_name(Prim p);

// Reverse-mode tape. Nodes are appended in evaluation order, so the record
// list is topologically sorted by construction. One tape per forward pass;
// single-threaded use.
template <class T>
class Tape {
 public:
  // Registers an external parameter as a differentiable leaf. backward()
  // accumulates into param->grad. The same pointer maps to the same node.
  NodeId leaf(Tensor<T>* param);
  // Input the tape treats as a constant (no gradient).
  NodeId constant(Tensor<T> value);

  NodeId matmul(NodeId a, NodeId b);     // (m,k) x (k,n) -> (m,n)
  NodeId matmul_nt(NodeId a, NodeId b);  // (m,k) x (n,k)^T -> (m,n)
  NodeId add(NodeId a, NodeId b);
  NodeId add_rowvec(NodeId a, NodeId v);  // (m,n) + broadcast (n)
  NodeId scale(NodeId a, double factor);
  NodeId mul(NodeId a, NodeId b);
  NodeId softmax_rows(NodeId a);
  NodeId log_softmax_rows(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
  NodeId gelu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId log(NodeId a);
  // Rows of `table` selected by ids; backward scatter-adds into the table.
  NodeId embed_gather(NodeId table, std::vector<int32_t> ids);
  // out[i] = m[i, ids[i]]
  NodeId pick_per_row(NodeId m, std::vector<int32_t> ids);
  // Scalar sum over flagged entries; unflagged entries get exactly zero grad.
  NodeId masked_sum(NodeId v, std::vector<uint8_t> flags);
  // Mean binary cross-entropy over included positions, probabilities clamped
  // to [clamp_eps, 1-clamp_eps]. labels are 0/1 per position.
  NodeId bce_mean(NodeId scores, std::vector<uint8_t> labels,
                  std::vector<uint8_t> include, double clamp_eps = 1e-7);
  NodeId slice_rows(NodeId a, int64_t r0, int64_t r1);
  NodeId slice_cols(NodeId a, int64_t c0, int64_t c1);
  NodeId concat_cols(std::span<const NodeId> parts);

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  Prim kind(NodeId id) const { return nodes_[id].kind; }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

  // root must be scalar. Accumulates d(root)/d(leaf) into each leaf's grad.
  void backward(NodeId root);

  // Scan every primitive output for NaN/Inf (on by default).
  bool check_finite = true;

 private:
  struct Node {
    Prim kind;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Tensor<T>* sink = nullptr;      // Leaf only
    double attr = 0.0;              // Scale factor, LayerNorm eps, BceMean clamp
    std::vector<int32_t> ids;       // EmbedGather / PickPerRow / BceMean labels
    std::vector<uint8_t> flags;     // MaskedSum / BceMean include
    std::vector<T> saved;           // op-specific saved activations
    int64_t lo = 0, hi = 0;         // slice bounds
  };

  NodeId push(Node n);
  const Tensor<T>& in(const Node& n, size_t i) const { return nodes_[n.inputs[i]].value; }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, NodeId> leaf_ids_;
};

// GELU(x) = 0.5 x (1 + erf(x / sqrt(2))) and its derivative.
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace remask
