#include "remask/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace remask {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

const char* prim_name(Prim p) {
  switch (p) {
    case Prim::Leaf: return "leaf";
    case Prim::Constant: return "constant";
    case Prim::MatMul: return "matmul";
    case Prim::MatMulNT: return "matmul_nt";
    case Prim::Add: return "add";
    case Prim::AddRowVec: return "add_rowvec";
    case Prim::Scale: return "scale";
    case Prim::Mul: return "mul";
    case Prim::Softmax: return "softmax";
    case Prim::LogSoftmax: return "log_softmax";
    case Prim::LayerNorm: return "layer_norm";
    case Prim::Gelu: return "gelu";
    case Prim::Sigmoid: return "sigmoid";
    case Prim::Log: return "log";
    case Prim::EmbedGather: return "embed_gather";
    case Prim::PickPerRow: return "pick_per_row";
    case Prim::MaskedSum: return "masked_sum";
    case Prim::BceMean: return "bce_mean";
    case Prim::SliceRows: return "slice_rows";
    case Prim::SliceCols: return "slice_cols";
    case Prim::ConcatCols: return "concat_cols";
  }
  return "?";
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

double gelu_grad_scalar(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return cdf + x * pdf;
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match value count " +
                                std::to_string(values.size()));
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape s) {
  Tensor t;
  t.values.assign(static_cast<size_t>(shape_numel(s)), T(0));
  t.shape = std::move(s);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::full(Shape s, T fill) {
  Tensor t = zeros(std::move(s));
  std::fill(t.values.begin(), t.values.end(), fill);
  return t;
}

template <class T>
void Tensor<T>::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), T(0));
}

template <class T>
void Tensor<T>::zero_grad() {
  grad.assign(values.size(), T(0));
}

template <class T>
bool Tensor<T>::all_finite() const {
  for (T v : values)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

namespace {

// c(m,n) [+]= a(m,k) * b(k,n)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool acc) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!acc) std::fill(ci, ci + n, T(0));
    const T* ai = a + i * k;
    for (int64_t l = 0; l < k; ++l) {
      T av = ai[l];
      const T* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// c(m,n) [+]= a(m,k) * b(n,k)^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool acc) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int64_t l = 0;
      for (; l + 4 <= k; l += 4) {
        s0 += ai[l] * bj[l];
        s1 += ai[l + 1] * bj[l + 1];
        s2 += ai[l + 2] * bj[l + 2];
        s3 += ai[l + 3] * bj[l + 3];
      }
      for (; l < k; ++l) s0 += ai[l] * bj[l];
      T dot = (s0 + s1) + (s2 + s3);
      if (acc)
        ci[j] += dot;
      else
        ci[j] = dot;
    }
  }
}

// c(k,n) += a(m,k)^T * b(m,n)
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t l = 0; l < m; ++l) {
    const T* al = a + l * k;
    const T* bl = b + l * n;
    for (int64_t i = 0; i < k; ++i) {
      T av = al[i];
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

template <class T>
void require_2d(const Tensor<T>& t, Prim p) {
  if (t.shape.size() != 2)
    throw std::invalid_argument(std::string(prim_name(p)) + ": expected 2-d input, got " + shape_str(t.shape));
}

}  // namespace

template <class T>
NodeId Tape<T>::push(Node n) {
  if (check_finite && n.kind != Prim::Leaf && !n.value.all_finite())
    throw NonFiniteError(std::string("non-finite value out of primitive ") + prim_name(n.kind));
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <class T>
NodeId Tape<T>::leaf(Tensor<T>* param) {
  auto it = leaf_ids_.find(param);
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.kind = Prim::Leaf;
  n.value = *param;  // snapshot; params are stable within one tape's lifetime
  n.value.grad.clear();
  n.sink = param;
  NodeId id = push(std::move(n));
  leaf_ids_.emplace(param, id);
  return id;
}

template <class T>
NodeId Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.kind = Prim::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::matmul(NodeId a, NodeId b) {
  const auto& A = nodes_[a].value;
  const auto& B = nodes_[b].value;
  require_2d(A, Prim::MatMul);
  require_2d(B, Prim::MatMul);
  if (A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(A.shape) + " x " + shape_str(B.shape));
  Node n;
  n.kind = Prim::MatMul;
  n.inputs = {a, b};
  n.value = Tensor<T>::zeros({A.shape[0], B.shape[1]});
  gemm_nn(A.values.data(), B.values.data(), n.value.values.data(), A.shape[0], A.shape[1], B.shape[1], false);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::matmul_nt(NodeId a, NodeId b) {
  const auto& A = nodes_[a].value;
  const auto& B = nodes_[b].value;
  require_2d(A, Prim::MatMulNT);
  require_2d(B, Prim::MatMulNT);
  if (A.shape[1] != B.shape[1])
    throw std::invalid_argument("matmul_nt: inner extents differ, " + shape_str(A.shape) + " x " +
                                shape_str(B.shape) + "^T");
  Node n;
  n.kind = Prim::MatMulNT;
  n.inputs = {a, b};
  n.value = Tensor<T>::zeros({A.shape[0], B.shape[0]});
  gemm_nt(A.values.data(), B.values.data(), n.value.values.data(), A.shape[0], A.shape[1], B.shape[0], false);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::add(NodeId a, NodeId b) {
  const auto& A = nodes_[a].value;
  const auto& B = nodes_[b].value;
  if (A.shape != B.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Node n;
  n.kind = Prim::Add;
  n.inputs = {a, b};
  n.value = A;
  n.value.grad.clear();
  for (int64_t i = 0; i < n.value.numel(); ++i) n.value.values[i] += B.values[i];
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::add_rowvec(NodeId a, NodeId v) {
  const auto& A = nodes_[a].value;
  const auto& V = nodes_[v].value;
  require_2d(A, Prim::AddRowVec);
  if (V.numel() != A.shape[1])
    throw std::invalid_argument("add_rowvec: vector length " + std::to_string(V.numel()) + " vs cols " +
                                std::to_string(A.shape[1]));
  Node n;
  n.kind = Prim::AddRowVec;
  n.inputs = {a, v};
  n.value = A;
  n.value.grad.clear();
  int64_t m = A.shape[0], c = A.shape[1];
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) n.value.values[i * c + j] += V.values[j];
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::scale(NodeId a, double factor) {
  Node n;
  n.kind = Prim::Scale;
  n.inputs = {a};
  n.attr = factor;
  n.value = nodes_[a].value;
  n.value.grad.clear();
  for (auto& x : n.value.values) x = static_cast<T>(x * factor);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::mul(NodeId a, NodeId b) {
  const auto& A = nodes_[a].value;
  const auto& B = nodes_[b].value;
  if (A.shape != B.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Node n;
  n.kind = Prim::Mul;
  n.inputs = {a, b};
  n.value = A;
  n.value.grad.clear();
  for (int64_t i = 0; i < n.value.numel(); ++i) n.value.values[i] *= B.values[i];
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::softmax_rows(NodeId a) {
  const auto& A = nodes_[a].value;
  require_2d(A, Prim::Softmax);
  Node n;
  n.kind = Prim::Softmax;
  n.inputs = {a};
  n.value = Tensor<T>::zeros(A.shape);
  int64_t m = A.shape[0], c = A.shape[1];
  for (int64_t i = 0; i < m; ++i) {
    const T* x = A.values.data() + i * c;
    T* y = n.value.values.data() + i * c;
    T mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < c; ++j) y[j] *= inv;
  }
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::log_softmax_rows(NodeId a) {
  const auto& A = nodes_[a].value;
  require_2d(A, Prim::LogSoftmax);
  Node n;
  n.kind = Prim::LogSoftmax;
  n.inputs = {a};
  n.value = Tensor<T>::zeros(A.shape);
  int64_t m = A.shape[0], c = A.shape[1];
  for (int64_t i = 0; i < m; ++i) {
    const T* x = A.values.data() + i * c;
    T* y = n.value.values.data() + i * c;
    T mx = x[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
    T lse = mx + std::log(sum);
    for (int64_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  const auto& X = nodes_[x].value;
  const auto& G = nodes_[gain].value;
  const auto& B = nodes_[bias].value;
  require_2d(X, Prim::LayerNorm);
  if (G.numel() != X.shape[1] || B.numel() != X.shape[1])
    throw std::invalid_argument("layer_norm: gain/bias length must equal cols " + std::to_string(X.shape[1]));
  Node n;
  n.kind = Prim::LayerNorm;
  n.inputs = {x, gain, bias};
  n.attr = eps;
  n.value = Tensor<T>::zeros(X.shape);
  int64_t m = X.shape[0], c = X.shape[1];
  n.saved.resize(2 * m);  // per row: mean, rstd
  for (int64_t i = 0; i < m; ++i) {
    const T* xs = X.values.data() + i * c;
    T* ys = n.value.values.data() + i * c;
    T mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += xs[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (int64_t j = 0; j < c; ++j) {
      T d = xs[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    n.saved[2 * i] = mean;
    n.saved[2 * i + 1] = rstd;
    for (int64_t j = 0; j < c; ++j) ys[j] = (xs[j] - mean) * rstd * G.values[j] + B.values[j];
  }
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::gelu(NodeId a) {
  Node n;
  n.kind = Prim::Gelu;
  n.inputs = {a};
  n.value = nodes_[a].value;
  n.value.grad.clear();
  for (auto& v : n.value.values) v = static_cast<T>(gelu_scalar(static_cast<double>(v)));
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::sigmoid(NodeId a) {
  Node n;
  n.kind = Prim::Sigmoid;
  n.inputs = {a};
  n.value = nodes_[a].value;
  n.value.grad.clear();
  for (auto& v : n.value.values) {
    double x = static_cast<double>(v);
    double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    v = static_cast<T>(y);
  }
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::log(NodeId a) {
  Node n;
  n.kind = Prim::Log;
  n.inputs = {a};
  n.value = nodes_[a].value;
  n.value.grad.clear();
  for (auto& v : n.value.values) v = std::log(v);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::embed_gather(NodeId table, std::vector<int32_t> ids) {
  const auto& Tb = nodes_[table].value;
  require_2d(Tb, Prim::EmbedGather);
  int64_t v = Tb.shape[0], d = Tb.shape[1];
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embed_gather: id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(v) + ")");
  Node n;
  n.kind = Prim::EmbedGather;
  n.inputs = {table};
  n.value = Tensor<T>::zeros({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(Tb.values.data() + static_cast<int64_t>(ids[i]) * d, d, n.value.values.data() + i * d);
  n.ids = std::move(ids);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::pick_per_row(NodeId m, std::vector<int32_t> ids) {
  const auto& M = nodes_[m].value;
  require_2d(M, Prim::PickPerRow);
  if (static_cast<int64_t>(ids.size()) != M.shape[0])
    throw std::invalid_argument("pick_per_row: need one id per row");
  for (int32_t id : ids)
    if (id < 0 || id >= M.shape[1]) throw std::invalid_argument("pick_per_row: column id out of range");
  Node n;
  n.kind = Prim::PickPerRow;
  n.inputs = {m};
  n.value = Tensor<T>::zeros({M.shape[0]});
  for (int64_t i = 0; i < M.shape[0]; ++i) n.value.values[i] = M.values[i * M.shape[1] + ids[i]];
  n.ids = std::move(ids);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::masked_sum(NodeId v, std::vector<uint8_t> flags) {
  const auto& V = nodes_[v].value;
  if (static_cast<int64_t>(flags.size()) != V.numel())
    throw std::invalid_argument("masked_sum: flag count must equal element count");
  Node n;
  n.kind = Prim::MaskedSum;
  n.inputs = {v};
  n.value = Tensor<T>::zeros({1});
  T s = 0;
  for (int64_t i = 0; i < V.numel(); ++i)
    if (flags[i]) s += V.values[i];
  n.value.values[0] = s;
  n.flags = std::move(flags);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::bce_mean(NodeId scores, std::vector<uint8_t> labels, std::vector<uint8_t> include,
                         double clamp_eps) {
  const auto& S = nodes_[scores].value;
  if (static_cast<int64_t>(labels.size()) != S.numel() || labels.size() != include.size())
    throw std::invalid_argument("bce_mean: labels/include must match element count");
  Node n;
  n.kind = Prim::BceMean;
  n.inputs = {scores};
  n.attr = clamp_eps;
  n.value = Tensor<T>::zeros({1});
  int64_t cnt = 0;
  double acc = 0;
  for (int64_t i = 0; i < S.numel(); ++i) {
    if (!include[i]) continue;
    ++cnt;
    double s = std::clamp(static_cast<double>(S.values[i]), clamp_eps, 1.0 - clamp_eps);
    acc -= labels[i] ? std::log(s) : std::log1p(-s);
  }
  n.value.values[0] = static_cast<T>(cnt ? acc / cnt : 0.0);
  n.ids.assign(labels.begin(), labels.end());
  n.flags = std::move(include);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::slice_rows(NodeId a, int64_t r0, int64_t r1) {
  const auto& A = nodes_[a].value;
  require_2d(A, Prim::SliceRows);
  if (r0 < 0 || r1 > A.shape[0] || r0 > r1) throw std::invalid_argument("slice_rows: bad range");
  Node n;
  n.kind = Prim::SliceRows;
  n.inputs = {a};
  n.lo = r0;
  n.hi = r1;
  int64_t c = A.shape[1];
  n.value = Tensor<T>::zeros({r1 - r0, c});
  std::copy_n(A.values.data() + r0 * c, (r1 - r0) * c, n.value.values.data());
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::slice_cols(NodeId a, int64_t c0, int64_t c1) {
  const auto& A = nodes_[a].value;
  require_2d(A, Prim::SliceCols);
  if (c0 < 0 || c1 > A.shape[1] || c0 > c1) throw std::invalid_argument("slice_cols: bad range");
  Node n;
  n.kind = Prim::SliceCols;
  n.inputs = {a};
  n.lo = c0;
  n.hi = c1;
  int64_t m = A.shape[0], c = A.shape[1], w = c1 - c0;
  n.value = Tensor<T>::zeros({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(A.values.data() + i * c + c0, w, n.value.values.data() + i * w);
  return push(std::move(n));
}

template <class T>
NodeId Tape<T>::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  int64_t m = nodes_[parts[0]].value.shape[0];
  int64_t total = 0;
  for (NodeId p : parts) {
    const auto& P = nodes_[p].value;
    require_2d(P, Prim::ConcatCols);
    if (P.shape[0] != m) throw std::invalid_argument("concat_cols: row counts differ");
    total += P.shape[1];
  }
  Node n;
  n.kind = Prim::ConcatCols;
  n.inputs.assign(parts.begin(), parts.end());
  n.value = Tensor<T>::zeros({m, total});
  int64_t off = 0;
  for (NodeId p : parts) {
    const auto& P = nodes_[p].value;
    int64_t w = P.shape[1];
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(P.values.data() + i * w, w, n.value.values.data() + i * total + off);
    off += w;
  }
  return push(std::move(n));
}

template <class T>
void Tape<T>::backward(NodeId root) {
  if (root < 0 || root >= size()) throw std::invalid_argument("backward: bad root id");
  if (nodes_[root].value.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(nodes_[root].value.shape));

  std::vector<uint8_t> reach(nodes_.size(), 0);
  {
    std::vector<NodeId> stack{root};
    reach[root] = 1;
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      for (NodeId in : nodes_[id].inputs)
        if (!reach[in]) {
          reach[in] = 1;
          stack.push_back(in);
        }
    }
  }

  std::vector<std::vector<T>> gbuf(nodes_.size());
  gbuf[root].assign(1, T(1));

  for (NodeId id = root; id >= 0; --id) {
    if (!reach[id] || gbuf[id].empty()) continue;
    Node& n = nodes_[id];
    const std::vector<T>& gy = gbuf[id];
    auto gin = [&](size_t i) -> std::vector<T>& {
      NodeId src = n.inputs[i];
      if (gbuf[src].empty()) gbuf[src].assign(nodes_[src].value.values.size(), T(0));
      return gbuf[src];
    };

    switch (n.kind) {
      case Prim::Leaf: {
        n.sink->ensure_grad();
        for (size_t i = 0; i < gy.size(); ++i) n.sink->grad[i] += gy[i];
        break;
      }
      case Prim::Constant:
        break;
      case Prim::MatMul: {
        const auto& A = in(n, 0);
        const auto& B = in(n, 1);
        int64_t m = A.shape[0], k = A.shape[1], c = B.shape[1];
        gemm_nt(gy.data(), B.values.data(), gin(0).data(), m, c, k, true);
        gemm_tn_acc(A.values.data(), gy.data(), gin(1).data(), m, k, c);
        break;
      }
      case Prim::MatMulNT: {
        const auto& A = in(n, 0);
        const auto& B = in(n, 1);
        int64_t m = A.shape[0], k = A.shape[1], c = B.shape[0];
        gemm_nn(gy.data(), B.values.data(), gin(0).data(), m, c, k, true);
        gemm_tn_acc(gy.data(), A.values.data(), gin(1).data(), m, c, k);
        break;
      }
      case Prim::Add: {
        auto& g0 = gin(0);
        auto& g1 = gin(1);
        for (size_t i = 0; i < gy.size(); ++i) {
          g0[i] += gy[i];
          g1[i] += gy[i];
        }
        break;
      }
      case Prim::AddRowVec: {
        const auto& A = in(n, 0);
        int64_t m = A.shape[0], c = A.shape[1];
        auto& g0 = gin(0);
        auto& g1 = gin(1);
        for (size_t i = 0; i < gy.size(); ++i) g0[i] += gy[i];
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) g1[j] += gy[i * c + j];
        break;
      }
      case Prim::Scale: {
        auto& g0 = gin(0);
        T f = static_cast<T>(n.attr);
        for (size_t i = 0; i < gy.size(); ++i) g0[i] += gy[i] * f;
        break;
      }
      case Prim::Mul: {
        const auto& A = in(n, 0);
        const auto& B = in(n, 1);
        auto& g0 = gin(0);
        auto& g1 = gin(1);
        for (size_t i = 0; i < gy.size(); ++i) {
          g0[i] += gy[i] * B.values[i];
          g1[i] += gy[i] * A.values[i];
        }
        break;
      }
      case Prim::Softmax: {
        const auto& Y = n.value;
        int64_t m = Y.shape[0], c = Y.shape[1];
        auto& g0 = gin(0);
        for (int64_t i = 0; i < m; ++i) {
          const T* y = Y.values.data() + i * c;
          const T* dy = gy.data() + i * c;
          T dot = 0;
          for (int64_t j = 0; j < c; ++j) dot += dy[j] * y[j];
          T* dx = g0.data() + i * c;
          for (int64_t j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
        break;
      }
      case Prim::LogSoftmax: {
        const auto& Y = n.value;
        int64_t m = Y.shape[0], c = Y.shape[1];
        auto& g0 = gin(0);
        for (int64_t i = 0; i < m; ++i) {
          const T* y = Y.values.data() + i * c;
          const T* dy = gy.data() + i * c;
          T sum = 0;
          for (int64_t j = 0; j < c; ++j) sum += dy[j];
          T* dx = g0.data() + i * c;
          for (int64_t j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * sum;
        }
        break;
      }
      case Prim::LayerNorm: {
        const auto& X = in(n, 0);
        const auto& G = in(n, 1);
        int64_t m = X.shape[0], c = X.shape[1];
        auto& gx = gin(0);
        auto& gg = gin(1);
        auto& gb = gin(2);
        for (int64_t i = 0; i < m; ++i) {
          const T* xs = X.values.data() + i * c;
          const T* dy = gy.data() + i * c;
          T mean = n.saved[2 * i], rstd = n.saved[2 * i + 1];
          T du_mean = 0, duh_mean = 0;
          for (int64_t j = 0; j < c; ++j) {
            T xh = (xs[j] - mean) * rstd;
            T du = dy[j] * G.values[j];
            du_mean += du;
            duh_mean += du * xh;
            gg[j] += dy[j] * xh;
            gb[j] += dy[j];
          }
          du_mean /= static_cast<T>(c);
          duh_mean /= static_cast<T>(c);
          T* dx = gx.data() + i * c;
          for (int64_t j = 0; j < c; ++j) {
            T xh = (xs[j] - mean) * rstd;
            T du = dy[j] * G.values[j];
            dx[j] += rstd * (du - du_mean - xh * duh_mean);
          }
        }
        break;
      }
      case Prim::Gelu: {
        const auto& X = in(n, 0);
        auto& g0 = gin(0);
        for (size_t i = 0; i < gy.size(); ++i)
          g0[i] += gy[i] * static_cast<T>(gelu_grad_scalar(static_cast<double>(X.values[i])));
        break;
      }
      case Prim::Sigmoid: {
        const auto& Y = n.value;
        auto& g0 = gin(0);
        for (size_t i = 0; i < gy.size(); ++i) g0[i] += gy[i] * Y.values[i] * (T(1) - Y.values[i]);
        break;
      }
      case Prim::Log: {
        const auto& X = in(n, 0);
        auto& g0 = gin(0);
        for (size_t i = 0; i < gy.size(); ++i) g0[i] += gy[i] / X.values[i];
        break;
      }
      case Prim::EmbedGather: {
        const auto& Tb = in(n, 0);
        int64_t d = Tb.shape[1];
        auto& g0 = gin(0);
        for (size_t i = 0; i < n.ids.size(); ++i) {
          const T* src = gy.data() + i * d;
          T* dst = g0.data() + static_cast<int64_t>(n.ids[i]) * d;
          for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Prim::PickPerRow: {
        const auto& M = in(n, 0);
        int64_t c = M.shape[1];
        auto& g0 = gin(0);
        for (size_t i = 0; i < n.ids.size(); ++i) g0[i * c + n.ids[i]] += gy[i];
        break;
      }
      case Prim::MaskedSum: {
        auto& g0 = gin(0);
        for (size_t i = 0; i < n.flags.size(); ++i)
          if (n.flags[i]) g0[i] += gy[0];
        break;
      }
      case Prim::BceMean: {
        const auto& S = in(n, 0);
        auto& g0 = gin(0);
        int64_t cnt = 0;
        for (uint8_t f : n.flags) cnt += f;
        if (cnt == 0) break;
        double inv = 1.0 / static_cast<double>(cnt);
        double eps = n.attr;
        for (size_t i = 0; i < n.flags.size(); ++i) {
          if (!n.flags[i]) continue;
          double s = static_cast<double>(S.values[i]);
          if (s <= eps || s >= 1.0 - eps) continue;  // clamped region: flat
          double y = n.ids[i];
          g0[i] += static_cast<T>(gy[0] * ((s - y) / (s * (1.0 - s))) * inv);
        }
        break;
      }
      case Prim::SliceRows: {
        const auto& A = in(n, 0);
        int64_t c = A.shape[1];
        auto& g0 = gin(0);
        for (size_t i = 0; i < gy.size(); ++i) g0[n.lo * c + i] += gy[i];
        break;
      }
      case Prim::SliceCols: {
        const auto& A = in(n, 0);
        int64_t m = A.shape[0], c = A.shape[1], w = n.hi - n.lo;
        auto& g0 = gin(0);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < w; ++j) g0[i * c + n.lo + j] += gy[i * w + j];
        break;
      }
      case Prim::ConcatCols: {
        int64_t m = n.value.shape[0], total = n.value.shape[1];
        int64_t off = 0;
        for (size_t p = 0; p < n.inputs.size(); ++p) {
          const auto& P = in(n, p);
          int64_t w = P.shape[1];
          auto& gp = gin(p);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) gp[i * w + j] += gy[i * total + off + j];
          off += w;
        }
        break;
      }
    }
  }
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace remask
