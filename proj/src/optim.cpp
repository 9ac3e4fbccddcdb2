#include "remask/optim.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace remask {

double lr_at(const OptimConfig& cfg, int64_t step) {
  if (step <= 0) return 0.0;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps) return 0.0;
  double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  double frac = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

template <class T>
void AdamW<T>::add_param(std::string name, Tensor<T>* p) {
  for (const auto& s : slots_)
    if (s.name == name) throw ConfigError("duplicate parameter name: " + name);
  Slot s;
  s.name = std::move(name);
  s.p = p;
  s.m.assign(p->values.size(), T(0));
  s.v.assign(p->values.size(), T(0));
  slots_.push_back(std::move(s));
}

template <class T>
Tensor<T>* AdamW<T>::find(const std::string& name) const {
  for (const auto& s : slots_)
    if (s.name == name) return s.p;
  return nullptr;
}

template <class T>
void AdamW<T>::zero_grad() {
  for (auto& s : slots_) s.p->zero_grad();
}

template <class T>
void AdamW<T>::step() {
  for (auto& s : slots_) {
    s.p->ensure_grad();
    for (T g : s.p->grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw DivergenceError("non-finite gradient for parameter " + s.name);
  }

  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0) {
    double sq = 0;
    for (const auto& s : slots_)
      for (T g : s.p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
  }

  int64_t t = ++step_;
  double lr = lr_at(cfg_, t);
  last_lr_ = lr;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));

  for (auto& s : slots_) {
    T* p = s.p->values.data();
    T* g = s.p->grad.data();
    size_t n = s.p->values.size();
    for (size_t i = 0; i < n; ++i) {
      double gi = static_cast<double>(g[i]) * clip_scale;
      double m = cfg_.beta1 * static_cast<double>(s.m[i]) + (1.0 - cfg_.beta1) * gi;
      double v = cfg_.beta2 * static_cast<double>(s.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
      s.m[i] = static_cast<T>(m);
      s.v[i] = static_cast<T>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * static_cast<double>(p[i]);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * upd);
      g[i] = T(0);
    }
  }
}

namespace {
template <class V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
void get(std::istream& is, V& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
}
}  // namespace

template <class T>
void AdamW<T>::save_state(std::ostream& os) const {
  put(os, step_);
  uint64_t n = slots_.size();
  put(os, n);
  for (const auto& s : slots_) {
    uint64_t len = s.name.size();
    put(os, len);
    os.write(s.name.data(), static_cast<std::streamsize>(len));
    uint64_t cnt = s.m.size();
    put(os, cnt);
    os.write(reinterpret_cast<const char*>(s.m.data()), static_cast<std::streamsize>(cnt * sizeof(T)));
    os.write(reinterpret_cast<const char*>(s.v.data()), static_cast<std::streamsize>(cnt * sizeof(T)));
  }
}

template <class T>
void AdamW<T>::load_state(std::istream& is) {
  get(is, step_);
  uint64_t n = 0;
  get(is, n);
  if (n != slots_.size()) throw CorruptFileError("optimizer state: parameter count mismatch");
  for (auto& s : slots_) {
    uint64_t len = 0;
    get(is, len);
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    if (name != s.name) throw CorruptFileError("optimizer state: expected parameter " + s.name + ", found " + name);
    uint64_t cnt = 0;
    get(is, cnt);
    if (cnt != s.m.size()) throw CorruptFileError("optimizer state: size mismatch for " + s.name);
    is.read(reinterpret_cast<char*>(s.m.data()), static_cast<std::streamsize>(cnt * sizeof(T)));
    is.read(reinterpret_cast<char*>(s.v.data()), static_cast<std::streamsize>(cnt * sizeof(T)));
  }
  if (!is) throw CorruptFileError("optimizer state: truncated stream");
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace remask
