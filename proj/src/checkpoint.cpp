#include "remask/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "remask/error.hpp"
#include "remask/rng.hpp"

namespace remask {

namespace {

constexpr char kMagic[6] = {'R', 'M', 'C', 'K', 'P', 'T'};

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <class V>
void put_pod(std::string& out, V v) {
  put_bytes(out, &v, sizeof v);
}

void put_string(std::string& out, const std::string& s) {
  put_pod<uint64_t>(out, s.size());
  out.append(s);
}

struct Cursor {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CorruptFileError(path + ": truncated checkpoint");
  }
  void read(void* p, size_t n) {
    need(n);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <class V>
  V pod() {
    V v;
    read(&v, sizeof v);
    return v;
  }
  std::string str() {
    uint64_t n = pod<uint64_t>();
    if (n > buf.size()) throw CorruptFileError(path + ": corrupt string length");
    need(static_cast<size_t>(n));
    std::string s(buf.data() + pos, static_cast<size_t>(n));
    pos += static_cast<size_t>(n);
    return s;
  }
};

template <class T>
void put_params(std::string& out, const std::function<void(const std::function<void(const std::string&, Tensor<T>*)>&)>& visit) {
  uint64_t count = 0;
  visit([&](const std::string&, Tensor<T>*) { ++count; });
  put_pod(out, count);
  visit([&](const std::string& name, Tensor<T>* t) {
    put_string(out, name);
    put_pod<uint64_t>(out, t->shape.size());
    for (int64_t d : t->shape) put_pod<int64_t>(out, d);
    put_bytes(out, t->values.data(), t->values.size() * sizeof(T));
  });
}

template <class T>
void get_params(Cursor& c, const std::function<void(const std::function<void(const std::string&, Tensor<T>*)>&)>& visit) {
  std::map<std::string, Tensor<T>*> registry;
  visit([&](const std::string& name, Tensor<T>* t) { registry[name] = t; });
  uint64_t count = c.pod<uint64_t>();
  if (count != registry.size())
    throw CorruptFileError(c.path + ": parameter count " + std::to_string(count) + " != expected " +
                           std::to_string(registry.size()));
  std::map<std::string, bool> seen;
  for (uint64_t k = 0; k < count; ++k) {
    std::string name = c.str();
    auto it = registry.find(name);
    if (it == registry.end()) throw CorruptFileError(c.path + ": unknown parameter '" + name + "'");
    if (seen[name]) throw CorruptFileError(c.path + ": duplicate parameter '" + name + "'");
    seen[name] = true;
    Tensor<T>* t = it->second;
    uint64_t ndim = c.pod<uint64_t>();
    if (ndim != t->shape.size())
      throw CorruptFileError(c.path + ": parameter '" + name + "' rank mismatch");
    for (size_t d = 0; d < ndim; ++d)
      if (c.pod<int64_t>() != t->shape[d])
        throw CorruptFileError(c.path + ": parameter '" + name + "' shape mismatch");
    c.read(t->values.data(), t->values.size() * sizeof(T));
  }
}

}  // namespace

template <class T>
std::string checkpoint_id(const Checkpoint<T>& ckpt) {
  Fnv64 h;
  h.update(ckpt.stage);
  h.update(&ckpt.step, sizeof ckpt.step);
  h.update(&ckpt.config_hash, sizeof ckpt.config_hash);
  h.update(&ckpt.seed, sizeof ckpt.seed);
  uint64_t bb = const_cast<Backbone<T>&>(ckpt.backbone).checksum();
  h.update(&bb, sizeof bb);
  if (ckpt.intro) {
    uint64_t ic = const_cast<IntrospectionModel<T>&>(*ckpt.intro).checksum();
    h.update(&ic, sizeof ic);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
  return std::string(buf);
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  std::string out;
  put_bytes(out, kMagic, sizeof kMagic);
  put_pod<uint32_t>(out, kCheckpointVersion);
  put_pod<uint8_t>(out, static_cast<uint8_t>(sizeof(T)));
  put_string(out, ckpt.stage);
  put_pod<int64_t>(out, ckpt.step);
  put_pod<uint64_t>(out, ckpt.config_hash);
  put_pod<uint64_t>(out, ckpt.seed);
  put_string(out, ckpt.rng_state);
  put_string(out, ckpt.optimizer_state);

  const BackboneConfig& bc = ckpt.backbone.cfg;
  for (int32_t v : {bc.vocab_size, bc.d_model, bc.n_heads, bc.n_layers, bc.max_positions, bc.mask_id,
                    bc.eos_id, bc.prompt_pad_id})
    put_pod<int32_t>(out, v);

  auto& backbone = const_cast<Backbone<T>&>(ckpt.backbone);
  put_params<T>(out, [&](const auto& fn) { backbone.for_each_param(fn); });

  put_pod<uint8_t>(out, ckpt.intro ? 1 : 0);
  if (ckpt.intro) {
    auto& intro = const_cast<IntrospectionModel<T>&>(*ckpt.intro);
    put_pod<int32_t>(out, intro.d_model);
    put_params<T>(out, [&](const auto& fn) { intro.for_each_param(fn); });
  }

  put_pod<uint64_t>(out, fnv1a64(out.data(), out.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ConfigError("short write to checkpoint: " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptFileError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof kMagic + sizeof(uint32_t) + sizeof(uint64_t))
    throw CorruptFileError(path + ": file too short to be a checkpoint");
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof stored, sizeof stored);
  std::string body = buf.substr(0, buf.size() - sizeof stored);
  if (fnv1a64(body.data(), body.size()) != stored)
    throw CorruptFileError(path + ": checksum mismatch (corrupt or truncated)");

  Cursor c{body, 0, path};
  char magic[sizeof kMagic];
  c.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CorruptFileError(path + ": not a checkpoint file");
  uint32_t version = c.pod<uint32_t>();
  if (version > kCheckpointVersion)
    throw CorruptFileError(path + ": checkpoint version " + std::to_string(version) +
                           " is newer than supported version " + std::to_string(kCheckpointVersion));
  uint8_t dtype = c.pod<uint8_t>();
  if (dtype != sizeof(T))
    throw CorruptFileError(path + ": scalar width " + std::to_string(dtype) + " does not match this build (" +
                           std::to_string(sizeof(T)) + ")");

  Checkpoint<T> ckpt;
  ckpt.stage = c.str();
  ckpt.step = c.pod<int64_t>();
  ckpt.config_hash = c.pod<uint64_t>();
  ckpt.seed = c.pod<uint64_t>();
  ckpt.rng_state = c.str();
  ckpt.optimizer_state = c.str();

  BackboneConfig bc;
  bc.vocab_size = c.pod<int32_t>();
  bc.d_model = c.pod<int32_t>();
  bc.n_heads = c.pod<int32_t>();
  bc.n_layers = c.pod<int32_t>();
  bc.max_positions = c.pod<int32_t>();
  bc.mask_id = c.pod<int32_t>();
  bc.eos_id = c.pod<int32_t>();
  bc.prompt_pad_id = c.pod<int32_t>();
  try {
    ckpt.backbone = Backbone<T>(bc);
  } catch (const ConfigError& e) {
    throw CorruptFileError(path + ": invalid model configuration: " + e.what());
  }
  get_params<T>(c, [&](const auto& fn) { ckpt.backbone.for_each_param(fn); });

  if (c.pod<uint8_t>()) {
    IntrospectionModel<T> intro;
    intro.allocate(c.pod<int32_t>());
    get_params<T>(c, [&](const auto& fn) { intro.for_each_param(fn); });
    ckpt.intro = std::move(intro);
  }
  if (c.pos != body.size()) throw CorruptFileError(path + ": trailing bytes after checkpoint payload");
  return ckpt;
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;
template std::string checkpoint_id(const Checkpoint<float>&);
template std::string checkpoint_id(const Checkpoint<double>&);
template void save_checkpoint(const std::string&, const Checkpoint<float>&);
template void save_checkpoint(const std::string&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const std::string&);
template Checkpoint<double> load_checkpoint(const std::string&);

}  // namespace remask
