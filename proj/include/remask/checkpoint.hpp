#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "remask/model.hpp"

namespace remask {

inline constexpr uint32_t kCheckpointVersion = 1;

// Everything needed to resume or evaluate a stage: the backbone, the optional
// introspection model, optional optimizer state, and the rng stream position
// so downstream data generation continues deterministically.
template <class T>
struct Checkpoint {
  Backbone<T> backbone;
  std::optional<IntrospectionModel<T>> intro;
  std::string optimizer_state;  // opaque AdamW blob; empty = none saved
  std::string rng_state;
  std::string stage;
  int64_t step = 0;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
};

// Short hex identity: stage, step, config hash, and parameter checksums.
// Stable across save/load, different whenever any parameter bit differs.
template <class T>
std::string checkpoint_id(const Checkpoint<T>& ckpt);

// Versioned binary file with a trailing content checksum. Loading rejects
// newer versions, truncation, bit corruption, and scalar-type mismatches
// with CorruptFileError.
template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt);

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path);

extern template struct Checkpoint<float>;
extern template struct Checkpoint<double>;
extern template std::string checkpoint_id(const Checkpoint<float>&);
extern template std::string checkpoint_id(const Checkpoint<double>&);
extern template void save_checkpoint(const std::string&, const Checkpoint<float>&);
extern template void save_checkpoint(const std::string&, const Checkpoint<double>&);
extern template Checkpoint<float> load_checkpoint(const std::string&);
extern template Checkpoint<double> load_checkpoint(const std::string&);

}  // namespace remask
