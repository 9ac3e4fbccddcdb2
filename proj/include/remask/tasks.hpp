#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "remask/rng.hpp"

namespace remask {

// Character-level vocabulary. Specials come first and have printable text
// forms ('?' mask, '#' eos, '^' bos) so every id sequence decodes to text and
// encodes back to the same ids.
class Vocabulary {
 public:
  static constexpr int32_t kMask = 0;
  static constexpr int32_t kEos = 1;
  static constexpr int32_t kBos = 2;

  Vocabulary();

  int32_t size() const { return static_cast<int32_t>(chars_.size()); }
  bool is_special(int32_t id) const { return id >= 0 && id < 3; }

  int32_t encode_char(char c) const;  // throws std::invalid_argument on unknown char
  char char_of(int32_t id) const;    // throws std::invalid_argument on bad id

  std::vector<int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const int32_t> ids) const;

 private:
  std::string chars_;
  int32_t to_id_[256];
};

enum class TaskKind : uint8_t { ArithChain, Sort, MappedCopy };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(std::string_view name);  // throws std::invalid_argument

// Inclusive difficulty range a kind accepts (arith: equation count, sort and
// mapped-copy: input length).
std::pair<int, int> difficulty_range(TaskKind k);

struct TaskExample {
  std::string prompt;  // "a 7 + 8 - 3" / "s 312" / "m abz"
  std::string gold;    // "7 + 8 = 5 ; 5 - 3 = 2" / "123" / "bca"
  std::string answer;  // canonical answer span for oracle scoring
  TaskKind kind = TaskKind::ArithChain;
  int difficulty = 1;
  uint64_t seed = 0;
};

struct DataConfig {
  int64_t l_max = 64;
  double w_arith = 0.5;
  double w_sort = 0.25;
  double w_copy = 0.25;
  uint64_t seed = 1;
};

struct Corpus {
  std::vector<TaskExample> train;
  std::vector<TaskExample> eval;
};

// Draws from rng; difficulty out of range throws std::invalid_argument.
TaskExample generate_task(TaskKind kind, int difficulty, Rng& rng);

// Reproducible single example: seeds a private stream and records the seed.
TaskExample example_from_seed(TaskKind kind, int difficulty, uint64_t seed);

// Recomputes {gold, answer} from a prompt alone. Unparseable prompt throws
// std::invalid_argument. Generator self-consistency means this agrees with
// the stored fields.
struct OracleResult {
  std::string gold;
  std::string answer;
};
OracleResult oracle_solve(TaskKind kind, std::string_view prompt);

// Prompt-deduplicated corpus: train/eval disjoint by construction, kinds
// drawn by mix weight, difficulty uniform over the kind's range.
Corpus make_corpus(const DataConfig& cfg, int64_t n_train, int64_t n_eval);

// n unique examples of one kind, skipping prompts already in `taken`
// (nullptr = no exclusions). Extends `taken` with what it emits.
std::vector<TaskExample> generate_unique(TaskKind kind, int difficulty_lo, int difficulty_hi, int64_t n,
                                         Rng& rng, std::unordered_set<std::string>* taken);

// L ~ uniform on [len(x0), l_max]; tail filled with EOS.
std::vector<int32_t> dynamic_length_pad(std::vector<int32_t> x0, int64_t l_max, Rng& rng);

struct MatchResult {
  bool correct = false;
  bool extracted = false;  // false: no answer span found (counts as incorrect)
};

// Strips trailing EOS text, pulls the span after the final '=' for arith or
// the whole trimmed response otherwise, compares to example.answer.
MatchResult score_exact_match(std::string_view generated, const TaskExample& example);

void write_dataset(const std::string& path, const std::vector<TaskExample>& examples);
std::vector<TaskExample> read_dataset(const std::string& path);

}  // namespace remask
