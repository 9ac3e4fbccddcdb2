#include "remask/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "remask/error.hpp"

namespace remask {

Vocabulary::Vocabulary() {
  chars_ = "?#^";  // mask, eos, bos
  chars_ += "0123456789";
  for (char c = 'a'; c <= 'z'; ++c) chars_ += c;
  chars_ += " +-=;";
  std::fill(std::begin(to_id_), std::end(to_id_), -1);
  for (size_t i = 0; i < chars_.size(); ++i) to_id_[static_cast<unsigned char>(chars_[i])] = static_cast<int32_t>(i);
}

int32_t Vocabulary::encode_char(char c) const {
  int32_t id = to_id_[static_cast<unsigned char>(c)];
  if (id < 0) throw std::invalid_argument(std::string("vocabulary: unknown character '") + c + "'");
  return id;
}

char Vocabulary::char_of(int32_t id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocabulary: id out of range: " + std::to_string(id));
  return chars_[static_cast<size_t>(id)];
}

std::vector<int32_t> Vocabulary::encode(std::string_view text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(encode_char(c));
  return ids;
}

std::string Vocabulary::decode(std::span<const int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) out += char_of(id);
  return out;
}

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::ArithChain: return "arith-chain";
    case TaskKind::Sort: return "sort";
    case TaskKind::MappedCopy: return "mapped-copy";
  }
  return "?";
}

TaskKind task_kind_from_name(std::string_view name) {
  if (name == "arith-chain") return TaskKind::ArithChain;
  if (name == "sort") return TaskKind::Sort;
  if (name == "mapped-copy") return TaskKind::MappedCopy;
  throw std::invalid_argument("unknown task kind: " + std::string(name));
}

std::pair<int, int> difficulty_range(TaskKind k) {
  switch (k) {
    case TaskKind::ArithChain: return {1, 4};
    case TaskKind::Sort: return {2, 8};
    case TaskKind::MappedCopy: return {2, 8};
  }
  return {1, 1};
}

namespace {

void check_difficulty(TaskKind kind, int difficulty) {
  auto [lo, hi] = difficulty_range(kind);
  if (difficulty < lo || difficulty > hi)
    throw std::invalid_argument(std::string(task_kind_name(kind)) + ": difficulty " + std::to_string(difficulty) +
                                " outside [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
}

char shift_letter(char c) { return c == 'z' ? 'a' : static_cast<char>(c + 1); }

// "a 7 + 8 - 3" -> start digit and (op, operand) steps
struct ArithPrompt {
  int start = 0;
  std::vector<std::pair<char, int>> steps;
};

ArithPrompt parse_arith_prompt(std::string_view prompt) {
  std::istringstream is{std::string(prompt)};
  std::string tok;
  if (!(is >> tok) || tok != "a") throw std::invalid_argument("arith prompt must start with 'a'");
  ArithPrompt p;
  if (!(is >> tok) || tok.size() != 1 || !std::isdigit(static_cast<unsigned char>(tok[0])))
    throw std::invalid_argument("arith prompt: bad start value");
  p.start = tok[0] - '0';
  std::string op;
  while (is >> op) {
    if (op != "+" && op != "-") throw std::invalid_argument("arith prompt: bad operator " + op);
    if (!(is >> tok) || tok.size() != 1 || !std::isdigit(static_cast<unsigned char>(tok[0])))
      throw std::invalid_argument("arith prompt: bad operand");
    p.steps.emplace_back(op[0], tok[0] - '0');
  }
  if (p.steps.empty()) throw std::invalid_argument("arith prompt: no steps");
  return p;
}

OracleResult solve_arith(std::string_view prompt) {
  ArithPrompt p = parse_arith_prompt(prompt);
  std::string gold;
  int cur = p.start;
  for (size_t i = 0; i < p.steps.size(); ++i) {
    auto [op, operand] = p.steps[i];
    int next = op == '+' ? (cur + operand) % 10 : (cur - operand + 10) % 10;
    if (i) gold += " ; ";
    gold += std::to_string(cur) + " " + op + " " + std::to_string(operand) + " = " + std::to_string(next);
    cur = next;
  }
  return {gold, std::to_string(cur)};
}

OracleResult solve_sort(std::string_view prompt) {
  if (prompt.size() < 3 || prompt.substr(0, 2) != "s ")
    throw std::invalid_argument("sort prompt must start with 's '");
  std::string digits;
  for (size_t i = 2; i < prompt.size(); ++i) {
    char c = prompt[i];
    if (c == ' ') continue;
    if (!std::isdigit(static_cast<unsigned char>(c))) throw std::invalid_argument("sort prompt: non-digit input");
    digits += c;
  }
  if (digits.empty()) throw std::invalid_argument("sort prompt: empty list");
  std::sort(digits.begin(), digits.end());
  std::string gold;
  for (size_t i = 0; i < digits.size(); ++i) {
    if (i) gold += ' ';
    gold += digits[i];
  }
  return {gold, gold};
}

OracleResult solve_copy(std::string_view prompt) {
  if (prompt.size() < 3 || prompt.substr(0, 2) != "m ")
    throw std::invalid_argument("mapped-copy prompt must start with 'm '");
  std::string out(prompt.substr(2));
  for (char& c : out) {
    if (c < 'a' || c > 'z') throw std::invalid_argument("mapped-copy prompt: non-letter input");
    c = shift_letter(c);
  }
  return {out, out};
}

}  // namespace

OracleResult oracle_solve(TaskKind kind, std::string_view prompt) {
  switch (kind) {
    case TaskKind::ArithChain: return solve_arith(prompt);
    case TaskKind::Sort: return solve_sort(prompt);
    case TaskKind::MappedCopy: return solve_copy(prompt);
  }
  throw std::invalid_argument("unknown task kind");
}

TaskExample generate_task(TaskKind kind, int difficulty, Rng& rng) {
  check_difficulty(kind, difficulty);
  TaskExample ex;
  ex.kind = kind;
  ex.difficulty = difficulty;
  switch (kind) {
    case TaskKind::ArithChain: {
      std::string prompt = "a " + std::to_string(rng.uniform_int(0, 9));
      for (int i = 0; i < difficulty; ++i) {
        prompt += rng.bernoulli(0.5) ? " +" : " -";
        prompt += " " + std::to_string(rng.uniform_int(0, 9));
      }
      ex.prompt = prompt;
      break;
    }
    case TaskKind::Sort: {
      std::string digits = "s";
      for (int i = 0; i < difficulty; ++i) {
        digits += ' ';
        digits += static_cast<char>('0' + rng.uniform_int(0, 9));
      }
      ex.prompt = digits;
      break;
    }
    case TaskKind::MappedCopy: {
      std::string letters;
      for (int i = 0; i < difficulty; ++i) letters += static_cast<char>('a' + rng.uniform_int(0, 25));
      ex.prompt = "m " + letters;
      break;
    }
  }
  OracleResult solved = oracle_solve(kind, ex.prompt);
  ex.gold = solved.gold;
  ex.answer = solved.answer;
  return ex;
}

TaskExample example_from_seed(TaskKind kind, int difficulty, uint64_t seed) {
  Rng rng(seed);
  TaskExample ex = generate_task(kind, difficulty, rng);
  ex.seed = seed;
  return ex;
}

std::vector<TaskExample> generate_unique(TaskKind kind, int difficulty_lo, int difficulty_hi, int64_t n,
                                         Rng& rng, std::unordered_set<std::string>* taken) {
  std::unordered_set<std::string> local;
  if (!taken) taken = &local;
  std::vector<TaskExample> out;
  out.reserve(static_cast<size_t>(n));
  int64_t attempts = 0, limit = n * 1000 + 10000;
  while (static_cast<int64_t>(out.size()) < n) {
    if (++attempts > limit)
      throw ConfigError(std::string("could not generate ") + std::to_string(n) + " unique " +
                        task_kind_name(kind) + " examples; space too small for requested count");
    int difficulty = static_cast<int>(rng.uniform_int(difficulty_lo, difficulty_hi));
    uint64_t seed = rng.next_u64();
    TaskExample ex = example_from_seed(kind, difficulty, seed);
    if (!taken->insert(ex.prompt).second) continue;
    out.push_back(std::move(ex));
  }
  return out;
}

Corpus make_corpus(const DataConfig& cfg, int64_t n_train, int64_t n_eval) {
  double wsum = cfg.w_arith + cfg.w_sort + cfg.w_copy;
  if (wsum <= 0) throw ConfigError("task mix weights must have positive sum");
  Rng rng(mix_seed(cfg.seed, "tasks"));
  std::unordered_set<std::string> taken;
  std::vector<TaskExample> all;
  int64_t total = n_train + n_eval;
  all.reserve(static_cast<size_t>(total));
  int64_t attempts = 0, limit = total * 1000 + 10000;
  while (static_cast<int64_t>(all.size()) < total) {
    if (++attempts > limit) throw ConfigError("task space exhausted while building corpus");
    double u = rng.uniform01() * wsum;
    TaskKind kind = u < cfg.w_arith              ? TaskKind::ArithChain
                    : u < cfg.w_arith + cfg.w_sort ? TaskKind::Sort
                                                   : TaskKind::MappedCopy;
    auto [lo, hi] = difficulty_range(kind);
    int difficulty = static_cast<int>(rng.uniform_int(lo, hi));
    uint64_t seed = rng.next_u64();
    TaskExample ex = example_from_seed(kind, difficulty, seed);
    if (static_cast<int64_t>(ex.gold.size()) > cfg.l_max)
      throw ConfigError("generated gold longer than l_max; raise l_max or lower difficulty");
    if (!taken.insert(ex.prompt).second) continue;
    all.push_back(std::move(ex));
  }
  Corpus corpus;
  corpus.train.assign(all.begin(), all.begin() + n_train);
  corpus.eval.assign(all.begin() + n_train, all.end());
  return corpus;
}

std::vector<int32_t> dynamic_length_pad(std::vector<int32_t> x0, int64_t l_max, Rng& rng) {
  int64_t lp = static_cast<int64_t>(x0.size());
  if (lp > l_max)
    throw std::invalid_argument("dynamic_length_pad: response length " + std::to_string(lp) + " exceeds l_max " +
                                std::to_string(l_max));
  int64_t l = rng.uniform_int(lp, l_max);
  x0.resize(static_cast<size_t>(l), Vocabulary::kEos);
  return x0;
}

MatchResult score_exact_match(std::string_view generated, const TaskExample& example) {
  std::string text(generated);
  while (!text.empty() && text.back() == '#') text.pop_back();  // trailing EOS run

  auto trim = [](std::string s) {
    size_t b = s.find_first_not_of(' ');
    if (b == std::string::npos) return std::string();
    size_t e = s.find_last_not_of(' ');
    return s.substr(b, e - b + 1);
  };

  MatchResult r;
  std::string span;
  if (example.kind == TaskKind::ArithChain) {
    size_t pos = text.rfind('=');
    if (pos == std::string::npos) return r;  // unextractable
    span = trim(text.substr(pos + 1));
    if (span.empty()) return r;
  } else {
    span = trim(text);
    if (span.empty()) return r;
  }
  r.extracted = true;
  r.correct = (span == example.answer);
  return r;
}

void write_dataset(const std::string& path, const std::vector<TaskExample>& examples) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open dataset file for writing: " + path);
  for (const auto& ex : examples) {
    nlohmann::json j{{"prompt", ex.prompt},     {"gold", ex.gold},
                     {"answer", ex.answer},     {"kind", task_kind_name(ex.kind)},
                     {"difficulty", ex.difficulty}, {"seed", ex.seed}};
    os << j.dump() << '\n';
  }
}

std::vector<TaskExample> read_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset file: " + path);
  std::vector<TaskExample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      TaskExample ex;
      ex.prompt = j.at("prompt").get<std::string>();
      ex.gold = j.at("gold").get<std::string>();
      ex.answer = j.at("answer").get<std::string>();
      ex.kind = task_kind_from_name(j.at("kind").get<std::string>());
      ex.difficulty = j.at("difficulty").get<int>();
      ex.seed = j.at("seed").get<uint64_t>();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError(path + ":" + std::to_string(lineno) + ": bad dataset record: " + e.what());
    }
  }
  return out;
}

}  // namespace remask
