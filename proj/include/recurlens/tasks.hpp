#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "recurlens/error.hpp"
#include "recurlens/model.hpp"

namespace recurlens {

enum class Op { Add, Sub, Mul };

inline char op_char(Op op) {
  switch (op) {
    case Op::Add: return '+';
    case Op::Sub: return '-';
    case Op::Mul: return '*';
  }
  return '?';
}

inline Op parse_op(std::string_view s) {
  if (s == "+") return Op::Add;
  if (s == "-") return Op::Sub;
  if (s == "*") return Op::Mul;
  throw InputError("unknown operator '" + std::string(s) + "'");
}

inline long apply_op(long x, Op op, long y) {
  switch (op) {
    case Op::Add: return x + y;
    case Op::Sub: return x - y;
    case Op::Mul: return x * y;
  }
  return 0;
}

struct EvalResult {
  long intermediate = 0;
  long final = 0;
  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// (a op1 b) op2 c, parentheses first.
inline EvalResult eval_expr(long a, Op op1, long b, Op op2, long c) {
  const long inter = apply_op(a, op1, b);
  return {inter, apply_op(inter, op2, c)};
}

/// One composite question "(a op1 b) op2 c" on single-digit operands.
struct ArithmeticSample {
  long a = 0, b = 0, c = 0;
  Op op1 = Op::Add, op2 = Op::Add;
  long intermediate = 0;
  long final = 0;

  static ArithmeticSample make(long a, Op op1, long b, Op op2, long c) {
    const auto r = eval_expr(a, op1, b, op2, c);
    return {a, b, c, op1, op2, r.intermediate, r.final};
  }

  std::string expression() const {
    std::string s = "(";
    s += std::to_string(a) + " " + op_char(op1) + " " + std::to_string(b) + ") " + op_char(op2) + " " +
         std::to_string(c);
    return s;
  }
  std::string question_text() const { return "Question: What is " + expression() + "?"; }
  std::string answer_text() const { return std::to_string(final); }

  friend bool operator==(const ArithmeticSample&, const ArithmeticSample&) = default;
};

struct OperandRange {
  long lo = 1;
  long hi = 9;
};

/// Uniform i.i.d. operands and operators; deterministic in `seed`.
inline std::vector<ArithmeticSample> gen_composite(std::size_t count, std::uint64_t seed,
                                                   OperandRange range = {}) {
  if (count < 1) throw ConfigError("gen_composite: count must be >= 1");
  if (range.lo > range.hi || range.lo < 0 || range.hi > 9) {
    throw ConfigError("operand range must lie within [0, 9]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long> digit(range.lo, range.hi);
  std::uniform_int_distribution<int> op(0, 2);
  std::vector<ArithmeticSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const long a = digit(rng);
    const Op o1 = static_cast<Op>(op(rng));
    const long b = digit(rng);
    const Op o2 = static_cast<Op>(op(rng));
    const long c = digit(rng);
    out.push_back(ArithmeticSample::make(a, o1, b, o2, c));
  }
  return out;
}

/// Like gen_composite, but skips every sample equal to one in `exclude`.
inline std::vector<ArithmeticSample> gen_composite_excluding(std::size_t count, std::uint64_t seed,
                                                             const std::vector<ArithmeticSample>& exclude,
                                                             OperandRange range = {}) {
  if (count < 1) throw ConfigError("gen_composite: count must be >= 1");
  if (range.lo > range.hi || range.lo < 0 || range.hi > 9) {
    throw ConfigError("operand range must lie within [0, 9]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long> digit(range.lo, range.hi);
  std::uniform_int_distribution<int> op(0, 2);
  const std::size_t space = static_cast<std::size_t>(range.hi - range.lo + 1);
  const std::size_t limit = 1000 * count + space * space * space * 9;
  std::vector<ArithmeticSample> out;
  for (std::size_t tries = 0; out.size() < count; ++tries) {
    if (tries == limit) throw ConfigError("cannot draw " + std::to_string(count) + " samples outside the exclusion set");
    const long a = digit(rng);
    const Op o1 = static_cast<Op>(op(rng));
    const long b = digit(rng);
    const Op o2 = static_cast<Op>(op(rng));
    const long c = digit(rng);
    const auto s = ArithmeticSample::make(a, o1, b, o2, c);
    if (std::find(exclude.begin(), exclude.end(), s) == exclude.end()) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

inline constexpr std::string_view kSystemMessage =
    "You are a concise and helpful assistant. Always return only the final answer straightway.";

/// Character-level vocabulary: BOS, EOS, then every character the prompts use.
class Tokenizer {
 public:
  static constexpr std::size_t kBos = 0;
  static constexpr std::size_t kEos = 1;

  /// The arithmetic vocabulary: digits, operators, punctuation and the letters
  /// of the system message and question/answer scaffolding.
  static Tokenizer arithmetic() {
    std::set<char> chars;
    for (std::string_view s : {kSystemMessage, std::string_view("Question: What is ()+-*?0123456789\n"),
                               std::string_view("Answer:")})
      chars.insert(s.begin(), s.end());
    return Tokenizer(std::string(chars.begin(), chars.end()));
  }

  explicit Tokenizer(const std::string& chars) {
    texts_ = {"<bos>", "<eos>"};
    for (char ch : chars) {
      if (index_.count(ch)) continue;
      index_[ch] = texts_.size();
      texts_.emplace_back(1, ch);
    }
  }

  std::size_t size() const noexcept { return texts_.size(); }
  const std::string& text(std::size_t id) const { return texts_.at(id); }
  const std::vector<std::string>& vocabulary() const noexcept { return texts_; }

  std::size_t id(char ch) const {
    auto it = index_.find(ch);
    if (it == index_.end()) throw InputError("untokenizable character " + describe(ch));
    return it->second;
  }
  bool covers(char ch) const { return index_.count(ch) != 0; }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (char ch : text) ids.push_back(id(ch));
    return ids;
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string s;
    for (std::size_t id : ids) s += text(id);
    return s;
  }

 private:
  static std::string describe(char ch) {
    if (ch == '\n') return "'\\n'";
    if (ch == '\t') return "'\\t'";
    if (static_cast<unsigned char>(ch) < 0x20 || static_cast<unsigned char>(ch) >= 0x7f) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "0x%02x", static_cast<unsigned char>(ch));
      return buf;
    }
    return std::string("'") + ch + "'";
  }

  std::vector<std::string> texts_;
  std::unordered_map<char, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Prompts

/// CoT-suppressing few-shot prompt: system message, answer-only shots, target.
struct PromptSpec {
  std::string system_message{kSystemMessage};
  std::vector<ArithmeticSample> shots;
  ArithmeticSample target;
};

/// Shots of the rank-trajectory and prefix-proportion prompt.
inline std::vector<ArithmeticSample> unrolled_study_shots() {
  return {ArithmeticSample::make(9, Op::Add, 8, Op::Mul, 2), ArithmeticSample::make(4, Op::Sub, 7, Op::Sub, 3),
          ArithmeticSample::make(1, Op::Sub, 5, Op::Sub, 6), ArithmeticSample::make(1, Op::Sub, 9, Op::Mul, 5)};
}

/// Single-digit shots of the signature-token prompt.
inline std::vector<ArithmeticSample> signature_study_shots() {
  return {ArithmeticSample::make(5, Op::Add, 1, Op::Add, 1), ArithmeticSample::make(2, Op::Add, 5, Op::Sub, 1),
          ArithmeticSample::make(6, Op::Sub, 4, Op::Add, 5), ArithmeticSample::make(2, Op::Add, 4, Op::Sub, 1)};
}

inline std::string render_shot(const ArithmeticSample& s) {
  return s.question_text() + "\n\nAnswer: " + s.answer_text();
}

/// Text the model continues with the answer. Blocks are separated by a blank
/// line; the trailing "Answer: " keeps its space so the next token is the
/// first answer character.
inline std::string render_prompt(const PromptSpec& spec) {
  std::string s = spec.system_message.empty() ? "" : spec.system_message + "\n\n";
  for (const auto& shot : spec.shots) s += render_shot(shot) + "\n\n";
  s += spec.target.question_text() + "\n\nAnswer: ";
  return s;
}

/// BOS followed by the encoded prompt.
inline std::vector<std::size_t> build_prompt(const PromptSpec& spec, const Tokenizer& tok) {
  std::vector<std::size_t> ids{Tokenizer::kBos};
  const auto body = tok.encode(render_prompt(spec));
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

/// Bare is the question alone, the format the toy model is trained on.
enum class PromptStyle { Bare, ZeroShot, UnrolledStudy, SignatureStudy };

inline const char* to_string(PromptStyle s) {
  switch (s) {
    case PromptStyle::Bare: return "bare";
    case PromptStyle::ZeroShot: return "zero-shot";
    case PromptStyle::UnrolledStudy: return "unrolled-4shot";
    case PromptStyle::SignatureStudy: return "signature-4shot";
  }
  return "?";
}

inline PromptStyle parse_prompt_style(std::string_view s) {
  for (auto style : {PromptStyle::Bare, PromptStyle::ZeroShot, PromptStyle::UnrolledStudy, PromptStyle::SignatureStudy})
    if (s == to_string(style)) return style;
  throw InputError("unknown prompt style '" + std::string(s) +
                   "' (expected bare, zero-shot, unrolled-4shot or signature-4shot)");
}

inline PromptSpec make_prompt_spec(PromptStyle style, const ArithmeticSample& target) {
  PromptSpec spec;
  spec.target = target;
  if (style == PromptStyle::Bare) spec.system_message.clear();
  if (style == PromptStyle::UnrolledStudy) spec.shots = unrolled_study_shots();
  if (style == PromptStyle::SignatureStudy) spec.shots = signature_study_shots();
  return spec;
}

// ---------------------------------------------------------------------------
// Signed-integer prefixes and signature filtering

/// True for "-" or an optional "-" followed by digits, after dropping at most
/// one leading space.
inline bool is_signed_integer_prefix(std::string_view text) {
  if (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  if (text == "-") return true;
  if (!text.empty() && text.front() == '-') text.remove_prefix(1);
  if (text.empty()) return false;
  return std::all_of(text.begin(), text.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
}

inline bool is_single_digit(long v) { return v >= 0 && v <= 9; }

/// Greedy continuation up to EOS or a newline, decoded to text.
inline std::string greedy_answer(const DepthRecurrentModel& m, const Tokenizer& tok,
                                 const std::vector<std::size_t>& prompt, std::size_t r, std::uint64_t seed,
                                 std::size_t max_new = 6) {
  std::vector<std::size_t> seq = prompt;
  std::string out;
  for (std::size_t k = 0; k < max_new; ++k) {
    const auto next = generate(m, seq, r, 1, seed + k).front();
    if (next == Tokenizer::kEos || next == Tokenizer::kBos || tok.text(next) == "\n") break;
    out += tok.text(next);
    seq.push_back(next);
  }
  return out;
}

/// Keeps, in order, the samples whose intermediate and final results are
/// distinct single digits and that the model answers correctly.
inline std::vector<ArithmeticSample> filter_signature_subset(const std::vector<ArithmeticSample>& samples,
                                                             const DepthRecurrentModel& m, const Tokenizer& tok,
                                                             std::size_t r, std::uint64_t seed,
                                                             PromptStyle style = PromptStyle::SignatureStudy) {
  std::vector<ArithmeticSample> kept;
  for (const auto& s : samples) {
    if (!is_single_digit(s.intermediate) || !is_single_digit(s.final)) continue;
    if (s.final == s.intermediate) continue;
    const auto prompt = build_prompt(make_prompt_spec(style, s), tok);
    if (greedy_answer(m, tok, prompt, r, seed) != s.answer_text()) continue;
    kept.push_back(s);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Dataset file: tab-separated, one sample per line, header row first.

inline constexpr std::string_view kDatasetHeader =
    "a\top1\tb\top2\tc\tintermediate\tfinal\tquestion_text\tanswer_text";

inline void write_dataset(std::ostream& os, const std::vector<ArithmeticSample>& samples) {
  os << kDatasetHeader << '\n';
  for (const auto& s : samples) {
    os << s.a << '\t' << op_char(s.op1) << '\t' << s.b << '\t' << op_char(s.op2) << '\t' << s.c << '\t'
       << s.intermediate << '\t' << s.final << '\t' << s.question_text() << '\t' << s.answer_text() << '\n';
  }
}

inline void save_dataset(const std::string& path, const std::vector<ArithmeticSample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_dataset(os, samples);
}

inline std::vector<ArithmeticSample> read_dataset(std::istream& is) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line)) throw ParseError(1, "missing header row");
  if (line != kDatasetHeader) throw ParseError(1, "unexpected header row");
  std::vector<ArithmeticSample> out;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() != 9) throw ParseError(lineno, "expected 9 fields, got " + std::to_string(f.size()));
    try {
      auto num = [](const std::string& v) {
        std::size_t used = 0;
        const long x = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
      };
      const auto s = ArithmeticSample::make(num(f[0]), parse_op(f[1]), num(f[2]), parse_op(f[3]), num(f[4]));
      if (s.intermediate != num(f[5]) || s.final != num(f[6])) {
        throw ParseError(lineno, "stored results disagree with the expression");
      }
      if (s.question_text() != f[7] || s.answer_text() != f[8]) {
        throw ParseError(lineno, "rendered text disagrees with the operands");
      }
      out.push_back(s);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(lineno, std::string("malformed field: ") + e.what());
    }
  }
  return out;
}

inline std::vector<ArithmeticSample> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_dataset(is);
}

}  // namespace recurlens
