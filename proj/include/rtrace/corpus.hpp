#pragma once

// Canonical trace data model, line segmentation, answer extraction and the
// JSONL corpus format.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtrace/error.hpp"
#include "rtrace/util.hpp"

namespace rtrace {

enum class Move { kContinue, kStall, kBacktrack, kExit };

inline std::string_view to_string(Move m) {
  switch (m) {
    case Move::kContinue: return "continue";
    case Move::kStall: return "stall";
    case Move::kBacktrack: return "backtrack";
    case Move::kExit: return "exit";
  }
  return "continue";
}

inline std::optional<Move> parse_move(std::string_view s) {
  if (s == "continue") return Move::kContinue;
  if (s == "stall") return Move::kStall;
  if (s == "backtrack") return Move::kBacktrack;
  if (s == "exit") return Move::kExit;
  return std::nullopt;
}

/// One non-empty line of a reasoning trace.
///
/// Character offsets count Unicode code points of the reasoning text, so
/// files produced by Python tooling line up without conversion.
struct Segment {
  std::size_t index = 0;
  std::int64_t start_char = 0;
  std::int64_t end_char = 0;
  Words word_count = 0;
  Words start_depth = 0;
  std::optional<Move> move;
  std::optional<double> backtrack_score;
  std::optional<std::map<std::string, double>> move_confidence;

  bool scored() const { return backtrack_score.has_value(); }

  bool operator==(const Segment&) const = default;
};

struct Trace {
  std::string trace_id;
  std::string question_id;
  std::string split = "all";
  std::vector<Segment> segments;
  Words total_words = 0;
  std::string gold_answer;
  std::optional<std::string> predicted_answer;
  bool correct = false;
  // Reasoning text the segment offsets index into, when known.
  std::optional<std::string> raw_text;
};

struct Corpus {
  std::string name;
  std::vector<Trace> traces;  // ordered by (question_id, trace_id)
  std::set<std::string> questions;
};

namespace detail {

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline bool is_utf8_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

inline std::int64_t code_point_count(std::string_view s) {
  std::int64_t n = 0;
  for (unsigned char c : s) n += is_utf8_continuation(c) ? 0 : 1;
  return n;
}

// Byte offset of each code point, plus one past-the-end entry.
inline std::vector<std::size_t> code_point_offsets(std::string_view s) {
  std::vector<std::size_t> out;
  out.reserve(s.size() + 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!is_utf8_continuation(static_cast<unsigned char>(s[i]))) out.push_back(i);
  }
  out.push_back(s.size());
  return out;
}

inline Words count_words(std::string_view s) {
  Words n = 0;
  bool in_word = false;
  for (unsigned char c : s) {
    const bool space = is_space(c);
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Content of the balanced brace group opening at `open` (which must point at
// '{'), or nullopt when the group never closes.
inline std::optional<std::pair<std::size_t, std::size_t>> brace_group(std::string_view s,
                                                                      std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < s.size(); ++i) {
    if (s[i] == '{') {
      ++depth;
    } else if (s[i] == '}') {
      if (--depth == 0) return std::pair{open + 1, i};
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Splits reasoning text into one segment per line containing at least one
/// non-whitespace character. Move and score fields are left unset.
inline std::vector<Segment> segment_trace(std::string_view reasoning_text) {
  std::vector<Segment> out;
  Words depth = 0;
  std::int64_t cp = 0;  // code point position of line_start
  std::size_t line_start = 0;
  while (line_start <= reasoning_text.size()) {
    auto nl = reasoning_text.find('\n', line_start);
    if (nl == std::string_view::npos) nl = reasoning_text.size();
    const auto line = reasoning_text.substr(line_start, nl - line_start);
    const auto line_cps = detail::code_point_count(line);
    const Words words = detail::count_words(line);
    if (words > 0) {
      Segment seg;
      seg.index = out.size();
      seg.start_char = cp;
      seg.end_char = cp + line_cps;
      seg.word_count = words;
      seg.start_depth = depth;
      depth += words;
      out.push_back(std::move(seg));
    }
    cp += line_cps + 1;
    if (nl == reasoning_text.size()) break;
    line_start = nl + 1;
  }
  return out;
}

/// Text covered by a segment's code-point offsets.
inline std::string segment_text(std::string_view text, const Segment& seg) {
  const auto offsets = detail::code_point_offsets(text);
  const auto last = static_cast<std::int64_t>(offsets.size()) - 1;
  if (seg.start_char < 0 || seg.end_char > last || seg.start_char >= seg.end_char) {
    throw DomainError("segment offsets outside text");
  }
  const auto b = offsets[static_cast<std::size_t>(seg.start_char)];
  const auto e = offsets[static_cast<std::size_t>(seg.end_char)];
  return std::string(text.substr(b, e - b));
}

/// Reasoning portion of a raw model output: the body of a <think> block when
/// one is present, otherwise the whole text.
inline std::string_view reasoning_portion(std::string_view raw) {
  const auto close = raw.find("</think>");
  if (close == std::string_view::npos) return raw;
  const auto open = raw.rfind("<think>", close);
  const auto begin = open == std::string_view::npos ? 0 : open + 7;
  return raw.substr(begin, close - begin);
}

/// Final answer of a model output: the last \boxed{...} group when it is
/// balanced, otherwise the last numeric token after "answer:" (any case).
inline std::optional<std::string> extract_answer(std::string_view full_output) {
  constexpr std::string_view kBoxed = "\\boxed{";
  const auto pos = full_output.rfind(kBoxed);
  if (pos != std::string_view::npos) {
    if (auto group = detail::brace_group(full_output, pos + kBoxed.size() - 1)) {
      return std::string(full_output.substr(group->first, group->second - group->first));
    }
  }
  // "final answer:" ends in "answer:", so one pattern covers both prefixes.
  static const std::regex kAnswer(R"(answer\s*:\s*([-+]?[0-9]+(?:\.[0-9]+)?))",
                                  std::regex::icase | std::regex::ECMAScript);
  std::optional<std::string> last;
  const std::string text(full_output);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), kAnswer); it != std::sregex_iterator();
       ++it) {
    last = (*it)[1].str();
  }
  return last;
}

/// Light answer normalization: drops commas and dollar signs, unwraps
/// \text{...}, strips trailing periods and surrounding whitespace. Applied to
/// a fixed point, so the result is idempotent.
inline std::string normalize_answer(std::string_view raw) {
  std::string cur(raw);
  for (;;) {
    std::string next;
    next.reserve(cur.size());
    for (char c : cur) {
      if (c != ',' && c != '$') next += c;
    }
    constexpr std::string_view kText = "\\text{";
    for (auto pos = next.find(kText); pos != std::string::npos; pos = next.find(kText, pos)) {
      auto group = detail::brace_group(next, pos + kText.size() - 1);
      if (!group) {
        pos += kText.size();
        continue;
      }
      const auto inner = next.substr(group->first, group->second - group->first);
      next.replace(pos, group->second + 1 - pos, inner);
    }
    std::string_view view = detail::trim(next);
    while (!view.empty() && (view.back() == '.' || detail::is_space(static_cast<unsigned char>(view.back())))) {
      view.remove_suffix(1);
    }
    view = detail::trim(view);
    std::string result(view);
    if (result == cur) return result;
    cur = std::move(result);
  }
}

inline bool answers_match(const std::optional<std::string>& predicted, std::string_view gold) {
  return predicted.has_value() && normalize_answer(*predicted) == normalize_answer(gold);
}

/// Recomputes start depths, total words and the correctness label, then checks
/// every segment invariant. Offsets are bounded by the reasoning text when the
/// trace carries it.
inline void finalize_trace(Trace& trace) {
  Words depth = 0;
  std::optional<std::int64_t> text_length;
  if (trace.raw_text) text_length = detail::code_point_count(*trace.raw_text);
  std::int64_t prev_end = 0;
  for (std::size_t i = 0; i < trace.segments.size(); ++i) {
    auto& seg = trace.segments[i];
    const auto where = "trace " + trace.trace_id + " segment " + std::to_string(i) + ": ";
    if (seg.index != i) throw ValidationError(where + "index out of order");
    if (seg.start_char < 0 || seg.start_char >= seg.end_char) throw ValidationError(where + "empty or negative span");
    if (i > 0 && seg.start_char < prev_end) throw ValidationError(where + "overlaps previous segment");
    if (text_length && seg.end_char > *text_length) throw ValidationError(where + "offset beyond reasoning text");
    if (seg.word_count < 1) throw ValidationError(where + "word_count must be >= 1");
    if (seg.backtrack_score) {
      const double s = *seg.backtrack_score;
      if (!std::isfinite(s) || s < 0.0 || s > 100.0) throw ValidationError(where + "backtrack_score outside [0,100]");
    }
    if (seg.move_confidence) {
      double total = 0.0;
      for (const auto& [label, p] : *seg.move_confidence) {
        if (!parse_move(label)) throw ValidationError(where + "unknown move label '" + label + "'");
        if (!std::isfinite(p) || p < 0.0) throw ValidationError(where + "invalid move probability");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-6) throw ValidationError(where + "move_confidence must sum to 1");
    }
    seg.start_depth = depth;
    depth += seg.word_count;
    prev_end = seg.end_char;
  }
  trace.total_words = depth;
  trace.correct = answers_match(trace.predicted_answer, trace.gold_answer);
}

/// Orders traces by (question_id, trace_id), rejects duplicate ids and
/// collects the question set.
inline Corpus make_corpus(std::string name, std::vector<Trace> traces) {
  std::sort(traces.begin(), traces.end(), [](const Trace& a, const Trace& b) {
    return std::tie(a.question_id, a.trace_id) < std::tie(b.question_id, b.trace_id);
  });
  Corpus corpus;
  corpus.name = std::move(name);
  std::set<std::string> ids;
  for (const auto& t : traces) {
    if (!ids.insert(t.trace_id).second) throw ValidationError("duplicate trace_id " + t.trace_id);
    corpus.questions.insert(t.question_id);
  }
  corpus.traces = std::move(traces);
  return corpus;
}

// ---------------------------------------------------------------------------
// JSONL schema

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) throw ValidationError(where + "missing string field '" + key + "'");
  return it->get<std::string>();
}

template <typename T>
T require_number(const nlohmann::json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_number()) throw ValidationError(where + "missing numeric field '" + key + "'");
  if constexpr (std::is_integral_v<T>) {
    if (!it->is_number_integer()) throw ValidationError(where + "field '" + key + "' must be an integer");
  }
  return it->get<T>();
}

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key,
                                                  const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ValidationError(where + "field '" + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace detail

/// Parses one JSONL record. Supplied segments take precedence over raw_text;
/// without segments, raw_text is segmented and left unscored.
inline Trace trace_from_json(const nlohmann::json& j, const std::string& where = {}) {
  if (!j.is_object()) throw ValidationError(where + "record is not a JSON object");
  Trace t;
  t.question_id = detail::require_string(j, "question_id", where);
  t.trace_id = detail::require_string(j, "trace_id", where);
  t.gold_answer = detail::require_string(j, "gold_answer", where);
  if (auto split = detail::optional_string(j, "split", where)) t.split = *split;
  const auto raw = detail::optional_string(j, "raw_text", where);
  t.predicted_answer = detail::optional_string(j, "predicted_answer", where);
  if (!t.predicted_answer && raw) t.predicted_answer = extract_answer(*raw);

  auto segs = j.find("segments");
  if (segs != j.end() && !segs->is_null()) {
    if (!segs->is_array()) throw ValidationError(where + "'segments' must be an array");
    if (raw) t.raw_text = std::string(reasoning_portion(*raw));
    for (std::size_t i = 0; i < segs->size(); ++i) {
      const auto& sj = (*segs)[i];
      const auto sw = where + "segment " + std::to_string(i) + ": ";
      if (!sj.is_object()) throw ValidationError(sw + "not an object");
      Segment s;
      s.index = detail::require_number<std::size_t>(sj, "index", sw);
      s.start_char = detail::require_number<std::int64_t>(sj, "start_char", sw);
      s.end_char = detail::require_number<std::int64_t>(sj, "end_char", sw);
      s.word_count = detail::require_number<Words>(sj, "word_count", sw);
      if (auto m = detail::optional_string(sj, "move", sw)) {
        s.move = parse_move(*m);
        if (!s.move) throw ValidationError(sw + "unknown move '" + *m + "'");
      }
      if (auto it = sj.find("backtrack_score"); it != sj.end() && !it->is_null()) {
        if (!it->is_number()) throw ValidationError(sw + "backtrack_score must be numeric");
        s.backtrack_score = it->get<double>();
      }
      if (auto it = sj.find("move_confidence"); it != sj.end() && !it->is_null()) {
        if (!it->is_object()) throw ValidationError(sw + "move_confidence must be an object");
        std::map<std::string, double> conf;
        for (const auto& [k, v] : it->items()) {
          if (!v.is_number()) throw ValidationError(sw + "move_confidence values must be numeric");
          conf[k] = v.get<double>();
        }
        s.move_confidence = std::move(conf);
      }
      t.segments.push_back(std::move(s));
    }
  } else if (raw) {
    t.raw_text = std::string(reasoning_portion(*raw));
    t.segments = segment_trace(*t.raw_text);
  }
  try {
    finalize_trace(t);
  } catch (const ValidationError& e) {
    throw ValidationError(where + e.what());
  }
  return t;
}

inline nlohmann::json trace_to_json(const Trace& t) {
  nlohmann::json j;
  j["question_id"] = t.question_id;
  j["trace_id"] = t.trace_id;
  if (t.split != "all") j["split"] = t.split;
  j["gold_answer"] = t.gold_answer;
  if (t.predicted_answer) j["predicted_answer"] = *t.predicted_answer;
  if (t.raw_text) j["raw_text"] = *t.raw_text;
  j["correct"] = t.correct;
  j["total_words"] = t.total_words;
  auto segs = nlohmann::json::array();
  for (const auto& s : t.segments) {
    nlohmann::json sj;
    sj["index"] = s.index;
    sj["start_char"] = s.start_char;
    sj["end_char"] = s.end_char;
    sj["word_count"] = s.word_count;
    if (s.move) sj["move"] = std::string(to_string(*s.move));
    if (s.backtrack_score) sj["backtrack_score"] = *s.backtrack_score;
    if (s.move_confidence) sj["move_confidence"] = *s.move_confidence;
    segs.push_back(std::move(sj));
  }
  j["segments"] = std::move(segs);
  return j;
}

inline Corpus read_corpus_jsonl(std::istream& in, std::string name = "corpus") {
  std::vector<Trace> traces;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + "invalid JSON (" + e.what() + ")");
    }
    traces.push_back(trace_from_json(j, where));
  }
  if (in.bad()) throw IoError("read failure");
  return make_corpus(std::move(name), std::move(traces));
}

inline void write_corpus_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& t : corpus.traces) out << trace_to_json(t).dump() << '\n';
  if (!out) throw IoError("write failure");
}

// ---------------------------------------------------------------------------
// Summary

struct CorpusSummary {
  std::size_t questions = 0;
  std::size_t traces = 0;
  double traces_per_question = 0.0;
  double baseline_accuracy = 0.0;
  double mean_words = 0.0;
  double median_words = 0.0;
  double median_segments = 0.0;
};

inline CorpusSummary corpus_summary(std::span<const Trace> traces) {
  if (traces.empty()) throw DomainError("corpus has no traces");
  CorpusSummary s;
  std::set<std::string_view> questions;
  std::vector<double> words, segs;
  std::size_t correct = 0;
  for (const auto& t : traces) {
    questions.insert(t.question_id);
    words.push_back(static_cast<double>(t.total_words));
    segs.push_back(static_cast<double>(t.segments.size()));
    correct += t.correct ? 1 : 0;
  }
  s.questions = questions.size();
  s.traces = traces.size();
  s.traces_per_question = static_cast<double>(s.traces) / static_cast<double>(s.questions);
  s.baseline_accuracy = static_cast<double>(correct) / static_cast<double>(s.traces);
  s.mean_words = mean(words);
  s.median_words = median(words);
  s.median_segments = median(segs);
  return s;
}

inline CorpusSummary corpus_summary(const Corpus& corpus) { return corpus_summary(corpus.traces); }

/// Distinct split labels, sorted.
inline std::vector<std::string> splits_of(const Corpus& corpus) {
  std::set<std::string> seen;
  for (const auto& t : corpus.traces) seen.insert(t.split);
  return {seen.begin(), seen.end()};
}

inline std::vector<Trace> traces_in_split(const Corpus& corpus, std::string_view split) {
  std::vector<Trace> out;
  for (const auto& t : corpus.traces) {
    if (t.split == split) out.push_back(t);
  }
  return out;
}

}  // namespace rtrace
