#pragma once

// Trace builders shared by the unit tests and the acceptance runner.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rtrace/corpus.hpp"

namespace fixtures {

using rtrace::Segment;
using rtrace::Trace;
using rtrace::Words;

struct Seg {
  Words words;
  std::optional<double> score;
};

/// Trace from (word_count, score) pairs. Offsets are synthetic and
/// contiguous; the correctness label follows `correct`.
inline Trace make_trace(const std::vector<Seg>& segs, bool correct = true, std::string qid = "q1",
                        std::string tid = "t1") {
  Trace t;
  t.question_id = std::move(qid);
  t.trace_id = std::move(tid);
  t.gold_answer = "1";
  t.predicted_answer = correct ? "1" : "2";
  std::int64_t chars = 0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    Segment s;
    s.index = i;
    s.start_char = chars;
    s.end_char = chars + 2 * segs[i].words;
    chars = s.end_char + 1;
    s.word_count = segs[i].words;
    s.backtrack_score = segs[i].score;
    t.segments.push_back(s);
  }
  rtrace::finalize_trace(t);
  return t;
}

struct Event {
  Words depth;
  double score;
};

/// Trace of `total` words whose scored events start exactly at the given
/// depths (strictly increasing). Gaps are filled with segments scored 0.
inline Trace trace_with_events(Words total, const std::vector<Event>& events, bool correct = true,
                               std::string qid = "q1", std::string tid = "t1", Words event_words = 1) {
  std::vector<Seg> segs;
  Words cur = 0;
  for (const auto& e : events) {
    if (e.depth > cur) segs.push_back({e.depth - cur, 0.0});
    segs.push_back({event_words, e.score});
    cur = e.depth + event_words;
  }
  if (total > cur) segs.push_back({total - cur, 0.0});
  return make_trace(segs, correct, std::move(qid), std::move(tid));
}

/// Random scored trace: 1..max_segments segments of 1..max_words words with
/// scores in [0, 100]; a fraction of segments is left unscored.
inline Trace random_trace(std::mt19937_64& rng, std::size_t max_segments = 200, Words max_words = 60,
                          bool allow_unscored = true, std::string qid = "q1", std::string tid = "t1") {
  std::uniform_int_distribution<std::size_t> nseg(1, max_segments);
  std::uniform_int_distribution<Words> words(1, max_words);
  std::uniform_real_distribution<double> score(0.0, 100.0);
  std::bernoulli_distribution unscored(0.1);
  std::bernoulli_distribution correct(0.5);
  const std::size_t n = nseg(rng);
  std::vector<Seg> segs;
  for (std::size_t i = 0; i < n; ++i) {
    const Words w = words(rng);
    if (allow_unscored && unscored(rng)) {
      segs.push_back({w, std::nullopt});
    } else {
      segs.push_back({w, std::round(score(rng))});
    }
  }
  return make_trace(segs, correct(rng), std::move(qid), std::move(tid));
}

/// Event-free trace: every segment scored below `below`.
inline Trace quiet_trace(std::mt19937_64& rng, double below = 20.0) {
  std::uniform_int_distribution<std::size_t> nseg(1, 150);
  std::uniform_int_distribution<Words> words(1, 60);
  std::uniform_real_distribution<double> score(0.0, below);
  std::vector<Seg> segs;
  const auto n = nseg(rng);
  for (std::size_t i = 0; i < n; ++i) {
    double s = std::floor(score(rng));
    if (s >= below) s = 0.0;
    segs.push_back({words(rng), s});
  }
  return make_trace(segs);
}

}  // namespace fixtures
