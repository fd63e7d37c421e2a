#pragma once

// Deterministic synthetic annotated corpora with controllable per-class
// backtracking density and burst clustering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"

namespace rtrace {

/// Event-generation parameters for one correctness class.
struct ClassProfile {
  double median_words = 7000.0;  // log-normal median trace length
  double length_sigma = 0.35;
  double isolated_rate = 0.25;  // isolated events per 1000 words, scores 20..45
  double burst_rate = 0.12;     // clustered runs per 1000 words, scores 50..85
  int burst_size_min = 2;
  int burst_size_max = 3;
  double lateness = 0.0;  // 0 places bursts uniformly; larger values push them late
};

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t questions = 20;
  std::size_t traces_per_question = 20;
  std::size_t splits = 1;  // questions are divided evenly into S1, S2, ...
  double accuracy_mean = 0.7;
  double accuracy_spread = 0.4;  // per-question accuracy varies uniformly within +-spread/2
  ClassProfile correct{};
  ClassProfile wrong{9500.0, 0.35, 0.25, 0.30, 3, 6, 1.5};
};

namespace detail {

// Sampling built only on mt19937_64 output bits, so a seed yields the same
// corpus with every standard library.
class PortableRng {
 public:
  explicit PortableRng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  int poisson(double lambda) {
    const double limit = std::exp(-lambda);
    int k = 0;
    for (double p = uniform(); p > limit; p *= uniform()) ++k;
    return k;
  }

 private:
  std::mt19937_64 engine_;
};

inline std::string padded(const char* prefix, std::size_t n, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, n);
  return buf;
}

inline Trace synth_trace(PortableRng& rng, const ClassProfile& profile) {
  const double target = profile.median_words * std::exp(profile.length_sigma * rng.normal());
  Trace t;
  Words depth = 0;
  std::int64_t chars = 0;
  while (depth < static_cast<Words>(target) || t.segments.empty()) {
    Segment s;
    s.index = t.segments.size();
    s.word_count = rng.uniform_int(8, 40);
    s.start_depth = depth;
    s.start_char = chars;
    s.end_char = chars + 6 * s.word_count;
    chars = s.end_char + 1;
    depth += s.word_count;
    s.backtrack_score = static_cast<double>(rng.uniform_int(0, 15));
    s.move = Move::kContinue;
    t.segments.push_back(std::move(s));
  }
  const auto n = static_cast<int>(t.segments.size());
  const double k_words = static_cast<double>(depth) / 1000.0;

  auto mark = [&](int i, int lo, int hi) {
    auto& s = t.segments[static_cast<std::size_t>(i)];
    s.backtrack_score = std::max(*s.backtrack_score, static_cast<double>(rng.uniform_int(lo, hi)));
    s.move = Move::kBacktrack;
  };
  const int isolated = rng.poisson(profile.isolated_rate * k_words);
  for (int e = 0; e < isolated; ++e) mark(rng.uniform_int(0, n - 1), 20, 45);

  const int bursts = rng.poisson(profile.burst_rate * k_words);
  for (int b = 0; b < bursts; ++b) {
    const double pos = std::pow(rng.uniform(), 1.0 / (1.0 + profile.lateness));
    int i = std::min(n - 1, static_cast<int>(pos * n));
    const int size = rng.uniform_int(profile.burst_size_min, profile.burst_size_max);
    for (int m = 0; m < size && i < n; ++m) {
      mark(i, 50, 85);
      i += rng.uniform_int(1, 3);
    }
  }
  return t;
}

}  // namespace detail

/// Builds a corpus whose per-class event structure follows the two class
/// profiles. The same config always yields the same corpus.
inline Corpus synth_corpus(const SynthConfig& config) {
  if (config.questions == 0 || config.traces_per_question == 0) throw DomainError("synthetic corpus needs traces");
  if (config.splits == 0 || config.splits > config.questions) throw DomainError("invalid split count");
  detail::PortableRng rng(config.seed);
  std::vector<Trace> traces;
  const std::size_t per_split = (config.questions + config.splits - 1) / config.splits;
  for (std::size_t q = 0; q < config.questions; ++q) {
    const double acc = std::clamp(config.accuracy_mean + config.accuracy_spread * (rng.uniform() - 0.5), 0.05, 0.95);
    const auto qid = detail::padded("q", q, 3);
    const auto gold = std::to_string(100 + 7 * q);
    for (std::size_t k = 0; k < config.traces_per_question; ++k) {
      const bool correct = rng.uniform() < acc;
      Trace t = detail::synth_trace(rng, correct ? config.correct : config.wrong);
      t.question_id = qid;
      t.trace_id = qid + detail::padded("-t", k, 4);
      t.split = config.splits == 1 ? "all" : detail::padded("S", q / per_split + 1, 1);
      t.gold_answer = gold;
      t.predicted_answer = correct ? gold : std::to_string(101 + 7 * q);
      finalize_trace(t);
      traces.push_back(std::move(t));
    }
  }
  return make_corpus("synthetic", std::move(traces));
}

}  // namespace rtrace
