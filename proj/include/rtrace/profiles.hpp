#pragma once

// First-event timing, 20-bin relative-position profiles, burst-start profiles,
// profile-shape features and severity buckets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"
#include "rtrace/events.hpp"
#include "rtrace/util.hpp"

namespace rtrace {

inline constexpr std::size_t kBins = 20;

using ProfileVector = std::array<double, kBins>;

enum class Outcome { kCorrect, kWrong };

inline std::string_view to_string(Outcome c) { return c == Outcome::kCorrect ? "correct" : "wrong"; }

inline Outcome outcome_of(const Trace& t) { return t.correct ? Outcome::kCorrect : Outcome::kWrong; }

// ---------------------------------------------------------------------------
// Timing

inline std::optional<Words> first_event_depth(const Trace& trace, double tau) {
  for (const auto& seg : trace.segments) {
    if (seg.backtrack_score && *seg.backtrack_score >= tau) return seg.start_depth;
  }
  return std::nullopt;
}

/// Fraction of traces with at least one qualifying event.
inline double event_rate(std::span<const Trace> traces, double tau) {
  if (traces.empty()) throw DomainError("event rate of empty trace list");
  std::size_t hits = 0;
  for (const auto& t : traces) hits += first_event_depth(t, tau) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(traces.size());
}

struct TimingSummary {
  std::size_t traces = 0;
  double event_rate = 0.0;
  std::optional<double> median_first_depth;
  // First-event depth divided by trace length.
  std::optional<double> median_normalized_first_depth;
};

inline TimingSummary timing_summary(std::span<const Trace> traces, double tau) {
  TimingSummary s;
  s.traces = traces.size();
  s.event_rate = event_rate(traces, tau);
  std::vector<double> raw, normalized;
  for (const auto& t : traces) {
    if (auto d = first_event_depth(t, tau)) {
      raw.push_back(static_cast<double>(*d));
      normalized.push_back(static_cast<double>(*d) / static_cast<double>(t.total_words));
    }
  }
  if (!raw.empty()) {
    s.median_first_depth = median(raw);
    s.median_normalized_first_depth = median(normalized);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Relative-position profiles

inline std::size_t progress_bin(Words depth, Words total_words) {
  if (total_words <= 0) throw DomainError("trace has no words");
  const auto b = static_cast<std::size_t>((static_cast<Words>(kBins) * depth) / total_words);
  return std::min(b, kBins - 1);
}

struct BinProfile {
  ProfileVector probs{};
  std::array<std::size_t, kBins> counts{};    // qualifying events C_b
  std::array<std::size_t, kBins> supports{};  // scored segments M_b
  double tau = 0.0;
};

/// Per-bin qualifying-event probability of a completed trace. Bins without
/// scored segments report 0.
inline BinProfile bin_profile(const Trace& trace, double tau) {
  if (trace.total_words <= 0) throw DomainError("bin profile needs a non-empty trace");
  BinProfile p;
  p.tau = tau;
  for (const auto& seg : trace.segments) {
    if (!seg.backtrack_score) continue;
    const auto b = progress_bin(seg.start_depth, trace.total_words);
    ++p.supports[b];
    if (*seg.backtrack_score >= tau) ++p.counts[b];
  }
  for (std::size_t b = 0; b < kBins; ++b) {
    p.probs[b] = p.supports[b] > 0 ? static_cast<double>(p.counts[b]) / static_cast<double>(p.supports[b]) : 0.0;
  }
  return p;
}

struct PooledBin {
  std::size_t events = 0;
  std::size_t support = 0;
  std::optional<double> probability;  // absent when support is below the floor
};

/// Pools C_b and M_b over one class. Bins whose pooled support is below
/// `min_support` are left unreported.
inline std::array<PooledBin, kBins> pooled_bin_probability(std::span<const Trace> traces, double tau, Outcome cls,
                                                          std::size_t min_support = 0) {
  std::array<PooledBin, kBins> out{};
  for (const auto& t : traces) {
    if (outcome_of(t) != cls) continue;
    const auto p = bin_profile(t, tau);
    for (std::size_t b = 0; b < kBins; ++b) {
      out[b].events += p.counts[b];
      out[b].support += p.supports[b];
    }
  }
  for (auto& bin : out) {
    if (bin.support < min_support) continue;
    bin.probability = bin.support > 0 ? static_cast<double>(bin.events) / static_cast<double>(bin.support) : 0.0;
  }
  return out;
}

/// Counts multi-bursts (size >= 2) by the progress bin of their first event.
inline std::array<std::size_t, kBins> burst_start_profile(const Trace& trace, double tau,
                                                          Words gap = kDefaultBurstGap) {
  std::array<std::size_t, kBins> out{};
  const auto depths = event_depths(qualifying_events(trace, tau));
  for (const auto& burst : burst_partition(depths, gap).bursts) {
    if (burst.size() >= 2) ++out[progress_bin(burst.front(), trace.total_words)];
  }
  return out;
}

/// Mean burst-start count per bin over the traces of one class.
inline std::optional<ProfileVector> class_burst_start_profile(std::span<const Trace> traces, double tau, Words gap,
                                                              Outcome cls) {
  ProfileVector sums{};
  std::size_t k = 0;
  for (const auto& t : traces) {
    if (outcome_of(t) != cls) continue;
    const auto counts = burst_start_profile(t, tau, gap);
    for (std::size_t b = 0; b < kBins; ++b) sums[b] += static_cast<double>(counts[b]);
    ++k;
  }
  if (k == 0) return std::nullopt;
  for (auto& v : sums) v /= static_cast<double>(k);
  return sums;
}

inline double bin_center(std::size_t b) { return (static_cast<double>(b) + 0.5) / static_cast<double>(kBins); }

/// OLS slope of the profile against bin centers 0.025, 0.075, ..., 0.975.
inline double profile_slope(std::span<const double, kBins> probs) {
  const double x_mean = 0.5;
  double p_mean = 0.0;
  for (double p : probs) p_mean += p;
  p_mean /= static_cast<double>(kBins);
  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < kBins; ++b) {
    const double dx = bin_center(b) - x_mean;
    num += dx * (probs[b] - p_mean);
    den += dx * dx;
  }
  return num / den;
}

inline double profile_slope(const BinProfile& profile) { return profile_slope(std::span<const double, kBins>(profile.probs)); }

/// Mean probability over the second half of the bins.
inline double late_mean(std::span<const double, kBins> probs) {
  double total = 0.0;
  for (std::size_t b = kBins / 2; b < kBins; ++b) total += probs[b];
  return total / static_cast<double>(kBins / 2);
}

inline double late_mean(const BinProfile& profile) { return late_mean(std::span<const double, kBins>(profile.probs)); }

// ---------------------------------------------------------------------------
// Wrong-trace direction and similarity

struct DirectionVector {
  ProfileVector u{};
  std::string excluded_question;
  double tau = 0.0;
  // Questions whose traces contributed to the class means.
  std::set<std::string> source_questions;
};

/// Per-question class sums of bin profiles, so direction vectors with any
/// set of held-out questions can be assembled without rescanning traces.
class DirectionBuilder {
 public:
  DirectionBuilder(std::span<const Trace> traces, double tau) : tau_(tau) {
    for (const auto& t : traces) {
      auto& q = per_question_[t.question_id];
      const auto p = bin_profile(t, tau);
      auto& cls = t.correct ? q.correct : q.wrong;
      for (std::size_t b = 0; b < kBins; ++b) cls.sum[b] += p.probs[b];
      ++cls.count;
    }
  }

  double tau() const { return tau_; }

  /// Wrong-minus-correct class mean profile over every question not in
  /// `held_out`. Throws DomainError when either class is left empty.
  DirectionVector build(const std::string& excluded_question, const std::set<std::string>& held_out = {}) const {
    ClassSum correct, wrong;
    DirectionVector dv;
    dv.excluded_question = excluded_question;
    dv.tau = tau_;
    for (const auto& [qid, sums] : per_question_) {
      if (qid == excluded_question || held_out.count(qid) != 0) continue;
      dv.source_questions.insert(qid);
      correct.add(sums.correct);
      wrong.add(sums.wrong);
    }
    if (correct.count == 0 || wrong.count == 0) {
      throw DomainError("direction vector needs correct and wrong traces outside question " + excluded_question);
    }
    for (std::size_t b = 0; b < kBins; ++b) {
      dv.u[b] = wrong.sum[b] / static_cast<double>(wrong.count) - correct.sum[b] / static_cast<double>(correct.count);
    }
    return dv;
  }

 private:
  struct ClassSum {
    ProfileVector sum{};
    std::size_t count = 0;
    void add(const ClassSum& o) {
      for (std::size_t b = 0; b < kBins; ++b) sum[b] += o.sum[b];
      count += o.count;
    }
  };
  struct QuestionSums {
    ClassSum correct, wrong;
  };

  double tau_;
  std::map<std::string, QuestionSums> per_question_;
};

inline DirectionVector wrong_direction_vector(std::span<const Trace> training, const std::string& excluded_question,
                                              double tau) {
  return DirectionBuilder(training, tau).build(excluded_question);
}

/// Cosine similarity; 0 when either vector has zero norm.
inline double profile_similarity(std::span<const double, kBins> p, std::span<const double, kBins> u) {
  double dot = 0.0, pp = 0.0, uu = 0.0;
  for (std::size_t b = 0; b < kBins; ++b) {
    dot += p[b] * u[b];
    pp += p[b] * p[b];
    uu += u[b] * u[b];
  }
  if (pp == 0.0 || uu == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(pp) * std::sqrt(uu)), -1.0, 1.0);
}

inline double profile_similarity(std::span<const double, kBins> p, const DirectionVector& u) {
  return profile_similarity(p, std::span<const double, kBins>(u.u));
}

// ---------------------------------------------------------------------------
// Severity buckets

struct SeverityBucket {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t segment_count = 0;
  std::size_t correct_count = 0;
  std::size_t wrong_count = 0;
  double median_score = 0.0;
  double median_words = 0.0;
};

/// Buckets scored segments into [lo, lo + width). A score of exactly 100
/// lands in the top bucket so the buckets cover the closed score range.
inline std::vector<SeverityBucket> severity_buckets(std::span<const Trace> traces, double width = 10.0) {
  if (!(width > 0.0)) throw DomainError("bucket width must be positive");
  const auto top = static_cast<long>(std::ceil(100.0 / width)) - 1;
  struct Acc {
    std::size_t correct = 0, wrong = 0;
    std::vector<double> scores, words;
  };
  std::map<long, Acc> acc;
  for (const auto& t : traces) {
    for (const auto& seg : t.segments) {
      if (!seg.backtrack_score) continue;
      const auto k = std::min(static_cast<long>(std::floor(*seg.backtrack_score / width)), top);
      auto& a = acc[k];
      (t.correct ? a.correct : a.wrong) += 1;
      a.scores.push_back(*seg.backtrack_score);
      a.words.push_back(static_cast<double>(seg.word_count));
    }
  }
  std::vector<SeverityBucket> out;
  for (auto& [k, a] : acc) {
    SeverityBucket b;
    b.lo = static_cast<double>(k) * width;
    b.hi = b.lo + width;
    b.correct_count = a.correct;
    b.wrong_count = a.wrong;
    b.segment_count = a.correct + a.wrong;
    b.median_score = median(std::move(a.scores));
    b.median_words = median(std::move(a.words));
    out.push_back(b);
  }
  return out;
}

inline std::vector<SeverityBucket> severity_buckets(const Corpus& corpus, double width = 10.0) {
  return severity_buckets(corpus.traces, width);
}

}  // namespace rtrace
