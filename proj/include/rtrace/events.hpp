#pragma once

// Qualifying backtrack events, burden counts and gap-based burst structure.

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"
#include "rtrace/util.hpp"

namespace rtrace {

inline constexpr Words kDefaultBurstGap = 500;

struct QualifyingEvent {
  std::size_t segment_index = 0;
  Words depth = 0;
  double score = 0.0;

  bool operator==(const QualifyingEvent&) const = default;
};

/// Scored segments with score >= tau that start strictly before depth_limit
/// (the full trace when no limit is given), in segment order.
inline std::vector<QualifyingEvent> qualifying_events(const Trace& trace, double tau,
                                                      std::optional<Words> depth_limit = std::nullopt) {
  if (tau < 0.0) throw DomainError("threshold must be non-negative");
  if (depth_limit && *depth_limit <= 0) throw DomainError("depth limit must be positive");
  const Words limit = depth_limit.value_or(trace.total_words);
  std::vector<QualifyingEvent> out;
  for (const auto& seg : trace.segments) {
    if (seg.start_depth >= limit) break;
    if (seg.backtrack_score && *seg.backtrack_score >= tau) {
      out.push_back({seg.index, seg.start_depth, *seg.backtrack_score});
    }
  }
  return out;
}

inline std::size_t event_count(const Trace& trace, double tau, std::optional<Words> depth_limit = std::nullopt) {
  return qualifying_events(trace, tau, depth_limit).size();
}

/// Events per 1000 words before `depth`.
inline double backtrack_rate(const Trace& trace, double tau, Words depth) {
  if (depth <= 0) throw DomainError("rate depth must be positive");
  return 1000.0 * static_cast<double>(event_count(trace, tau, depth)) / static_cast<double>(depth);
}

inline std::vector<Words> event_depths(std::span<const QualifyingEvent> events) {
  std::vector<Words> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(e.depth);
  return out;
}

struct BurstPartition {
  Words gap = kDefaultBurstGap;
  std::vector<std::vector<Words>> bursts;

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out;
    for (const auto& b : bursts) out.push_back(b.size());
    return out;
  }
};

/// Greedy left-to-right grouping: consecutive depths join the same burst when
/// they are at most `gap` words apart.
inline BurstPartition burst_partition(std::span<const Words> depths, Words gap = kDefaultBurstGap) {
  if (gap <= 0) throw DomainError("burst gap must be positive");
  BurstPartition part;
  part.gap = gap;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (i > 0 && depths[i] <= depths[i - 1]) throw DomainError("event depths must be strictly increasing");
    if (i == 0 || depths[i] - depths[i - 1] > gap) part.bursts.emplace_back();
    part.bursts.back().push_back(depths[i]);
  }
  return part;
}

struct BurstStats {
  std::size_t n = 0;
  std::size_t bursts = 0;  // J
  std::size_t multi_bursts = 0;  // K>=2
  std::size_t dense_bursts = 0;  // K>=3
  double multi_share = 0.0;  // S>=2
  double dense_share = 0.0;  // S>=3
  double compression = 0.0;  // rho = n / J
  std::size_t max_burst = 0;  // m_max

  bool operator==(const BurstStats&) const = default;
};

inline BurstStats burst_stats(const BurstPartition& partition) {
  BurstStats s;
  std::size_t in_multi = 0, in_dense = 0;
  for (const auto& b : partition.bursts) {
    const auto m = b.size();
    s.n += m;
    s.max_burst = std::max(s.max_burst, m);
    if (m >= 2) {
      ++s.multi_bursts;
      in_multi += m;
    }
    if (m >= 3) {
      ++s.dense_bursts;
      in_dense += m;
    }
  }
  s.bursts = partition.bursts.size();
  if (s.n == 0) return BurstStats{};
  const auto n = static_cast<double>(s.n);
  s.multi_share = static_cast<double>(in_multi) / n;
  s.dense_share = static_cast<double>(in_dense) / n;
  s.compression = n / static_cast<double>(s.bursts);
  return s;
}

/// Burst statistics of a trace's events at `tau` before `depth_limit`.
inline BurstStats trace_burst_stats(const Trace& trace, double tau, Words gap = kDefaultBurstGap,
                                    std::optional<Words> depth_limit = std::nullopt) {
  const auto events = qualifying_events(trace, tau, depth_limit);
  const auto depths = event_depths(events);
  return burst_stats(burst_partition(depths, gap));
}

/// Field-wise class mean of BurstStats.
struct MeanBurstStats {
  std::size_t traces = 0;
  double n = 0, bursts = 0, multi_bursts = 0, dense_bursts = 0;
  double multi_share = 0, dense_share = 0, compression = 0, max_burst = 0;
};

struct ClassMeans {
  std::optional<MeanBurstStats> correct;
  std::optional<MeanBurstStats> wrong;
};

inline ClassMeans class_means(std::span<const Trace> traces, double tau, Words gap = kDefaultBurstGap) {
  MeanBurstStats sums[2];
  for (const auto& t : traces) {
    const auto s = trace_burst_stats(t, tau, gap);
    auto& acc = sums[t.correct ? 0 : 1];
    ++acc.traces;
    acc.n += static_cast<double>(s.n);
    acc.bursts += static_cast<double>(s.bursts);
    acc.multi_bursts += static_cast<double>(s.multi_bursts);
    acc.dense_bursts += static_cast<double>(s.dense_bursts);
    acc.multi_share += s.multi_share;
    acc.dense_share += s.dense_share;
    acc.compression += s.compression;
    acc.max_burst += static_cast<double>(s.max_burst);
  }
  auto finish = [](MeanBurstStats acc) -> std::optional<MeanBurstStats> {
    if (acc.traces == 0) return std::nullopt;
    const auto k = static_cast<double>(acc.traces);
    for (double* f : {&acc.n, &acc.bursts, &acc.multi_bursts, &acc.dense_bursts, &acc.multi_share,
                      &acc.dense_share, &acc.compression, &acc.max_burst}) {
      *f /= k;
    }
    return acc;
  };
  return {finish(sums[0]), finish(sums[1])};
}

inline ClassMeans class_means(const Corpus& corpus, double tau, Words gap = kDefaultBurstGap) {
  return class_means(corpus.traces, tau, gap);
}

struct ThresholdRegime {
  int level = 0;
  std::vector<int> thresholds;
};

inline const std::array<ThresholdRegime, 4>& threshold_regimes() {
  static const std::array<ThresholdRegime, 4> kRegimes{{
      {1, {10}},
      {2, {20, 30, 40}},
      {3, {50, 60}},
      {4, {70}},
  }};
  return kRegimes;
}

inline std::vector<int> all_regime_thresholds() {
  std::vector<int> out;
  for (const auto& r : threshold_regimes()) out.insert(out.end(), r.thresholds.begin(), r.thresholds.end());
  return out;
}

/// Regime level of an exact threshold, or nullopt if it is not a preset.
inline std::optional<int> regime_level(double tau) {
  for (const auto& r : threshold_regimes()) {
    for (int t : r.thresholds) {
      if (static_cast<double>(t) == tau) return r.level;
    }
  }
  return std::nullopt;
}

inline void write_burst_stats_csv_header(std::ostream& out) {
  out << "trace_id,question_id,correct,tau,gap,n,J,K2,K3,S2,S3,rho,m_max\n";
}

inline void write_burst_stats_csv_row(std::ostream& out, const Trace& t, double tau, Words gap,
                                      const BurstStats& s) {
  out << csv_row({t.trace_id, t.question_id, t.correct ? "1" : "0", format_general(tau), std::to_string(gap),
                  std::to_string(s.n), std::to_string(s.bursts), std::to_string(s.multi_bursts),
                  std::to_string(s.dense_bursts), format_fixed(s.multi_share, 3), format_fixed(s.dense_share, 3),
                  format_fixed(s.compression, 3), std::to_string(s.max_burst)});
}

}  // namespace rtrace
