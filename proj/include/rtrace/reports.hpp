#pragma once

// Table builders behind the CLI. Every function writes CSV with fixed
// precision so repeated runs are byte-identical.

#include <cstddef>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rtrace/corpus.hpp"
#include "rtrace/events.hpp"
#include "rtrace/filters.hpp"
#include "rtrace/profiles.hpp"
#include "rtrace/stats.hpp"
#include "rtrace/util.hpp"

namespace rtrace {

namespace detail {

// Each split on its own, then the pooled corpus when there is more than one.
inline std::vector<std::pair<std::string, std::vector<Trace>>> split_views(const Corpus& corpus) {
  std::vector<std::pair<std::string, std::vector<Trace>>> out;
  const auto splits = splits_of(corpus);
  for (const auto& s : splits) out.emplace_back(s, traces_in_split(corpus, s));
  if (splits.size() > 1) out.emplace_back("all", corpus.traces);
  return out;
}

inline std::string level_label(double tau) {
  const auto level = regime_level(tau);
  return level ? std::to_string(*level) : std::string{};
}

}  // namespace detail

inline void write_summary_csv(std::ostream& out, const Corpus& corpus) {
  out << "split,questions,traces,traces_per_question,baseline_acc,mean_len,median_len,median_segs\n";
  for (const auto& [split, traces] : detail::split_views(corpus)) {
    const auto s = corpus_summary(traces);
    out << csv_row({split, std::to_string(s.questions), std::to_string(s.traces), format_fixed(s.traces_per_question, 1),
                    format_percent(s.baseline_accuracy), format_fixed(s.mean_words, 1),
                    format_fixed(s.median_words, 1), format_fixed(s.median_segments, 1)});
  }
}

inline void write_severity_csv(std::ostream& out, const Corpus& corpus, double width = 10.0) {
  out << "bucket_lo,bucket_hi,segments,correct,wrong,median_score,median_words\n";
  for (const auto& b : severity_buckets(corpus.traces, width)) {
    out << csv_row({format_general(b.lo), format_general(b.hi), std::to_string(b.segment_count),
                    std::to_string(b.correct_count), std::to_string(b.wrong_count), format_fixed(b.median_score, 1),
                    format_fixed(b.median_words, 1)});
  }
}

inline void write_bursts_csv(std::ostream& out, const Corpus& corpus, double tau, Words gap) {
  write_burst_stats_csv_header(out);
  for (const auto& t : corpus.traces) write_burst_stats_csv_row(out, t, tau, gap, trace_burst_stats(t, tau, gap));
}

/// Class means of every burst statistic, one row per split, threshold, gap
/// and class.
inline void write_class_means_csv(std::ostream& out, const Corpus& corpus, std::span<const double> taus,
                                  std::span<const Words> gaps) {
  out << "split,tau,level,gap,class,traces,n,J,K2,K3,S2,S3,rho,m_max\n";
  for (const auto& [split, traces] : detail::split_views(corpus)) {
    for (double tau : taus) {
      for (Words gap : gaps) {
        const auto means = class_means(traces, tau, gap);
        for (auto cls : {Outcome::kCorrect, Outcome::kWrong}) {
          const auto& m = cls == Outcome::kCorrect ? means.correct : means.wrong;
          if (!m) continue;
          out << csv_row({split, format_general(tau), detail::level_label(tau), std::to_string(gap),
                          std::string(to_string(cls)), std::to_string(m->traces), format_fixed(m->n, 3),
                          format_fixed(m->bursts, 3), format_fixed(m->multi_bursts, 3), format_fixed(m->dense_bursts, 3),
                          format_fixed(m->multi_share, 3), format_fixed(m->dense_share, 3),
                          format_fixed(m->compression, 3), format_fixed(m->max_burst, 3)});
        }
      }
    }
  }
}

struct GapSweepRow {
  std::string split;
  double tau = 0;
  Words gap = 0;
  MeanBurstStats correct;
  MeanBurstStats wrong;

  bool wrong_exceeds_correct() const {
    return wrong.multi_bursts > correct.multi_bursts && wrong.multi_share > correct.multi_share &&
           wrong.max_burst > correct.max_burst;
  }
};

/// Correct/wrong class means of K>=2, S>=2 and m_max over a threshold x gap
/// grid. Splits missing a class are skipped.
inline std::vector<GapSweepRow> gap_sweep(const Corpus& corpus, std::span<const double> taus,
                                          std::span<const Words> gaps) {
  std::vector<GapSweepRow> rows;
  for (const auto& [split, traces] : detail::split_views(corpus)) {
    for (double tau : taus) {
      for (Words gap : gaps) {
        const auto means = class_means(traces, tau, gap);
        if (!means.correct || !means.wrong) continue;
        rows.push_back({split, tau, gap, *means.correct, *means.wrong});
      }
    }
  }
  return rows;
}

inline void write_gap_sweep_csv(std::ostream& out, std::span<const GapSweepRow> rows) {
  out << "split,tau,gap,K2_correct,K2_wrong,S2_correct,S2_wrong,m_max_correct,m_max_wrong,wrong_gt_correct\n";
  for (const auto& r : rows) {
    out << csv_row({r.split, format_general(r.tau), std::to_string(r.gap), format_fixed(r.correct.multi_bursts, 3),
                    format_fixed(r.wrong.multi_bursts, 3), format_fixed(r.correct.multi_share, 3),
                    format_fixed(r.wrong.multi_share, 3), format_fixed(r.correct.max_burst, 3),
                    format_fixed(r.wrong.max_burst, 3), r.wrong_exceeds_correct() ? "1" : "0"});
  }
}

inline void write_timing_csv(std::ostream& out, const Corpus& corpus, std::span<const double> taus) {
  out << "split,class,tau,level,traces,event_rate,median_first_depth,median_normalized_first_depth\n";
  for (const auto& [split, traces] : detail::split_views(corpus)) {
    for (auto cls : {Outcome::kCorrect, Outcome::kWrong}) {
      std::vector<Trace> members;
      for (const auto& t : traces) {
        if (outcome_of(t) == cls) members.push_back(t);
      }
      if (members.empty()) continue;
      for (double tau : taus) {
        const auto s = timing_summary(members, tau);
        out << csv_row({split, std::string(to_string(cls)), format_general(tau), detail::level_label(tau),
                        std::to_string(s.traces), format_fixed(s.event_rate, 3),
                        format_optional(s.median_first_depth, 1), format_optional(s.median_normalized_first_depth, 3)});
      }
    }
  }
}

struct SupportFloor {
  std::size_t correct = 0;
  std::size_t wrong = 0;
};

/// Pooled per-bin probabilities, bins numbered 0..19.
inline void write_pooled_profile_csv(std::ostream& out, std::span<const Trace> traces, std::span<const double> taus,
                                     SupportFloor floor = {}) {
  out << "class,tau,bin,C,M,p,reported\n";
  for (auto cls : {Outcome::kCorrect, Outcome::kWrong}) {
    for (double tau : taus) {
      const auto bins =
          pooled_bin_probability(traces, tau, cls, cls == Outcome::kCorrect ? floor.correct : floor.wrong);
      for (std::size_t b = 0; b < kBins; ++b) {
        out << csv_row({std::string(to_string(cls)), format_general(tau), std::to_string(b),
                        std::to_string(bins[b].events), std::to_string(bins[b].support),
                        format_optional(bins[b].probability, 3), bins[b].probability ? "1" : "0"});
      }
    }
  }
}

/// Class-mean multi-burst start counts per bin.
inline void write_burst_start_csv(std::ostream& out, std::span<const Trace> traces, std::span<const double> taus,
                                  Words gap) {
  out << "class,tau,gap,bin,mean_count\n";
  for (auto cls : {Outcome::kCorrect, Outcome::kWrong}) {
    for (double tau : taus) {
      const auto profile = class_burst_start_profile(traces, tau, gap, cls);
      if (!profile) continue;
      for (std::size_t b = 0; b < kBins; ++b) {
        out << csv_row({std::string(to_string(cls)), format_general(tau), std::to_string(gap), std::to_string(b),
                        format_fixed((*profile)[b], 3)});
      }
    }
  }
}

/// Per-trace completed-trace features. Profile similarity uses the
/// direction vector built without the trace's question (0 when a class is
/// missing elsewhere).
inline void write_features_csv(std::ostream& out, const Corpus& corpus, Words gap = kDefaultBurstGap) {
  out << "trace_id,question_id,split,correct,total_words";
  for (const auto& name : hybrid_feature_names()) out << ',' << name;
  out << ",count_20\n";
  const DirectionBuilder builder(corpus.traces, 50.0);
  for (const auto& t : corpus.traces) {
    std::optional<DirectionVector> dir;
    try {
      dir = builder.build(t.question_id);
    } catch (const DomainError&) {
    }
    FilterConfig config;
    config.gap = gap;
    const Vector x = completed_features(t, FilterSpec::of(FilterKind::kCompletedHybrid), config, dir ? &*dir : nullptr);
    out << csv_escape(t.trace_id) << ',' << csv_escape(t.question_id) << ',' << csv_escape(t.split) << ','
        << (t.correct ? 1 : 0) << ',' << t.total_words;
    for (Eigen::Index j = 0; j < x.size(); ++j) out << ',' << format_fixed(x(j), 6);
    out << ',' << event_count(t, 20.0) << '\n';
  }
}

struct LrRow {
  Words depth = 0;
  double tau = 0;
  std::size_t traces = 0;
  LrResult result;
};

/// Pooled likelihood-ratio tests of burst features (S>=2, rho, m_max) added
/// to the rate at the same threshold, over traces that reach each depth.
inline std::vector<LrRow> lr_table(const Corpus& corpus, std::span<const Words> depths, std::span<const double> taus,
                                   Words gap = kDefaultBurstGap, const LogisticOptions& opts = {}) {
  static const std::vector<std::string> kFull{"rate", "multi_share", "compression", "max_burst"};
  static const std::vector<std::string> kReduced{"rate"};
  std::vector<LrRow> rows;
  for (Words d : depths) {
    for (double tau : taus) {
      std::vector<const Trace*> reach;
      for (const auto& t : corpus.traces) {
        if (t.total_words > d) reach.push_back(&t);
      }
      Matrix x(static_cast<Eigen::Index>(reach.size()), 4);
      Vector y(static_cast<Eigen::Index>(reach.size()));
      for (std::size_t i = 0; i < reach.size(); ++i) {
        const auto s = trace_burst_stats(*reach[i], tau, gap, d);
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = 1000.0 * static_cast<double>(s.n) / static_cast<double>(d);
        x(r, 1) = s.multi_share;
        x(r, 2) = s.compression;
        x(r, 3) = static_cast<double>(s.max_burst);
        y(r) = reach[i]->correct ? 0.0 : 1.0;
      }
      rows.push_back({d, tau, reach.size(), lr_test(x, kFull, kReduced, y, opts)});
    }
  }
  return rows;
}

inline void write_lr_csv(std::ostream& out, std::span<const LrRow> rows) {
  out << "depth,tau,traces,lr_stat,df,p_value\n";
  for (const auto& r : rows) {
    char p[32];
    std::snprintf(p, sizeof(p), "%.4g", r.result.p_value);
    out << csv_row({std::to_string(r.depth), format_general(r.tau), std::to_string(r.traces),
                    format_fixed(r.result.stat, 3), std::to_string(r.result.df), p});
  }
}

}  // namespace rtrace
