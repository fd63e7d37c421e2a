#pragma once

// Keep/drop filters over completed traces, the prefix-causal early-exit
// policy, and leave-one-question evaluation.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtrace/corpus.hpp"
#include "rtrace/error.hpp"
#include "rtrace/events.hpp"
#include "rtrace/profiles.hpp"
#include "rtrace/stats.hpp"
#include "rtrace/util.hpp"

namespace rtrace {

struct FilterConfig {
  Words gap = kDefaultBurstGap;
  double ridge = 1e-4;
  // Algorithm 1 step 4: at the guard depth, continue while fewer than
  // guard_min_events events at guard_tau have occurred.
  Words guard_depth = 2000;
  std::size_t guard_min_events = 2;
  double guard_tau = 20.0;
  std::vector<Words> checkpoints{2000, 5000, 8000, 12000};
  unsigned threads = 0;  // 0 = hardware concurrency
  LogisticOptions logistic{};
};

/// Word-limit sentinel meaning "no limit".
inline constexpr Words kNoLimit = std::numeric_limits<Words>::max();

enum class FilterKind {
  kHardCutoff,
  kCompletedHybrid,
  kBurstOnly,
  kRateOnly,
  kCountOnly,
  kSingleSignal,
  kOnlinePrefix,
  kPrefixRateOnly,
};

/// Which filter to evaluate. `depth` is the word limit for hard cutoffs and
/// the checkpoint for prefix filters.
struct FilterSpec {
  FilterKind kind = FilterKind::kHardCutoff;
  Words depth = 0;
  std::string signal;  // single-signal feature name
  double signal_tau = 20.0;

  static FilterSpec hard_cutoff(Words limit) { return {FilterKind::kHardCutoff, limit, {}, 0}; }
  static FilterSpec online_prefix(Words d) { return {FilterKind::kOnlinePrefix, d, {}, 0}; }
  static FilterSpec prefix_rate_only(Words d) { return {FilterKind::kPrefixRateOnly, d, {}, 0}; }
  static FilterSpec of(FilterKind kind) { return {kind, 0, {}, 0}; }
  static FilterSpec single(std::string signal, double tau) {
    return {FilterKind::kSingleSignal, 0, std::move(signal), tau};
  }

  bool learned() const { return kind != FilterKind::kHardCutoff; }
  bool prefix() const { return kind == FilterKind::kOnlinePrefix || kind == FilterKind::kPrefixRateOnly; }

  /// Method label; also the CLI syntax accepted by parse().
  std::string label() const {
    switch (kind) {
      case FilterKind::kHardCutoff: return depth == kNoLimit ? "hard:none" : "hard:" + std::to_string(depth);
      case FilterKind::kCompletedHybrid: return "hybrid";
      case FilterKind::kBurstOnly: return "burst";
      case FilterKind::kRateOnly: return "rate";
      case FilterKind::kCountOnly: return "count";
      case FilterKind::kSingleSignal: return "single:" + signal + "@" + format_general(signal_tau);
      case FilterKind::kOnlinePrefix: return "online:" + std::to_string(depth);
      case FilterKind::kPrefixRateOnly: return "online-rate:" + std::to_string(depth);
    }
    return {};
  }

  static FilterSpec parse(std::string_view text);
};

inline const std::vector<std::string>& single_signal_names() {
  static const std::vector<std::string> kNames{"prob_slope", "prob_late_mean", "profile_similarity",
                                               "max_burst",  "compression",    "multi_share",
                                               "multi_bursts", "rate",         "count"};
  return kNames;
}

inline FilterSpec FilterSpec::parse(std::string_view text) {
  auto words_after = [&](std::string_view prefix) -> Words {
    const auto v = parse_list<Words>(text.substr(prefix.size()));
    if (v.size() != 1 || v[0] <= 0) throw DomainError("expected a positive word count in '" + std::string(text) + "'");
    return v[0];
  };
  if (text == "hard:none") return hard_cutoff(kNoLimit);
  if (text.starts_with("hard:")) return hard_cutoff(words_after("hard:"));
  if (text.starts_with("online:")) return online_prefix(words_after("online:"));
  if (text.starts_with("online-rate:")) return prefix_rate_only(words_after("online-rate:"));
  if (text == "hybrid") return of(FilterKind::kCompletedHybrid);
  if (text == "burst") return of(FilterKind::kBurstOnly);
  if (text == "rate") return of(FilterKind::kRateOnly);
  if (text == "count") return of(FilterKind::kCountOnly);
  if (text.starts_with("single:")) {
    const auto body = text.substr(7);
    const auto at = body.find('@');
    if (at == std::string_view::npos) throw DomainError("single-signal filter needs name@tau");
    std::string name(body.substr(0, at));
    const auto& names = single_signal_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw DomainError("unknown single signal '" + name + "'");
    }
    const auto tau = parse_list<double>(body.substr(at + 1));
    if (tau.size() != 1 || tau[0] < 0.0) throw DomainError("invalid threshold in '" + std::string(text) + "'");
    return single(std::move(name), tau[0]);
  }
  throw DomainError("unknown filter '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Features

inline bool hard_cutoff(const Trace& trace, Words limit) {
  if (limit <= 0) throw DomainError("word limit must be positive");
  return trace.total_words <= limit;
}

inline const std::vector<std::string>& hybrid_feature_names() {
  static const std::vector<std::string> kNames{"prob_slope_20", "prob_late_mean_50", "profile_similarity_50",
                                               "rate_20",       "multi_share_20",    "compression_40",
                                               "max_burst_20"};
  return kNames;
}

inline const std::vector<std::string>& burst_feature_names() {
  static const std::vector<std::string> kNames{"multi_share_20", "compression_40", "max_burst_20"};
  return kNames;
}

inline const std::vector<std::string>& prefix_feature_names() {
  static const std::vector<std::string> kNames{"rate_20",      "multi_share_20", "compression_40",
                                               "max_burst_20", "first_depth_50", "first_multi_burst_40"};
  return kNames;
}

namespace detail {

inline void check_direction(const Trace& trace, const DirectionVector& direction) {
  if (direction.excluded_question != trace.question_id || direction.source_questions.count(trace.question_id) != 0) {
    throw LeakageError("direction vector for trace " + trace.trace_id + " was built with its own question");
  }
}

}  // namespace detail

/// Completed-trace hybrid features, in order: profile slope at 20, late-half
/// mean at 50, similarity to the held-out wrong direction at 50, rate at 20,
/// multi-burst share at 20, compression at 40, maximum burst size at 20.
inline Vector hybrid_features(const Trace& trace, const DirectionVector& direction, Words gap = kDefaultBurstGap) {
  detail::check_direction(trace, direction);
  Vector x = Vector::Zero(7);
  if (trace.total_words <= 0) return x;
  const auto p20 = bin_profile(trace, 20.0);
  const auto p50 = bin_profile(trace, 50.0);
  const auto s20 = trace_burst_stats(trace, 20.0, gap);
  x(0) = profile_slope(p20);
  x(1) = late_mean(p50);
  x(2) = profile_similarity(std::span<const double, kBins>(p50.probs), direction);
  x(3) = backtrack_rate(trace, 20.0, trace.total_words);
  x(4) = s20.multi_share;
  x(5) = trace_burst_stats(trace, 40.0, gap).compression;
  x(6) = static_cast<double>(s20.max_burst);
  return x;
}

/// (S>=2 at 20, rho at 40, m_max at 20) over the completed trace.
inline Vector burst_only_features(const Trace& trace, Words gap = kDefaultBurstGap) {
  const auto s20 = trace_burst_stats(trace, 20.0, gap);
  Vector x(3);
  x << s20.multi_share, trace_burst_stats(trace, 40.0, gap).compression, static_cast<double>(s20.max_burst);
  return x;
}

inline double rate_only_feature(const Trace& trace) {
  return trace.total_words > 0 ? backtrack_rate(trace, 20.0, trace.total_words) : 0.0;
}

inline double count_only_feature(const Trace& trace) { return static_cast<double>(event_count(trace, 20.0)); }

/// One structural signal at its own threshold. profile_similarity needs the
/// held-out direction vector for the trace's question.
inline double single_signal_feature(const Trace& trace, std::string_view name, double tau, Words gap,
                                    const DirectionVector* direction = nullptr) {
  if (name == "profile_similarity") {
    if (direction == nullptr) throw DomainError("profile_similarity needs a direction vector");
    detail::check_direction(trace, *direction);
  }
  if (trace.total_words <= 0) return 0.0;
  if (name == "prob_slope") return profile_slope(bin_profile(trace, tau));
  if (name == "prob_late_mean") return late_mean(bin_profile(trace, tau));
  if (name == "profile_similarity") {
    return profile_similarity(std::span<const double, kBins>(bin_profile(trace, tau).probs), *direction);
  }
  if (name == "rate") return backtrack_rate(trace, tau, trace.total_words);
  if (name == "count") return static_cast<double>(event_count(trace, tau));
  const auto s = trace_burst_stats(trace, tau, gap);
  if (name == "max_burst") return static_cast<double>(s.max_burst);
  if (name == "compression") return s.compression;
  if (name == "multi_share") return s.multi_share;
  if (name == "multi_bursts") return static_cast<double>(s.multi_bursts);
  throw DomainError("unknown single signal '" + std::string(name) + "'");
}

/// Prefix-causal features at checkpoint d, computed only from segments
/// starting before d: rate at 20, S>=2 at 20, rho at 40, m_max at 20, first
/// depth with score >= 50, and start of the first multi-burst at 40. The two
/// timing features are d when no such event exists yet.
inline Vector prefix_features(const Trace& trace, Words d, Words gap = kDefaultBurstGap) {
  if (d <= 0) throw DomainError("checkpoint depth must be positive");
  const auto s20 = trace_burst_stats(trace, 20.0, gap, d);
  const auto d40 = event_depths(qualifying_events(trace, 40.0, d));
  const auto p40 = burst_partition(d40, gap);
  const auto s40 = burst_stats(p40);
  const auto e50 = qualifying_events(trace, 50.0, d);

  double first_multi = static_cast<double>(d);
  for (const auto& b : p40.bursts) {
    if (b.size() >= 2) {
      first_multi = static_cast<double>(b.front());
      break;
    }
  }
  Vector x(6);
  x << 1000.0 * static_cast<double>(s20.n) / static_cast<double>(d), s20.multi_share, s40.compression,
      static_cast<double>(s20.max_burst), e50.empty() ? static_cast<double>(d) : static_cast<double>(e50.front().depth),
      first_multi;
  return x;
}

inline Vector prefix_rate_features(const Trace& trace, Words d) {
  Vector x(1);
  x << backtrack_rate(trace, 20.0, d);
  return x;
}

// ---------------------------------------------------------------------------
// Online policy

enum class OnlineAction { kContinue, kFlag };

inline std::string_view to_string(OnlineAction a) { return a == OnlineAction::kFlag ? "flag" : "continue"; }

inline bool guard_holds(const Trace& trace, Words d, const FilterConfig& config) {
  return d == config.guard_depth && event_count(trace, config.guard_tau, d) < config.guard_min_events;
}

inline void check_not_trained_on(const Trace& trace, const FilterModel& model) {
  if (model.trained_on.count(trace.question_id) != 0) {
    throw LeakageError("model scoring trace " + trace.trace_id + " was trained on question " + trace.question_id);
  }
}

/// Checkpoint decision for one trace: continue under the early guard,
/// otherwise flag iff the wrong-trace score reaches the model cutoff. Reads
/// only segments starting before d.
inline OnlineAction online_decide(const Trace& trace, Words d, const FilterModel& model, const FilterConfig& config = {},
                                  double* score_out = nullptr) {
  check_not_trained_on(trace, model);
  Vector x;
  if (model.feature_names == prefix_feature_names()) {
    x = prefix_features(trace, d, config.gap);
  } else if (model.feature_names == std::vector<std::string>{"rate_20"}) {
    x = prefix_rate_features(trace, d);
  } else {
    throw DomainError("model is not a prefix filter");
  }
  const double p = model.score(x);
  if (score_out != nullptr) *score_out = p;
  if (guard_holds(trace, d, config)) return OnlineAction::kContinue;
  return p >= model.cutoff ? OnlineAction::kFlag : OnlineAction::kContinue;
}

// ---------------------------------------------------------------------------
// Decisions and reports

inline constexpr std::size_t kNoFold = std::numeric_limits<std::size_t>::max();

struct Decision {
  std::string trace_id;
  std::string question_id;
  bool kept = true;
  std::string action;  // keep | drop (completed), continue | flag (online)
  std::optional<double> score;
  std::size_t fold = kNoFold;
  std::optional<Words> exit_depth;  // checkpoint that flagged the trace
};

struct Fold {
  std::string held_out_question;
  std::set<std::string> trained_on;
  std::vector<FilterModel> models;  // one per checkpoint for prefix filters
};

struct QuestionRow {
  std::string question_id;
  std::string split;
  std::size_t traces = 0;
  std::size_t kept = 0;
  std::size_t kept_correct = 0;
  std::optional<double> retained_accuracy;
};

struct SplitRow {
  std::string split;
  std::size_t traces = 0;
  std::size_t dropped = 0;
  double baseline_accuracy = 0.0;
  std::optional<double> retained_accuracy_pooled;
  std::optional<double> retained_accuracy_per_question;
  double drop_rate = 0.0;
  double word_save = 0.0;
};

struct EvalReport {
  std::string method;
  std::optional<Words> depth_or_limit;
  std::vector<SplitRow> splits;  // each split, then "all"
  std::vector<QuestionRow> questions;
  std::vector<Decision> decisions;
  std::vector<Fold> folds;
};

namespace detail {

inline SplitRow split_row(std::string name, std::span<const Trace* const> traces,
                          const std::map<std::string, const Decision*>& by_trace,
                          const std::vector<QuestionRow>& questions) {
  SplitRow row;
  row.split = std::move(name);
  row.traces = traces.size();
  std::size_t kept = 0, kept_correct = 0, correct = 0;
  double words = 0, retained_words = 0;
  std::set<std::string> qs;
  for (const Trace* t : traces) {
    qs.insert(t->question_id);
    correct += t->correct ? 1 : 0;
    words += static_cast<double>(t->total_words);
    if (by_trace.at(t->trace_id)->kept) {
      ++kept;
      kept_correct += t->correct ? 1 : 0;
      retained_words += static_cast<double>(t->total_words);
    }
  }
  row.dropped = row.traces - kept;
  if (row.traces > 0) {
    row.baseline_accuracy = static_cast<double>(correct) / static_cast<double>(row.traces);
    row.drop_rate = static_cast<double>(row.dropped) / static_cast<double>(row.traces);
  }
  row.word_save = words > 0 ? 1.0 - retained_words / words : 0.0;
  if (kept > 0) {
    row.retained_accuracy_pooled = static_cast<double>(kept_correct) / static_cast<double>(kept);
    double total = 0.0;
    std::size_t nq = 0;
    for (const auto& q : questions) {
      if (qs.count(q.question_id) == 0) continue;
      ++nq;
      total += q.retained_accuracy.value_or(0.0);
    }
    row.retained_accuracy_per_question = total / static_cast<double>(nq);
  }
  return row;
}

}  // namespace detail

/// Aggregates one decision per trace into per-question and per-split
/// retained accuracy, drop rate and word savings. Questions that keep
/// nothing count as 0 in the per-question mean.
inline EvalReport retained_metrics(std::span<const Decision> decisions, std::span<const Trace> traces) {
  std::map<std::string, const Decision*> by_trace;
  for (const auto& d : decisions) {
    if (!by_trace.emplace(d.trace_id, &d).second) throw DomainError("duplicate decision for trace " + d.trace_id);
  }
  if (by_trace.size() != traces.size()) throw DomainError("need exactly one decision per trace");
  for (const auto& t : traces) {
    if (by_trace.count(t.trace_id) == 0) throw DomainError("no decision for trace " + t.trace_id);
  }
  EvalReport report;
  report.decisions.assign(decisions.begin(), decisions.end());

  std::map<std::string, QuestionRow> qrows;
  std::map<std::string, std::vector<const Trace*>> by_split;
  std::vector<const Trace*> all;
  for (const auto& t : traces) {
    auto& q = qrows[t.question_id];
    q.question_id = t.question_id;
    q.split = t.split;
    ++q.traces;
    if (by_trace.at(t.trace_id)->kept) {
      ++q.kept;
      q.kept_correct += t.correct ? 1 : 0;
    }
    by_split[t.split].push_back(&t);
    all.push_back(&t);
  }
  for (auto& [id, q] : qrows) {
    if (q.kept > 0) q.retained_accuracy = static_cast<double>(q.kept_correct) / static_cast<double>(q.kept);
    report.questions.push_back(q);
  }
  for (const auto& [name, ts] : by_split) {
    report.splits.push_back(detail::split_row(name, ts, by_trace, report.questions));
  }
  if (by_split.size() != 1 || by_split.begin()->first != "all") {
    report.splits.push_back(detail::split_row("all", all, by_trace, report.questions));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Leave-one-question evaluation

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline Matrix stack_rows(const std::vector<Vector>& rows, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

struct TrainingRow {
  const Trace* trace = nullptr;
  Vector x;
  bool pinned = false;  // never evaluated by the policy, always kept
};

/// Fits standardization, logistic coefficients and the cutoff on training
/// rows. Every row must come from a question other than the held-out one.
inline FilterModel train_model(const std::vector<TrainingRow>& rows, std::vector<std::string> names,
                               const std::string& held_out, const FilterConfig& config) {
  const auto k = static_cast<Eigen::Index>(names.size());
  FilterModel model;
  model.feature_names = std::move(names);
  std::vector<Vector> xs;
  std::vector<double> ys;
  for (const auto& r : rows) {
    if (r.trace->question_id == held_out) throw LeakageError("held-out question " + held_out + " in training rows");
    model.trained_on.insert(r.trace->question_id);
    if (r.pinned) continue;
    xs.push_back(r.x);
    ys.push_back(r.trace->correct ? 0.0 : 1.0);
  }
  if (xs.empty()) {
    model.mu = Vector::Zero(k);
    model.sigma = Vector::Zero(k);
    model.beta = Vector::Zero(k + 1);
  } else {
    const Matrix x = stack_rows(xs, k);
    const auto s = fit_standardization(x);
    model.mu = s.mu;
    model.sigma = s.sigma;
    const Vector y = Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    model.beta = fit_logistic(standardize_rows(x, s), y, config.ridge, config.logistic).beta;
  }
  std::vector<ScoredOutcome> scored;
  std::vector<PinnedOutcome> pinned;
  for (const auto& r : rows) {
    if (r.pinned) {
      pinned.push_back({r.trace->question_id, r.trace->correct});
    } else {
      scored.push_back({r.trace->question_id, model.score(r.x), r.trace->correct});
    }
  }
  model.cutoff = (scored.empty() && pinned.empty()) ? 1.0 : select_cutoff(scored, pinned).cutoff;
  return model;
}

inline std::vector<std::string> completed_feature_names(const FilterSpec& spec) {
  switch (spec.kind) {
    case FilterKind::kCompletedHybrid: return hybrid_feature_names();
    case FilterKind::kBurstOnly: return burst_feature_names();
    case FilterKind::kRateOnly: return {"rate_20"};
    case FilterKind::kCountOnly: return {"count_20"};
    case FilterKind::kSingleSignal: return {spec.signal + "_" + format_general(spec.signal_tau)};
    default: throw DomainError("not a completed-trace filter");
  }
}

inline bool needs_direction(const FilterSpec& spec) {
  return spec.kind == FilterKind::kCompletedHybrid ||
         (spec.kind == FilterKind::kSingleSignal && spec.signal == "profile_similarity");
}

inline double direction_tau(const FilterSpec& spec) {
  return spec.kind == FilterKind::kCompletedHybrid ? 50.0 : spec.signal_tau;
}

}  // namespace detail

/// Feature vector of a completed trace for a learned completed-trace filter.
/// `direction` must exclude the trace's question when the filter uses
/// profile similarity.
inline Vector completed_features(const Trace& trace, const FilterSpec& spec, const FilterConfig& config,
                                 const DirectionVector* direction) {
  switch (spec.kind) {
    case FilterKind::kCompletedHybrid: {
      if (direction != nullptr) return hybrid_features(trace, *direction, config.gap);
      // No direction available: similarity falls back to 0.
      DirectionVector empty;
      empty.excluded_question = trace.question_id;
      return hybrid_features(trace, empty, config.gap);
    }
    case FilterKind::kBurstOnly: return burst_only_features(trace, config.gap);
    case FilterKind::kRateOnly: {
      Vector x(1);
      x << rate_only_feature(trace);
      return x;
    }
    case FilterKind::kCountOnly: {
      Vector x(1);
      x << count_only_feature(trace);
      return x;
    }
    case FilterKind::kSingleSignal: {
      Vector x(1);
      if (spec.signal == "profile_similarity" && direction == nullptr) {
        x << 0.0;
      } else {
        x << single_signal_feature(trace, spec.signal, spec.signal_tau, config.gap, direction);
      }
      return x;
    }
    default: throw DomainError("not a completed-trace filter");
  }
}

namespace detail {

// Direction vector for `trace` with its own question and `also_held_out`
// removed, or nullopt when a class runs out of traces.
inline std::optional<DirectionVector> try_direction(const DirectionBuilder& builder, const Trace& trace,
                                                    const std::string& also_held_out) {
  try {
    return builder.build(trace.question_id, also_held_out.empty() ? std::set<std::string>{}
                                                                   : std::set<std::string>{also_held_out});
  } catch (const DomainError&) {
    return std::nullopt;
  }
}

inline EvalReport evaluate_hard_cutoff(const Corpus& corpus, const FilterSpec& spec) {
  std::vector<Decision> decisions;
  for (const auto& t : corpus.traces) {
    const bool keep = hard_cutoff(t, spec.depth);
    decisions.push_back({t.trace_id, t.question_id, keep, keep ? "keep" : "drop", std::nullopt, kNoFold, {}});
  }
  auto report = retained_metrics(decisions, corpus.traces);
  report.method = spec.label();
  if (spec.depth != kNoLimit) report.depth_or_limit = spec.depth;
  return report;
}

inline std::vector<std::vector<const Trace*>> traces_by_question(const Corpus& corpus,
                                                                 std::vector<std::string>& question_ids) {
  question_ids.assign(corpus.questions.begin(), corpus.questions.end());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < question_ids.size(); ++i) index[question_ids[i]] = i;
  std::vector<std::vector<const Trace*>> out(question_ids.size());
  for (const auto& t : corpus.traces) out[index.at(t.question_id)].push_back(&t);
  return out;
}

inline void audit_leakage(const EvalReport& report) {
  for (const auto& d : report.decisions) {
    if (d.fold == kNoFold) continue;
    if (report.folds.at(d.fold).trained_on.count(d.question_id) != 0) {
      throw LeakageError("decision for trace " + d.trace_id + " used a model trained on its question");
    }
  }
}

}  // namespace detail

/// Leave-one-question evaluation of a completed-trace or single-checkpoint
/// prefix filter. For each question, standardization, model, cutoff and any
/// reference profile are fitted on the other questions only.
inline EvalReport loqo_evaluate(const Corpus& corpus, const FilterSpec& spec, const FilterConfig& config = {}) {
  if (!spec.learned()) return detail::evaluate_hard_cutoff(corpus, spec);
  if (corpus.questions.size() < 2) throw DomainError("learned filters need at least two questions");
  if (spec.prefix() && spec.depth <= 0) throw DomainError("checkpoint depth must be positive");

  std::vector<std::string> qids;
  const auto by_question = detail::traces_by_question(corpus, qids);
  std::optional<DirectionBuilder> builder;
  if (!spec.prefix() && detail::needs_direction(spec)) builder.emplace(corpus.traces, detail::direction_tau(spec));

  // Direction-free features are shared across folds.
  std::map<const Trace*, Vector> shared;
  if (!builder) {
    for (const auto& t : corpus.traces) {
      if (spec.kind == FilterKind::kOnlinePrefix) {
        shared[&t] = prefix_features(t, spec.depth, config.gap);
      } else if (spec.kind == FilterKind::kPrefixRateOnly) {
        shared[&t] = prefix_rate_features(t, spec.depth);
      } else {
        shared[&t] = completed_features(t, spec, config, nullptr);
      }
    }
  }
  const auto names = spec.kind == FilterKind::kOnlinePrefix   ? prefix_feature_names()
                     : spec.kind == FilterKind::kPrefixRateOnly ? std::vector<std::string>{"rate_20"}
                                                                : detail::completed_feature_names(spec);

  std::vector<Fold> folds(qids.size());
  std::vector<std::vector<Decision>> fold_decisions(qids.size());
  detail::parallel_for(qids.size(), config.threads, [&](std::size_t f) {
    const auto& held_out = qids[f];
    std::vector<detail::TrainingRow> rows;
    for (std::size_t g = 0; g < qids.size(); ++g) {
      if (g == f) continue;
      for (const Trace* t : by_question[g]) {
        detail::TrainingRow row{t, {}, false};
        if (builder) {
          const auto dir = detail::try_direction(*builder, *t, held_out);
          row.x = completed_features(*t, spec, config, dir ? &*dir : nullptr);
        } else {
          row.x = shared.at(t);
        }
        if (spec.prefix()) {
          row.pinned = t->total_words <= spec.depth || guard_holds(*t, spec.depth, config);
        }
        rows.push_back(std::move(row));
      }
    }
    FilterModel model = detail::train_model(rows, names, held_out, config);

    auto& out = fold_decisions[f];
    for (const Trace* t : by_question[f]) {
      check_not_trained_on(*t, model);
      Decision d{t->trace_id, t->question_id, true, {}, std::nullopt, f, {}};
      if (spec.prefix()) {
        if (t->total_words <= spec.depth) {
          d.action = "continue";  // finished before the checkpoint
        } else {
          double p = 0.0;
          const auto action = online_decide(*t, spec.depth, model, config, &p);
          d.score = p;
          d.kept = action == OnlineAction::kContinue;
          d.action = std::string(to_string(action));
          if (!d.kept) d.exit_depth = spec.depth;
        }
      } else {
        Vector x;
        if (builder) {
          const auto dir = detail::try_direction(*builder, *t, {});
          x = completed_features(*t, spec, config, dir ? &*dir : nullptr);
        } else {
          x = shared.at(t);
        }
        d.score = model.score(x);
        d.kept = *d.score < model.cutoff;
        d.action = d.kept ? "keep" : "drop";
      }
      out.push_back(std::move(d));
    }
    folds[f].held_out_question = held_out;
    folds[f].trained_on = model.trained_on;
    folds[f].models.push_back(std::move(model));
  });

  std::vector<Decision> decisions;
  for (auto& fd : fold_decisions) {
    for (auto& d : fd) decisions.push_back(std::move(d));
  }
  auto report = retained_metrics(decisions, corpus.traces);
  report.method = spec.label();
  if (spec.prefix()) report.depth_or_limit = spec.depth;
  report.folds = std::move(folds);
  detail::audit_leakage(report);
  return report;
}

/// Multi-checkpoint replay of the prefix policy: one model per checkpoint per
/// fold, and each trace exits at the first checkpoint that flags it.
inline EvalReport loqo_evaluate_sequential(const Corpus& corpus, const FilterConfig& config = {}) {
  if (corpus.questions.size() < 2) throw DomainError("learned filters need at least two questions");
  auto checkpoints = config.checkpoints;
  std::sort(checkpoints.begin(), checkpoints.end());
  if (checkpoints.empty() || checkpoints.front() <= 0) throw DomainError("checkpoints must be positive");

  std::vector<std::string> qids;
  const auto by_question = detail::traces_by_question(corpus, qids);
  std::vector<std::map<const Trace*, Vector>> features(checkpoints.size());
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    for (const auto& t : corpus.traces) features[c][&t] = prefix_features(t, checkpoints[c], config.gap);
  }

  std::vector<Fold> folds(qids.size());
  std::vector<std::vector<Decision>> fold_decisions(qids.size());
  detail::parallel_for(qids.size(), config.threads, [&](std::size_t f) {
    const auto& held_out = qids[f];
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
      std::vector<detail::TrainingRow> rows;
      for (std::size_t g = 0; g < qids.size(); ++g) {
        if (g == f) continue;
        for (const Trace* t : by_question[g]) {
          const bool pinned = t->total_words <= checkpoints[c] || guard_holds(*t, checkpoints[c], config);
          rows.push_back({t, features[c].at(t), pinned});
        }
      }
      folds[f].models.push_back(detail::train_model(rows, prefix_feature_names(), held_out, config));
    }
    folds[f].held_out_question = held_out;
    folds[f].trained_on = folds[f].models.front().trained_on;

    for (const Trace* t : by_question[f]) {
      Decision d{t->trace_id, t->question_id, true, "continue", std::nullopt, f, {}};
      for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        if (t->total_words <= checkpoints[c]) break;
        double p = 0.0;
        const auto action = online_decide(*t, checkpoints[c], folds[f].models[c], config, &p);
        d.score = p;
        if (action == OnlineAction::kFlag) {
          d.kept = false;
          d.action = "flag";
          d.exit_depth = checkpoints[c];
          break;
        }
      }
      fold_decisions[f].push_back(std::move(d));
    }
  });

  std::vector<Decision> decisions;
  for (auto& fd : fold_decisions) {
    for (auto& d : fd) decisions.push_back(std::move(d));
  }
  auto report = retained_metrics(decisions, corpus.traces);
  report.method = "online-sequential";
  report.folds = std::move(folds);
  detail::audit_leakage(report);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["method"] = r.method;
  j["depth_or_limit"] = r.depth_or_limit ? nlohmann::json(*r.depth_or_limit) : nlohmann::json(nullptr);
  auto splits = nlohmann::json::array();
  for (const auto& s : r.splits) {
    splits.push_back({{"split", s.split},
                      {"traces", s.traces},
                      {"dropped", s.dropped},
                      {"baseline_accuracy", s.baseline_accuracy},
                      {"retained_accuracy_pooled", opt(s.retained_accuracy_pooled)},
                      {"retained_accuracy_per_question", opt(s.retained_accuracy_per_question)},
                      {"drop_rate", s.drop_rate},
                      {"word_save", s.word_save}});
  }
  j["splits"] = std::move(splits);
  auto questions = nlohmann::json::array();
  for (const auto& q : r.questions) {
    questions.push_back({{"question_id", q.question_id},
                         {"split", q.split},
                         {"traces", q.traces},
                         {"kept", q.kept},
                         {"kept_correct", q.kept_correct},
                         {"retained_accuracy", opt(q.retained_accuracy)}});
  }
  j["questions"] = std::move(questions);
  auto decisions = nlohmann::json::array();
  for (const auto& d : r.decisions) {
    nlohmann::json dj{{"trace_id", d.trace_id}, {"question_id", d.question_id}, {"kept", d.kept}, {"action", d.action}};
    dj["score"] = opt(d.score);
    dj["fold"] = d.fold == kNoFold ? nlohmann::json(nullptr) : nlohmann::json(d.fold);
    if (d.exit_depth) dj["exit_depth"] = *d.exit_depth;
    decisions.push_back(std::move(dj));
  }
  j["decisions"] = std::move(decisions);
  auto folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    auto models = nlohmann::json::array();
    for (const auto& m : f.models) models.push_back(model_to_json(m));
    folds.push_back({{"held_out_question", f.held_out_question}, {"models", std::move(models)}});
  }
  j["folds"] = std::move(folds);
  return j;
}

inline void write_eval_csv_header(std::ostream& out) {
  out << "method,split,depth_or_limit,retained_acc_pooled,retained_acc_perq,drop_rate,word_save\n";
}

/// One row per split; rates are percentages with one decimal.
inline void write_eval_csv_rows(std::ostream& out, const EvalReport& r) {
  auto pct = [](const std::optional<double>& v) { return v ? format_percent(*v) : std::string{}; };
  for (const auto& s : r.splits) {
    out << csv_row({r.method, s.split, r.depth_or_limit ? std::to_string(*r.depth_or_limit) : std::string{},
                    pct(s.retained_accuracy_pooled), pct(s.retained_accuracy_per_question),
                    format_percent(s.drop_rate), format_percent(s.word_save)});
  }
}

}  // namespace rtrace
