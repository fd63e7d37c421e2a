// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "rtrace/cli.hpp"
#include "rtrace/events.hpp"
#include "rtrace/filters.hpp"
#include "rtrace/profiles.hpp"
#include "rtrace/stats.hpp"
#include "rtrace/synth.hpp"

using namespace rtrace;
namespace fs = std::filesystem;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Result chi_square_anchor() {
  const auto start = Clock::now();
  const double a = chi_square_tail(16.133, 3);
  const double b = chi_square_tail(40.969, 3);
  const double elapsed = seconds_since(start);
  const bool ok_a = std::abs(a - 0.001065) <= 1e-6;
  const bool ok_b = std::abs(b - 6.64e-9) <= 0.02 * 6.64e-9;
  return {ok_a && ok_b && elapsed < 1e-3,
          "p(16.133)=" + fmt("%.7f", a) + " p(40.969)=" + fmt("%.4g", b) + " in " + fmt("%.1f", elapsed * 1e6) + "us"};
}

// Brute force: cut wherever consecutive depths are more than `gap` apart,
// then slice the list at the cuts.
std::vector<std::vector<Words>> split_at_gaps(const std::vector<Words>& d, Words gap) {
  std::vector<std::size_t> cuts{0};
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (d[i] - d[i - 1] > gap) cuts.push_back(i);
  }
  cuts.push_back(d.size());
  std::vector<std::vector<Words>> out;
  if (d.empty()) return out;
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    out.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(cuts[c]), d.begin() + static_cast<std::ptrdiff_t>(cuts[c + 1]));
  }
  return out;
}

Result burst_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<int> len(0, 50);
  std::uniform_int_distribution<Words> step(1, 1500), gaps(1, 1200);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 10000; ++rep) {
    std::vector<Words> d;
    Words cur = 0;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) d.push_back(cur += step(rng));
    const Words g = gaps(rng);
    if (burst_partition(d, g).bursts != split_at_gaps(d, g)) ++mismatches;
  }
  const double elapsed = seconds_since(start);
  return {mismatches == 0 && elapsed < 5.0,
          std::to_string(mismatches) + " mismatches over 10000 lists in " + fmt("%.2f", elapsed) + "s"};
}

Result zero_event_rule() {
  std::mt19937_64 rng(303);
  std::size_t violations = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto t = fixtures::quiet_trace(rng, 20.0);
    for (double tau : {20.0, 30.0, 50.0, 70.0}) {
      for (Words g : {250, 500, 1000}) {
        if (!(trace_burst_stats(t, tau, g) == BurstStats{})) ++violations;
      }
    }
  }
  return {violations == 0, std::to_string(violations) + " non-zero records over 1000 event-free traces"};
}

FilterModel random_prefix_model(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FilterModel m;
  m.feature_names = prefix_feature_names();
  m.mu.resize(6);
  m.sigma.resize(6);
  m.beta.resize(7);
  const double scale[6] = {2.0, 0.5, 1.0, 2.0, 3000.0, 3000.0};
  for (int j = 0; j < 6; ++j) {
    m.mu(j) = scale[j] * u(rng);
    m.sigma(j) = scale[j] * (0.1 + u(rng));
  }
  for (int j = 0; j < 7; ++j) m.beta(j) = n(rng);
  m.cutoff = u(rng);
  m.trained_on = {"elsewhere"};
  return m;
}

std::vector<fixtures::Seg> random_segs(std::mt19937_64& rng, std::size_t count) {
  std::uniform_int_distribution<Words> words(1, 50);
  std::uniform_real_distribution<double> score(0.0, 100.0);
  std::bernoulli_distribution unscored(0.1);
  std::vector<fixtures::Seg> segs;
  for (std::size_t i = 0; i < count; ++i) {
    segs.push_back({words(rng), unscored(rng) ? std::nullopt : std::optional<double>(std::round(score(rng)))});
  }
  return segs;
}

Result prefix_causality() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> nseg(100, 900), tail(0, 400);
  std::size_t violations = 0, checks = 0, mutated = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto segs = random_segs(rng, nseg(rng));
    const auto original = fixtures::make_trace(segs, rep % 2 == 0, "q1", "t");
    const auto model = random_prefix_model(rng);
    for (Words d : {2000, 5000, 8000, 12000}) {
      // Keep every segment starting before d, replace the rest.
      std::vector<fixtures::Seg> changed;
      Words depth = 0;
      for (const auto& s : segs) {
        if (depth >= d) break;
        changed.push_back(s);
        depth += s.words;
      }
      // A trace that ends before d has nothing at or beyond d to mutate.
      if (depth >= d) {
        ++mutated;
        for (const auto& s : random_segs(rng, tail(rng))) changed.push_back(s);
      }
      const auto mutated = fixtures::make_trace(changed, rep % 2 == 0, "q1", "t");
      ++checks;
      double pa = 0.0, pb = 0.0;
      const bool same_features = prefix_features(original, d) == prefix_features(mutated, d);
      const bool same_action = online_decide(original, d, model, {}, &pa) == online_decide(mutated, d, model, {}, &pb);
      if (!same_features || !same_action || pa != pb) ++violations;
    }
  }
  return {violations == 0, std::to_string(violations) + " violations over " + std::to_string(checks) + " checks (" +
                               std::to_string(mutated) + " with a mutated suffix)"};
}

Result early_guard() {
  SynthConfig sc;
  sc.seed = 55;
  const auto corpus = synth_corpus(sc);
  std::vector<std::string> qids(corpus.questions.begin(), corpus.questions.end());
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<std::size_t> pick_q(0, qids.size() - 1), pick_t(0, corpus.traces.size() - 1);
  std::uniform_real_distribution<double> log_ridge(-4.0, 0.0);
  FilterConfig config;
  std::size_t guarded = 0, flagged = 0, would_flag = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const auto& held_out = qids[pick_q(rng)];
    config.ridge = std::pow(10.0, log_ridge(rng));
    std::vector<detail::TrainingRow> rows;
    while (rows.size() < 300) {
      const Trace& t = corpus.traces[pick_t(rng)];
      if (t.question_id == held_out) continue;
      const bool pinned = t.total_words <= 2000 || guard_holds(t, 2000, config);
      rows.push_back({&t, prefix_features(t, 2000, config.gap), pinned});
    }
    auto model = detail::train_model(rows, prefix_feature_names(), held_out, config);
    // Half the models get a zero cutoff, which would flag every trace without the guard.
    if (rep % 2 == 1) model.cutoff = 0.0;
    for (const auto& t : corpus.traces) {
      if (model.trained_on.count(t.question_id) != 0 || t.total_words <= 2000) continue;
      if (event_count(t, 20.0, Words{2000}) >= 2) continue;
      ++guarded;
      double p = 0.0;
      if (online_decide(t, 2000, model, config, &p) == OnlineAction::kFlag) ++flagged;
      if (p >= model.cutoff) ++would_flag;
    }
  }
  return {flagged == 0 && guarded > 0,
          std::to_string(flagged) + " flagged of " + std::to_string(guarded) + " guarded decisions (" +
              std::to_string(would_flag) + " at or above the cutoff) over 50 models"};
}

struct Problem {
  Matrix z;
  Vector y;
};

Problem random_problem(std::mt19937_64& rng, Eigen::Index n, Eigen::Index k) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector truth(k + 1);
  for (Eigen::Index j = 0; j <= k; ++j) truth(j) = nd(rng);
  Problem p{Matrix(n, k), Vector(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    double eta = truth(0);
    for (Eigen::Index j = 0; j < k; ++j) {
      p.z(i, j) = nd(rng);
      eta += truth(j + 1) * p.z(i, j);
    }
    p.y(i) = u(rng) < sigmoid(eta) ? 1.0 : 0.0;
  }
  return p;
}

Result logistic_fit() {
  std::mt19937_64 rng(606);
  std::uniform_int_distribution<Eigen::Index> dims(1, 6);
  std::normal_distribution<double> nd(0.0, 0.7);
  double worst_grad = 0.0, worst_fd = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index k = dims(rng);
    const auto p = random_problem(rng, 400, k);
    const double ridge = rep % 2 == 0 ? 1e-4 : 0.0;
    const auto fit = fit_logistic(p.z, p.y, ridge);
    worst_grad = std::max(worst_grad, penalized_gradient(p.z, p.y, fit.beta, ridge).lpNorm<Eigen::Infinity>());

    Vector beta(k + 1);
    for (Eigen::Index j = 0; j <= k; ++j) beta(j) = nd(rng);
    const Vector g = penalized_gradient(p.z, p.y, beta, ridge);
    for (Eigen::Index j = 0; j <= k; ++j) {
      const double h = 1e-5;
      Vector up = beta, down = beta;
      up(j) += h;
      down(j) -= h;
      const double fd =
          (penalized_log_likelihood(p.z, p.y, up, ridge) - penalized_log_likelihood(p.z, p.y, down, ridge)) / (2 * h);
      worst_fd = std::max(worst_fd, std::abs(g(j) - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  Matrix z(10, 1);
  z << -3, -2, -1.5, -1, -0.2, 0.3, 0.9, 1.4, 2, 2.5;
  Vector y(10);
  y << 0, 0, 0, 0, 0, 1, 1, 1, 1, 1;
  const auto fit = fit_logistic(z, y, 1e-4);
  int right = 0;
  for (Eigen::Index i = 0; i < 10; ++i) right += ((sigmoid(fit.beta(0) + fit.beta(1) * z(i, 0)) >= 0.5) == (y(i) == 1.0));
  const double acc = right / 10.0;
  return {worst_grad <= 1e-8 && worst_fd <= 1e-5 && acc == 1.0,
          "max |grad| " + fmt("%.2e", worst_grad) + ", max fd error " + fmt("%.2e", worst_fd) +
              ", separable accuracy " + fmt("%.3f", acc)};
}

Result lr_null_calibration() {
  const auto start = Clock::now();
  std::mt19937_64 rng(1007);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::string> full_names{"burden", "noise_a", "noise_b", "noise_c"};
  const std::vector<std::string> reduced_names{"burden"};
  std::vector<double> ps;
  for (int rep = 0; rep < 200; ++rep) {
    Matrix x(2000, 4);
    Vector y(2000);
    for (Eigen::Index i = 0; i < 2000; ++i) {
      for (Eigen::Index j = 0; j < 4; ++j) x(i, j) = nd(rng);
      y(i) = u(rng) < sigmoid(-0.4 + 0.9 * x(i, 0)) ? 1.0 : 0.0;
    }
    const auto r = lr_test(x, full_names, reduced_names, y);
    if (r.df != 3) return {false, "df " + std::to_string(r.df)};
    ps.push_back(r.p_value);
  }
  std::sort(ps.begin(), ps.end());
  double ks = 0.0;
  const double n = static_cast<double>(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ks = std::max({ks, static_cast<double>(i + 1) / n - ps[i], ps[i] - static_cast<double>(i) / n});
  }
  const double elapsed = seconds_since(start);
  return {ks < 0.1 && elapsed < 60.0, "KS distance " + fmt("%.4f", ks) + " over 200 replicates in " +
                                          fmt("%.1f", elapsed) + "s"};
}

Result leakage_audit() {
  SynthConfig sc;
  sc.seed = 808;
  sc.questions = 20;
  sc.traces_per_question = 10;
  const auto corpus = synth_corpus(sc);
  std::size_t checked = 0, leaks = 0;
  std::vector<EvalReport> reports;
  for (const char* m : {"hybrid", "burst", "rate", "count", "single:profile_similarity@50", "single:max_burst@20",
                        "online:2000", "online:5000", "online-rate:8000"}) {
    reports.push_back(loqo_evaluate(corpus, FilterSpec::parse(m)));
  }
  reports.push_back(loqo_evaluate_sequential(corpus));
  for (const auto& r : reports) {
    for (const auto& d : r.decisions) {
      ++checked;
      if (d.fold == kNoFold || r.folds.at(d.fold).trained_on.count(d.question_id) != 0) ++leaks;
    }
  }
  return {leaks == 0 && checked == reports.size() * corpus.traces.size(),
          std::to_string(leaks) + " leaking decisions of " + std::to_string(checked) + " across " +
              std::to_string(reports.size()) + " filters"};
}

Result conservation() {
  std::mt19937_64 rng(909);
  std::size_t violations = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto t = fixtures::random_trace(rng, 300, 60);
    for (double tau : {10.0, 20.0, 50.0, 70.0}) {
      const auto p = bin_profile(t, tau);
      std::size_t c = 0;
      for (auto v : p.counts) c += v;
      if (c != event_count(t, tau)) ++violations;
      const auto starts = burst_start_profile(t, tau, 500);
      std::size_t s = 0;
      for (auto v : starts) s += v;
      if (s != trace_burst_stats(t, tau, 500).multi_bursts) ++violations;
    }
  }
  return {violations == 0, std::to_string(violations) + " violations over 1000 traces"};
}

Result golden_fixture() {
  const fs::path dir = fs::path(RTRACE_SOURCE_DIR) / "tests" / "golden";
  const std::string corpus = (dir / "corpus.jsonl").string();
  const auto features = fs::temp_directory_path() / "rtrace_acceptance_features.csv";
  struct Case {
    std::vector<std::string> args;
    std::string expected;
    fs::path file;  // output file instead of stdout when set
  };
  const std::vector<Case> cases{
      {{"bursts", "--in", corpus, "--tau", "20", "--gap", "500"}, "bursts.csv", {}},
      {{"timing", "--in", corpus}, "timing.csv", {}},
      {{"profiles", "--in", corpus, "--taus", "20,50", "--min-support-correct", "35", "--min-support-wrong", "42"},
       "profiles.csv",
       {}},
      {{"profiles", "--in", corpus, "--features", features.string()}, "features.csv", features},
      {{"filter-eval", "--in", corpus, "--methods", "hard:3000,hard:4500,hard:none"}, "eval.csv", {}},
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::size_t mismatched = 0;
  std::string names;
  for (int round = 0; round < 2; ++round) {
    for (const auto& c : cases) {
      std::ostringstream out, err;
      const int code = cli::run_command(c.args, out, err);
      const std::string got = c.file.empty() ? out.str() : slurp(c.file);
      if (code != 0 || got != slurp(dir / "expected" / c.expected)) {
        ++mismatched;
        names += " " + c.expected;
      }
    }
  }
  fs::remove(features);
  return {mismatched == 0, mismatched == 0 ? "5 outputs byte-identical on 2 runs" : "mismatch:" + names};
}

Result directional_harness() {
  const auto corpus = synth_corpus(SynthConfig{});
  int holds = 0, total = 0;
  for (double tau : {20.0, 50.0}) {
    for (Words g : {250, 500, 1000}) {
      const auto m = class_means(corpus.traces, tau, g);
      if (!m.correct || !m.wrong) return {false, "a class is missing"};
      holds += m.wrong->multi_bursts > m.correct->multi_bursts;
      holds += m.wrong->multi_share > m.correct->multi_share;
      holds += m.wrong->max_burst > m.correct->max_burst;
      total += 3;
    }
  }
  return {holds == total, std::to_string(holds) + "/" + std::to_string(total) + " comparisons wrong > correct"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Result()>>> criteria{
      {"AC1 chi-square anchor", chi_square_anchor},
      {"AC2 burst-oracle equivalence", burst_oracle},
      {"AC3 zero-event rule", zero_event_rule},
      {"AC4 prefix causality", prefix_causality},
      {"AC5 early guard", early_guard},
      {"AC6 logistic fit", logistic_fit},
      {"AC7 LR null calibration", lr_null_calibration},
      {"AC8 leakage audit", leakage_audit},
      {"AC9 conservation", conservation},
      {"AC10 golden fixture", golden_fixture},
      {"AC11 directional harness", directional_harness},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Result r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failures += r.pass ? 0 : 1;
    std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", name.c_str(), r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
