#pragma once

// Standardization, logistic scoring, cutoff selection and likelihood-ratio
// testing for the trace filters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rtrace/error.hpp"

namespace rtrace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Standardization

struct Standardization {
  Vector mu;
  Vector sigma;
};

/// Column means and population standard deviations.
inline Standardization fit_standardization(const Matrix& x) {
  if (x.rows() == 0) throw DomainError("standardization needs at least one row");
  Standardization s;
  s.mu = x.colwise().mean().transpose();
  s.sigma.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.mu(j)).square().mean();
    s.sigma(j) = std::sqrt(var);
  }
  return s;
}

/// z_j = (x_j - mu_j) / sigma_j, with z_j = 0 for constant features.
inline Vector standardize(const Vector& x, const Vector& mu, const Vector& sigma) {
  if (x.size() != mu.size() || x.size() != sigma.size()) throw DomainError("feature dimension mismatch");
  Vector z(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) z(j) = sigma(j) > 0.0 ? (x(j) - mu(j)) / sigma(j) : 0.0;
  return z;
}

inline Matrix standardize_rows(const Matrix& x, const Standardization& s) {
  if (x.cols() != s.mu.size()) throw DomainError("feature dimension mismatch");
  Matrix z(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) z.row(i) = standardize(x.row(i).transpose(), s.mu, s.sigma).transpose();
  return z;
}

// ---------------------------------------------------------------------------
// Logistic model

inline double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

// log(1 + e^eta) without overflow.
inline double softplus(double eta) { return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

struct LogisticOptions {
  double gradient_tolerance = 1e-8;
  int max_iterations = 10000;
};

namespace detail {

inline Matrix with_intercept(const Matrix& z) {
  Matrix a(z.rows(), z.cols() + 1);
  a.col(0).setOnes();
  a.rightCols(z.cols()) = z;
  return a;
}

inline void check_design(const Matrix& z, const Vector& y) {
  if (z.rows() != y.size()) throw DomainError("feature rows and labels differ in length");
  if (!z.allFinite()) throw DomainError("non-finite feature value");
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) throw DomainError("labels must be 0 or 1");
  }
}

}  // namespace detail

/// Bernoulli log-likelihood of labels y under intercept-first coefficients beta.
inline double log_likelihood(const Matrix& z, const Vector& y, const Vector& beta) {
  const Vector eta = detail::with_intercept(z) * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - softplus(eta(i));
  return ll;
}

/// Log-likelihood minus ridge * sum of squared non-intercept coefficients.
inline double penalized_log_likelihood(const Matrix& z, const Vector& y, const Vector& beta, double ridge) {
  return log_likelihood(z, y, beta) - ridge * beta.tail(beta.size() - 1).squaredNorm();
}

inline Vector penalized_gradient(const Matrix& z, const Vector& y, const Vector& beta, double ridge) {
  const Matrix a = detail::with_intercept(z);
  const Vector eta = a * beta;
  Vector resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) resid(i) = y(i) - sigmoid(eta(i));
  Vector g = a.transpose() * resid;
  g.tail(g.size() - 1) -= 2.0 * ridge * beta.tail(beta.size() - 1);
  return g;
}

struct LogisticFit {
  Vector beta;  // intercept first
  double log_likelihood = 0.0;
  double gradient_norm = 0.0;  // infinity norm at beta
  int iterations = 0;
};

/// Maximizes the ridge-penalized Bernoulli log-likelihood by damped Newton
/// steps from beta = 0. Stops once the gradient infinity-norm reaches the
/// tolerance; throws ConvergenceError if the iteration cap is hit first.
inline LogisticFit fit_logistic(const Matrix& z, const Vector& y, double ridge, const LogisticOptions& opts = {}) {
  detail::check_design(z, y);
  if (ridge < 0.0) throw DomainError("ridge penalty must be non-negative");
  const Matrix a = detail::with_intercept(z);
  const Eigen::Index k = a.cols();
  Vector beta = Vector::Zero(k);
  Vector penalty = Vector::Constant(k, 2.0 * ridge);
  penalty(0) = 0.0;

  auto objective = [&](const Vector& b) { return penalized_log_likelihood(z, y, b, ridge); };
  double f = objective(beta);
  LogisticFit fit;
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Vector eta = a * beta;
    Vector resid(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double p = sigmoid(eta(i));
      resid(i) = y(i) - p;
      w(i) = p * (1.0 - p);
    }
    Vector g = a.transpose() * resid - penalty.cwiseProduct(beta);
    const double gnorm = g.lpNorm<Eigen::Infinity>();
    if (gnorm <= opts.gradient_tolerance) {
      fit.beta = beta;
      fit.log_likelihood = log_likelihood(z, y, beta);
      fit.gradient_norm = gnorm;
      fit.iterations = it;
      return fit;
    }
    Matrix h = a.transpose() * w.asDiagonal() * a;
    h.diagonal() += penalty;
    // Tiny damping keeps the solve defined for constant columns and
    // saturated fits.
    h.diagonal().array() += 1e-12 * (1.0 + h.diagonal().maxCoeff());
    const Vector step = h.ldlt().solve(g);
    const double slope = g.dot(step);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      const Vector cand = beta + t * step;
      const double fc = objective(cand);
      if (std::isfinite(fc) && fc >= f + 1e-4 * t * slope - 1e-12 * (1.0 + std::abs(f))) {
        beta = cand;
        f = fc;
        moved = true;
        break;
      }
    }
    if (!moved) {
      // No ascent direction is resolvable at double precision.
      throw ConvergenceError("logistic fit stalled", gnorm);
    }
  }
  const double gnorm = penalized_gradient(z, y, beta, ridge).lpNorm<Eigen::Infinity>();
  if (gnorm <= opts.gradient_tolerance) {
    fit.beta = beta;
    fit.log_likelihood = log_likelihood(z, y, beta);
    fit.gradient_norm = gnorm;
    fit.iterations = opts.max_iterations;
    return fit;
  }
  throw ConvergenceError("logistic fit did not converge", gnorm);
}

/// A fitted keep/drop filter: standardization, logistic coefficients and the
/// decision cutoff. A trace is kept when its wrong-trace score is below the
/// cutoff.
struct FilterModel {
  std::vector<std::string> feature_names;
  Vector mu;
  Vector sigma;
  Vector beta;  // intercept first
  double cutoff = 1.0;
  std::set<std::string> trained_on;

  double score(const Vector& x) const {
    if (x.size() != static_cast<Eigen::Index>(feature_names.size())) throw DomainError("feature dimension mismatch");
    const Vector z = standardize(x, mu, sigma);
    return sigmoid(beta(0) + beta.tail(beta.size() - 1).dot(z));
  }

  bool keeps(const Vector& x) const { return score(x) < cutoff; }
};

inline nlohmann::json model_to_json(const FilterModel& m) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return nlohmann::json{{"feature_names", m.feature_names},
                        {"mu", vec(m.mu)},
                        {"sigma", vec(m.sigma)},
                        {"beta", vec(m.beta)},
                        {"cutoff", m.cutoff},
                        {"trained_on", m.trained_on}};
}

inline FilterModel model_from_json(const nlohmann::json& j) {
  auto vec = [&](const char* key) {
    const auto v = j.at(key).get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  FilterModel m;
  try {
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.mu = vec("mu");
    m.sigma = vec("sigma");
    m.beta = vec("beta");
    m.cutoff = j.at("cutoff").get<double>();
    m.trained_on = j.at("trained_on").get<std::set<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid model record: ") + e.what());
  }
  const auto k = static_cast<Eigen::Index>(m.feature_names.size());
  if (m.mu.size() != k || m.sigma.size() != k || m.beta.size() != k + 1) {
    throw ValidationError("model dimensions disagree with feature_names");
  }
  if ((m.sigma.array() < 0.0).any()) throw ValidationError("negative standardization scale");
  return m;
}

// ---------------------------------------------------------------------------
// Cutoff selection

struct ScoredOutcome {
  std::string question_id;
  double score = 0.0;
  bool correct = false;
};

// A trace the policy never evaluates, so it is kept under every cutoff.
struct PinnedOutcome {
  std::string question_id;
  bool correct = false;
};

struct CutoffChoice {
  double cutoff = 1.0;
  double objective = 0.0;  // mean per-question retained accuracy
};

/// Chooses the cutoff maximizing mean per-question retained accuracy over the
/// candidates {0, 1} and every midpoint between consecutive distinct scores.
/// A question that keeps nothing contributes 0. Ties go to the largest cutoff.
inline CutoffChoice select_cutoff(std::span<const ScoredOutcome> scored, std::span<const PinnedOutcome> pinned = {}) {
  if (scored.empty() && pinned.empty()) throw DomainError("cutoff selection needs at least one trace");
  std::map<std::string, std::size_t> qindex;
  for (const auto& s : scored) qindex.emplace(s.question_id, 0);
  for (const auto& p : pinned) qindex.emplace(p.question_id, 0);
  std::size_t next = 0;
  for (auto& [q, idx] : qindex) idx = next++;
  std::vector<std::size_t> kept(qindex.size(), 0), kept_correct(qindex.size(), 0);
  for (const auto& p : pinned) {
    const auto i = qindex.at(p.question_id);
    ++kept[i];
    kept_correct[i] += p.correct ? 1 : 0;
  }

  std::vector<const ScoredOutcome*> order;
  order.reserve(scored.size());
  for (const auto& s : scored) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->score < b->score; });

  std::vector<double> candidates{0.0};
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->score != order[i - 1]->score) candidates.push_back(0.5 * (order[i - 1]->score + order[i]->score));
  }
  candidates.push_back(1.0);
  std::sort(candidates.begin(), candidates.end());

  constexpr double kTieTolerance = 1e-12;
  CutoffChoice best{0.0, -1.0};
  std::size_t cursor = 0;
  for (double c : candidates) {
    while (cursor < order.size() && order[cursor]->score < c) {
      const auto i = qindex.at(order[cursor]->question_id);
      ++kept[i];
      kept_correct[i] += order[cursor]->correct ? 1 : 0;
      ++cursor;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (kept[i] > 0) total += static_cast<double>(kept_correct[i]) / static_cast<double>(kept[i]);
    }
    const double objective = total / static_cast<double>(kept.size());
    if (objective > best.objective + kTieTolerance) {
      best = {c, objective};
    } else if (objective >= best.objective - kTieTolerance) {
      best = {c, std::max(objective, best.objective)};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Chi-square tail and likelihood-ratio tests

namespace detail {

// Regularized upper incomplete gamma Q(a, x), a > 0, x >= 0.
inline double gamma_q(double a, double x) {
  if (x <= 0.0) return 1.0;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  constexpr double kEps = 1e-16;
  if (x < a + 1.0) {
    // Series for P(a, x).
    double term = 1.0 / a, sum = term, ap = a;
    for (int n = 0; n < 100000; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::clamp(1.0 - std::exp(log_prefix) * sum, 0.0, 1.0);
  }
  // Modified Lentz continued fraction for Q(a, x).
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::clamp(std::exp(log_prefix) * h, 0.0, 1.0);
}

}  // namespace detail

/// Upper-tail probability of a chi-square variable with `df` degrees of freedom.
inline double chi_square_tail(double stat, int df) {
  if (df <= 0) throw DomainError("degrees of freedom must be positive");
  if (!(stat >= 0.0)) throw DomainError("chi-square statistic must be non-negative");
  return detail::gamma_q(0.5 * df, 0.5 * stat);
}

struct LrResult {
  double stat = 0.0;
  int df = 0;
  double p_value = 1.0;
  double ll_full = 0.0;
  double ll_reduced = 0.0;
};

/// Likelihood-ratio test for adding features to a nested logistic model.
/// Both models are unpenalized fits on standardized columns of `full`.
inline LrResult lr_test(const Matrix& full, std::span<const std::string> full_names,
                        std::span<const std::string> reduced_names, const Vector& y,
                        const LogisticOptions& opts = {}) {
  if (full.cols() != static_cast<Eigen::Index>(full_names.size())) throw DomainError("feature names mismatch");
  std::vector<Eigen::Index> cols;
  std::set<std::string> seen;
  for (const auto& name : reduced_names) {
    auto it = std::find(full_names.begin(), full_names.end(), name);
    if (it == full_names.end()) throw DomainError("reduced feature '" + name + "' is not in the full model");
    if (!seen.insert(name).second) throw DomainError("duplicate reduced feature '" + name + "'");
    cols.push_back(static_cast<Eigen::Index>(it - full_names.begin()));
  }
  Matrix reduced(full.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) reduced.col(static_cast<Eigen::Index>(j)) = full.col(cols[j]);

  auto fit_ll = [&](const Matrix& x) {
    const Matrix z = standardize_rows(x, fit_standardization(x));
    return fit_logistic(z, y, 0.0, opts).log_likelihood;
  };
  LrResult r;
  r.df = static_cast<int>(full_names.size() - reduced_names.size());
  r.ll_full = fit_ll(full);
  r.ll_reduced = r.df == 0 ? r.ll_full : fit_ll(reduced);
  r.stat = 2.0 * (r.ll_full - r.ll_reduced);
  r.p_value = r.df == 0 ? 1.0 : chi_square_tail(std::max(r.stat, 0.0), r.df);
  return r;
}

}  // namespace rtrace
