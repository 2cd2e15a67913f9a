#pragma once

// Exponential-family regressions with log-exposure offsets, fitted by
// iteratively reweighted least squares: Poisson, Binomial and Negative
// Binomial for claim counts, Gamma for average severity and Tweedie for
// total cost.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "subsidence/error.hpp"
#include "subsidence/ingest.hpp"

namespace subsidence::glm {

enum class Family { Poisson, Binomial, NegBin, Gamma, Tweedie };

constexpr std::string_view to_string(Family f) noexcept {
  switch (f) {
    case Family::Poisson: return "poisson";
    case Family::Binomial: return "binomial";
    case Family::NegBin: return "negbin";
    case Family::Gamma: return "gamma";
    case Family::Tweedie: return "tweedie";
  }
  return "?";
}

inline Family family_from_string(std::string_view s) {
  for (Family f : {Family::Poisson, Family::Binomial, Family::NegBin, Family::Gamma, Family::Tweedie})
    if (to_string(f) == s) return f;
  fail(ErrorCode::UsageError, "unknown GLM family '" + std::string(s) + "'");
}

/// Design columns in their fixed order (coefficients stay comparable
/// across training windows).
enum class Column { Intercept, Essti, Esswi, Clay, Cat, Espi };

inline constexpr std::array<Column, 6> kAllColumns{Column::Intercept, Column::Essti, Column::Esswi,
                                                   Column::Clay,      Column::Cat,   Column::Espi};

constexpr std::string_view to_string(Column c) noexcept {
  switch (c) {
    case Column::Intercept: return "intercept";
    case Column::Essti: return "essti";
    case Column::Esswi: return "esswi";
    case Column::Clay: return "clay";
    case Column::Cat: return "cat";
    case Column::Espi: return "espi";
  }
  return "?";
}

inline Column column_from_string(std::string_view s) {
  for (Column c : kAllColumns)
    if (to_string(c) == s) return c;
  fail(ErrorCode::SchemaError, "unknown design column '" + std::string(s) + "'");
}

inline std::vector<Column> all_columns() { return {kAllColumns.begin(), kAllColumns.end()}; }

/// Cost models drop the precipitation index.
inline std::vector<Column> cost_columns() {
  return {Column::Intercept, Column::Essti, Column::Esswi, Column::Clay, Column::Cat};
}

inline double column_value(const TownYearRecord& r, Column c) noexcept {
  switch (c) {
    case Column::Intercept: return 1.0;
    case Column::Essti: return r.essti;
    case Column::Esswi: return r.esswi;
    case Column::Clay: return r.clay;
    case Column::Cat: return static_cast<double>(r.cat);
    case Column::Espi: return r.espi;
  }
  return 0.0;
}

inline Eigen::VectorXd covariates(const TownYearRecord& r, std::span<const Column> columns) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) x[static_cast<Eigen::Index>(j)] = column_value(r, columns[j]);
  return x;
}

/// What the response column holds.
enum class Response {
  ClaimCount,  // claims, offset log(exposure), binomial trials = exposure
  Severity,    // cost / claims on rows with claims > 0, weighted by claims
  TotalCost,   // cost in currency units, offset log(exposure)
};

struct DesignMatrix {
  Eigen::MatrixXd x;
  Eigen::VectorXd offset;
  Eigen::VectorXd response;
  Eigen::VectorXd weights;
  Eigen::VectorXd trials;
  std::vector<Column> columns;
  std::vector<std::size_t> source_rows;  // panel index of each design row
  Response kind = Response::ClaimCount;
  int year_first = 0;
  int year_last = 0;

  Eigen::Index rows() const noexcept { return x.rows(); }
  Eigen::Index cols() const noexcept { return x.cols(); }
};

/// Builds the design from a panel. Rows with zero exposure carry no
/// information and are left out; severity keeps only rows with claims.
inline DesignMatrix make_design(const Panel& panel, std::span<const Column> columns,
                                Response kind = Response::ClaimCount) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto& r = panel[i];
    if (kind == Response::Severity ? r.claims > 0 : r.exposure > 0) keep.push_back(i);
  }
  DesignMatrix d;
  const auto n = static_cast<Eigen::Index>(keep.size());
  const auto p = static_cast<Eigen::Index>(columns.size());
  d.x.resize(n, p);
  d.offset.setZero(n);
  d.response.resize(n);
  d.weights.setOnes(n);
  d.trials.setOnes(n);
  d.columns.assign(columns.begin(), columns.end());
  d.source_rows = keep;
  d.kind = kind;
  d.year_first = std::numeric_limits<int>::max();
  d.year_last = std::numeric_limits<int>::min();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = panel[keep[static_cast<std::size_t>(i)]];
    for (Eigen::Index j = 0; j < p; ++j) d.x(i, j) = column_value(r, columns[static_cast<std::size_t>(j)]);
    switch (kind) {
      case Response::ClaimCount:
        d.response[i] = static_cast<double>(r.claims);
        d.offset[i] = std::log(static_cast<double>(r.exposure));
        d.trials[i] = static_cast<double>(r.exposure);
        break;
      case Response::Severity:
        d.response[i] = r.cost() / static_cast<double>(r.claims);
        d.weights[i] = static_cast<double>(r.claims);
        break;
      case Response::TotalCost:
        d.response[i] = r.cost();
        d.offset[i] = std::log(static_cast<double>(r.exposure));
        break;
    }
    d.year_first = std::min(d.year_first, r.year);
    d.year_last = std::max(d.year_last, r.year);
  }
  if (n == 0) d.year_first = d.year_last = 0;
  return d;
}

struct FittedGlm {
  Family family = Family::Poisson;
  Response kind = Response::ClaimCount;
  std::vector<Column> columns;
  Eigen::VectorXd coefficients;
  Eigen::VectorXd std_errors;
  /// Gamma: 1/shape. Tweedie: phi. Otherwise 1.
  double dispersion = 1.0;
  /// Negative-binomial size; infinity for other families.
  double theta = std::numeric_limits<double>::infinity();
  double theta_se = std::numeric_limits<double>::quiet_NaN();
  double tweedie_power = 0.0;
  double log_likelihood = 0.0;
  bool has_likelihood = true;
  double deviance = 0.0;
  std::size_t n = 0;
  int k = 0;
  int year_first = 0;
  int year_last = 0;
  int iterations = 0;
  std::vector<std::string> flags;

  bool uses_offset() const noexcept { return kind != Response::Severity; }
};

struct GlmOptions {
  int max_iterations = 100;
  /// Convergence when every |score_j| * se_j falls below this.
  double tolerance = 1e-8;
  double tweedie_power = 1.5;
  /// Tweedie log-likelihood through the series density; off = quasi only.
  bool tweedie_density = true;
  /// Skip the profile search and use this negative-binomial size.
  std::optional<double> fixed_theta;
  double theta_min = 1e-4;
  double theta_max = 1e6;
  /// Skip response-support checks (fractional responses inside EM).
  bool allow_fractional = false;
};

// --- Tweedie series density ----------------------------------------------

/// Log density of the Tweedie compound Poisson-gamma law with mean mu,
/// dispersion phi and power in (1, 2). The series over the Poisson count is
/// summed around its largest term until terms fall below 1e-10 of it.
inline double tweedie_log_density(double y, double mu, double phi, double power) {
  const double p1 = power - 1.0, p2 = 2.0 - power;
  if (y == 0.0) return -std::pow(mu, p2) / (phi * p2);
  const double a = -p2 / p1;  // negative
  const double a1 = 1.0 / p1;
  const double logz = -a * std::log(y) - a1 * std::log(phi) + a * std::log(p1) - std::log(p2);
  auto term = [&](double j) { return j * logz - std::lgamma(1.0 + j) - std::lgamma(-a * j); };
  const double jmax = std::max(1.0, std::round(std::pow(y, p2) / (phi * p2)));
  const double wmax = term(jmax);
  constexpr double kDrop = 23.025850929940457;  // -log(1e-10)
  double sum = 1.0;
  for (double j = jmax + 1.0;; j += 1.0) {
    const double d = term(j) - wmax;
    if (d < -kDrop) break;
    sum += std::exp(d);
    if (j - jmax > 1e7) break;
  }
  for (double j = jmax - 1.0; j >= 1.0; j -= 1.0) {
    const double d = term(j) - wmax;
    if (d < -kDrop) break;
    sum += std::exp(d);
  }
  return -y / (phi * p1 * std::pow(mu, p1)) - std::pow(mu, p2) / (phi * p2) - std::log(y) + wmax + std::log(sum);
}

namespace detail {

inline double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

inline double logistic(double eta) {
  return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
}

/// Per-observation quantities on the linear-predictor scale.
struct Unit {
  double mu;
  double score;     // d loglik / d eta
  double fisher;    // E[-d2 loglik / d eta2]
  double observed;  // -d2 loglik / d eta2
  double deviance;
};

struct FamilyParams {
  Family family = Family::Poisson;
  double theta = std::numeric_limits<double>::infinity();
  double power = 1.5;
};

inline Unit unit(const FamilyParams& fp, double y, double eta, double weight, double trials) {
  Unit u{};
  switch (fp.family) {
    case Family::Poisson: {
      u.mu = std::exp(eta);
      u.score = weight * (y - u.mu);
      u.fisher = u.observed = weight * u.mu;
      u.deviance = 2.0 * weight * (xlogy(y, y / u.mu) - (y - u.mu));
      break;
    }
    case Family::Binomial: {
      const double prob = logistic(eta);
      u.mu = trials * prob;
      u.score = weight * (y - u.mu);
      u.fisher = u.observed = weight * trials * prob * (1.0 - prob);
      u.deviance = 2.0 * weight * (xlogy(y, y / u.mu) + xlogy(trials - y, (trials - y) / (trials - u.mu)));
      break;
    }
    case Family::NegBin: {
      const double th = fp.theta;
      u.mu = std::exp(eta);
      u.score = weight * th * (y - u.mu) / (th + u.mu);
      u.fisher = weight * u.mu * th / (th + u.mu);
      u.observed = weight * (y + th) * u.mu * th / ((th + u.mu) * (th + u.mu));
      u.deviance = 2.0 * weight * (xlogy(y, y / u.mu) - (y + th) * std::log1p((y - u.mu) / (u.mu + th)));
      break;
    }
    case Family::Gamma: {
      u.mu = std::exp(eta);
      u.score = weight * (y - u.mu) / u.mu;
      u.fisher = weight;
      u.observed = weight * y / u.mu;
      u.deviance = 2.0 * weight * (-std::log(y / u.mu) + (y - u.mu) / u.mu);
      break;
    }
    case Family::Tweedie: {
      const double p = fp.power;
      u.mu = std::exp(eta);
      const double m1 = std::pow(u.mu, 1.0 - p), m2 = std::pow(u.mu, 2.0 - p);
      u.score = weight * (y * m1 - m2);
      u.fisher = weight * m2;
      u.observed = weight * ((2.0 - p) * m2 - (1.0 - p) * y * m1);
      u.deviance = 2.0 * weight *
                   (std::pow(y, 2.0 - p) / ((1.0 - p) * (2.0 - p)) - y * m1 / (1.0 - p) + m2 / (2.0 - p));
      break;
    }
  }
  return u;
}

// lgamma(y + t) - lgamma(t), summed exactly for small counts.
inline double lgamma_ratio(double y, double t) {
  if (y <= 64.0 && y == std::floor(y)) {
    double s = 0.0;
    for (int j = 0; j < static_cast<int>(y); ++j) s += std::log(t + j);
    return s;
  }
  return std::lgamma(y + t) - std::lgamma(t);
}

inline double digamma_ratio(double y, double t) {
  if (y <= 64.0 && y == std::floor(y)) {
    double s = 0.0;
    for (int j = 0; j < static_cast<int>(y); ++j) s += 1.0 / (t + j);
    return s;
  }
  return boost::math::digamma(y + t) - boost::math::digamma(t);
}

inline double log_likelihood_row(const FamilyParams& fp, double y, double mu, double weight, double trials,
                                 double dispersion) {
  switch (fp.family) {
    case Family::Poisson: return weight * (xlogy(y, mu) - mu - std::lgamma(y + 1.0));
    case Family::Binomial: {
      const double prob = mu / trials;
      return weight * (std::lgamma(trials + 1.0) - std::lgamma(y + 1.0) - std::lgamma(trials - y + 1.0) +
                       xlogy(y, prob) + xlogy(trials - y, 1.0 - prob));
    }
    case Family::NegBin: {
      const double th = fp.theta;
      return weight * (lgamma_ratio(y, th) - std::lgamma(y + 1.0) - th * std::log1p(mu / th) +
                       xlogy(y, mu / (th + mu)));
    }
    case Family::Gamma: {
      // Mean of `weight` draws with common shape 1/dispersion.
      const double shape = weight / dispersion;
      return shape * std::log(shape / mu) + (shape - 1.0) * std::log(y) - shape * y / mu - std::lgamma(shape);
    }
    case Family::Tweedie: return tweedie_log_density(y, mu, dispersion / weight, fp.power);
  }
  return 0.0;
}

struct IrlsResult {
  Eigen::VectorXd beta;
  Eigen::VectorXd eta;
  Eigen::VectorXd mu;
  Eigen::MatrixXd fisher_inverse;
  double deviance = 0.0;
  int iterations = 0;
  double scaled_gradient = 0.0;
};

inline void check_rank(const Eigen::MatrixXd& x) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  require(qr.rank() == x.cols(), ErrorCode::SingularDesign,
          "design has rank " + std::to_string(qr.rank()) + " < " + std::to_string(x.cols()) + " columns");
}

inline double start_intercept(const DesignMatrix& d, Family family) {
  double sy = 0.0, sw = 0.0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    sy += d.weights[i] * d.response[i];
    switch (family) {
      case Family::Binomial: sw += d.weights[i] * d.trials[i]; break;
      default: sw += d.weights[i] * std::exp(d.offset[i]); break;
    }
  }
  const double mean = sy / sw;
  if (family == Family::Binomial) return std::log(mean / (1.0 - mean));
  return std::log(mean);
}

/// Fisher scoring with step halving on deviance increase.
inline IrlsResult irls(const DesignMatrix& d, const FamilyParams& fp, const GlmOptions& opt,
                       const std::optional<Eigen::VectorXd>& start = std::nullopt) {
  const Eigen::Index n = d.rows(), p = d.cols();
  IrlsResult r;
  if (start) {
    r.beta = *start;
  } else {
    r.beta = Eigen::VectorXd::Zero(p);
    // Intercept from the link-transformed mean; other coefficients at zero.
    Eigen::Index icpt = -1;
    for (Eigen::Index j = 0; j < p; ++j)
      if (d.columns.size() == static_cast<std::size_t>(p) && d.columns[static_cast<std::size_t>(j)] == Column::Intercept)
        icpt = j;
    if (icpt >= 0) r.beta[icpt] = start_intercept(d, fp.family);
  }

  Eigen::VectorXd score(n), fisher(n), mu(n);
  // Binomial exposure enters as the trial count, not as an offset.
  const bool with_offset = fp.family != Family::Binomial;
  auto evaluate = [&](const Eigen::VectorXd& beta, Eigen::VectorXd& eta) {
    eta = d.x * beta;
    if (with_offset) eta += d.offset;
    double dev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto u = unit(fp, d.response[i], eta[i], d.weights[i], d.trials[i]);
      score[i] = u.score;
      fisher[i] = u.fisher;
      mu[i] = u.mu;
      dev += u.deviance;
    }
    return dev;
  };

  Eigen::VectorXd eta;
  double dev = evaluate(r.beta, eta);
  require(std::isfinite(dev), ErrorCode::NonConvergence, "non-finite deviance at the starting point");
  for (int it = 1; it <= opt.max_iterations; ++it) {
    const Eigen::VectorXd grad = d.x.transpose() * score;
    const Eigen::MatrixXd info = d.x.transpose() * fisher.asDiagonal() * d.x;
    Eigen::LLT<Eigen::MatrixXd> llt(info);
    require(llt.info() == Eigen::Success, ErrorCode::SingularDesign, "information matrix is not positive definite");
    r.fisher_inverse = llt.solve(Eigen::MatrixXd::Identity(p, p));
    double scaled = 0.0;
    for (Eigen::Index j = 0; j < p; ++j)
      scaled = std::max(scaled, std::abs(grad[j]) * std::sqrt(r.fisher_inverse(j, j)));
    r.scaled_gradient = scaled;
    r.iterations = it - 1;
    if (scaled <= opt.tolerance) {
      r.eta = eta;
      r.mu = mu;
      r.deviance = dev;
      return r;
    }
    const Eigen::VectorXd step = llt.solve(grad);
    double factor = 1.0;
    Eigen::VectorXd candidate, cand_eta;
    double cand_dev = 0.0;
    bool improved = false;
    // Beyond 30 halvings the change is below the deviance round-off.
    for (int half = 0; half < 30; ++half) {
      candidate = r.beta + factor * step;
      cand_dev = evaluate(candidate, cand_eta);
      if (std::isfinite(cand_dev) && cand_dev <= dev * (1.0 + 1e-15) + 1e-300) {
        improved = true;
        break;
      }
      factor *= 0.5;
    }
    if (!improved) {
      // Round-off floor: the deviance cannot decrease any further.
      evaluate(r.beta, eta);
      if (scaled <= std::max(opt.tolerance, 1e-5)) {
        r.eta = eta;
        r.mu = mu;
        r.deviance = dev;
        return r;
      }
      fail(ErrorCode::NonConvergence, "step halving failed (scaled gradient " + text::fmt(scaled) + ")");
    }
    r.beta = candidate;
    eta = cand_eta;
    dev = cand_dev;
  }
  fail(ErrorCode::NonConvergence, "no convergence in " + std::to_string(opt.max_iterations) + " iterations");
}

inline void check_response(const DesignMatrix& d, Family family, bool allow_fractional) {
  bool positive_mass = false;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const double y = d.response[i];
    const std::string where = "row " + std::to_string(i);
    require(std::isfinite(y), ErrorCode::BadResponse, where + ": non-finite response");
    require(std::isfinite(d.offset[i]), ErrorCode::BadResponse, where + ": non-finite offset");
    require(d.weights[i] > 0.0 && std::isfinite(d.weights[i]), ErrorCode::BadResponse, where + ": weight must be > 0");
    const bool integral = allow_fractional || y == std::floor(y);
    switch (family) {
      case Family::Poisson:
      case Family::NegBin:
        require(y >= 0.0 && integral, ErrorCode::BadResponse, where + ": count response expected");
        break;
      case Family::Binomial:
        require(y >= 0.0 && y <= d.trials[i] && integral, ErrorCode::BadResponse,
                where + ": response must be a count in [0, trials]");
        break;
      case Family::Gamma: require(y > 0.0, ErrorCode::BadResponse, where + ": gamma response must be > 0"); break;
      case Family::Tweedie: require(y >= 0.0, ErrorCode::BadResponse, where + ": tweedie response must be >= 0"); break;
    }
    positive_mass |= y > 0.0;
  }
  require(positive_mass, ErrorCode::BadResponse, "response has no positive mass");
  if (family == Family::Binomial) {
    bool below = false;
    for (Eigen::Index i = 0; i < d.rows(); ++i) below |= d.response[i] < d.trials[i];
    require(below, ErrorCode::BadResponse, "every binomial trial is a success");
  }
}

/// Gamma shape MLE given fitted means, for averages of `weight` draws.
inline double gamma_shape_mle(const DesignMatrix& d, const Eigen::VectorXd& mu) {
  auto score = [&](double nu) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      const double a = d.weights[i], y = d.response[i];
      s += a * (std::log(a * nu / mu[i]) + 1.0 + std::log(y) - y / mu[i] - boost::math::digamma(a * nu));
    }
    return s;
  };
  double lo = 1e-6, hi = 1e6;
  if (score(hi) > 0.0) return hi;
  if (score(lo) < 0.0) return lo;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (score(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
    if (hi / lo - 1.0 < 1e-13) break;
  }
  return std::sqrt(lo * hi);
}

inline double total_log_likelihood(const DesignMatrix& d, const FamilyParams& fp, const Eigen::VectorXd& mu,
                                   double dispersion) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    ll += log_likelihood_row(fp, d.response[i], mu[i], d.weights[i], d.trials[i], dispersion);
  return ll;
}

/// Standard errors from the observed information at the estimate.
inline Eigen::VectorXd observed_std_errors(const DesignMatrix& d, const FamilyParams& fp, const Eigen::VectorXd& eta,
                                           double scale) {
  Eigen::VectorXd w(d.rows());
  for (Eigen::Index i = 0; i < d.rows(); ++i) w[i] = unit(fp, d.response[i], eta[i], d.weights[i], d.trials[i]).observed;
  const Eigen::MatrixXd info = d.x.transpose() * w.asDiagonal() * d.x * scale;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(d.cols(), d.cols()));
  Eigen::VectorXd se(d.cols());
  for (Eigen::Index j = 0; j < d.cols(); ++j) se[j] = std::sqrt(std::max(cov(j, j), 0.0));
  return se;
}

}  // namespace detail

/// Maximum-likelihood fit. Negative-binomial size is profiled by golden
/// section on log(theta); gamma shape by MLE; Tweedie dispersion is the
/// mean deviance.
inline FittedGlm fit_glm(const DesignMatrix& d, Family family, const GlmOptions& opt = {}) {
  const Eigen::Index n = d.rows(), p = d.cols();
  require(static_cast<std::size_t>(p) == d.columns.size(), ErrorCode::DimensionMismatch,
          "design columns do not match the column list");
  require(n > p + (family == Family::Poisson || family == Family::Binomial ? 0 : 1), ErrorCode::BadResponse,
          "need more rows than parameters");
  if (family == Family::Tweedie)
    require(opt.tweedie_power > 1.0 && opt.tweedie_power < 2.0, ErrorCode::PowerOutOfRange,
            "tweedie power must lie in (1, 2)");
  detail::check_response(d, family, opt.allow_fractional);
  detail::check_rank(d.x);

  detail::FamilyParams fp{family, std::numeric_limits<double>::infinity(), opt.tweedie_power};
  FittedGlm m;
  m.family = family;
  m.kind = d.kind;
  m.columns = d.columns;
  m.n = static_cast<std::size_t>(n);
  m.year_first = d.year_first;
  m.year_last = d.year_last;
  m.k = static_cast<int>(p);

  detail::IrlsResult fit;
  if (family == Family::NegBin) {
    // Alternates IRLS for the coefficients at fixed theta with the
    // likelihood maximum in theta at fixed means.
    auto best_theta = [&](const Eigen::VectorXd& mu) {
      auto ll = [&](double lt) { return detail::total_log_likelihood(d, {Family::NegBin, std::exp(lt)}, mu, 1.0); };
      double a = std::log(opt.theta_min), b = std::log(opt.theta_max);
      const double g = (std::sqrt(5.0) - 1.0) / 2.0;
      double c = b - g * (b - a), e = a + g * (b - a), fc = ll(c), fe = ll(e);
      while (b - a > 1e-9) {
        if (fc > fe) {
          b = e, e = c, fe = fc, c = b - g * (b - a), fc = ll(c);
        } else {
          a = c, c = e, fc = fe, e = a + g * (b - a), fe = ll(e);
        }
      }
      return 0.5 * (a + b);
    };
    fit = detail::irls(d, {Family::Poisson}, opt);
    double log_theta = opt.fixed_theta ? std::log(*opt.fixed_theta) : best_theta(fit.mu);
    for (int outer = 0;; ++outer) {
      require(outer < opt.max_iterations, ErrorCode::NonConvergence, "negative-binomial size did not settle");
      fp.theta = std::exp(log_theta);
      fit = detail::irls(d, fp, opt, fit.beta);
      if (opt.fixed_theta) break;
      const double next = best_theta(fit.mu);
      const bool settled = std::abs(next - log_theta) < 1e-7;
      log_theta = next;
      if (settled) {
        fp.theta = std::exp(log_theta);
        fit = detail::irls(d, fp, opt, fit.beta);
        break;
      }
    }
    const double theta = fp.theta;
    if (!opt.fixed_theta) {
      if (theta > 0.99 * opt.theta_max) m.flags.emplace_back("theta_at_upper_bound");
      if (theta < 1.01 * opt.theta_min) m.flags.emplace_back("theta_at_lower_bound");
      // Curvature of the profile likelihood in theta for a standard error.
      auto profile = [&](double t) {
        const detail::FamilyParams f{Family::NegBin, t};
        return detail::total_log_likelihood(d, f, detail::irls(d, f, opt, fit.beta).mu, 1.0);
      };
      const double h = 1e-3 * theta;
      const double l0 = profile(theta), lp = profile(theta + h), lm = profile(theta - h);
      const double curvature = -(lp - 2.0 * l0 + lm) / (h * h);
      m.theta_se = curvature > 0.0 ? 1.0 / std::sqrt(curvature) : std::numeric_limits<double>::infinity();
    }
    m.theta = theta;
    m.k += 1;
  } else {
    fit = detail::irls(d, fp, opt);
  }

  m.coefficients = fit.beta;
  m.deviance = fit.deviance;
  m.iterations = fit.iterations;
  double se_scale = 1.0;
  switch (family) {
    case Family::Gamma: {
      const double shape = detail::gamma_shape_mle(d, fit.mu);
      m.dispersion = 1.0 / shape;
      se_scale = shape;
      m.k += 1;
      break;
    }
    case Family::Tweedie: {
      m.dispersion = fit.deviance / d.weights.sum();
      se_scale = 1.0 / m.dispersion;
      m.tweedie_power = opt.tweedie_power;
      m.k += 1;
      m.has_likelihood = opt.tweedie_density;
      break;
    }
    default: break;
  }
  m.std_errors = detail::observed_std_errors(d, fp, fit.eta, se_scale);
  m.log_likelihood =
      m.has_likelihood ? detail::total_log_likelihood(d, fp, fit.mu, m.dispersion) : std::numeric_limits<double>::quiet_NaN();
  if (m.has_likelihood)
    require(std::isfinite(m.log_likelihood), ErrorCode::NonConvergence, "non-finite log-likelihood");
  return m;
}

/// Tweedie GLM with a fixed power in (1, 2).
inline FittedGlm fit_tweedie(const DesignMatrix& d, double power, GlmOptions opt = {}) {
  require(power > 1.0 && power < 2.0, ErrorCode::PowerOutOfRange, "tweedie power must lie in (1, 2), got " + text::fmt(power));
  opt.tweedie_power = power;
  return fit_glm(d, Family::Tweedie, opt);
}

struct InformationCriteria {
  double aic = 0.0;
  double bic = 0.0;
};

inline InformationCriteria information_criteria(double log_likelihood, int k, double n) {
  return {2.0 * k - 2.0 * log_likelihood, k * std::log(n) - 2.0 * log_likelihood};
}

inline InformationCriteria information_criteria(const FittedGlm& m) {
  require(m.has_likelihood, ErrorCode::QuasiLikelihoodOnly, "model was fitted without density evaluation");
  return information_criteria(m.log_likelihood, m.k, static_cast<double>(m.n));
}

struct PowerScanEntry {
  double power = 0.0;
  double aic = 0.0;
};

/// AIC of Tweedie fits across candidate powers.
inline std::vector<PowerScanEntry> tweedie_power_scan(const DesignMatrix& d, std::span<const double> powers,
                                                      const GlmOptions& opt = {}) {
  std::vector<PowerScanEntry> out;
  for (double p : powers) out.push_back({p, information_criteria(fit_tweedie(d, p, opt)).aic});
  return out;
}

inline double linear_predictor(const FittedGlm& m, const Eigen::VectorXd& x) {
  require(x.size() == m.coefficients.size(), ErrorCode::DimensionMismatch,
          "covariate vector has " + std::to_string(x.size()) + " entries, model expects " +
              std::to_string(m.coefficients.size()));
  return x.dot(m.coefficients);
}

/// Expected response for one row. Counts: E*exp(x'b) (log link) or
/// E*logistic(x'b) (binomial). Severity: exp(x'b). Total cost:
/// E*exp(x'b).
inline double predict_rate(const FittedGlm& m, const Eigen::VectorXd& x, double exposure) {
  const double eta = linear_predictor(m, x);
  if (m.family == Family::Binomial) return exposure * detail::logistic(eta);
  return m.uses_offset() ? exposure * std::exp(eta) : std::exp(eta);
}

inline double predict_rate(const FittedGlm& m, const TownYearRecord& r) {
  return predict_rate(m, covariates(r, m.columns), static_cast<double>(r.exposure));
}

inline std::vector<double> predict(const FittedGlm& m, const Panel& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(predict_rate(m, r));
  return out;
}

}  // namespace subsidence::glm
