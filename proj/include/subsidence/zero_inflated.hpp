#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "glm.hpp"
#include "ingest.hpp"

namespace subsidence::zi {

enum class ZiFamily { Zip, Zinb };

constexpr std::string_view to_string(ZiFamily f) noexcept { return f == ZiFamily::Zip ? "zip" : "zinb"; }

inline ZiFamily zi_family_from_string(std::string_view s) {
  if (s == "zip") return ZiFamily::Zip;
  if (s == "zinb") return ZiFamily::Zinb;
  fail(ErrorCode::UsageError, "unknown zero-inflated family '" + std::string(s) + "'");
}

inline glm::Family base_family(ZiFamily f) noexcept {
  return f == ZiFamily::Zip ? glm::Family::Poisson : glm::Family::NegBin;
}

struct ZeroInflatedModel {
  ZiFamily family = ZiFamily::Zip;
  std::vector<glm::Column> zero_columns;
  std::vector<glm::Column> count_columns;
  Eigen::VectorXd zero_coefficients;
  Eigen::VectorXd zero_std_errors;
  Eigen::VectorXd count_coefficients;
  Eigen::VectorXd count_std_errors;
  double theta = std::numeric_limits<double>::infinity();
  double theta_se = std::numeric_limits<double>::quiet_NaN();
  double log_likelihood = 0.0;
  double base_log_likelihood = 0.0;
  int k = 0;
  std::size_t n = 0;
  int year_first = 0;
  int year_last = 0;
  int iterations = 0;
  std::string method;
  std::vector<std::string> flags;

  bool at_boundary() const {
    for (const auto& f : flags)
      if (f == "boundary_p_zero") return true;
    return false;
  }
};

struct ZiOptions {
  int max_iterations = 500;
  int max_em_iterations = 1000;
  double ll_tolerance = 1e-9;
  double gradient_tolerance = 1e-6;
  // Mean structural-zero probability below which the fit collapses.
  double boundary_probability = 1e-4;
  double log_theta_min = std::log(1e-4);
  double log_theta_max = std::log(1e6);
  // Zero-block linear predictor beyond which the logistic part is saturated.
  double separation_eta = 25.0;
  bool force_em = false;
};

namespace detail {

inline double log_count_pmf(double y, double mean, ZiFamily family, double theta) {
  if (family == ZiFamily::Zip) return glm::detail::xlogy(y, mean) - mean - std::lgamma(y + 1.0);
  return std::lgamma(y + theta) - std::lgamma(theta) - std::lgamma(y + 1.0) - theta * std::log1p(mean / theta) +
         glm::detail::xlogy(y, mean / (theta + mean));
}

// log(1 + e^x) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double lse(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

using glm::detail::digamma_ratio;
using glm::detail::lgamma_ratio;

struct Problem {
  const Eigen::MatrixXd& z;
  const Eigen::MatrixXd& x;
  const Eigen::VectorXd& offset;
  const Eigen::VectorXd& y;
  const Eigen::VectorXd& w;
  ZiFamily family;
  double log_theta_min;
  double log_theta_max;

  Eigen::Index pz() const { return z.cols(); }
  Eigen::Index pc() const { return x.cols(); }
  Eigen::Index size() const { return pz() + pc() + (family == ZiFamily::Zinb ? 1 : 0); }

  double theta_of(const Eigen::VectorXd& par) const {
    if (family == ZiFamily::Zip) return std::numeric_limits<double>::infinity();
    return std::exp(std::clamp(par[size() - 1], log_theta_min, log_theta_max));
  }
};

/// Mixture log-likelihood and, optionally, its gradient.
inline double evaluate(const Problem& pr, const Eigen::VectorXd& par, Eigen::VectorXd* grad,
                       Eigen::VectorXd* posterior = nullptr) {
  const Eigen::Index n = pr.y.size(), pz = pr.pz(), pc = pr.pc();
  const Eigen::VectorXd eta_z = pr.z * par.head(pz);
  const Eigen::VectorXd eta_c = pr.x * par.segment(pz, pc) + pr.offset;
  const bool nb = pr.family == ZiFamily::Zinb;
  const double th = pr.theta_of(par);
  Eigen::VectorXd sz(n), sc(n);
  double st = 0.0, ll = 0.0;
  if (posterior) posterior->setZero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = pr.y[i], wi = pr.w[i];
    const double log_pi = -softplus(-eta_z[i]), log_1mpi = -softplus(eta_z[i]);
    const double pi = std::exp(log_pi);
    const double lam = std::exp(eta_c[i]);
    double logf, dlogf_eta, dlogf_lt = 0.0;
    if (!nb) {
      if (y == 0.0) {
        logf = -lam;
        dlogf_eta = -lam;
      } else {
        logf = y * eta_c[i] - lam - std::lgamma(y + 1.0);
        dlogf_eta = y - lam;
      }
    } else {
      const double r = th / (th + lam);
      const double log_r = -std::log1p(lam / th);
      if (y == 0.0) {
        logf = th * log_r;
        dlogf_eta = -lam * r;
        dlogf_lt = th * (log_r + 1.0 - r);
      } else {
        logf = lgamma_ratio(y, th) - std::lgamma(y + 1.0) + th * log_r + y * (eta_c[i] - std::log(th + lam));
        dlogf_eta = th * (y - lam) / (th + lam);
        dlogf_lt = th * (digamma_ratio(y, th) + log_r + 1.0 - (y + th) / (th + lam));
      }
    }
    if (y == 0.0) {
      const double a = log_pi, b = log_1mpi + logf;
      const double l = lse(a, b);
      const double q = std::exp(b - l);  // probability of a sampling zero
      ll += wi * l;
      sz[i] = wi * ((1.0 - pi) * (1.0 - q) - pi * q);
      sc[i] = wi * q * dlogf_eta;
      st += wi * q * dlogf_lt;
      if (posterior) (*posterior)[i] = 1.0 - q;
    } else {
      ll += wi * (log_1mpi + logf);
      sz[i] = -wi * pi;
      sc[i] = wi * dlogf_eta;
      st += wi * dlogf_lt;
    }
  }
  if (grad) {
    grad->resize(pr.size());
    grad->head(pz) = pr.z.transpose() * sz;
    grad->segment(pz, pc) = pr.x.transpose() * sc;
    if (nb) {
      const double lt = par[pr.size() - 1];
      (*grad)[pr.size() - 1] = (lt > pr.log_theta_min && lt < pr.log_theta_max) ? st : 0.0;
    }
  }
  return std::isfinite(ll) ? ll : -std::numeric_limits<double>::infinity();
}

/// Hessian of the negative log-likelihood by central differences of the
/// analytic gradient.
inline Eigen::MatrixXd numeric_hessian(const Problem& pr, const Eigen::VectorXd& par) {
  const Eigen::Index m = pr.size();
  Eigen::MatrixXd h(m, m);
  Eigen::VectorXd gp, gm;
  for (Eigen::Index j = 0; j < m; ++j) {
    const double step = 1e-5 * std::max(1.0, std::abs(par[j]));
    Eigen::VectorXd a = par, b = par;
    a[j] += step;
    b[j] -= step;
    evaluate(pr, a, &gp);
    evaluate(pr, b, &gm);
    h.col(j) = -(gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

inline double mean_zero_probability(const Problem& pr, const Eigen::VectorXd& par) {
  const Eigen::VectorXd eta = pr.z * par.head(pr.pz());
  double total = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) total += glm::detail::logistic(eta[i]);
  return eta.size() ? total / static_cast<double>(eta.size()) : 0.0;
}

struct OptimState {
  Eigen::VectorXd par;
  double ll = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  bool converged = false;
  // Converged on the likelihood alone while the gradient stayed large.
  bool plateau = false;
};

// Largest gradient component measured in units of its standard error.
inline double scaled_gradient(const Eigen::VectorXd& grad, const Eigen::MatrixXd& inverse) {
  double g = 0.0;
  for (Eigen::Index j = 0; j < grad.size(); ++j) g = std::max(g, std::abs(grad[j]) * std::sqrt(std::abs(inverse(j, j))));
  return g;
}

// Log-likelihood differences below this are round-off.
inline double ll_noise(double ll) { return 1e-12 * std::max(1.0, std::abs(ll)); }

inline Eigen::MatrixXd initial_inverse(const Problem& pr, const Eigen::VectorXd& par) {
  const Eigen::MatrixXd h = numeric_hessian(pr, par);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0).all())
    return ldlt.solve(Eigen::MatrixXd::Identity(pr.size(), pr.size()));
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(pr.size(), pr.size());
  for (Eigen::Index j = 0; j < pr.size(); ++j) d(j, j) = 1.0 / std::max(std::abs(h(j, j)), 1.0);
  return d;
}

/// BFGS on the negative log-likelihood with Armijo backtracking.
inline OptimState bfgs(const Problem& pr, Eigen::VectorXd start, const ZiOptions& opt) {
  OptimState s;
  s.par = std::move(start);
  s.ll = evaluate(pr, s.par, &s.grad);
  require(std::isfinite(s.ll), ErrorCode::NonConvergence, "non-finite log-likelihood at the starting point");
  Eigen::MatrixXd hinv = initial_inverse(pr, s.par);
  Eigen::VectorXd g_new;
  std::vector<double> history;
  for (s.iterations = 0; s.iterations < opt.max_iterations; ++s.iterations) {
    history.push_back(s.ll);
    if (history.size() > 10 && (s.ll - history[history.size() - 11]) < opt.ll_tolerance * std::max(1.0, std::abs(s.ll))) {
      s.converged = s.plateau = true;
      return s;
    }
    const double sg = scaled_gradient(s.grad, hinv);
    if (sg <= opt.gradient_tolerance * 1e-3) {
      s.converged = true;
      return s;
    }
    Eigen::VectorXd dir = hinv * s.grad;  // ascent direction for ll
    if (dir.dot(s.grad) <= 0.0) {
      hinv = initial_inverse(pr, s.par);
      dir = hinv * s.grad;
      if (dir.dot(s.grad) <= 0.0) dir = s.grad;
    }
    const double big = dir.cwiseAbs().maxCoeff();
    if (big > 5.0) dir *= 5.0 / big;
    const double slope = dir.dot(s.grad);
    double t = 1.0, ll_new = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd cand;
    bool accepted = false;
    for (int h = 0; h < 60; ++h, t *= 0.5) {
      cand = s.par + t * dir;
      ll_new = evaluate(pr, cand, &g_new);
      if (!std::isfinite(ll_new)) continue;
      // Armijo, or no measurable loss with a smaller gradient once the
      // likelihood differences reach round-off.
      if (ll_new >= s.ll + 1e-4 * t * slope ||
          (ll_new >= s.ll - ll_noise(s.ll) && scaled_gradient(g_new, hinv) < sg)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return s;
    const Eigen::VectorXd step = cand - s.par;
    const Eigen::VectorXd dg = s.grad - g_new;  // gradient change of -ll
    const double sy = step.dot(dg);
    if (sy > 1e-12 * step.norm() * dg.norm()) {
      const Eigen::VectorXd hy = hinv * dg;
      const double rho = 1.0 / sy;
      hinv += (rho * rho * dg.dot(hy) + rho) * step * step.transpose() - rho * (hy * step.transpose() + step * hy.transpose());
    }
    const double change = std::abs(ll_new - s.ll) / std::max(1.0, std::abs(ll_new));
    s.par = cand;
    s.ll = ll_new;
    s.grad = g_new;
    // Structural zeros are vanishing; the caller collapses to the base model.
    if (mean_zero_probability(pr, s.par) < 1e-2 * opt.boundary_probability) return s;
    if (change < opt.ll_tolerance && scaled_gradient(s.grad, hinv) <= opt.gradient_tolerance) {
      s.converged = true;
      ++s.iterations;
      return s;
    }
  }
  return s;
}

/// Expectation-maximization on the latent structural-zero indicator.
inline OptimState em(const Problem& pr, Eigen::VectorXd start, const ZiOptions& opt) {
  const Eigen::Index n = pr.y.size(), pz = pr.pz(), pc = pr.pc();
  OptimState s;
  s.par = std::move(start);
  Eigen::VectorXd post;
  s.ll = evaluate(pr, s.par, nullptr, &post);
  glm::GlmOptions gopt;
  gopt.allow_fractional = true;
  glm::DesignMatrix zd;
  zd.x = pr.z;
  zd.offset = Eigen::VectorXd::Zero(n);
  zd.trials = Eigen::VectorXd::Ones(n);
  glm::DesignMatrix cd;
  cd.x = pr.x;
  cd.offset = pr.offset;
  cd.response = pr.y;
  cd.trials = Eigen::VectorXd::Ones(n);
  for (s.iterations = 0; s.iterations < opt.max_em_iterations; ++s.iterations) {
    zd.response = post;
    zd.weights = pr.w;
    s.par.head(pz) = glm::detail::irls(zd, {glm::Family::Binomial}, gopt, Eigen::VectorXd(s.par.head(pz))).beta;
    cd.weights = pr.w.cwiseProduct((Eigen::VectorXd::Ones(n) - post).cwiseMax(1e-12));
    glm::detail::FamilyParams fp{base_family(pr.family), pr.theta_of(s.par)};
    s.par.segment(pz, pc) = glm::detail::irls(cd, fp, gopt, Eigen::VectorXd(s.par.segment(pz, pc))).beta;
    if (pr.family == ZiFamily::Zinb) {
      // Conditional maximization of the full likelihood in log theta.
      const Eigen::Index last = pr.size() - 1;
      auto at = [&](double lt) {
        Eigen::VectorXd p = s.par;
        p[last] = lt;
        return evaluate(pr, p, nullptr);
      };
      double a = pr.log_theta_min, b = pr.log_theta_max;
      const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
      double c = b - gr * (b - a), e = a + gr * (b - a), fc = at(c), fe = at(e);
      while (b - a > 1e-8) {
        if (fc > fe) {
          b = e, e = c, fe = fc, c = b - gr * (b - a), fc = at(c);
        } else {
          a = c, c = e, fc = fe, e = a + gr * (b - a), fe = at(e);
        }
      }
      const double lt = 0.5 * (a + b);
      if (at(lt) >= at(s.par[last])) s.par[last] = lt;
    }
    const double ll_new = evaluate(pr, s.par, nullptr, &post);
    const double change = std::abs(ll_new - s.ll) / std::max(1.0, std::abs(ll_new));
    s.ll = ll_new;
    if (change < opt.ll_tolerance) {
      s.converged = true;
      ++s.iterations;
      break;
    }
  }
  evaluate(pr, s.par, &s.grad);
  return s;
}

/// Newton steps on a finite-difference Hessian; tightens the optimum and
/// returns the final Hessian of the negative log-likelihood.
inline Eigen::MatrixXd polish(const Problem& pr, OptimState& s) {
  Eigen::MatrixXd h = numeric_hessian(pr, s.par);
  Eigen::VectorXd g;
  for (int it = 0; it < 8; ++it) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) break;
    const Eigen::MatrixXd inverse = ldlt.solve(Eigen::MatrixXd::Identity(pr.size(), pr.size()));
    const double sg = scaled_gradient(s.grad, inverse);
    if (sg < 1e-10) break;
    const Eigen::VectorXd step = inverse * s.grad;
    bool moved = false;
    double t = 1.0;
    for (int k = 0; k < 20; ++k, t *= 0.5) {
      const Eigen::VectorXd cand = s.par + t * step;
      const double ll = evaluate(pr, cand, &g);
      if (std::isfinite(ll) && ll >= s.ll - ll_noise(s.ll) && scaled_gradient(g, inverse) < sg) {
        s.par = cand;
        s.ll = ll;
        s.grad = g;
        moved = true;
        break;
      }
    }
    if (!moved) break;
    h = numeric_hessian(pr, s.par);
  }
  return h;
}

}  // namespace detail

/// Zero-inflated probability mass: P(0) = p + (1-p) f(0), P(y) = (1-p) f(y).
inline double zi_pmf(std::int64_t y, double p, double mean, ZiFamily family,
                     double theta = std::numeric_limits<double>::infinity()) {
  require(p >= 0.0 && p <= 1.0, ErrorCode::InvalidParam, "zero probability must lie in [0, 1]");
  require(mean > 0.0 && std::isfinite(mean), ErrorCode::InvalidParam, "count mean must be > 0");
  require(y >= 0, ErrorCode::InvalidParam, "count must be >= 0");
  if (family == ZiFamily::Zinb) require(theta > 0.0, ErrorCode::InvalidParam, "negative-binomial size must be > 0");
  const double f = std::exp(detail::log_count_pmf(static_cast<double>(y), mean, family, theta));
  return y == 0 ? p + (1.0 - p) * f : (1.0 - p) * f;
}

/// Maximum-likelihood zero-inflated fit. The count block carries the
/// log-exposure offset of `count`; the logistic block uses the columns of
/// `zero` without offset.
inline ZeroInflatedModel fit_zero_inflated(const glm::DesignMatrix& count, const glm::DesignMatrix& zero,
                                           ZiFamily family, const ZiOptions& opt = {}) {
  const Eigen::Index n = count.rows();
  require(zero.rows() == n, ErrorCode::DimensionMismatch, "zero and count designs have different row counts");
  require(count.kind == glm::Response::ClaimCount, ErrorCode::BadResponse, "zero-inflated models need claim counts");
  require(static_cast<std::size_t>(zero.cols()) == zero.columns.size() &&
              static_cast<std::size_t>(count.cols()) == count.columns.size(),
          ErrorCode::DimensionMismatch, "design columns do not match the column list");
  bool any_positive = false, any_zero = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    any_positive |= count.response[i] > 0.0;
    any_zero |= count.response[i] == 0.0;
  }
  if (n > 0 && !any_positive)
    fail(ErrorCode::BoundaryEstimate, "all-zero response: structural-zero probability saturates at 1");
  glm::detail::check_rank(zero.x);

  ZeroInflatedModel m;
  m.family = family;
  m.zero_columns = zero.columns;
  m.count_columns = count.columns;
  m.n = static_cast<std::size_t>(n);
  m.year_first = count.year_first;
  m.year_last = count.year_last;
  const Eigen::Index pz = zero.cols(), pc = count.cols();
  m.k = static_cast<int>(pz + pc) + (family == ZiFamily::Zinb ? 1 : 0);

  const glm::FittedGlm base = glm::fit_glm(count, base_family(family));
  m.base_log_likelihood = base.log_likelihood;

  detail::Problem pr{zero.x, count.x, count.offset, count.response, count.weights, family,
                     opt.log_theta_min, opt.log_theta_max};
  auto collapse = [&]() {
    m.zero_coefficients = Eigen::VectorXd::Zero(pz);
    for (Eigen::Index j = 0; j < pz; ++j)
      if (zero.columns[static_cast<std::size_t>(j)] == glm::Column::Intercept) m.zero_coefficients[j] = -30.0;
    m.zero_std_errors = Eigen::VectorXd::Constant(pz, std::numeric_limits<double>::quiet_NaN());
    m.count_coefficients = base.coefficients;
    m.count_std_errors = base.std_errors;
    m.theta = base.theta;
    m.theta_se = base.theta_se;
    m.log_likelihood = base.log_likelihood;
    m.flags.emplace_back("boundary_p_zero");
    if (m.method.empty()) m.method = "collapsed";
    return m;
  };
  if (!any_zero) return collapse();

  // Start: base count fit shifted for the excess zeros.
  double zeros = 0.0, expected = 0.0, wsum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = std::exp(count.x.row(i).dot(base.coefficients) + count.offset[i]);
    const double f0 = family == ZiFamily::Zip ? std::exp(-mu) : std::pow(base.theta / (base.theta + mu), base.theta);
    zeros += count.weights[i] * (count.response[i] == 0.0 ? 1.0 : 0.0);
    expected += count.weights[i] * f0;
    wsum += count.weights[i];
  }
  const double share = zeros / wsum, base_share = expected / wsum;
  const double p0 = std::clamp((share - base_share) / std::max(1.0 - base_share, 1e-12), 0.01, 0.99);
  Eigen::VectorXd start = Eigen::VectorXd::Zero(pr.size());
  for (Eigen::Index j = 0; j < pz; ++j)
    if (zero.columns[static_cast<std::size_t>(j)] == glm::Column::Intercept) start[j] = std::log(p0 / (1.0 - p0));
  start.segment(pz, pc) = base.coefficients;
  for (Eigen::Index j = 0; j < pc; ++j)
    if (count.columns[static_cast<std::size_t>(j)] == glm::Column::Intercept) start[pz + j] -= std::log(1.0 - p0);
  if (family == ZiFamily::Zinb)
    start[pr.size() - 1] = std::clamp(std::log(base.theta), opt.log_theta_min, opt.log_theta_max);

  // Quasi-separation: some rows are structural zeros with certainty and the
  // zero block runs off to infinity while the likelihood levels out.
  auto separated = [&](const detail::OptimState& st) {
    return st.ll >= base.log_likelihood && (zero.x * st.par.head(pz)).cwiseAbs().maxCoeff() > opt.separation_eta;
  };
  bool separation = false;
  detail::OptimState s;
  if (!opt.force_em) {
    s = detail::bfgs(pr, start, opt);
    m.method = "bfgs";
    if (!s.converged && detail::mean_zero_probability(pr, s.par) < opt.boundary_probability) return collapse();
    separation = !s.converged && separated(s);
  }
  if (!separation && (opt.force_em || !s.converged)) {
    const auto e = detail::em(pr, opt.force_em ? start : s.par, opt);
    if (detail::mean_zero_probability(pr, e.par) < opt.boundary_probability) return collapse();
    auto refined = detail::bfgs(pr, e.par, opt);
    m.method = "em+bfgs";
    if (refined.converged || refined.ll >= e.ll) {
      refined.iterations += e.iterations;
      refined.converged = refined.converged || e.converged;
      s = refined;
    } else {
      s = e;
      m.method = "em";
    }
    require(s.converged, ErrorCode::NonConvergence, "zero-inflated fit did not converge by quasi-Newton or EM");
  }
  m.iterations = s.iterations;
  if (s.plateau) m.flags.emplace_back("likelihood_plateau");
  if (separation) {
    m.zero_coefficients = s.par.head(pz);
    m.count_coefficients = s.par.segment(pz, pc);
    m.log_likelihood = s.ll;
    m.zero_std_errors = Eigen::VectorXd::Constant(pz, std::numeric_limits<double>::quiet_NaN());
    m.count_std_errors = Eigen::VectorXd::Constant(pc, std::numeric_limits<double>::quiet_NaN());
    if (family == ZiFamily::Zinb) m.theta = pr.theta_of(s.par);
    m.flags.emplace_back("zero_block_separation");
    return m;
  }

  // Boundary: vanishing structural zeros, or a worse optimum than the nested model.
  double mean_pi = 0.0;
  const Eigen::VectorXd eta_z = zero.x * s.par.head(pz);
  for (Eigen::Index i = 0; i < n; ++i) mean_pi += glm::detail::logistic(eta_z[i]);
  mean_pi /= static_cast<double>(n);
  if (mean_pi < opt.boundary_probability || s.ll < base.log_likelihood) return collapse();

  const Eigen::MatrixXd h = detail::polish(pr, s);
  m.zero_coefficients = s.par.head(pz);
  m.count_coefficients = s.par.segment(pz, pc);
  m.log_likelihood = s.ll;
  Eigen::VectorXd se = Eigen::VectorXd::Constant(pr.size(), std::numeric_limits<double>::quiet_NaN());
  Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(pr.size(), pr.size()));
    for (Eigen::Index j = 0; j < pr.size(); ++j) se[j] = cov(j, j) > 0.0 ? std::sqrt(cov(j, j)) : se[j];
  } else {
    m.flags.emplace_back("hessian_not_positive_definite");
  }
  m.zero_std_errors = se.head(pz);
  m.count_std_errors = se.segment(pz, pc);
  if (family == ZiFamily::Zinb) {
    const double lt = s.par[pr.size() - 1];
    m.theta = pr.theta_of(s.par);
    m.theta_se = m.theta * se[pr.size() - 1];
    if (lt >= opt.log_theta_max) m.flags.emplace_back("theta_at_upper_bound");
    if (lt <= opt.log_theta_min) m.flags.emplace_back("theta_at_lower_bound");
  }
  return m;
}

/// Convenience: both blocks built from the same panel.
inline ZeroInflatedModel fit_zero_inflated(const Panel& panel, std::span<const glm::Column> count_columns,
                                           std::span<const glm::Column> zero_columns, ZiFamily family,
                                           const ZiOptions& opt = {}) {
  return fit_zero_inflated(glm::make_design(panel, count_columns), glm::make_design(panel, zero_columns), family, opt);
}

inline glm::InformationCriteria information_criteria(const ZeroInflatedModel& m) {
  return glm::information_criteria(m.log_likelihood, m.k, static_cast<double>(m.n));
}

inline double structural_zero_probability(const ZeroInflatedModel& m, const Eigen::VectorXd& zero_x) {
  require(zero_x.size() == m.zero_coefficients.size(), ErrorCode::DimensionMismatch,
          "zero-block covariates have " + std::to_string(zero_x.size()) + " entries, model expects " +
              std::to_string(m.zero_coefficients.size()));
  return glm::detail::logistic(zero_x.dot(m.zero_coefficients));
}

/// E[Y] = (1 - p) * lambda * E.
inline double zi_predict(const ZeroInflatedModel& m, const Eigen::VectorXd& zero_x, const Eigen::VectorXd& count_x,
                         double exposure) {
  require(count_x.size() == m.count_coefficients.size(), ErrorCode::DimensionMismatch,
          "count-block covariates have " + std::to_string(count_x.size()) + " entries, model expects " +
              std::to_string(m.count_coefficients.size()));
  const double p = structural_zero_probability(m, zero_x);
  return (1.0 - p) * exposure * std::exp(count_x.dot(m.count_coefficients));
}

inline double zi_predict(const ZeroInflatedModel& m, const TownYearRecord& r) {
  return zi_predict(m, glm::covariates(r, m.zero_columns), glm::covariates(r, m.count_columns),
                    static_cast<double>(r.exposure));
}

inline std::vector<double> zi_predict(const ZeroInflatedModel& m, const Panel& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(zi_predict(m, r));
  return out;
}

}  // namespace subsidence::zi
