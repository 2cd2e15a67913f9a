#pragma once

// Ground-truth town-year panels drawn from known frequency, zero-inflation
// and severity parameters.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cost_models.hpp"
#include "error.hpp"
#include "glm.hpp"
#include "ingest.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "text_io.hpp"
#include "zero_inflated.hpp"

namespace subsidence::synthetic {

/// Coefficients in column order intercept, essti, esswi, clay, cat, espi.
using Coefficients = std::array<double, 6>;

/// 2018 column of the published regression table.
inline constexpr Coefficients kTable1_2018{-14.357, 1.661, -0.707, 0.035, 3.902, -0.048};

struct GeneratorConfig {
  int n_towns = 1000;
  int first_year = 2001;
  int last_year = 2018;
  // Exposure: lognormal houses per town, fixed over years.
  double exposure_log_mean = std::log(400.0);
  double exposure_log_sd = 1.0;
  double sum_insured_per_house = 250000.0;
  // Indices: unit variance, a share `shock_share` of it from a yearly regional shock.
  double shock_share = 0.5;
  double index_correlation = -0.5;  // corr(essti, esswi) and corr(essti, espi)
  int n_regions = 1;
  // Clay percentage: 100 * Beta(a, b).
  double clay_beta_a = 1.0;
  double clay_beta_b = 3.0;
  // Cat flag: request before the panel with this probability, then a yearly hazard.
  double cat_base_rate = 0.3;
  double cat_yearly_rate = 0.02;
  glm::Family family = glm::Family::Poisson;
  Coefficients beta = kTable1_2018;
  double theta = 1.0;  // negbin size
  std::optional<Coefficients> zero_beta;  // logistic structural-zero block
  double severity_mean = 16300.0;
  double severity_shape = 1.5;
  std::uint64_t seed = 1;
};

inline void validate(const GeneratorConfig& c) {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidConfig, what); };
  check(c.n_towns > 0, "n_towns must be > 0");
  check(c.first_year <= c.last_year, "first_year must not exceed last_year");
  check(std::isfinite(c.exposure_log_mean) && c.exposure_log_sd >= 0.0, "exposure distribution invalid");
  check(c.sum_insured_per_house >= 0.0, "sum_insured_per_house must be >= 0");
  check(c.shock_share >= 0.0 && c.shock_share <= 1.0, "shock_share must lie in [0, 1]");
  check(std::abs(c.index_correlation) <= c.shock_share, "|index_correlation| cannot exceed shock_share");
  check(c.n_regions >= 1, "n_regions must be >= 1");
  check(c.clay_beta_a > 0.0 && c.clay_beta_b > 0.0, "clay beta parameters must be > 0");
  check(c.cat_base_rate >= 0.0 && c.cat_base_rate <= 1.0 && c.cat_yearly_rate >= 0.0 && c.cat_yearly_rate <= 1.0,
        "cat rates must lie in [0, 1]");
  check(c.family == glm::Family::Poisson || c.family == glm::Family::NegBin || c.family == glm::Family::Binomial,
        "true family must be poisson, negbin or binomial");
  for (double b : c.beta) check(std::isfinite(b), "beta must be finite");
  if (c.zero_beta)
    for (double b : *c.zero_beta) check(std::isfinite(b), "zero_beta must be finite");
  check(c.family != glm::Family::NegBin || (c.theta > 0.0 && std::isfinite(c.theta)), "theta must be > 0");
  check(c.severity_mean > 0.0 && c.severity_shape > 0.0, "severity mean and shape must be > 0");
}

struct GeneratedPanel {
  Panel panel;
  std::vector<ingest::CatRequest> cat_history;
  std::vector<int> town_region;
  std::vector<double> expected_claims;  // E[N] per panel row
  GeneratorConfig config;
};

inline double linear(const Coefficients& b, const TownYearRecord& r) {
  return b[0] + b[1] * r.essti + b[2] * r.esswi + b[3] * r.clay + b[4] * r.cat + b[5] * r.espi;
}

/// E[N] under the true model, zero inflation included.
inline double expected_claims(const GeneratorConfig& c, const TownYearRecord& r) {
  const double e = static_cast<double>(r.exposure);
  const double eta = linear(c.beta, r);
  double m = c.family == glm::Family::Binomial ? e * glm::detail::logistic(eta) : e * std::exp(eta);
  if (c.zero_beta) m *= 1.0 - glm::detail::logistic(linear(*c.zero_beta, r));
  return m;
}

inline std::string town_name(int t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", t + 1);
  return buf;
}

namespace detail {

enum Stream : std::uint64_t { kShock = 1, kTown = 2, kYear = 3 };

// Values are stored at text precision so a panel survives a file round trip.
inline double at_text_precision(double x) { return text::parse_double(text::fmt(x), "generator"); }

}  // namespace detail

/// Every town draws its static attributes and then its yearly rows from
/// streams derived from (seed, town), so output is independent of `workers`.
inline GeneratedPanel generate_panel(const GeneratorConfig& cfg, unsigned workers = 1) {
  validate(cfg);
  const int years = cfg.last_year - cfg.first_year + 1;
  const auto towns = static_cast<std::size_t>(cfg.n_towns);
  // Regional yearly shocks: a common one plus one per index.
  std::vector<std::array<double, 4>> shock(static_cast<std::size_t>(cfg.n_regions * years));
  for (int g = 0; g < cfg.n_regions; ++g)
    for (int y = 0; y < years; ++y) {
      auto rng = make_rng(cfg.seed, {detail::kShock, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(y)});
      std::normal_distribution<double> normal(0.0, 1.0);
      auto& s = shock[static_cast<std::size_t>(g * years + y)];
      for (auto& v : s) v = normal(rng);
    }
  const double rho = cfg.index_correlation;
  const double common = std::sqrt(std::abs(rho));
  const double own = std::sqrt(cfg.shock_share - std::abs(rho));
  const double local = std::sqrt(1.0 - cfg.shock_share);
  const double sign = rho < 0.0 ? -1.0 : 1.0;

  GeneratedPanel out;
  out.config = cfg;
  out.panel.resize(towns * static_cast<std::size_t>(years));
  out.expected_claims.resize(out.panel.size());
  out.town_region.resize(towns);
  std::vector<std::optional<int>> request(towns);
  parallel_for(towns, workers, [&](std::size_t t) {
    auto rng = make_rng(cfg.seed, {detail::kTown, t});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int region = static_cast<int>(t * static_cast<std::size_t>(cfg.n_regions) / towns);
    out.town_region[t] = region;
    const double ga = std::gamma_distribution<double>(cfg.clay_beta_a, 1.0)(rng);
    const double gb = std::gamma_distribution<double>(cfg.clay_beta_b, 1.0)(rng);
    const double clay = detail::at_text_precision(100.0 * ga / (ga + gb));
    const auto exposure = std::max<std::int64_t>(
        1, std::llround(std::exp(cfg.exposure_log_mean + cfg.exposure_log_sd * normal(rng))));
    if (unif(rng) < cfg.cat_base_rate) request[t] = cfg.first_year - 1;
    for (int y = 0; y < years && !request[t]; ++y)
      if (unif(rng) < cfg.cat_yearly_rate) request[t] = cfg.first_year + y;
    for (int y = 0; y < years; ++y) {
      auto yr = make_rng(cfg.seed, {detail::kYear, t, static_cast<std::uint64_t>(y)});
      std::normal_distribution<double> n01(0.0, 1.0);
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      const auto& s = shock[static_cast<std::size_t>(region * years + y)];
      TownYearRecord r;
      r.town_id = town_name(static_cast<int>(t));
      r.year = cfg.first_year + y;
      r.exposure = exposure;
      r.sums_insured_cents = std::llround(static_cast<double>(exposure) * cfg.sum_insured_per_house * 100.0);
      r.clay = clay;
      r.cat = request[t] && *request[t] < r.year ? 1 : 0;
      r.essti = detail::at_text_precision(common * s[0] + own * s[1] + local * n01(yr));
      r.esswi = detail::at_text_precision(sign * common * s[0] + own * s[2] + local * n01(yr));
      r.espi = detail::at_text_precision(sign * common * s[0] + own * s[3] + local * n01(yr));
      const double e = static_cast<double>(exposure);
      const double eta = linear(cfg.beta, r);
      const bool structural = cfg.zero_beta && u01(yr) < glm::detail::logistic(linear(*cfg.zero_beta, r));
      if (!structural) {
        switch (cfg.family) {
          case glm::Family::Binomial:
            r.claims = std::binomial_distribution<std::int64_t>(exposure, glm::detail::logistic(eta))(yr);
            break;
          case glm::Family::NegBin: {
            const double lambda = std::gamma_distribution<double>(cfg.theta, e * std::exp(eta) / cfg.theta)(yr);
            r.claims = lambda > 0.0 ? std::poisson_distribution<std::int64_t>(lambda)(yr) : 0;
            break;
          }
          default: r.claims = std::poisson_distribution<std::int64_t>(e * std::exp(eta))(yr);
        }
      }
      if (r.claims > 0) {
        const double cost = std::gamma_distribution<double>(static_cast<double>(r.claims) * cfg.severity_shape,
                                                            cfg.severity_mean / cfg.severity_shape)(yr);
        r.cost_cents = std::max<std::int64_t>(1, std::llround(cost * 100.0));
      }
      const std::size_t i = t * static_cast<std::size_t>(years) + static_cast<std::size_t>(y);
      out.expected_claims[i] = expected_claims(cfg, r);
      out.panel[i] = std::move(r);
    }
  });
  for (std::size_t t = 0; t < towns; ++t)
    if (request[t]) out.cat_history.push_back({town_name(static_cast<int>(t)), *request[t]});
  return out;
}

/// The raw inputs a panel build would consume to reproduce this panel.
inline ingest::PanelInputs panel_inputs(const GeneratedPanel& g) {
  ingest::PanelInputs in;
  for (const auto& r : g.panel) {
    in.exposure.push_back({r.town_id, r.year, r.exposure, r.sums_insured_cents});
    if (r.claims > 0) in.claims.push_back({r.town_id, r.year, r.claims, r.cost_cents});
    in.town_indices.push_back({r.town_id, r.year, r.espi, r.esswi, r.essti});
    in.town_clay[r.town_id] = r.clay;
  }
  in.cat_history = g.cat_history;
  return in;
}

// --- truth sidecar ------------------------------------------------------

inline constexpr const char* kTruthHeader = "subsidence-truth v1";

inline std::string format_truth(const GeneratorConfig& c) {
  std::ostringstream os;
  auto coeffs = [&](const Coefficients& b) {
    std::string s;
    for (std::size_t i = 0; i < b.size(); ++i) s += (i ? " " : "") + text::fmt_exact(b[i]);
    return s;
  };
  os << kTruthHeader << '\n'
     << "n_towns " << c.n_towns << '\n'
     << "first_year " << c.first_year << '\n'
     << "last_year " << c.last_year << '\n'
     << "exposure_log_mean " << text::fmt_exact(c.exposure_log_mean) << '\n'
     << "exposure_log_sd " << text::fmt_exact(c.exposure_log_sd) << '\n'
     << "sum_insured_per_house " << text::fmt_exact(c.sum_insured_per_house) << '\n'
     << "shock_share " << text::fmt_exact(c.shock_share) << '\n'
     << "index_correlation " << text::fmt_exact(c.index_correlation) << '\n'
     << "n_regions " << c.n_regions << '\n'
     << "clay_beta_a " << text::fmt_exact(c.clay_beta_a) << '\n'
     << "clay_beta_b " << text::fmt_exact(c.clay_beta_b) << '\n'
     << "cat_base_rate " << text::fmt_exact(c.cat_base_rate) << '\n'
     << "cat_yearly_rate " << text::fmt_exact(c.cat_yearly_rate) << '\n'
     << "family " << glm::to_string(c.family) << '\n'
     << "beta " << coeffs(c.beta) << '\n'
     << "theta " << text::fmt_exact(c.theta) << '\n';
  if (c.zero_beta) os << "zero_beta " << coeffs(*c.zero_beta) << '\n';
  os << "severity_mean " << text::fmt_exact(c.severity_mean) << '\n'
     << "severity_shape " << text::fmt_exact(c.severity_shape) << '\n'
     << "seed " << c.seed << '\n';
  return os.str();
}

/// Reads `key value...` lines; unknown keys are an InvalidConfig error.
/// Accepts the truth sidecar and hand-written generator configs alike.
inline GeneratorConfig parse_config(const std::string& content, const std::string& source = "config") {
  GeneratorConfig c;
  std::istringstream in(content);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = source + ":" + std::to_string(line_no);
    const auto body = text::trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty() || body == kTruthHeader) continue;
    auto fields = text::split(body, ' ');
    std::erase_if(fields, [](const std::string& f) { return f.empty(); });
    const std::string key = fields[0];
    auto num = [&](std::size_t i = 1) {
      require(fields.size() > i, ErrorCode::InvalidConfig, where + ": missing value for " + key);
      try {
        return text::parse_double(fields[i], where);
      } catch (const Error&) {
        fail(ErrorCode::InvalidConfig, where + ": bad value for " + key + ": '" + fields[i] + "'");
      }
    };
    auto integer = [&] {
      const double v = num();
      require(v == std::floor(v), ErrorCode::InvalidConfig, where + ": " + key + " must be an integer");
      return v;
    };
    auto coeffs = [&] {
      require(fields.size() == 7, ErrorCode::InvalidConfig, where + ": " + key + " needs 6 coefficients");
      Coefficients b{};
      for (std::size_t i = 0; i < 6; ++i) b[i] = num(i + 1);
      return b;
    };
    if (key == "n_towns") c.n_towns = static_cast<int>(integer());
    else if (key == "first_year") c.first_year = static_cast<int>(integer());
    else if (key == "last_year") c.last_year = static_cast<int>(integer());
    else if (key == "exposure_log_mean") c.exposure_log_mean = num();
    else if (key == "exposure_log_sd") c.exposure_log_sd = num();
    else if (key == "sum_insured_per_house") c.sum_insured_per_house = num();
    else if (key == "shock_share") c.shock_share = num();
    else if (key == "index_correlation") c.index_correlation = num();
    else if (key == "n_regions") c.n_regions = static_cast<int>(integer());
    else if (key == "clay_beta_a") c.clay_beta_a = num();
    else if (key == "clay_beta_b") c.clay_beta_b = num();
    else if (key == "cat_base_rate") c.cat_base_rate = num();
    else if (key == "cat_yearly_rate") c.cat_yearly_rate = num();
    else if (key == "family") {
      require(fields.size() == 2, ErrorCode::InvalidConfig, where + ": family needs one value");
      try {
        c.family = glm::family_from_string(fields[1]);
      } catch (const Error&) {
        fail(ErrorCode::InvalidConfig, where + ": unknown family '" + fields[1] + "'");
      }
    } else if (key == "beta") c.beta = coeffs();
    else if (key == "theta") c.theta = num();
    else if (key == "zero_beta") c.zero_beta = coeffs();
    else if (key == "severity_mean") c.severity_mean = num();
    else if (key == "severity_shape") c.severity_shape = num();
    else if (key == "seed") {
      require(fields.size() == 2, ErrorCode::InvalidConfig, where + ": seed needs one value");
      c.seed = static_cast<std::uint64_t>(text::parse_int(fields[1], where));
    } else fail(ErrorCode::InvalidConfig, where + ": unknown key '" + key + "'");
  }
  validate(c);
  return c;
}

// --- recovery -----------------------------------------------------------

struct RecoveryRow {
  std::string parameter;
  double truth = 0.0;
  double estimate = 0.0;
  double std_error = 0.0;
  double z = 0.0;  // (estimate - truth) / se, or relative error for theta
  bool pass = false;
};

struct RecoveryResult {
  bool pass = true;
  std::vector<RecoveryRow> rows;
};

inline constexpr double kRecoverySigmas = 3.0;
inline constexpr double kThetaRelativeTolerance = 0.5;

namespace detail {

inline void compare(RecoveryResult& res, const std::string& block, const std::vector<glm::Column>& columns,
                    const Eigen::VectorXd& est, const Eigen::VectorXd& se, const Coefficients& truth,
                    double intercept_shift = 0.0) {
  for (std::size_t j = 0; j < columns.size(); ++j) {
    RecoveryRow row;
    row.parameter = block + std::string(glm::to_string(columns[j]));
    row.truth = truth[static_cast<std::size_t>(columns[j])] + (columns[j] == glm::Column::Intercept ? intercept_shift : 0.0);
    row.estimate = est[static_cast<Eigen::Index>(j)];
    row.std_error = se[static_cast<Eigen::Index>(j)];
    row.z = (row.estimate - row.truth) / row.std_error;
    row.pass = std::isfinite(row.z) && std::abs(row.z) <= kRecoverySigmas;
    res.pass = res.pass && row.pass;
    res.rows.push_back(row);
  }
}

inline void compare_theta(RecoveryResult& res, double truth, double estimate, double se) {
  RecoveryRow row{"theta", truth, estimate, se, estimate / truth - 1.0, false};
  row.pass = std::isfinite(row.z) && std::abs(row.z) <= kThetaRelativeTolerance;
  res.pass = res.pass && row.pass;
  res.rows.push_back(row);
}

}  // namespace detail

/// Compares a fitted model with the generator truth. Count GLMs and the
/// count block of zero-inflated models are held against `beta`; the zero
/// block against `zero_beta`; a gamma severity model against log(mean);
/// a total-cost model against beta shifted by log(mean).
inline RecoveryResult compare_to_truth(const GeneratorConfig& c, const cost::FrequencyModel& fitted) {
  RecoveryResult res;
  if (const auto* g = std::get_if<glm::FittedGlm>(&fitted)) {
    switch (g->kind) {
      case glm::Response::ClaimCount:
        detail::compare(res, "", g->columns, g->coefficients, g->std_errors, c.beta);
        if (g->family == glm::Family::NegBin && c.family == glm::Family::NegBin)
          detail::compare_theta(res, c.theta, g->theta, g->theta_se);
        break;
      case glm::Response::Severity:
        detail::compare(res, "severity:", g->columns, g->coefficients, g->std_errors, Coefficients{},
                        std::log(c.severity_mean));
        break;
      case glm::Response::TotalCost:
        require(!c.zero_beta && c.family != glm::Family::Binomial, ErrorCode::ModelIncompatible,
                "total-cost truth is log-linear only for poisson or negbin counts without zero inflation");
        detail::compare(res, "total:", g->columns, g->coefficients, g->std_errors, c.beta, std::log(c.severity_mean));
        break;
    }
    return res;
  }
  if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&fitted)) {
    require(c.zero_beta.has_value(), ErrorCode::ModelIncompatible, "generator has no zero-inflation block");
    detail::compare(res, "count:", z->count_columns, z->count_coefficients, z->count_std_errors, c.beta);
    detail::compare(res, "zero:", z->zero_columns, z->zero_coefficients, z->zero_std_errors, *c.zero_beta);
    if (z->family == zi::ZiFamily::Zinb && c.family == glm::Family::NegBin)
      detail::compare_theta(res, c.theta, z->theta, z->theta_se);
    return res;
  }
  fail(ErrorCode::ModelIncompatible, "forests have no coefficients to compare with the truth");
}

using Fitter = std::function<cost::FrequencyModel(const Panel&)>;

inline RecoveryResult recovery_test(const GeneratorConfig& c, const Fitter& fitter, unsigned workers = 1) {
  return compare_to_truth(c, fitter(generate_panel(c, workers).panel));
}

inline std::string format_recovery(const RecoveryResult& r) {
  std::ostringstream os;
  os << "parameter,truth,estimate,std_error,z,pass\n";
  for (const auto& row : r.rows)
    os << row.parameter << ',' << text::fmt(row.truth) << ',' << text::fmt(row.estimate) << ','
       << text::fmt(row.std_error) << ',' << text::fmt(row.z) << ',' << (row.pass ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace subsidence::synthetic
