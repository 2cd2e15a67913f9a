#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "error.hpp"
#include "forest.hpp"
#include "glm.hpp"
#include "ingest.hpp"
#include "random.hpp"
#include "zero_inflated.hpp"

namespace subsidence::cost {

/// Gamma GLM of the average cost per claim, weighted by claim count.
inline glm::FittedGlm fit_severity(const Panel& panel, std::span<const glm::Column> columns,
                                   const glm::GlmOptions& opt = {}) {
  const auto d = glm::make_design(panel, columns, glm::Response::Severity);
  require(d.rows() > 0, ErrorCode::BadResponse, "no rows with claims to fit severity on");
  return glm::fit_glm(d, glm::Family::Gamma, opt);
}

inline glm::FittedGlm fit_severity(const Panel& panel, const glm::GlmOptions& opt = {}) {
  const auto cols = glm::all_columns();
  return fit_severity(panel, cols, opt);
}

/// Any fitted claim-count model.
using FrequencyModel = std::variant<glm::FittedGlm, zi::ZeroInflatedModel, forest::Forest>;

inline std::string model_id(const FrequencyModel& m) {
  if (const auto* g = std::get_if<glm::FittedGlm>(&m)) return std::string("glm-") + std::string(glm::to_string(g->family));
  if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&m)) return std::string(zi::to_string(z->family));
  return std::string("forest-") + std::string(forest::to_string(std::get<forest::Forest>(m).mode));
}

inline double predict_count(const FrequencyModel& m, const TownYearRecord& r) {
  if (const auto* g = std::get_if<glm::FittedGlm>(&m)) {
    require(g->kind == glm::Response::ClaimCount, ErrorCode::ModelIncompatible, "frequency model is not a count model");
    return glm::predict_rate(*g, r);
  }
  if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&m)) return zi::zi_predict(*z, r);
  return forest::forest_predict(std::get<forest::Forest>(m), r);
}

struct CompoundPrediction {
  std::string town_id;
  int year = 0;
  double count = 0.0;
  double avg_cost = 0.0;
  double total = 0.0;
  std::string frequency_model_id;
  std::string severity_model_id;
};

inline void check_severity(const glm::FittedGlm& sev) {
  require(sev.family == glm::Family::Gamma && sev.kind == glm::Response::Severity, ErrorCode::ModelIncompatible,
          "severity model must be a gamma GLM on average cost");
}

/// Y = N * Z from explicit covariate vectors.
inline double compound_predict(const glm::FittedGlm& frequency, const glm::FittedGlm& severity,
                               const Eigen::VectorXd& frequency_x, const Eigen::VectorXd& severity_x,
                               double exposure) {
  check_severity(severity);
  require(frequency.kind == glm::Response::ClaimCount, ErrorCode::ModelIncompatible,
          "frequency model is not a count model");
  const double n = glm::predict_rate(frequency, frequency_x, exposure);
  const double z = glm::predict_rate(severity, severity_x, exposure);
  return n * z;
}

inline CompoundPrediction compound_predict(const FrequencyModel& frequency, const glm::FittedGlm& severity,
                                           const TownYearRecord& r, std::string severity_id = "gamma") {
  check_severity(severity);
  CompoundPrediction p;
  p.town_id = r.town_id;
  p.year = r.year;
  p.count = predict_count(frequency, r);
  p.avg_cost = glm::predict_rate(severity, r);
  p.total = p.count * p.avg_cost;
  p.frequency_model_id = model_id(frequency);
  p.severity_model_id = std::move(severity_id);
  require(p.count >= 0.0 && p.avg_cost > 0.0, ErrorCode::InvariantViolation, "negative compound component");
  return p;
}

inline std::vector<CompoundPrediction> compound_predict(const FrequencyModel& frequency,
                                                        const glm::FittedGlm& severity, const Panel& rows) {
  std::vector<CompoundPrediction> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(compound_predict(frequency, severity, r));
  return out;
}

/// One compound Poisson-gamma draw: N ~ Poisson(mean), sum of N gammas.
inline double draw_compound(Rng& rng, double mean_count, double shape, double scale) {
  if (mean_count <= 0.0) return 0.0;
  const auto n = std::poisson_distribution<std::int64_t>(mean_count)(rng);
  if (n == 0) return 0.0;
  return std::gamma_distribution<double>(static_cast<double>(n) * shape, scale)(rng);
}

inline std::vector<double> simulate_compound(double mean_count, double shape, double scale, std::size_t n,
                                             std::uint64_t seed) {
  require(mean_count >= 0.0 && shape > 0.0 && scale > 0.0, ErrorCode::InvalidParam,
          "compound simulation needs rate >= 0 and positive gamma parameters");
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& y : out) y = draw_compound(rng, mean_count, shape, scale);
  return out;
}

struct CompoundParams {
  double mean_count = 0.0;
  double shape = 0.0;
  double scale = 0.0;
};

struct TweedieParams {
  double mu = 0.0;
  double phi = 0.0;
  double power = 0.0;
};

/// Poisson-gamma parameters of a Tweedie law with power in (1, 2).
inline CompoundParams tweedie_to_compound(const TweedieParams& t) {
  require(t.power > 1.0 && t.power < 2.0, ErrorCode::PowerOutOfRange, "tweedie power must lie in (1, 2)");
  require(t.mu > 0.0 && t.phi > 0.0, ErrorCode::InvalidParam, "tweedie mean and dispersion must be > 0");
  return {std::pow(t.mu, 2.0 - t.power) / (t.phi * (2.0 - t.power)), (2.0 - t.power) / (t.power - 1.0),
          t.phi * (t.power - 1.0) * std::pow(t.mu, t.power - 1.0)};
}

inline TweedieParams compound_to_tweedie(const CompoundParams& c) {
  require(c.mean_count > 0.0 && c.shape > 0.0 && c.scale > 0.0, ErrorCode::InvalidParam,
          "compound parameters must be > 0");
  const double p = (c.shape + 2.0) / (c.shape + 1.0);
  const double mu = c.mean_count * c.shape * c.scale;
  return {mu, std::pow(mu, 2.0 - p) / (c.mean_count * (2.0 - p)), p};
}

struct CostOptions {
  double tweedie_power = 1.5;
  forest::Hyperparameters forest;
  unsigned workers = 1;
};

/// The three total-cost pipelines compared on a target year.
struct CostModels {
  std::optional<zi::ZeroInflatedModel> zinb;
  std::optional<forest::Forest> forest;
  std::optional<glm::FittedGlm> severity;
  std::optional<glm::FittedGlm> tweedie;
};

inline const std::vector<std::string>& cost_methods() {
  static const std::vector<std::string> names{"zinb+gamma", "rfp+gamma", "tweedie"};
  return names;
}

inline CostModels fit_cost_models(const Panel& history, const CostOptions& opt = {}) {
  CostModels m;
  const auto cols = glm::all_columns();
  m.zinb = zi::fit_zero_inflated(history, cols, cols, zi::ZiFamily::Zinb);
  m.forest = forest::forest_fit(history, opt.forest, forest::Mode::Poisson, opt.workers);
  m.severity = fit_severity(history);
  const auto tcols = glm::cost_columns();
  auto d = glm::make_design(history, tcols, glm::Response::TotalCost);
  glm::GlmOptions gopt;
  gopt.tweedie_density = false;
  m.tweedie = glm::fit_tweedie(d, opt.tweedie_power, gopt);
  return m;
}

struct TownCost {
  std::string town_id;
  int year = 0;
  std::int64_t exposure = 0;
  std::optional<double> observed;
  std::vector<double> count;     // per method; NaN for tweedie
  std::vector<double> avg_cost;  // per method; NaN for tweedie
  std::vector<double> total;     // per method
};

struct CostComparison {
  int year = 0;
  std::vector<std::string> methods;
  std::vector<double> totals;
  std::optional<double> observed_total;
  std::vector<std::optional<double>> rmse;
  std::vector<TownCost> towns;
};

/// Yearly national totals per pipeline on the given rows. When `observed`
/// is set the rows' cost is the observation and per-town RMSE is reported.
inline CostComparison compare_cost_models(const CostModels& models, const Panel& rows, int year, bool observed) {
  require(models.zinb && models.forest && models.severity && models.tweedie, ErrorCode::MissingModel,
          "all three cost pipelines must be fitted");
  CostComparison c;
  c.year = year;
  c.methods = cost_methods();
  const std::size_t k = c.methods.size();
  c.totals.assign(k, 0.0);
  std::vector<double> sq(k, 0.0);
  double obs = 0.0;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rows) {
    if (r.year != year) continue;
    TownCost t;
    t.town_id = r.town_id;
    t.year = r.year;
    t.exposure = r.exposure;
    const double z = glm::predict_rate(*models.severity, r);
    const double n_zinb = zi::zi_predict(*models.zinb, r);
    const double n_rf = forest::forest_predict(*models.forest, r);
    t.count = {n_zinb, n_rf, nan};
    t.avg_cost = {z, z, nan};
    t.total = {n_zinb * z, n_rf * z, glm::predict_rate(*models.tweedie, r)};
    if (observed) {
      t.observed = r.cost();
      obs += r.cost();
      for (std::size_t j = 0; j < k; ++j) sq[j] += (t.total[j] - r.cost()) * (t.total[j] - r.cost());
    }
    for (std::size_t j = 0; j < k; ++j) c.totals[j] += t.total[j];
    c.towns.push_back(std::move(t));
  }
  c.rmse.assign(k, std::nullopt);
  if (observed && !c.towns.empty()) {
    c.observed_total = obs;
    for (std::size_t j = 0; j < k; ++j) c.rmse[j] = std::sqrt(sq[j] / static_cast<double>(c.towns.size()));
  }
  return c;
}

/// Fits on years before `year` and compares on that year's rows.
inline CostComparison compare_cost_models(const Panel& panel, int year, const CostOptions& opt = {}) {
  Panel history, target;
  for (const auto& r : panel) (r.year < year ? history : target).push_back(r);
  std::erase_if(target, [&](const TownYearRecord& r) { return r.year != year; });
  require(!history.empty(), ErrorCode::InsufficientHistory, "no rows before " + std::to_string(year));
  return compare_cost_models(fit_cost_models(history, opt), target, year, !target.empty());
}

}  // namespace subsidence::cost
