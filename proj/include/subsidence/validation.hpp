#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cost_models.hpp"
#include "error.hpp"
#include "forest.hpp"
#include "glm.hpp"
#include "ingest.hpp"
#include "parallel.hpp"
#include "zero_inflated.hpp"

namespace subsidence::validation {

enum class FoldKind { Temporal, Spatial };

/// Temporal folds train on [train_first, train_last] and test on test_year.
/// Spatial folds train on every region but `region` and test on it.
struct CvFold {
  FoldKind kind = FoldKind::Temporal;
  int train_first = 0;
  int train_last = 0;
  int test_year = 0;
  std::optional<int> region;
  std::set<std::string> holdout_towns;
  std::vector<std::string> flags;

  std::string label() const {
    return kind == FoldKind::Temporal ? std::to_string(test_year) : "region-" + std::to_string(region.value_or(-1));
  }
};

struct FoldData {
  Panel train;
  Panel test;
};

/// Copies the fold's rows out of the panel. Training never sees a row the
/// fold does not own.
inline FoldData partition(const Panel& panel, const CvFold& fold) {
  FoldData d;
  for (const auto& r : panel) {
    if (fold.kind == FoldKind::Temporal) {
      if (r.year >= fold.train_first && r.year <= fold.train_last) d.train.push_back(r);
      else if (r.year == fold.test_year) d.test.push_back(r);
    } else {
      (fold.holdout_towns.contains(r.town_id) ? d.test : d.train).push_back(r);
    }
  }
  return d;
}

inline std::pair<int, int> year_span(const Panel& panel) {
  require(!panel.empty(), ErrorCode::InsufficientHistory, "empty panel");
  auto [lo, hi] = std::minmax_element(panel.begin(), panel.end(),
                                      [](const TownYearRecord& a, const TownYearRecord& b) { return a.year < b.year; });
  return {lo->year, hi->year};
}

/// One fold per test year in [first_test_year, last_test_year], each trained
/// on every earlier year in the panel.
inline std::vector<CvFold> temporal_folds(const Panel& panel, int first_test_year, int last_test_year) {
  std::vector<CvFold> folds;
  if (last_test_year < first_test_year) return folds;
  const auto [first, last] = year_span(panel);
  std::set<int> years;
  for (const auto& r : panel) years.insert(r.year);
  for (int t = first_test_year; t <= last_test_year; ++t) {
    require(t > first, ErrorCode::InsufficientHistory, "no training years before " + std::to_string(t));
    require(years.contains(t), ErrorCode::InsufficientHistory,
            "panel has no rows for test year " + std::to_string(t) + " (spans " + std::to_string(first) + "-" +
                std::to_string(last) + ")");
    CvFold f;
    f.train_first = first;
    f.train_last = t - 1;
    f.test_year = t;
    if (f.train_last == f.train_first) f.flags.emplace_back("single_training_year");
    folds.push_back(std::move(f));
  }
  return folds;
}

/// Regions are numbered 0..k-1.
inline std::vector<CvFold> spatial_folds(const Panel& panel, const std::map<std::string, int>& region, int k) {
  require(k >= 2, ErrorCode::InvalidParam, "spatial folds need k >= 2");
  const auto [first, last] = year_span(panel);
  std::vector<CvFold> folds(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    folds[static_cast<std::size_t>(i)].kind = FoldKind::Spatial;
    folds[static_cast<std::size_t>(i)].region = i;
    folds[static_cast<std::size_t>(i)].train_first = first;
    folds[static_cast<std::size_t>(i)].train_last = last;
  }
  for (const auto& r : panel) {
    const auto it = region.find(r.town_id);
    require(it != region.end(), ErrorCode::UnassignedTown, "town " + r.town_id + " has no region");
    require(it->second >= 0 && it->second < k, ErrorCode::UnassignedTown,
            "town " + r.town_id + " assigned to region " + std::to_string(it->second) + " outside [0, " +
                std::to_string(k) + ")");
    folds[static_cast<std::size_t>(it->second)].holdout_towns.insert(r.town_id);
  }
  for (auto& f : folds)
    if (f.holdout_towns.empty()) f.flags.emplace_back("empty_region");
  return folds;
}

/// Contiguous blocks of sorted town ids.
inline std::map<std::string, int> block_regions(const Panel& panel, int k) {
  require(k >= 1, ErrorCode::InvalidParam, "need at least one region");
  std::set<std::string> towns;
  for (const auto& r : panel) towns.insert(r.town_id);
  std::map<std::string, int> out;
  std::size_t i = 0;
  for (const auto& t : towns) out[t] = static_cast<int>(i++ * static_cast<std::size_t>(k) / towns.size());
  return out;
}

inline double rmse(std::span<const double> predictions, std::span<const double> observations) {
  require(predictions.size() == observations.size(), ErrorCode::KeyMismatch,
          std::to_string(predictions.size()) + " predictions for " + std::to_string(observations.size()) +
              " observations");
  require(!predictions.empty(), ErrorCode::KeyMismatch, "no aligned rows");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - observations[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(predictions.size()));
}

using Keyed = std::map<std::string, double>;

/// Joins on key; both sides must carry the same key set.
inline double rmse(const Keyed& predictions, const Keyed& observations) {
  require(predictions.size() == observations.size(), ErrorCode::KeyMismatch,
          std::to_string(predictions.size()) + " predicted keys vs " + std::to_string(observations.size()) +
              " observed keys");
  std::vector<double> p, o;
  for (auto a = predictions.begin(), b = observations.begin(); a != predictions.end(); ++a, ++b) {
    require(a->first == b->first, ErrorCode::KeyMismatch, "key " + a->first + " vs " + b->first);
    p.push_back(a->second);
    o.push_back(b->second);
  }
  return rmse(p, o);
}

/// Total Poisson deviance 2 sum[y log(y/mu) - (y - mu)].
inline double poisson_deviance(std::span<const double> predictions, std::span<const double> observations) {
  require(predictions.size() == observations.size(), ErrorCode::KeyMismatch, "prediction/observation count differ");
  double d = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double y = observations[i], mu = predictions[i];
    if (mu <= 0.0) {
      if (y > 0.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    d += 2.0 * ((y > 0.0 ? y * std::log(y / mu) : 0.0) - (y - mu));
  }
  return d;
}

inline const std::vector<double>& default_prune_grid() {
  static const std::vector<double> grid{0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};
  return grid;
}

inline std::vector<double> apply_threshold(std::span<const double> predictions, double tau) {
  std::vector<double> out(predictions.begin(), predictions.end());
  for (auto& v : out)
    if (v < tau) v = 0.0;
  return out;
}

struct PruneResult {
  std::vector<double> pruned;
  double threshold = 0.0;
  std::vector<std::pair<double, double>> validation_rmse;  // (tau, rmse)
  double total_before = 0.0;
  double total_after = 0.0;

  double relative_change() const { return total_before == 0.0 ? 0.0 : (total_after - total_before) / total_before; }
};

/// Picks tau on the held-out fold (smallest tau among RMSE ties) and zeroes
/// target predictions below it.
inline PruneResult prune_low_predictions(std::span<const double> predictions, std::span<const double> fold_predictions,
                                         std::span<const double> fold_observations,
                                         std::span<const double> grid = default_prune_grid()) {
  require(!fold_predictions.empty(), ErrorCode::NoValidationFold, "threshold selection needs a held-out fold");
  require(!grid.empty(), ErrorCode::InvalidParam, "empty threshold grid");
  PruneResult r;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> taus(grid.begin(), grid.end());
  std::sort(taus.begin(), taus.end());
  for (double tau : taus) {
    const double e = rmse(apply_threshold(fold_predictions, tau), fold_observations);
    r.validation_rmse.emplace_back(tau, e);
    if (e < best) {
      best = e;
      r.threshold = tau;
    }
  }
  r.pruned = apply_threshold(predictions, r.threshold);
  for (double v : predictions) r.total_before += v;
  for (double v : r.pruned) r.total_after += v;
  return r;
}

enum class ModelKind { Poisson, Binomial, NegBin, Zip, Zinb, ForestPoisson, ForestSquared };

inline const std::vector<std::pair<ModelKind, std::string_view>>& model_kind_names() {
  static const std::vector<std::pair<ModelKind, std::string_view>> names{
      {ModelKind::Poisson, "poisson"},        {ModelKind::Binomial, "binomial"}, {ModelKind::NegBin, "negbin"},
      {ModelKind::Zip, "zip"},                {ModelKind::Zinb, "zinb"},         {ModelKind::ForestPoisson, "rf-poisson"},
      {ModelKind::ForestSquared, "rf-squared"}};
  return names;
}

inline std::string_view to_string(ModelKind k) {
  for (const auto& [kind, name] : model_kind_names())
    if (kind == k) return name;
  return "?";
}

inline ModelKind model_kind_from_string(std::string_view s) {
  for (const auto& [kind, name] : model_kind_names())
    if (name == s) return kind;
  fail(ErrorCode::UsageError, "unknown model '" + std::string(s) + "'");
}

using Fitter = std::function<cost::FrequencyModel(const Panel&)>;

struct ModelSpec {
  std::string id;
  ModelKind kind = ModelKind::Poisson;
  std::vector<glm::Column> columns = glm::all_columns();
  std::vector<glm::Column> zero_columns = glm::all_columns();
  forest::Hyperparameters forest;
  Fitter custom;  // replaces the built-in fit when set
};

inline ModelSpec model_spec(ModelKind kind) {
  ModelSpec s;
  s.kind = kind;
  s.id = std::string(to_string(kind));
  return s;
}

inline cost::FrequencyModel fit_model(const ModelSpec& spec, const Panel& train) {
  if (spec.custom) return spec.custom(train);
  switch (spec.kind) {
    case ModelKind::Poisson: return glm::fit_glm(glm::make_design(train, spec.columns), glm::Family::Poisson);
    case ModelKind::Binomial: return glm::fit_glm(glm::make_design(train, spec.columns), glm::Family::Binomial);
    case ModelKind::NegBin: return glm::fit_glm(glm::make_design(train, spec.columns), glm::Family::NegBin);
    case ModelKind::Zip: return zi::fit_zero_inflated(train, spec.columns, spec.zero_columns, zi::ZiFamily::Zip);
    case ModelKind::Zinb: return zi::fit_zero_inflated(train, spec.columns, spec.zero_columns, zi::ZiFamily::Zinb);
    case ModelKind::ForestPoisson: return forest::forest_fit(train, spec.forest, forest::Mode::Poisson);
    case ModelKind::ForestSquared: return forest::forest_fit(train, spec.forest, forest::Mode::Squared);
  }
  fail(ErrorCode::UsageError, "unknown model kind");
}

/// AIC/BIC of a training fit; NaN for models without a likelihood.
inline glm::InformationCriteria model_information_criteria(const cost::FrequencyModel& m) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  if (const auto* g = std::get_if<glm::FittedGlm>(&m)) return g->has_likelihood ? glm::information_criteria(*g) : glm::InformationCriteria{nan, nan};
  if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&m)) return zi::information_criteria(*z);
  return {nan, nan};
}

struct FoldResult {
  std::string fold;
  int test_year = 0;
  std::string model;
  double aic = 0.0;
  double bic = 0.0;
  double rmse = 0.0;
  double deviance = 0.0;
  double predicted_total = 0.0;
  double observed_total = 0.0;
  std::size_t test_rows = 0;
  std::vector<std::string> flags;
};

struct ModelSummary {
  std::string model;
  double aic = 0.0;
  double bic = 0.0;
  double rmse = 0.0;
  double deviance = 0.0;
  double total_rmse = 0.0;  // RMSE of national totals across folds
};

struct CvReport {
  std::vector<FoldResult> folds;  // fold-major, models in input order
  std::vector<ModelSummary> summary;
  std::vector<std::pair<std::string, std::vector<double>>> town_predictions;  // per (fold, model), in test-row order
  double observed_grand_total = 0.0;  // over folds; divides totals for normalized shares
};

struct ReportOptions {
  unsigned workers = 1;
  bool keep_town_predictions = false;
};

/// Fits every model on every fold's training rows and scores it on the test
/// rows. Folds run in parallel; output order is fold-major.
inline CvReport yearly_report(const Panel& panel, const std::vector<ModelSpec>& models,
                              const std::vector<CvFold>& folds, const ReportOptions& opt = {}) {
  require(!models.empty(), ErrorCode::MissingModel, "no models to validate");
  const std::size_t m = models.size();
  std::vector<FoldResult> results(folds.size() * m);
  std::vector<std::vector<double>> town(folds.size() * m);
  parallel_for(folds.size(), opt.workers, [&](std::size_t f) {
    const auto data = partition(panel, folds[f]);
    require(!data.train.empty(), ErrorCode::InsufficientHistory, "fold " + folds[f].label() + " has no training rows");
    std::vector<double> obs;
    obs.reserve(data.test.size());
    for (const auto& r : data.test) obs.push_back(static_cast<double>(r.claims));
    for (std::size_t j = 0; j < m; ++j) {
      const auto fitted = fit_model(models[j], data.train);
      const auto ic = model_information_criteria(fitted);
      std::vector<double> pred;
      pred.reserve(data.test.size());
      for (const auto& r : data.test) pred.push_back(cost::predict_count(fitted, r));
      auto& out = results[f * m + j];
      out.fold = folds[f].label();
      out.test_year = folds[f].test_year;
      out.model = models[j].id;
      out.aic = ic.aic;
      out.bic = ic.bic;
      out.test_rows = pred.size();
      out.rmse = pred.empty() ? std::numeric_limits<double>::quiet_NaN() : rmse(pred, obs);
      out.deviance = poisson_deviance(pred, obs);
      for (double v : pred) out.predicted_total += v;
      for (double v : obs) out.observed_total += v;
      out.flags = folds[f].flags;
      if (opt.keep_town_predictions) town[f * m + j] = std::move(pred);
    }
  });
  CvReport rep;
  rep.folds = std::move(results);
  for (std::size_t f = 0; f < folds.size(); ++f) rep.observed_grand_total += rep.folds[f * m].observed_total;
  for (std::size_t j = 0; j < m; ++j) {
    ModelSummary s;
    s.model = models[j].id;
    double sq = 0.0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      const auto& r = rep.folds[f * m + j];
      s.aic += r.aic;
      s.bic += r.bic;
      s.rmse += r.rmse;
      s.deviance += r.deviance;
      sq += (r.predicted_total - r.observed_total) * (r.predicted_total - r.observed_total);
    }
    const double n = static_cast<double>(folds.size());
    if (n > 0) {
      s.aic /= n;
      s.bic /= n;
      s.rmse /= n;
      s.deviance /= n;
      s.total_rmse = std::sqrt(sq / n);
    }
    rep.summary.push_back(s);
  }
  if (opt.keep_town_predictions)
    for (std::size_t i = 0; i < town.size(); ++i)
      rep.town_predictions.emplace_back(rep.folds[i].fold + "/" + rep.folds[i].model, std::move(town[i]));
  return rep;
}

}  // namespace subsidence::validation
