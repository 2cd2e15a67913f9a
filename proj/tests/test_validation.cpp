#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "subsidence/validation.hpp"

using namespace subsidence;
using namespace subsidence::validation;

namespace {

Panel small_panel(std::uint64_t seed, int towns, int first_year, int last_year) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Panel panel;
  for (int y = first_year; y <= last_year; ++y)
    for (int t = 0; t < towns; ++t) {
      TownYearRecord r;
      r.town_id = "T" + std::to_string(1000 + t);
      r.year = y;
      r.essti = normal(rng);
      r.esswi = -0.5 * r.essti + std::sqrt(0.75) * normal(rng);
      r.espi = normal(rng);
      r.clay = 60.0 * unif(rng);
      r.cat = unif(rng) < 0.3 ? 1 : 0;
      r.exposure = 1000 + 100 * t;
      const double eta = -8.0 + 0.9 * r.essti - 0.4 * r.esswi + 0.02 * r.clay + 1.5 * r.cat;
      const bool structural = unif(rng) < 0.4;
      r.claims = structural ? 0 : std::poisson_distribution<std::int64_t>(r.exposure * std::exp(eta))(rng);
      panel.push_back(r);
    }
  return panel;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::UsageError;
}

}  // namespace

TEST(TemporalFolds, OneFoldPerTestYearWithNestedPastTraining) {
  const auto panel = small_panel(1, 3, 2001, 2018);
  const auto folds = temporal_folds(panel, 2003, 2018);
  ASSERT_EQ(folds.size(), 16u);
  for (std::size_t i = 0; i < folds.size(); ++i) {
    EXPECT_EQ(folds[i].train_first, 2001);
    EXPECT_EQ(folds[i].test_year, folds[i].train_last + 1);
    EXPECT_EQ(folds[i].test_year, 2003 + static_cast<int>(i));
    const auto d = partition(panel, folds[i]);
    for (const auto& r : d.train) EXPECT_LT(r.year, folds[i].test_year);
    for (const auto& r : d.test) EXPECT_EQ(r.year, folds[i].test_year);
    EXPECT_EQ(d.test.size(), 3u);
    EXPECT_EQ(d.train.size(), 3u * static_cast<std::size_t>(folds[i].test_year - 2001));
  }
}

TEST(TemporalFolds, EarliestFoldTrainsOnOneYearAndIsFlagged) {
  const auto panel = small_panel(1, 3, 2001, 2018);
  const auto folds = temporal_folds(panel, 2002, 2003);
  ASSERT_EQ(folds.size(), 2u);
  EXPECT_EQ(folds[0].train_last, 2001);
  EXPECT_EQ(folds[0].flags, std::vector<std::string>{"single_training_year"});
  EXPECT_TRUE(folds[1].flags.empty());
}

TEST(TemporalFolds, EmptyAndInsufficient) {
  const auto panel = small_panel(1, 3, 2001, 2018);
  EXPECT_TRUE(temporal_folds(panel, 2010, 2009).empty());
  EXPECT_EQ(code_of([&] { temporal_folds(panel, 2001, 2005); }), ErrorCode::InsufficientHistory);
  EXPECT_EQ(code_of([&] { temporal_folds(panel, 2018, 2019); }), ErrorCode::InsufficientHistory);
}

TEST(SpatialFolds, TwoRegionsAreComplementary) {
  const auto panel = small_panel(2, 6, 2001, 2004);
  const auto regions = block_regions(panel, 2);
  const auto folds = spatial_folds(panel, regions, 2);
  ASSERT_EQ(folds.size(), 2u);
  const auto a = partition(panel, folds[0]), b = partition(panel, folds[1]);
  EXPECT_EQ(a.test.size() + b.test.size(), panel.size());
  EXPECT_EQ(a.train.size(), b.test.size());
  EXPECT_EQ(b.train.size(), a.test.size());
}

TEST(SpatialFolds, UnassignedTown) {
  const auto panel = small_panel(2, 6, 2001, 2002);
  auto regions = block_regions(panel, 3);
  regions.erase(regions.begin());
  EXPECT_EQ(code_of([&] { spatial_folds(panel, regions, 3); }), ErrorCode::UnassignedTown);
  auto out_of_range = block_regions(panel, 3);
  out_of_range.begin()->second = 3;
  EXPECT_EQ(code_of([&] { spatial_folds(panel, out_of_range, 3); }), ErrorCode::UnassignedTown);
}

TEST(SpatialFolds, FiveFoldsPartitionEveryRowOnce) {
  const auto panel = small_panel(3, 23, 2001, 2005);
  std::mt19937_64 rng(5);
  std::map<std::string, int> regions;
  for (const auto& r : panel) regions.emplace(r.town_id, static_cast<int>(rng() % 5));
  const auto folds = spatial_folds(panel, regions, 5);
  std::vector<int> hits(panel.size(), 0);
  for (const auto& f : folds) {
    const auto d = partition(panel, f);
    EXPECT_EQ(d.train.size() + d.test.size(), panel.size());
    for (std::size_t i = 0; i < panel.size(); ++i)
      if (regions.at(panel[i].town_id) == *f.region) {
        ++hits[i];
        EXPECT_TRUE(f.holdout_towns.contains(panel[i].town_id));
      }
    for (const auto& r : d.train) EXPECT_NE(regions.at(r.town_id), *f.region);
  }
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Rmse, ForcedValues) {
  const std::vector<double> obs{1.0, 2.0, 3.0};
  EXPECT_EQ(rmse(obs, obs), 0.0);
  const std::vector<double> p{3.0, -4.0}, z{0.0, 0.0};
  EXPECT_DOUBLE_EQ(rmse(p, z), std::sqrt(12.5));
}

TEST(Rmse, FiftyRowFixtureMatchesLongDoubleRecomputation) {
  std::mt19937_64 rng(50);
  std::uniform_real_distribution<double> unif(0.0, 10.0);
  std::vector<double> p(50), o(50);
  long double s = 0.0L;
  for (int i = 0; i < 50; ++i) {
    p[i] = unif(rng);
    o[i] = std::floor(unif(rng));
    s += (static_cast<long double>(p[i]) - o[i]) * (static_cast<long double>(p[i]) - o[i]);
  }
  EXPECT_NEAR(rmse(p, o), static_cast<double>(std::sqrt(s / 50.0L)), 1e-12);
}

TEST(Rmse, KeyedJoinAndMismatch) {
  const Keyed pred{{"a", 1.0}, {"b", 5.0}}, obs{{"b", 1.0}, {"a", 4.0}};
  EXPECT_DOUBLE_EQ(rmse(pred, obs), std::sqrt(12.5));
  EXPECT_EQ(code_of([&] { rmse(pred, Keyed{{"a", 1.0}, {"c", 1.0}}); }), ErrorCode::KeyMismatch);
  EXPECT_EQ(code_of([&] { rmse(pred, Keyed{{"a", 1.0}}); }), ErrorCode::KeyMismatch);
  const std::vector<double> two{1.0, 2.0}, one{1.0};
  EXPECT_EQ(code_of([&] { rmse(two, one); }), ErrorCode::KeyMismatch);
}

TEST(PoissonDeviance, HandValues) {
  const std::vector<double> mu{1.0, 2.0, 0.5}, y{1.0, 0.0, 3.0};
  const double expected = 2.0 * (0.0 + 2.0 + (3.0 * std::log(6.0) - 2.5));
  EXPECT_NEAR(poisson_deviance(mu, y), expected, 1e-12);
  EXPECT_EQ(poisson_deviance(y, y), 0.0);
}

TEST(PruneLowPredictions, SingletonZeroGridIsIdentity) {
  const std::vector<double> pred{0.001, 0.3, 2.0}, fold{0.01, 1.0}, obs{0.0, 1.0};
  const std::vector<double> grid{0.0};
  const auto r = prune_low_predictions(pred, fold, obs, grid);
  EXPECT_EQ(r.pruned, pred);
  EXPECT_EQ(r.threshold, 0.0);
  EXPECT_EQ(r.relative_change(), 0.0);
}

TEST(PruneLowPredictions, LargePredictionsUnchanged) {
  const std::vector<double> pred{1.5, 3.0, 7.0}, fold{0.001, 2.0}, obs{0.0, 2.0};
  const auto r = prune_low_predictions(pred, fold, obs);
  EXPECT_GT(r.threshold, 0.0);
  EXPECT_EQ(r.pruned, pred);
}

TEST(PruneLowPredictions, SparseTruthChoosesImprovingThreshold) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> fold, obs;
  for (int i = 0; i < 2000; ++i) {
    if (unif(rng) < 0.9) {
      fold.push_back(0.08 * unif(rng));
      obs.push_back(0.0);
    } else {
      const double m = 1.0 + 4.0 * unif(rng);
      fold.push_back(m);
      obs.push_back(std::floor(m + unif(rng)));
    }
  }
  const auto r = prune_low_predictions(fold, fold, obs);
  // Grid-search oracle.
  double best_tau = 0.0, best = 1e300;
  for (double tau : default_prune_grid()) {
    double s = 0.0;
    for (std::size_t i = 0; i < fold.size(); ++i) {
      const double p = fold[i] < tau ? 0.0 : fold[i];
      s += (p - obs[i]) * (p - obs[i]);
    }
    if (s < best) {
      best = s;
      best_tau = tau;
    }
  }
  EXPECT_EQ(r.threshold, best_tau);
  EXPECT_GT(r.threshold, 0.0);
  EXPECT_LT(r.validation_rmse[std::size_t(std::find(default_prune_grid().begin(), default_prune_grid().end(),
                                                    r.threshold) - default_prune_grid().begin())].second,
            r.validation_rmse[0].second);
  double kept = 0.0;
  for (double v : fold)
    if (v >= r.threshold) kept += v;
  EXPECT_DOUBLE_EQ(r.total_after, kept);
}

TEST(PruneLowPredictions, NeedsValidationFold) {
  const std::vector<double> pred{1.0}, none;
  EXPECT_EQ(code_of([&] { prune_low_predictions(pred, none, none); }), ErrorCode::NoValidationFold);
}

TEST(YearlyReport, SingleModelSingleFold) {
  const auto panel = small_panel(4, 40, 2001, 2004);
  const auto folds = temporal_folds(panel, 2004, 2004);
  const auto rep = yearly_report(panel, {model_spec(ModelKind::Poisson)}, folds);
  ASSERT_EQ(rep.folds.size(), 1u);
  const auto& row = rep.folds[0];
  EXPECT_EQ(row.test_year, 2004);
  EXPECT_EQ(row.test_rows, 40u);
  EXPECT_TRUE(std::isfinite(row.aic));
  EXPECT_GT(row.bic, row.aic);
  double observed = 0.0;
  for (const auto& r : panel)
    if (r.year == 2004) observed += static_cast<double>(r.claims);
  EXPECT_EQ(row.observed_total, observed);
  EXPECT_EQ(rep.summary.size(), 1u);
}

TEST(YearlyReport, IdenticalModelsGiveIdenticalRowsAndWorkersDoNotMatter) {
  const auto panel = small_panel(5, 40, 2001, 2006);
  const auto folds = temporal_folds(panel, 2004, 2006);
  auto a = model_spec(ModelKind::Zip), b = model_spec(ModelKind::Zip);
  b.id = "zip-copy";
  const auto serial = yearly_report(panel, {a, b}, folds);
  ReportOptions opt;
  opt.workers = 3;
  const auto parallel = yearly_report(panel, {a, b}, folds, opt);
  ASSERT_EQ(serial.folds.size(), 6u);
  for (std::size_t f = 0; f < 3; ++f) {
    const auto& x = serial.folds[2 * f];
    const auto& y = serial.folds[2 * f + 1];
    EXPECT_EQ(x.aic, y.aic);
    EXPECT_EQ(x.rmse, y.rmse);
    EXPECT_EQ(x.predicted_total, y.predicted_total);
  }
  for (std::size_t i = 0; i < serial.folds.size(); ++i) {
    EXPECT_EQ(serial.folds[i].model, parallel.folds[i].model);
    EXPECT_EQ(serial.folds[i].deviance, parallel.folds[i].deviance);
    EXPECT_EQ(serial.folds[i].predicted_total, parallel.folds[i].predicted_total);
  }
}

TEST(AntiLeakage, FutureSentinelLeavesEveryTrainingFitBitIdentical) {
  const auto panel = small_panel(6, 60, 2001, 2008);
  const auto folds = temporal_folds(panel, 2002, 2008);
  for (const auto& fold : folds) {
    // The sentinel carries each future row's own response in a covariate.
    Panel injected = panel;
    for (auto& r : injected)
      if (r.year >= fold.test_year) r.espi = static_cast<double>(r.claims);
    const auto clean = partition(panel, fold), dirty = partition(injected, fold);
    for (auto kind : {ModelKind::Poisson, ModelKind::Zip}) {
      const auto a = fit_model(model_spec(kind), clean.train);
      const auto b = fit_model(model_spec(kind), dirty.train);
      if (kind == ModelKind::Poisson) {
        const auto& ga = std::get<glm::FittedGlm>(a);
        const auto& gb = std::get<glm::FittedGlm>(b);
        for (Eigen::Index j = 0; j < ga.coefficients.size(); ++j)
          EXPECT_EQ(ga.coefficients[j], gb.coefficients[j]) << fold.label();
        EXPECT_EQ(ga.log_likelihood, gb.log_likelihood);
      } else {
        const auto& za = std::get<zi::ZeroInflatedModel>(a);
        const auto& zb = std::get<zi::ZeroInflatedModel>(b);
        for (Eigen::Index j = 0; j < za.count_coefficients.size(); ++j) {
          EXPECT_EQ(za.count_coefficients[j], zb.count_coefficients[j]) << fold.label();
          EXPECT_EQ(za.zero_coefficients[j], zb.zero_coefficients[j]) << fold.label();
        }
      }
    }
  }
}

TEST(AntiLeakage, FittersNeverReceiveTestYearRows) {
  const auto panel = small_panel(7, 20, 2001, 2006);
  const auto folds = temporal_folds(panel, 2003, 2006);
  ModelSpec spy = model_spec(ModelKind::Poisson);
  spy.id = "spy";
  std::vector<int> max_seen(folds.size(), 0);
  std::size_t call = 0;
  spy.custom = [&](const Panel& train) {
    int hi = 0;
    for (const auto& r : train) hi = std::max(hi, r.year);
    max_seen[call++] = hi;
    const auto cols = glm::all_columns();
    return cost::FrequencyModel{glm::fit_glm(glm::make_design(train, cols), glm::Family::Poisson)};
  };
  yearly_report(panel, {spy}, folds);
  for (std::size_t i = 0; i < folds.size(); ++i) EXPECT_EQ(max_seen[i], folds[i].test_year - 1);
}

TEST(ModelKinds, NamesRoundTrip) {
  for (const auto& [kind, name] : model_kind_names()) EXPECT_EQ(model_kind_from_string(name), kind);
  EXPECT_EQ(code_of([] { model_kind_from_string("gbm"); }), ErrorCode::UsageError);
}
