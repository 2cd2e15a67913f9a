#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "subsidence/synthetic.hpp"
#include "subsidence/zero_inflated.hpp"

using namespace subsidence;
using namespace subsidence::zi;
using glm::Column;

namespace {

const double kCount[6] = {-6.0, 0.8, -0.4, 0.02, 1.0, -0.1};
const double kZero[6] = {0.4, -0.6, 0.3, 0.01, -0.8, 0.1};

// Draws a panel from a zero-inflated model; theta <= 0 means Poisson counts.
Panel zi_panel(std::uint64_t seed, int rows, const double* count, const double* zero, double theta = 0.0,
               double zero_shift = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Panel panel;
  for (int i = 0; i < rows; ++i) {
    TownYearRecord r;
    r.town_id = "T" + std::to_string(i);
    r.year = 2001 + i % 10;
    r.essti = normal(rng);
    r.esswi = -0.5 * r.essti + std::sqrt(0.75) * normal(rng);
    r.espi = normal(rng);
    r.clay = 60.0 * unif(rng);
    r.cat = unif(rng) < 0.3 ? 1 : 0;
    r.exposure = static_cast<std::int64_t>(500 + 4500 * unif(rng));
    const double x[6] = {1.0, r.essti, r.esswi, r.clay, static_cast<double>(r.cat), r.espi};
    double ec = 0.0, ez = zero_shift;
    for (int j = 0; j < 6; ++j) {
      ec += count[j] * x[j];
      ez += zero ? zero[j] * x[j] : 0.0;
    }
    const double mean = static_cast<double>(r.exposure) * std::exp(ec);
    const double p = zero ? 1.0 / (1.0 + std::exp(-ez)) : 0.0;
    const bool structural = unif(rng) < p;
    double lambda = mean;
    if (theta > 0.0) lambda = std::gamma_distribution<double>(theta, mean / theta)(rng);
    const std::int64_t draw = std::poisson_distribution<std::int64_t>(lambda)(rng);
    r.claims = structural ? 0 : draw;
    panel.push_back(r);
  }
  return panel;
}

double poisson_pmf(int y, double mean) { return std::exp(y * std::log(mean) - mean - std::lgamma(y + 1.0)); }

ZeroInflatedModel fit(const Panel& panel, ZiFamily f, const ZiOptions& opt = {}) {
  return fit_zero_inflated(panel, glm::all_columns(), glm::all_columns(), f, opt);
}

}  // namespace

TEST(ZiPmf, DegenerateAndNestedCases) {
  EXPECT_EQ(zi_pmf(0, 1.0, 3.0, ZiFamily::Zip), 1.0);
  EXPECT_EQ(zi_pmf(4, 1.0, 3.0, ZiFamily::Zip), 0.0);
  for (int y = 0; y < 10; ++y) EXPECT_NEAR(zi_pmf(y, 0.0, 2.5, ZiFamily::Zip), poisson_pmf(y, 2.5), 1e-15);
  EXPECT_NEAR(zi_pmf(0, 0.3, 2.0, ZiFamily::Zip), 0.3947346982656289, 1e-15);
}

TEST(ZiPmf, InvalidParameters) {
  EXPECT_THROW(zi_pmf(0, -0.1, 1.0, ZiFamily::Zip), Error);
  EXPECT_THROW(zi_pmf(0, 1.1, 1.0, ZiFamily::Zip), Error);
  EXPECT_THROW(zi_pmf(0, 0.5, 0.0, ZiFamily::Zip), Error);
  EXPECT_THROW(zi_pmf(-1, 0.5, 1.0, ZiFamily::Zip), Error);
  EXPECT_THROW(zi_pmf(1, 0.5, 1.0, ZiFamily::Zinb, 0.0), Error);
  try {
    zi_pmf(0, 2.0, 1.0, ZiFamily::Zip);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidParam);
  }
}

TEST(ZiPmf, NormalizesAtMeanPlusTwentySd) {
  for (double p : {0.0, 0.2, 0.7}) {
    for (double mean : {0.05, 1.0, 7.5, 40.0, 300.0}) {
      const int ymax = static_cast<int>(std::ceil(mean + 20.0 * std::sqrt(mean)));
      double total = 0.0;
      for (int y = 0; y <= ymax; ++y) total += zi_pmf(y, p, mean, ZiFamily::Zip);
      EXPECT_NEAR(total, 1.0, 1e-8) << p << " " << mean;
    }
    for (double mean : {0.5, 3.0, 10.0}) {
      const int ymax = static_cast<int>(std::ceil(mean + 20.0 * std::sqrt(mean)));
      double total = 0.0;
      for (int y = 0; y <= ymax; ++y) total += zi_pmf(y, p, mean, ZiFamily::Zinb, 5.0);
      EXPECT_NEAR(total, 1.0, 1e-8) << p << " " << mean;
    }
  }
}

TEST(ZiPmf, NegativeBinomialBranchMatchesMixtureDefinition) {
  // NB(theta, mean) as a gamma mixture of Poissons, integrated numerically.
  const double theta = 2.0, mean = 3.0;
  for (int y = 0; y < 6; ++y) {
    double integral = 0.0;
    const double h = 1e-3;
    for (double l = h / 2; l < 60.0; l += h) {
      const double g = std::exp((theta - 1) * std::log(l) - l * theta / mean - std::lgamma(theta) +
                                theta * std::log(theta / mean));
      integral += poisson_pmf(y, l) * g * h;
    }
    EXPECT_NEAR(zi_pmf(y, 0.0, mean, ZiFamily::Zinb, theta), integral, 1e-6) << y;
  }
}

TEST(FitZeroInflated, GradientMatchesFiniteDifferences) {
  const auto panel = zi_panel(3, 400, kCount, kZero, 1.5);
  const auto cd = glm::make_design(panel, glm::all_columns());
  const auto zd = glm::make_design(panel, glm::all_columns());
  for (ZiFamily f : {ZiFamily::Zip, ZiFamily::Zinb}) {
    detail::Problem pr{zd.x, cd.x, cd.offset, cd.response, cd.weights, f, std::log(1e-4), std::log(1e6)};
    Eigen::VectorXd par(pr.size());
    for (Eigen::Index j = 0; j < 6; ++j) {
      par[j] = kZero[j] * 0.9;
      par[6 + j] = kCount[j] * 1.1;
    }
    if (f == ZiFamily::Zinb) par[12] = std::log(1.3);
    Eigen::VectorXd g;
    detail::evaluate(pr, par, &g);
    for (Eigen::Index j = 0; j < pr.size(); ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(par[j]));
      Eigen::VectorXd a = par, b = par;
      a[j] += h;
      b[j] -= h;
      const double fd = (detail::evaluate(pr, a, nullptr) - detail::evaluate(pr, b, nullptr)) / (2 * h);
      EXPECT_NEAR(g[j], fd, 1e-4 * std::max(1.0, std::abs(fd))) << to_string(f) << " " << j;
    }
  }
}

TEST(FitZeroInflated, RecoversZipParametersOnLargeSample) {
  const auto panel = zi_panel(20180, 100000, kCount, kZero);
  const auto m = fit(panel, ZiFamily::Zip);
  EXPECT_FALSE(m.at_boundary());
  for (int j = 0; j < 6; ++j) {
    EXPECT_LE(std::abs(m.count_coefficients[j] - kCount[j]), 3.0 * m.count_std_errors[j]) << "count " << j;
    EXPECT_LE(std::abs(m.zero_coefficients[j] - kZero[j]), 3.0 * m.zero_std_errors[j]) << "zero " << j;
  }
  EXPECT_EQ(m.k, 12);
  EXPECT_EQ(m.n, 100000u);
}

TEST(FitZeroInflated, ZinbRecoversSizeAndBeatsZip) {
  const auto panel = zi_panel(77, 20000, kCount, kZero, 1.5);
  const auto nb = fit(panel, ZiFamily::Zinb);
  const auto zp = fit(panel, ZiFamily::Zip);
  EXPECT_LE(std::abs(nb.theta - 1.5), 3.0 * nb.theta_se);
  EXPECT_EQ(nb.k, 13);
  EXPECT_LT(information_criteria(nb).aic, information_criteria(zp).aic);
}

TEST(FitZeroInflated, NestsTheBaseCountModel) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const double* zero : {static_cast<const double*>(nullptr), kZero}) {
      const auto panel = zi_panel(seed, 2000, kCount, zero, seed == 3 ? 2.0 : 0.0);
      const auto d = glm::make_design(panel, glm::all_columns());
      const auto pois = glm::fit_glm(d, glm::Family::Poisson);
      const auto nb = glm::fit_glm(d, glm::Family::NegBin);
      EXPECT_GE(fit(panel, ZiFamily::Zip).log_likelihood, pois.log_likelihood - 1e-9 * std::abs(pois.log_likelihood));
      EXPECT_GE(fit(panel, ZiFamily::Zinb).log_likelihood, nb.log_likelihood - 1e-9 * std::abs(nb.log_likelihood));
    }
  }
}

TEST(FitZeroInflated, NoExcessZerosCollapsesToPoisson) {
  // Poisson draws with a deficit of zeros: the mixture optimum is p = 0.
  auto panel = zi_panel(11, 3000, kCount, nullptr);
  std::mt19937_64 rng(5);
  for (auto& r : panel)
    if (r.claims == 0 && std::uniform_real_distribution<double>(0, 1)(rng) < 0.5) r.claims = 1;
  const std::vector<Column> icpt{Column::Intercept};
  const auto m = fit_zero_inflated(panel, glm::all_columns(), icpt, ZiFamily::Zip);
  EXPECT_TRUE(m.at_boundary());
  const auto pois = glm::fit_glm(glm::make_design(panel, glm::all_columns()), glm::Family::Poisson);
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(m.count_coefficients[j], pois.coefficients[j], 1e-3);
  EXPECT_NEAR(m.log_likelihood, pois.log_likelihood, 1e-6 * std::abs(pois.log_likelihood));
}

TEST(FitZeroInflated, AllZeroResponseIsBoundary) {
  auto panel = zi_panel(12, 200, kCount, nullptr);
  for (auto& r : panel) r.claims = 0;
  try {
    fit(panel, ZiFamily::Zip);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BoundaryEstimate);
  }
}

TEST(FitZeroInflated, SeparatedZeroBlockIsFlaggedNotFatal) {
  synthetic::GeneratorConfig c;
  c.n_towns = 300;
  c.first_year = 2010;
  c.last_year = 2016;
  c.seed = 3;
  const auto panel = synthetic::generate_panel(c).panel;
  const auto cols = glm::all_columns();
  const auto base = glm::fit_glm(glm::make_design(panel, cols), glm::Family::Poisson);
  const auto m = zi::fit_zero_inflated(panel, cols, cols, zi::ZiFamily::Zip);
  EXPECT_GE(m.log_likelihood, base.log_likelihood);
  EXPECT_NE(std::find(m.flags.begin(), m.flags.end(), "zero_block_separation"), m.flags.end());
  EXPECT_TRUE(std::isnan(m.zero_std_errors[0]));
}

TEST(FitZeroInflated, EmFallbackReachesTheSameOptimum) {
  const auto panel = zi_panel(21, 3000, kCount, kZero);
  ZiOptions em;
  em.force_em = true;
  const auto a = fit(panel, ZiFamily::Zip);
  const auto b = fit(panel, ZiFamily::Zip, em);
  EXPECT_NE(b.method, "bfgs");
  EXPECT_NEAR(a.log_likelihood, b.log_likelihood, 1e-6 * std::abs(a.log_likelihood));
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(a.count_coefficients[j], b.count_coefficients[j], 1e-3 * std::max(1.0, a.count_std_errors[j]));
    EXPECT_NEAR(a.zero_coefficients[j], b.zero_coefficients[j], 0.05 * a.zero_std_errors[j] + 1e-4);
  }
}

TEST(FitZeroInflated, MoreStructuralZerosLowerTheMeanPrediction) {
  double previous = std::numeric_limits<double>::infinity();
  for (double shift : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    const auto panel = zi_panel(31, 20000, kCount, kZero, 0.0, shift);
    const auto m = fit(panel, ZiFamily::Zip);
    double mean = 0.0;
    for (double v : zi_predict(m, panel)) mean += v;
    mean /= static_cast<double>(panel.size());
    EXPECT_LT(mean, previous) << shift;
    previous = mean;
  }
}

TEST(ZiPredict, MixtureExpectation) {
  ZeroInflatedModel m;
  m.zero_columns = {Column::Intercept};
  m.count_columns = {Column::Intercept};
  m.zero_coefficients = Eigen::VectorXd::Zero(1);  // p = 0.5
  m.count_coefficients = Eigen::VectorXd::Constant(1, std::log(4.0));
  EXPECT_NEAR(zi_predict(m, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1), 1.0), 2.0, 1e-15);
  m.zero_coefficients[0] = -800.0;  // p = 0
  EXPECT_NEAR(zi_predict(m, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1), 2.5), 10.0, 1e-12);
  try {
    zi_predict(m, Eigen::VectorXd::Ones(2), Eigen::VectorXd::Ones(1), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

TEST(ZiPredict, FixtureMatchesFormula) {
  const auto panel = zi_panel(41, 2000, kCount, kZero);
  const auto m = fit(panel, ZiFamily::Zip);
  for (int t = 0; t < 10; ++t) {
    const auto& r = panel[static_cast<std::size_t>(t)];
    const double x[6] = {1.0, r.essti, r.esswi, r.clay, static_cast<double>(r.cat), r.espi};
    double ez = 0.0, ec = 0.0;
    for (int j = 0; j < 6; ++j) {
      ez += m.zero_coefficients[j] * x[j];
      ec += m.count_coefficients[j] * x[j];
    }
    const double expected = (1.0 - 1.0 / (1.0 + std::exp(-ez))) * static_cast<double>(r.exposure) * std::exp(ec);
    EXPECT_NEAR(zi_predict(m, r), expected, 1e-9 * expected);
  }
}
