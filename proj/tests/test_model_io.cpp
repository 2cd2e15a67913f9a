#include <gtest/gtest.h>

#include <cmath>

#include "subsidence/model_io.hpp"
#include "subsidence/synthetic.hpp"

using namespace subsidence;
using namespace subsidence::model_io;

namespace {

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

const Panel& fixture() {
  static const Panel panel = [] {
    synthetic::GeneratorConfig c;
    c.n_towns = 400;
    c.first_year = 2010;
    c.last_year = 2015;
    c.beta = {-7.0, 0.8, -0.4, 0.01, 1.0, -0.1};
    c.zero_beta = synthetic::Coefficients{0.5, -0.8, 0.3, 0.0, -1.0, 0.0};
    return synthetic::generate_panel(c).panel;
  }();
  return panel;
}

void expect_same_predictions(const cost::FrequencyModel& a, const cost::FrequencyModel& b) {
  for (const auto& r : fixture()) EXPECT_EQ(cost::predict_count(a, r), cost::predict_count(b, r));
}

}  // namespace

TEST(ModelIo, GlmRoundTripIsExact) {
  const auto cols = glm::all_columns();
  for (auto family : {glm::Family::Poisson, glm::Family::NegBin, glm::Family::Binomial}) {
    const cost::FrequencyModel m = glm::fit_glm(glm::make_design(fixture(), cols), family);
    const auto text = format_model(m);
    const auto back = parse_model(text);
    EXPECT_EQ(format_model(back), text);
    expect_same_predictions(m, back);
  }
}

TEST(ModelIo, SeverityAndTweedieKeepTheirResponseKind) {
  const auto sev = cost::fit_severity(fixture());
  const auto back = as_glm(parse_model(format_model(sev)), "severity");
  EXPECT_EQ(back.kind, glm::Response::Severity);
  EXPECT_EQ(back.dispersion, sev.dispersion);
  const auto tcols = glm::cost_columns();
  glm::GlmOptions opt;
  opt.tweedie_density = false;
  const auto tw = glm::fit_tweedie(glm::make_design(fixture(), tcols, glm::Response::TotalCost), 1.5, opt);
  const auto tb = as_glm(parse_model(format_model(tw)), "tweedie");
  EXPECT_EQ(tb.kind, glm::Response::TotalCost);
  EXPECT_FALSE(tb.has_likelihood);
  EXPECT_TRUE(std::isnan(tb.log_likelihood));
  EXPECT_EQ(tb.tweedie_power, 1.5);
}

TEST(ModelIo, ZeroInflatedRoundTripIsExact) {
  const auto cols = glm::all_columns();
  const std::vector<glm::Column> zero{glm::Column::Intercept, glm::Column::Essti};
  for (auto family : {zi::ZiFamily::Zip, zi::ZiFamily::Zinb}) {
    const cost::FrequencyModel m = zi::fit_zero_inflated(fixture(), cols, zero, family);
    const auto text = format_model(m);
    const auto back = parse_model(text);
    EXPECT_EQ(format_model(back), text);
    expect_same_predictions(m, back);
  }
}

TEST(ModelIo, ForestRoundTripThroughGenericReader) {
  forest::Hyperparameters h;
  h.n_trees = 5;
  const cost::FrequencyModel m = forest::forest_fit(fixture(), h, forest::Mode::Poisson);
  const auto back = parse_model(format_model(m));
  EXPECT_TRUE(std::holds_alternative<forest::Forest>(back));
  expect_same_predictions(m, back);
  EXPECT_EQ(code_of([&] { as_glm(back, "severity"); }), ErrorCode::ModelIncompatible);
}

TEST(ModelIo, Errors) {
  EXPECT_EQ(code_of([] { parse_model("hello\n"); }), ErrorCode::ModelIncompatible);
  EXPECT_EQ(code_of([] { parse_model(""); }), ErrorCode::ModelIncompatible);
  EXPECT_EQ(code_of([] { parse_model("subsidence-model v1\ntype svm\n"); }), ErrorCode::ModelIncompatible);
  const auto cols = glm::all_columns();
  const auto text = format_model(glm::fit_glm(glm::make_design(fixture(), cols), glm::Family::Poisson));
  auto missing = text.substr(0, text.find("std_errors"));
  EXPECT_EQ(code_of([&] { parse_model(missing); }), ErrorCode::SchemaError);
  auto bad = text;
  bad.replace(bad.find("family poisson"), 14, "family weibull");
  EXPECT_EQ(code_of([&] { parse_model(bad); }), ErrorCode::SchemaError);
  auto dup = text + "k 3\n";
  EXPECT_EQ(code_of([&] { parse_model(dup); }), ErrorCode::SchemaError);
}
