#pragma once

// Standardized 3-month drought indices (SPI, SSWI, SSTI) and their yearly
// extremes (ESPI, ESSWI, ESSTI) from monthly gridded climate series.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "subsidence/error.hpp"
#include "subsidence/parallel.hpp"
#include "subsidence/text_io.hpp"

namespace subsidence::climate {

struct YearMonth {
  int year = 0;
  int month = 0;  // 1..12

  constexpr int index() const noexcept { return year * 12 + (month - 1); }
  static constexpr YearMonth from_index(int i) noexcept {
    const int y = i >= 0 ? i / 12 : (i - 11) / 12;
    return {y, i - y * 12 + 1};
  }
  friend constexpr auto operator<=>(const YearMonth&, const YearMonth&) = default;
};

struct MonthlyObservation {
  int year = 0;
  int month = 0;
  double precipitation = 0.0;     // mm/day, monthly average
  double soil_water = 0.0;        // volumetric content in [0, 1]
  double soil_temperature = 0.0;  // kelvin
};

struct GridMonthlySeries {
  std::string cell_id;
  double latitude = 0.0;
  double longitude = 0.0;
  std::vector<MonthlyObservation> months;

  /// Throws InvalidSeries on unordered/duplicate months or out-of-domain values.
  void validate() const {
    for (std::size_t i = 0; i < months.size(); ++i) {
      const auto& m = months[i];
      const std::string where = cell_id + " " + std::to_string(m.year) + "-" + std::to_string(m.month);
      require(m.month >= 1 && m.month <= 12, ErrorCode::InvalidSeries, where + ": month out of range");
      require(std::isfinite(m.precipitation) && m.precipitation >= 0.0, ErrorCode::InvalidSeries,
              where + ": precipitation must be >= 0");
      require(std::isfinite(m.soil_water) && m.soil_water >= 0.0 && m.soil_water <= 1.0, ErrorCode::InvalidSeries,
              where + ": soil_water must lie in [0, 1]");
      require(std::isfinite(m.soil_temperature), ErrorCode::InvalidSeries, where + ": soil_temperature not finite");
      if (i > 0) {
        const YearMonth prev{months[i - 1].year, months[i - 1].month};
        require(prev < YearMonth{m.year, m.month}, ErrorCode::InvalidSeries,
                where + ": months must be strictly increasing");
      }
    }
  }
};

enum class Variable { Precipitation = 0, SoilWater = 1, SoilTemperature = 2 };

inline constexpr std::array<Variable, 3> kVariables{Variable::Precipitation, Variable::SoilWater,
                                                    Variable::SoilTemperature};

inline double value_of(const MonthlyObservation& m, Variable v) noexcept {
  switch (v) {
    case Variable::Precipitation: return m.precipitation;
    case Variable::SoilWater: return m.soil_water;
    case Variable::SoilTemperature: return m.soil_temperature;
  }
  return 0.0;
}

struct WindowValue {
  int year = 0;
  int month = 0;  // last month of the window
  double value = 0.0;
};

struct RollingResult {
  std::vector<WindowValue> windows;
  /// Window end months dropped because a gap made the window incomplete.
  std::vector<YearMonth> skipped;
};

/// 3-month aggregates ending at each month: the sum for precipitation, the
/// mean for soil water and soil temperature. Windows are emitted only when
/// all three months are present.
inline RollingResult rolling_3month(const GridMonthlySeries& series, Variable variable) {
  require(!series.months.empty(), ErrorCode::EmptySeries, "cell " + series.cell_id + " has no months");
  series.validate();
  std::map<int, double> by_index;
  for (const auto& m : series.months) by_index.emplace(YearMonth{m.year, m.month}.index(), value_of(m, variable));

  const int first = by_index.begin()->first;
  RollingResult out;
  for (const auto& [idx, value] : by_index) {
    const auto a = by_index.find(idx - 1);
    const auto b = by_index.find(idx - 2);
    if (a == by_index.end() || b == by_index.end()) {
      // Windows truncated by the start of the record are not gaps.
      if (idx - 2 >= first) out.skipped.push_back(YearMonth::from_index(idx));
      continue;
    }
    double aggregate = value + a->second + b->second;
    if (variable != Variable::Precipitation) aggregate /= 3.0;
    const auto ym = YearMonth::from_index(idx);
    out.windows.push_back({ym.year, ym.month, aggregate});
  }
  return out;
}

enum class FitMethod { MaximumLikelihood, MomentsFallback };

/// Mixed zero / gamma distribution for one calendar month of one cell.
struct GammaStandardizer {
  double shape = 1.0;
  double scale = 1.0;
  double zero_mass = 0.0;
  double shift = 0.0;  // subtracted from values before the gamma CDF
  int calibration_month = 0;
  int reference_first = 0;
  int reference_last = 0;
  FitMethod method = FitMethod::MaximumLikelihood;

  double mean() const noexcept { return shape * scale; }
};

struct StandardizerOptions {
  double shift = 0.0;
  int calibration_month = 0;
  int reference_first = 0;
  int reference_last = 0;
  int max_iterations = 100;
  std::size_t min_positive = 10;
  /// Moment fallback variance is at least (floor * mean)^2.
  double variance_floor = 0.25;
};

namespace detail {

inline GammaStandardizer moments_fallback(double mean, double variance, const StandardizerOptions& opt) {
  const double floor = opt.variance_floor * mean;
  const double v = std::max(variance, floor * floor);
  GammaStandardizer g;
  g.shape = mean * mean / v;
  g.scale = v / mean;
  g.method = FitMethod::MomentsFallback;
  return g;
}

/// Solves log(k) - digamma(k) = target for k > 0 (target > 0). Newton in
/// log k, safeguarded by bisection on a bracket. Returns nullopt on failure.
inline std::optional<double> solve_gamma_shape(double target, double start, int max_iterations) {
  auto f = [&](double k) { return std::log(k) - boost::math::digamma(k) - target; };
  // f is strictly decreasing from +inf (k -> 0) to 0 (k -> inf).
  double lo = 1e-8, hi = 1e8;
  if (f(lo) < 0.0 || f(hi) > 0.0) return std::nullopt;
  double u = std::log(std::clamp(start, lo, hi));
  for (int it = 0; it < max_iterations; ++it) {
    const double k = std::exp(u);
    const double fk = f(k);
    if (std::abs(fk) <= 1e-14 * std::max(1.0, target)) return k;
    if (fk > 0.0)
      lo = k;
    else
      hi = k;
    const double deriv = 1.0 - k * boost::math::trigamma(k);  // d f / d log k, negative
    double next = u - fk / deriv;
    if (!std::isfinite(next) || next <= std::log(lo) || next >= std::log(hi)) next = 0.5 * (std::log(lo) + std::log(hi));
    if (std::abs(next - u) < 1e-15) return std::exp(next);
    u = next;
  }
  return std::nullopt;
}

}  // namespace detail

/// Fits the zero mass and the gamma MLE of the positive part. Values are
/// 3-month aggregates of a single calendar month across reference years.
inline GammaStandardizer fit_standardizer(std::span<const double> values, const StandardizerOptions& opt = {}) {
  require(!values.empty(), ErrorCode::DegenerateSample, "no values to fit");
  std::vector<double> positive;
  positive.reserve(values.size());
  std::size_t zeros = 0;
  for (double v : values) {
    require(std::isfinite(v), ErrorCode::InvalidParam, "non-finite aggregate");
    const double x = v - opt.shift;
    require(x >= 0.0, ErrorCode::InvalidParam, "aggregate below the distribution support");
    if (x == 0.0)
      ++zeros;
    else
      positive.push_back(x);
  }
  require(!positive.empty(), ErrorCode::DegenerateSample, "sample has no positive values");

  const double n = static_cast<double>(positive.size());
  const double mean = std::accumulate(positive.begin(), positive.end(), 0.0) / n;
  double ss = 0.0, sum_log = 0.0;
  for (double x : positive) {
    ss += (x - mean) * (x - mean);
    sum_log += std::log(x);
  }
  const double variance = positive.size() > 1 ? ss / (n - 1.0) : 0.0;
  const double log_gap = std::log(mean) - sum_log / n;

  GammaStandardizer g;
  const bool degenerate = positive.size() < opt.min_positive || ss == 0.0 || !(log_gap > 0.0);
  std::optional<double> shape;
  if (!degenerate) shape = detail::solve_gamma_shape(log_gap, mean * mean / variance, opt.max_iterations);
  if (shape) {
    g.shape = *shape;
    g.scale = mean / *shape;
    g.method = FitMethod::MaximumLikelihood;
  } else {
    g = detail::moments_fallback(mean, variance, opt);
  }
  g.zero_mass = static_cast<double>(zeros) / static_cast<double>(values.size());
  g.shift = opt.shift;
  g.calibration_month = opt.calibration_month;
  g.reference_first = opt.reference_first;
  g.reference_last = opt.reference_last;
  return g;
}

inline constexpr double kIndexClamp = 5.0;

inline double normal_quantile(double p) {
  if (!(p > 0.0)) return -kIndexClamp;
  if (!(p < 1.0)) return kIndexClamp;
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

/// Maps an aggregate through the fitted mixed CDF to a standard-normal
/// quantile, clamped to [-5, 5]. Exact zeros map to the mid-point of the
/// zero mass.
inline double standardize(double value, const GammaStandardizer& g) {
  const double x = value - g.shift;
  double z;
  if (x <= 0.0) {
    z = normal_quantile(0.5 * g.zero_mass);
  } else if (x <= g.mean()) {
    z = normal_quantile(g.zero_mass + (1.0 - g.zero_mass) * boost::math::gamma_p(g.shape, x / g.scale));
  } else {
    // Upper tail through the complement keeps precision near 1.
    z = -normal_quantile((1.0 - g.zero_mass) * boost::math::gamma_q(g.shape, x / g.scale));
  }
  return std::clamp(z, -kIndexClamp, kIndexClamp);
}

enum class Season { Winter = 0, Spring = 1, Summer = 2, Autumn = 3 };

inline constexpr std::array<Season, 4> kSeasons{Season::Winter, Season::Spring, Season::Summer, Season::Autumn};

/// Each season is represented by the 3-month window ending in its last month
/// (DJF ends in February, attributed to the year of that February).
constexpr int season_end_month(Season s) noexcept { return 2 + 3 * static_cast<int>(s); }

constexpr const char* season_name(Season s) noexcept {
  switch (s) {
    case Season::Winter: return "winter";
    case Season::Spring: return "spring";
    case Season::Summer: return "summer";
    case Season::Autumn: return "autumn";
  }
  return "?";
}

struct SeasonalEntry {
  int year = 0;
  Season season = Season::Winter;
  double spi = 0.0;
  double sswi = 0.0;
  double ssti = 0.0;
};

struct SeasonalIndexSeries {
  std::string cell_id;
  std::vector<SeasonalEntry> entries;
};

struct ReferencePeriod {
  int first = 0;
  int last = 0;
};

/// One standardizer per (variable, calendar month).
struct CellStandardizers {
  std::array<std::array<std::optional<GammaStandardizer>, 12>, 3> table{};

  const GammaStandardizer& get(Variable v, int month) const {
    const auto& s = table[static_cast<int>(v)][month - 1];
    require(s.has_value(), ErrorCode::MissingStandardizer, "no standardizer for month " + std::to_string(month));
    return *s;
  }
  void set(Variable v, int month, GammaStandardizer g) { table[static_cast<int>(v)][month - 1] = std::move(g); }
};

/// Reference period spanning every year present in the series.
inline ReferencePeriod full_period(const GridMonthlySeries& series) {
  require(!series.months.empty(), ErrorCode::EmptySeries, "cell " + series.cell_id + " has no months");
  return {series.months.front().year, series.months.back().year};
}

/// Calibrates the 36 standardizers of a cell over the reference years.
/// Soil temperature is shifted by (sample minimum - 1) to make it positive.
inline CellStandardizers fit_cell_standardizers(const GridMonthlySeries& series, ReferencePeriod period,
                                                const StandardizerOptions& base = {}) {
  require(!series.months.empty(), ErrorCode::EmptySeries, "cell " + series.cell_id + " has no months");
  require(period.first <= period.last, ErrorCode::InvalidParam, "reference period is empty");
  require(series.months.front().year <= period.first && series.months.back().year >= period.last,
          ErrorCode::ReferencePeriodNotCovered,
          "cell " + series.cell_id + " does not cover reference period " + std::to_string(period.first) + "-" +
              std::to_string(period.last));
  CellStandardizers out;
  for (Variable v : kVariables) {
    const auto rolled = rolling_3month(series, v);
    std::array<std::vector<double>, 12> per_month;
    for (const auto& w : rolled.windows)
      if (w.year >= period.first && w.year <= period.last) per_month[w.month - 1].push_back(w.value);
    for (int month = 1; month <= 12; ++month) {
      const auto& sample = per_month[month - 1];
      if (sample.empty()) continue;
      StandardizerOptions opt = base;
      opt.calibration_month = month;
      opt.reference_first = period.first;
      opt.reference_last = period.last;
      opt.shift = v == Variable::SoilTemperature ? *std::min_element(sample.begin(), sample.end()) - 1.0 : 0.0;
      try {
        out.set(v, month, fit_standardizer(sample, opt));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateSample) throw;
        // All-zero months (arid cells) leave the slot empty; standardizing
        // such a month reports MissingStandardizer.
      }
    }
  }
  return out;
}

/// Standardized (SPI, SSWI, SSTI) per season, from the window ending in the
/// season's last month.
inline SeasonalIndexSeries seasonal_index(const GridMonthlySeries& series, const CellStandardizers& standardizers) {
  for (Variable v : kVariables)
    for (int month = 1; month <= 12; ++month) (void)standardizers.get(v, month);
  const auto precip = rolling_3month(series, Variable::Precipitation);
  const auto water = rolling_3month(series, Variable::SoilWater);
  const auto temp = rolling_3month(series, Variable::SoilTemperature);
  SeasonalIndexSeries out;
  out.cell_id = series.cell_id;
  // Same months feed every variable, so the three window lists align.
  for (std::size_t i = 0; i < precip.windows.size(); ++i) {
    const auto& w = precip.windows[i];
    if (w.month % 3 != 2) continue;
    SeasonalEntry e;
    e.year = w.year;
    e.season = static_cast<Season>((w.month - 2) / 3);
    e.spi = standardize(w.value, standardizers.get(Variable::Precipitation, w.month));
    e.sswi = standardize(water.windows[i].value, standardizers.get(Variable::SoilWater, w.month));
    e.ssti = standardize(temp.windows[i].value, standardizers.get(Variable::SoilTemperature, w.month));
    out.entries.push_back(e);
  }
  return out;
}

struct ExtremeYearIndex {
  std::string id;  // cell id, or town id after aggregation
  int year = 0;
  double espi = 0.0;   // min over seasons
  double esswi = 0.0;  // min over seasons
  double essti = 0.0;  // max over seasons
};

struct ExtremeResult {
  std::vector<ExtremeYearIndex> years;
  /// Years lacking one of the four seasons; skipped.
  std::vector<int> incomplete_years;
};

inline ExtremeResult extreme_year_index(const SeasonalIndexSeries& seasonal) {
  struct Acc {
    std::array<bool, 4> seen{};
    ExtremeYearIndex idx;
  };
  std::map<int, Acc> by_year;
  for (const auto& e : seasonal.entries) {
    auto [it, inserted] = by_year.try_emplace(e.year);
    auto& acc = it->second;
    if (inserted) {
      acc.idx = {seasonal.cell_id, e.year, std::numeric_limits<double>::infinity(),
                 std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    }
    acc.seen[static_cast<int>(e.season)] = true;
    acc.idx.espi = std::min(acc.idx.espi, e.spi);
    acc.idx.esswi = std::min(acc.idx.esswi, e.sswi);
    acc.idx.essti = std::max(acc.idx.essti, e.ssti);
  }
  ExtremeResult out;
  for (auto& [year, acc] : by_year) {
    if (std::all_of(acc.seen.begin(), acc.seen.end(), [](bool b) { return b; }))
      out.years.push_back(acc.idx);
    else
      out.incomplete_years.push_back(year);
  }
  return out;
}

struct CellResult {
  ExtremeResult extremes;
  CellStandardizers standardizers;
};

/// Full per-cell pipeline; cells are independent and run in parallel.
inline std::vector<CellResult> compute_extreme_indices(std::span<const GridMonthlySeries> cells,
                                                       std::optional<ReferencePeriod> period = std::nullopt,
                                                       unsigned workers = 1) {
  std::vector<CellResult> out(cells.size());
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    const auto ref = period ? *period : full_period(cells[i]);
    out[i].standardizers = fit_cell_standardizers(cells[i], ref);
    out[i].extremes = extreme_year_index(seasonal_index(cells[i], out[i].standardizers));
  });
  return out;
}

// --- file formats -------------------------------------------------------

/// Long-format climate input, one row per (cell, year, month).
inline constexpr std::array<const char*, 8> kClimateColumns{
    "cell_id", "latitude", "longitude", "year", "month", "precipitation", "soil_water", "soil_temperature"};

inline std::vector<GridMonthlySeries> parse_climate(const text::Table& table) {
  std::array<std::size_t, 8> col{};
  for (std::size_t i = 0; i < kClimateColumns.size(); ++i) col[i] = table.column(kClimateColumns[i]);
  std::map<std::string, GridMonthlySeries> cells;
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& id = table.field(r, col[0]);
    auto& cell = cells[id];
    if (cell.months.empty()) {
      cell.cell_id = id;
      cell.latitude = table.number(r, col[1]);
      cell.longitude = table.number(r, col[2]);
    }
    MonthlyObservation m;
    m.year = static_cast<int>(table.integer(r, col[3]));
    m.month = static_cast<int>(table.integer(r, col[4]));
    m.precipitation = table.number(r, col[5]);
    m.soil_water = table.number(r, col[6]);
    m.soil_temperature = table.number(r, col[7]);
    cell.months.push_back(m);
  }
  std::vector<GridMonthlySeries> out;
  out.reserve(cells.size());
  for (auto& [id, cell] : cells) {
    std::stable_sort(cell.months.begin(), cell.months.end(), [](const auto& a, const auto& b) {
      return YearMonth{a.year, a.month} < YearMonth{b.year, b.month};
    });
    cell.validate();
    out.push_back(std::move(cell));
  }
  return out;
}

inline std::string format_climate(std::span<const GridMonthlySeries> cells) {
  std::ostringstream os;
  os << "cell_id,latitude,longitude,year,month,precipitation,soil_water,soil_temperature\n";
  for (const auto& c : cells)
    for (const auto& m : c.months)
      os << c.cell_id << ',' << text::fmt(c.latitude) << ',' << text::fmt(c.longitude) << ',' << m.year << ','
         << m.month << ',' << text::fmt(m.precipitation) << ',' << text::fmt(m.soil_water) << ','
         << text::fmt(m.soil_temperature) << '\n';
  return os.str();
}

/// Extreme index rows; the id column is `cell_id` or `town_id`.
inline std::string format_extremes(std::span<const ExtremeYearIndex> rows, const std::string& id_column = "cell_id") {
  std::ostringstream os;
  os << id_column << ",year,espi,esswi,essti\n";
  for (const auto& r : rows)
    os << r.id << ',' << r.year << ',' << text::fmt(r.espi) << ',' << text::fmt(r.esswi) << ',' << text::fmt(r.essti)
       << '\n';
  return os.str();
}

inline std::vector<ExtremeYearIndex> parse_extremes(const text::Table& table) {
  const std::size_t id_col = table.has_column("town_id") ? table.column("town_id") : table.column("cell_id");
  const auto year = table.column("year"), espi = table.column("espi"), esswi = table.column("esswi"),
             essti = table.column("essti");
  std::vector<ExtremeYearIndex> out;
  out.reserve(table.size());
  for (std::size_t r = 0; r < table.size(); ++r)
    out.push_back({table.field(r, id_col), static_cast<int>(table.integer(r, year)), table.number(r, espi),
                   table.number(r, esswi), table.number(r, essti)});
  return out;
}

}  // namespace subsidence::climate
