#pragma once

// Seasonal monthly climate series for desk-scale checks of the index
// pipeline: gamma precipitation, bounded soil water, normal soil temperature.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "subsidence/climate_indices.hpp"
#include "subsidence/random.hpp"

namespace subsidence::synthetic {

struct ClimateConfig {
  int n_cells = 4;
  int first_year = 1981;
  int last_year = 2020;
  double precip_mean = 2.0;     // mm/day
  double precip_shape = 2.0;    // monthly gamma shape
  double zero_probability = 0.0;
  double temperature_mean = 283.0;  // K
  double temperature_amplitude = 8.0;
  double temperature_sd = 1.5;
  /// Years forced hot and dry: precipitation x0.3, soil water -0.15, temperature +4 K.
  std::vector<int> drought_years;
  std::uint64_t seed = 1;
};

inline std::vector<climate::GridMonthlySeries> generate_climate(const ClimateConfig& cfg) {
  std::vector<climate::GridMonthlySeries> cells;
  cells.reserve(static_cast<std::size_t>(cfg.n_cells));
  for (int c = 0; c < cfg.n_cells; ++c) {
    auto rng = make_rng(cfg.seed, {0xc11a7eull, static_cast<std::uint64_t>(c)});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    climate::GridMonthlySeries s;
    s.cell_id = "C" + std::to_string(c + 1);
    s.latitude = 43.0 + 0.1 * c;
    s.longitude = 1.0 + 0.1 * c;
    double water = 0.3;
    for (int y = cfg.first_year; y <= cfg.last_year; ++y) {
      const bool drought = std::find(cfg.drought_years.begin(), cfg.drought_years.end(), y) != cfg.drought_years.end();
      for (int m = 1; m <= 12; ++m) {
        const double phase = 2.0 * std::numbers::pi * (m - 1) / 12.0;
        const double seasonal_mean = cfg.precip_mean * (1.0 + 0.3 * std::cos(phase));
        std::gamma_distribution<double> gamma(cfg.precip_shape, seasonal_mean / cfg.precip_shape);
        double precip = unif(rng) < cfg.zero_probability ? 0.0 : gamma(rng);
        if (drought) precip *= 0.3;
        const double target = 0.32 + 0.08 * std::cos(phase) + 0.03 * (precip - seasonal_mean);
        water = 0.6 * water + 0.4 * target + 0.01 * normal(rng);
        double sw = drought ? water - 0.15 : water;
        sw = std::clamp(sw, 0.02, 0.98);
        double temp = cfg.temperature_mean - cfg.temperature_amplitude * std::cos(phase) + cfg.temperature_sd * normal(rng);
        if (drought) temp += 4.0;
        s.months.push_back({y, m, precip, sw, temp});
      }
    }
    cells.push_back(std::move(s));
  }
  return cells;
}

}  // namespace subsidence::synthetic
