#pragma once

// Town-year panel: the canonical model input. Grid-cell indices and clay are
// aggregated to towns, joined to exposure/claims files, and the historical
// Cat flag is derived from the declaration history.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "subsidence/climate_indices.hpp"
#include "subsidence/error.hpp"
#include "subsidence/text_io.hpp"

namespace subsidence {

/// One town x year row. Currency is held in integer cents.
struct TownYearRecord {
  std::string town_id;
  int year = 0;
  std::int64_t exposure = 0;  // insured houses
  std::int64_t claims = 0;
  std::int64_t cost_cents = 0;
  std::int64_t sums_insured_cents = 0;
  double espi = 0.0;
  double esswi = 0.0;
  double essti = 0.0;
  double clay = 0.0;  // percent
  int cat = 0;

  double cost() const noexcept { return static_cast<double>(cost_cents) / 100.0; }

  friend bool operator==(const TownYearRecord&, const TownYearRecord&) = default;
};

using Panel = std::vector<TownYearRecord>;

inline bool key_less(const TownYearRecord& a, const TownYearRecord& b) {
  return std::tie(a.town_id, a.year) < std::tie(b.town_id, b.year);
}

/// Row-level invariant violations, empty when the record is valid.
inline std::vector<std::string> record_violations(const TownYearRecord& r) {
  std::vector<std::string> out;
  if (r.exposure < 0) out.emplace_back("exposure < 0");
  if (r.claims < 0) out.emplace_back("claims < 0");
  if (r.cost_cents < 0) out.emplace_back("cost < 0");
  if (r.sums_insured_cents < 0) out.emplace_back("sums_insured < 0");
  if (r.claims == 0 && r.cost_cents != 0) out.emplace_back("cost without claims");
  if (r.exposure == 0 && r.claims != 0) out.emplace_back("claims without exposure");
  if (!(r.clay >= 0.0 && r.clay <= 100.0)) out.emplace_back("clay outside [0, 100]");
  if (r.cat != 0 && r.cat != 1) out.emplace_back("cat not binary");
  if (!std::isfinite(r.espi) || !std::isfinite(r.esswi) || !std::isfinite(r.essti))
    out.emplace_back("non-finite index");
  return out;
}

/// Checks every row invariant plus key uniqueness and Cat monotonicity.
inline void validate_panel(const Panel& panel) {
  std::vector<std::string> problems;
  std::map<std::string, std::vector<std::pair<int, int>>> cat_by_town;
  std::set<std::pair<std::string, int>> keys;
  for (const auto& r : panel) {
    for (const auto& v : record_violations(r))
      problems.push_back(r.town_id + "/" + std::to_string(r.year) + ": " + v);
    if (!keys.emplace(r.town_id, r.year).second)
      fail(ErrorCode::DuplicateKey, "panel key " + r.town_id + "/" + std::to_string(r.year));
    cat_by_town[r.town_id].emplace_back(r.year, r.cat);
  }
  for (auto& [town, series] : cat_by_town) {
    std::sort(series.begin(), series.end());
    for (std::size_t i = 1; i < series.size(); ++i)
      if (series[i].second < series[i - 1].second)
        problems.push_back(town + "/" + std::to_string(series[i].first) + ": cat flag decreases");
  }
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " invalid row(s):";
    for (std::size_t i = 0; i < problems.size() && i < 20; ++i) msg += "\n  " + problems[i];
    fail(ErrorCode::InvariantViolation, msg);
  }
}

namespace ingest {

struct CellWeight {
  std::string cell_id;
  double weight = 0.0;
};

/// Area weights of the grid cells covering a town.
struct TownGeometry {
  std::string town_id;
  std::vector<CellWeight> cells;

  void validate() const {
    require(!cells.empty(), ErrorCode::InvariantViolation, "town " + town_id + " has no cells");
    double total = 0.0;
    for (const auto& c : cells) {
      require(c.weight >= 0.0 && c.weight <= 1.0, ErrorCode::InvariantViolation,
              "town " + town_id + ": weight outside [0, 1]");
      total += c.weight;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorCode::InvariantViolation, "town " + town_id + ": weights sum to " +
                                                                               text::fmt(total));
  }
};

/// Town clay is the highest concentration over its cells.
inline std::map<std::string, double> aggregate_clay(const std::map<std::string, double>& cell_clay,
                                                    std::span<const TownGeometry> geometry) {
  std::map<std::string, double> out;
  for (const auto& town : geometry) {
    town.validate();
    double best = -1.0;
    for (const auto& c : town.cells) {
      const auto it = cell_clay.find(c.cell_id);
      require(it != cell_clay.end(), ErrorCode::MissingCell, "town " + town.town_id + ": no clay for cell " + c.cell_id);
      best = std::max(best, it->second);
    }
    out[town.town_id] = best;
  }
  return out;
}

/// Area-weighted mean of the cell extremes for every (town, year).
inline std::vector<climate::ExtremeYearIndex> aggregate_indices(std::span<const climate::ExtremeYearIndex> cells,
                                                                std::span<const TownGeometry> geometry) {
  std::map<std::pair<std::string, int>, const climate::ExtremeYearIndex*> by_key;
  std::map<std::string, std::set<int>> years_of_cell;
  for (const auto& c : cells) {
    by_key[{c.id, c.year}] = &c;
    years_of_cell[c.id].insert(c.year);
  }
  std::vector<climate::ExtremeYearIndex> out;
  for (const auto& town : geometry) {
    town.validate();
    std::set<int> years;
    for (const auto& c : town.cells) {
      const auto it = years_of_cell.find(c.cell_id);
      if (it != years_of_cell.end()) years.insert(it->second.begin(), it->second.end());
    }
    require(!years.empty(), ErrorCode::IncompleteCoverage, "town " + town.town_id + " has no indexed cells");
    for (int year : years) {
      climate::ExtremeYearIndex agg{town.town_id, year, 0.0, 0.0, 0.0};
      for (const auto& c : town.cells) {
        const auto it = by_key.find({c.cell_id, year});
        require(it != by_key.end(), ErrorCode::IncompleteCoverage,
                "town " + town.town_id + ": cell " + c.cell_id + " has no index for " + std::to_string(year));
        agg.espi += c.weight * it->second->espi;
        agg.esswi += c.weight * it->second->esswi;
        agg.essti += c.weight * it->second->essti;
      }
      out.push_back(agg);
    }
  }
  return out;
}

struct ExposureRow {
  std::string town_id;
  int year = 0;
  std::int64_t exposure = 0;
  std::int64_t sums_insured_cents = 0;
};

struct ClaimsRow {
  std::string town_id;
  int year = 0;
  std::int64_t claims = 0;
  std::int64_t cost_cents = 0;
};

struct CatRequest {
  std::string town_id;
  int year = 0;
};

/// Sets cat(town, year) = 1 iff the town filed a request in a strictly
/// earlier year.
inline Panel update_cat_flag(Panel panel, std::span<const CatRequest> history) {
  std::map<std::string, int> earliest;
  for (const auto& r : history) {
    auto [it, inserted] = earliest.try_emplace(r.town_id, r.year);
    if (!inserted) it->second = std::min(it->second, r.year);
  }
  for (auto& rec : panel) {
    const auto it = earliest.find(rec.town_id);
    rec.cat = (it != earliest.end() && it->second < rec.year) ? 1 : 0;
  }
  return panel;
}

struct PanelInputs {
  std::vector<ExposureRow> exposure;
  std::vector<ClaimsRow> claims;
  std::vector<climate::ExtremeYearIndex> town_indices;
  std::map<std::string, double> town_clay;
  std::vector<CatRequest> cat_history;
};

/// Joins the inputs on (town_id, year). One record per exposure row, sorted
/// by key; missing claims mean no claim. Invalid rows are reported together.
inline Panel build_panel(const PanelInputs& in) {
  using Key = std::pair<std::string, int>;
  std::map<Key, const ClaimsRow*> claims;
  for (const auto& c : in.claims)
    if (!claims.emplace(Key{c.town_id, c.year}, &c).second)
      fail(ErrorCode::DuplicateKey, "claims file: duplicate key " + c.town_id + "/" + std::to_string(c.year));
  std::map<Key, const climate::ExtremeYearIndex*> indices;
  for (const auto& x : in.town_indices)
    if (!indices.emplace(Key{x.id, x.year}, &x).second)
      fail(ErrorCode::DuplicateKey, "index file: duplicate key " + x.id + "/" + std::to_string(x.year));

  Panel panel;
  panel.reserve(in.exposure.size());
  std::set<Key> seen;
  std::vector<std::string> problems;
  for (const auto& e : in.exposure) {
    const Key key{e.town_id, e.year};
    if (!seen.insert(key).second)
      fail(ErrorCode::DuplicateKey, "exposure file: duplicate key " + e.town_id + "/" + std::to_string(e.year));
    TownYearRecord r;
    r.town_id = e.town_id;
    r.year = e.year;
    r.exposure = e.exposure;
    r.sums_insured_cents = e.sums_insured_cents;
    if (const auto it = claims.find(key); it != claims.end()) {
      r.claims = it->second->claims;
      r.cost_cents = it->second->cost_cents;
    }
    const std::string where = e.town_id + "/" + std::to_string(e.year);
    if (const auto it = indices.find(key); it != indices.end()) {
      r.espi = it->second->espi;
      r.esswi = it->second->esswi;
      r.essti = it->second->essti;
    } else {
      problems.push_back(where + ": no drought indices");
    }
    if (const auto it = in.town_clay.find(e.town_id); it != in.town_clay.end())
      r.clay = it->second;
    else
      problems.push_back(where + ": no clay value");
    panel.push_back(std::move(r));
  }
  for (const auto& [key, row] : claims)
    if (!seen.count(key)) problems.push_back(key.first + "/" + std::to_string(key.second) + ": claims without exposure row");

  panel = update_cat_flag(std::move(panel), in.cat_history);
  std::sort(panel.begin(), panel.end(), key_less);
  for (const auto& r : panel)
    for (const auto& v : record_violations(r)) problems.push_back(r.town_id + "/" + std::to_string(r.year) + ": " + v);
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " invalid row(s):";
    for (std::size_t i = 0; i < problems.size() && i < 20; ++i) msg += "\n  " + problems[i];
    fail(ErrorCode::InvariantViolation, msg);
  }
  return panel;
}

// --- file formats -------------------------------------------------------

inline std::vector<ExposureRow> parse_exposure(const text::Table& t) {
  const auto town = t.column("town_id"), year = t.column("year"), exposure = t.column("exposure"),
             sums = t.column("sums_insured");
  std::vector<ExposureRow> out;
  for (std::size_t r = 0; r < t.size(); ++r)
    out.push_back({t.field(r, town), static_cast<int>(t.integer(r, year)), t.integer(r, exposure),
                   text::parse_cents(t.field(r, sums), t.location(r))});
  return out;
}

inline std::vector<ClaimsRow> parse_claims(const text::Table& t) {
  const auto town = t.column("town_id"), year = t.column("year"), claims = t.column("claims"), cost = t.column("cost");
  std::vector<ClaimsRow> out;
  for (std::size_t r = 0; r < t.size(); ++r)
    out.push_back({t.field(r, town), static_cast<int>(t.integer(r, year)), t.integer(r, claims),
                   text::parse_cents(t.field(r, cost), t.location(r))});
  return out;
}

inline std::vector<CatRequest> parse_cat_history(const text::Table& t) {
  const auto town = t.column("town_id"), year = t.column("year");
  std::vector<CatRequest> out;
  for (std::size_t r = 0; r < t.size(); ++r) out.push_back({t.field(r, town), static_cast<int>(t.integer(r, year))});
  return out;
}

/// Geometry weights: rows of (town_id, cell_id, weight).
inline std::vector<TownGeometry> parse_geometry(const text::Table& t) {
  const auto town = t.column("town_id"), cell = t.column("cell_id"), weight = t.column("weight");
  std::map<std::string, TownGeometry> towns;
  for (std::size_t r = 0; r < t.size(); ++r) {
    auto& g = towns[t.field(r, town)];
    g.town_id = t.field(r, town);
    g.cells.push_back({t.field(r, cell), t.number(r, weight)});
  }
  std::vector<TownGeometry> out;
  for (auto& [id, g] : towns) {
    g.validate();
    out.push_back(std::move(g));
  }
  return out;
}

/// Clay rows keyed by `cell_id` or, when already aggregated, `town_id`.
inline std::map<std::string, double> parse_clay(const text::Table& t) {
  const auto id = t.has_column("cell_id") ? t.column("cell_id") : t.column("town_id");
  const auto clay = t.column("clay");
  std::map<std::string, double> out;
  for (std::size_t r = 0; r < t.size(); ++r)
    if (!out.emplace(t.field(r, id), t.number(r, clay)).second)
      fail(ErrorCode::DuplicateKey, t.location(r) + ": duplicate clay id " + t.field(r, id));
  return out;
}

inline std::string format_exposure(std::span<const ExposureRow> rows) {
  std::ostringstream os;
  os << "town_id,year,exposure,sums_insured\n";
  for (const auto& r : rows)
    os << r.town_id << ',' << r.year << ',' << r.exposure << ',' << text::fmt_cents(r.sums_insured_cents) << '\n';
  return os.str();
}

inline std::string format_claims(std::span<const ClaimsRow> rows) {
  std::ostringstream os;
  os << "town_id,year,claims,cost\n";
  for (const auto& r : rows)
    os << r.town_id << ',' << r.year << ',' << r.claims << ',' << text::fmt_cents(r.cost_cents) << '\n';
  return os.str();
}

inline std::string format_cat_history(std::span<const CatRequest> rows) {
  std::ostringstream os;
  os << "town_id,year\n";
  for (const auto& r : rows) os << r.town_id << ',' << r.year << '\n';
  return os.str();
}

inline std::string format_clay(const std::map<std::string, double>& clay, const std::string& id_column) {
  std::ostringstream os;
  os << id_column << ",clay\n";
  for (const auto& [id, v] : clay) os << id << ',' << text::fmt(v) << '\n';
  return os.str();
}

inline std::string format_geometry(std::span<const TownGeometry> towns) {
  std::ostringstream os;
  os << "town_id,cell_id,weight\n";
  for (const auto& t : towns)
    for (const auto& c : t.cells) os << t.town_id << ',' << c.cell_id << ',' << text::fmt(c.weight) << '\n';
  return os.str();
}

}  // namespace ingest

// --- canonical panel format ---------------------------------------------

inline constexpr const char* kPanelHeader =
    "town_id,year,exposure,claims,cost,sums_insured,espi,esswi,essti,clay,cat";

inline std::string format_panel(const Panel& panel) {
  std::ostringstream os;
  os << kPanelHeader << '\n';
  for (const auto& r : panel)
    os << r.town_id << ',' << r.year << ',' << r.exposure << ',' << r.claims << ',' << text::fmt_cents(r.cost_cents)
       << ',' << text::fmt_cents(r.sums_insured_cents) << ',' << text::fmt(r.espi) << ',' << text::fmt(r.esswi) << ','
       << text::fmt(r.essti) << ',' << text::fmt(r.clay) << ',' << r.cat << '\n';
  return os.str();
}

inline Panel parse_panel(const text::Table& t) {
  const auto town = t.column("town_id"), year = t.column("year"), exposure = t.column("exposure"),
             claims = t.column("claims"), cost = t.column("cost"), sums = t.column("sums_insured"),
             espi = t.column("espi"), esswi = t.column("esswi"), essti = t.column("essti"), clay = t.column("clay"),
             cat = t.column("cat");
  Panel out;
  out.reserve(t.size());
  for (std::size_t r = 0; r < t.size(); ++r) {
    TownYearRecord rec;
    rec.town_id = t.field(r, town);
    rec.year = static_cast<int>(t.integer(r, year));
    rec.exposure = t.integer(r, exposure);
    rec.claims = t.integer(r, claims);
    rec.cost_cents = text::parse_cents(t.field(r, cost), t.location(r));
    rec.sums_insured_cents = text::parse_cents(t.field(r, sums), t.location(r));
    rec.espi = t.number(r, espi);
    rec.esswi = t.number(r, esswi);
    rec.essti = t.number(r, essti);
    rec.clay = t.number(r, clay);
    rec.cat = static_cast<int>(t.integer(r, cat));
    out.push_back(std::move(rec));
  }
  validate_panel(out);
  return out;
}

inline Panel read_panel(const std::string& path) { return parse_panel(text::Table::read(path)); }

}  // namespace subsidence
