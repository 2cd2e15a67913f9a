// subsidence: batch front end over the header-only library.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "subsidence/climate_indices.hpp"
#include "subsidence/cost_models.hpp"
#include "subsidence/error.hpp"
#include "subsidence/ingest.hpp"
#include "subsidence/model_io.hpp"
#include "subsidence/parallel.hpp"
#include "subsidence/synthetic.hpp"
#include "subsidence/text_io.hpp"
#include "subsidence/validation.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace subsidence;

namespace {

constexpr const char* kArtifactVersion = "1.0.0";

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& w : text::split(s, ','))
    if (auto t = std::string(text::trim(w)); !t.empty()) out.push_back(t);
  return out;
}

std::vector<glm::Column> parse_columns(const std::string& s) {
  std::vector<glm::Column> cols;
  for (const auto& w : split_list(s)) cols.push_back(glm::column_from_string(w));
  require(!cols.empty(), ErrorCode::UsageError, "empty column list");
  return cols;
}

/// One command invocation: inputs are hashed, outputs recorded, and a
/// manifest lands next to the outputs.
class Run {
 public:
  Run(std::string command, CLI::App* sub, std::string out, unsigned workers)
      : command_(std::move(command)), sub_(sub), out_(std::move(out)), workers_(workers), started_(utc_timestamp()) {
    require(!out_.empty(), ErrorCode::UsageError, "--out is required");
    std::error_code ec;
    fs::create_directories(out_, ec);
    require(!ec, ErrorCode::IoError, "cannot create output directory " + out_ + ": " + ec.message());
  }

  std::string input(const std::string& path) {
    auto content = text::read_file(path);
    inputs_[path] = "fnv1a:" + hex64(text::fnv1a(content));
    return content;
  }

  text::Table table(const std::string& path) {
    std::istringstream in(input(path));
    return text::Table::parse(in, path);
  }

  void write(const std::string& name, const std::string& content) {
    text::write_file((fs::path(out_) / name).string(), content);
    outputs_.push_back(name);
  }

  void seed(std::uint64_t s) { seed_ = s; }
  json& notes() { return notes_; }
  unsigned workers() const { return workers_; }
  const std::string& out() const { return out_; }

  void finish(const std::string& config_path) {
    json m;
    m["command"] = command_;
    m["artifact_version"] = kArtifactVersion;
    m["config"] = config_path.empty() ? json(nullptr) : json(config_path);
    json opts = json::object();
    for (const CLI::Option* o : sub_->get_options()) {
      const auto name = o->get_single_name();
      if (name == "help" || name.empty()) continue;
      if (o->count() > 0) {
        const auto& r = o->results();
        opts[name] = r.size() == 1 ? r.front() : CLI::detail::join(r, ",");
      } else {
        opts[name] = o->get_default_str();
      }
    }
    m["options"] = opts;
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    m["seed"] = seed_ ? json(*seed_) : json(nullptr);
    m["workers"] = workers_;
    if (!notes_.empty()) m["notes"] = notes_;
    m["started"] = started_;
    m["finished"] = utc_timestamp();
    text::write_file((fs::path(out_) / "manifest.json").string(), m.dump(2) + "\n");
  }

 private:
  std::string command_;
  CLI::App* sub_;
  std::string out_;
  unsigned workers_;
  std::string started_;
  json inputs_ = json::object();
  std::vector<std::string> outputs_;
  std::optional<std::uint64_t> seed_;
  json notes_ = json::object();
};

struct Common {
  std::string out;
  unsigned workers = default_workers();
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-o,--out", c.out, "Output directory")->required();
  sub->add_option("-j,--workers", c.workers, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

struct ForestFlags {
  forest::Hyperparameters h;
};

void add_forest(CLI::App* sub, ForestFlags& f) {
  sub->add_option("--trees", f.h.n_trees, "Forest: number of trees");
  sub->add_option("--mtry", f.h.mtry, "Forest: features tried per split");
  sub->add_option("--min-leaf", f.h.min_leaf, "Forest: minimum rows per leaf");
  sub->add_option("--max-leaves", f.h.max_nodes, "Forest: maximum leaves per tree");
  sub->add_option("--forest-seed", f.h.seed, "Forest: bootstrap and feature-sampling seed");
}

std::string csv_row(std::initializer_list<std::string> fields) {
  std::string s;
  bool first = true;
  for (const auto& f : fields) {
    if (!first) s += ',';
    s += f;
    first = false;
  }
  return s + '\n';
}

std::string flags_field(const std::vector<std::string>& flags) {
  std::string s;
  for (const auto& f : flags) s += (s.empty() ? "" : ";") + f;
  return s;
}

// --- indices -------------------------------------------------------------

struct IndicesArgs {
  Common common;
  std::string climate;
  std::string geometry;
  std::optional<int> reference_first;
  std::optional<int> reference_last;
};

void cmd_indices(const IndicesArgs& a, Run& run) {
  const auto cells = climate::parse_climate(run.table(a.climate));
  std::optional<climate::ReferencePeriod> period;
  if (a.reference_first || a.reference_last) {
    require(a.reference_first && a.reference_last, ErrorCode::UsageError,
            "--reference-first and --reference-last go together");
    period = climate::ReferencePeriod{*a.reference_first, *a.reference_last};
  }
  const auto results = climate::compute_extreme_indices(cells, period, run.workers());
  std::vector<climate::ExtremeYearIndex> rows;
  std::string incomplete = "cell_id,year\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& ex = results[i].extremes;
    rows.insert(rows.end(), ex.years.begin(), ex.years.end());
    for (int y : ex.incomplete_years) incomplete += csv_row({cells[i].cell_id, std::to_string(y)});
  }
  run.write("indices.csv", climate::format_extremes(rows, "cell_id"));
  run.write("incomplete_years.csv", incomplete);
  if (!a.geometry.empty()) {
    const auto geometry = ingest::parse_geometry(run.table(a.geometry));
    run.write("town_indices.csv", climate::format_extremes(ingest::aggregate_indices(rows, geometry), "town_id"));
  }
  run.notes()["cells"] = cells.size();
  run.notes()["index_rows"] = rows.size();
}

// --- build-panel ---------------------------------------------------------

struct BuildArgs {
  Common common;
  std::string exposure, claims, indices, clay, cat_history, geometry;
};

void cmd_build_panel(const BuildArgs& a, Run& run) {
  ingest::PanelInputs in;
  in.exposure = ingest::parse_exposure(run.table(a.exposure));
  in.claims = ingest::parse_claims(run.table(a.claims));
  if (!a.cat_history.empty()) in.cat_history = ingest::parse_cat_history(run.table(a.cat_history));
  std::optional<std::vector<ingest::TownGeometry>> geometry;
  auto need_geometry = [&](const std::string& what) -> const std::vector<ingest::TownGeometry>& {
    require(!a.geometry.empty(), ErrorCode::UsageError, what + " is cell-level; pass --geometry");
    if (!geometry) geometry = ingest::parse_geometry(run.table(a.geometry));
    return *geometry;
  };
  const auto idx = run.table(a.indices);
  in.town_indices = climate::parse_extremes(idx);
  if (!idx.has_column("town_id")) in.town_indices = ingest::aggregate_indices(in.town_indices, need_geometry(a.indices));
  const auto clay = run.table(a.clay);
  in.town_clay = ingest::parse_clay(clay);
  if (!clay.has_column("town_id")) in.town_clay = ingest::aggregate_clay(in.town_clay, need_geometry(a.clay));
  const auto panel = ingest::build_panel(in);
  run.write("panel.csv", format_panel(panel));
  run.notes()["rows"] = panel.size();
}

// --- synth ---------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string generator;
  std::optional<std::uint64_t> seed;
  std::optional<int> towns, first_year, last_year, regions;
};

void cmd_synth(const SynthArgs& a, Run& run) {
  synthetic::GeneratorConfig cfg;
  if (!a.generator.empty()) cfg = synthetic::parse_config(run.input(a.generator), a.generator);
  if (a.seed) cfg.seed = *a.seed;
  if (a.towns) cfg.n_towns = *a.towns;
  if (a.first_year) cfg.first_year = *a.first_year;
  if (a.last_year) cfg.last_year = *a.last_year;
  if (a.regions) cfg.n_regions = *a.regions;
  run.seed(cfg.seed);
  const auto g = synthetic::generate_panel(cfg, run.workers());
  const auto in = synthetic::panel_inputs(g);
  run.write("panel.csv", format_panel(g.panel));
  run.write("truth.txt", synthetic::format_truth(cfg));
  run.write("exposure.csv", ingest::format_exposure(in.exposure));
  run.write("claims.csv", ingest::format_claims(in.claims));
  run.write("town_indices.csv", climate::format_extremes(in.town_indices, "town_id"));
  run.write("clay.csv", ingest::format_clay(in.town_clay, "town_id"));
  run.write("cat_history.csv", ingest::format_cat_history(in.cat_history));
  std::string expected = "town_id,year,expected_claims\n";
  for (std::size_t i = 0; i < g.panel.size(); ++i)
    expected += csv_row({g.panel[i].town_id, std::to_string(g.panel[i].year), text::fmt(g.expected_claims[i])});
  run.write("expected_claims.csv", expected);
  std::string regions = "town_id,region\n";
  for (std::size_t t = 0; t < g.town_region.size(); ++t)
    regions += csv_row({synthetic::town_name(static_cast<int>(t)), std::to_string(g.town_region[t])});
  run.write("regions.csv", regions);
  run.notes()["rows"] = g.panel.size();
}

// --- fit -----------------------------------------------------------------

struct FitArgs {
  Common common;
  std::string panel;
  std::string model;
  std::string columns;
  std::string zero_columns = "intercept,essti,esswi,clay,cat,espi";
  double power = 1.5;
  std::optional<int> train_first, train_last;
  ForestFlags forest;
};

Panel select_years(const Panel& panel, std::optional<int> first, std::optional<int> last) {
  Panel out;
  for (const auto& r : panel)
    if ((!first || r.year >= *first) && (!last || r.year <= *last)) out.push_back(r);
  require(!out.empty(), ErrorCode::InsufficientHistory, "no panel rows in the requested years");
  return out;
}

cost::FrequencyModel fit_any(const FitArgs& a, const Panel& train, unsigned workers) {
  const bool tweedie = a.model == "tweedie";
  const auto cols = a.columns.empty() ? (tweedie ? glm::cost_columns() : glm::all_columns()) : parse_columns(a.columns);
  if (a.model == "gamma") return cost::fit_severity(train, cols);
  if (tweedie) {
    glm::GlmOptions opt;
    opt.tweedie_density = false;
    return glm::fit_tweedie(glm::make_design(train, cols, glm::Response::TotalCost), a.power, opt);
  }
  const auto kind = validation::model_kind_from_string(a.model);
  if (kind == validation::ModelKind::ForestPoisson || kind == validation::ModelKind::ForestSquared)
    return forest::forest_fit(train, a.forest.h,
                              kind == validation::ModelKind::ForestPoisson ? forest::Mode::Poisson : forest::Mode::Squared,
                              workers);
  auto spec = validation::model_spec(kind);
  spec.columns = cols;
  spec.zero_columns = parse_columns(a.zero_columns);
  return validation::fit_model(spec, train);
}

std::string coefficient_table(const cost::FrequencyModel& m) {
  std::string s = "block,column,estimate,std_error\n";
  auto block = [&](const std::string& name, const std::vector<glm::Column>& cols, const Eigen::VectorXd& b,
                   const Eigen::VectorXd& se) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const auto i = static_cast<Eigen::Index>(j);
      s += csv_row({name, std::string(glm::to_string(cols[j])), text::fmt(b[i]), text::fmt(se[i])});
    }
  };
  if (const auto* g = std::get_if<glm::FittedGlm>(&m)) block("mean", g->columns, g->coefficients, g->std_errors);
  if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&m)) {
    block("count", z->count_columns, z->count_coefficients, z->count_std_errors);
    block("zero", z->zero_columns, z->zero_coefficients, z->zero_std_errors);
  }
  return s;
}

std::string fit_summary(const cost::FrequencyModel& m) {
  std::string s = "key,value\n";
  auto put = [&](const std::string& k, const std::string& v) { s += csv_row({k, v}); };
  put("model", cost::model_id(m));
  const auto ic = validation::model_information_criteria(m);
  if (const auto* g = std::get_if<glm::FittedGlm>(&m)) {
    put("family", std::string(glm::to_string(g->family)));
    put("response", std::string(model_io::to_string(g->kind)));
    put("n", std::to_string(g->n));
    put("log_likelihood", text::fmt(g->log_likelihood));
    put("deviance", text::fmt(g->deviance));
    put("dispersion", text::fmt(g->dispersion));
    put("theta", text::fmt(g->theta));
    put("iterations", std::to_string(g->iterations));
    put("flags", flags_field(g->flags));
  } else if (const auto* z = std::get_if<zi::ZeroInflatedModel>(&m)) {
    put("n", std::to_string(z->n));
    put("log_likelihood", text::fmt(z->log_likelihood));
    put("theta", text::fmt(z->theta));
    put("iterations", std::to_string(z->iterations));
    put("flags", flags_field(z->flags));
  } else {
    const auto& f = std::get<forest::Forest>(m);
    put("n", std::to_string(f.n));
    put("trees", std::to_string(f.trees.size()));
    put("oob_deviance", text::fmt(f.oob_deviance));
    put("null_deviance", text::fmt(f.null_deviance));
  }
  put("aic", text::fmt(ic.aic));
  put("bic", text::fmt(ic.bic));
  return s;
}

void cmd_fit(const FitArgs& a, Run& run) {
  const auto panel = parse_panel(run.table(a.panel));
  const auto train = select_years(panel, a.train_first, a.train_last);
  if (a.model == "rf-poisson" || a.model == "rf-squared") run.seed(a.forest.h.seed);
  const auto m = fit_any(a, train, run.workers());
  run.write("model.txt", model_io::format_model(m));
  run.write("coefficients.csv", coefficient_table(m));
  run.write("fit_summary.csv", fit_summary(m));
}

// --- predict -------------------------------------------------------------

struct PredictArgs {
  Common common;
  std::string model, panel, severity;
  std::optional<int> year;
};

void cmd_predict(const PredictArgs& a, Run& run) {
  const auto model = model_io::parse_model(run.input(a.model), a.model);
  auto rows = parse_panel(run.table(a.panel));
  if (a.year) rows = select_years(rows, a.year, a.year);
  std::optional<glm::FittedGlm> severity;
  if (!a.severity.empty()) {
    severity = model_io::as_glm(model_io::parse_model(run.input(a.severity), a.severity), "severity model");
    cost::check_severity(*severity);
  }
  const auto* g = std::get_if<glm::FittedGlm>(&model);
  const auto kind = g ? g->kind : glm::Response::ClaimCount;
  require(!severity || kind == glm::Response::ClaimCount, ErrorCode::ModelIncompatible,
          "--severity needs a claim-count model");
  std::string s = "town_id,year,exposure,observed,predicted";
  if (severity) s += ",predicted_avg_cost,predicted_total";
  s += '\n';
  for (const auto& r : rows) {
    double observed = static_cast<double>(r.claims);
    double predicted = 0.0;
    if (kind == glm::Response::ClaimCount) {
      predicted = cost::predict_count(model, r);
    } else {
      predicted = glm::predict_rate(*g, r);
      observed = kind == glm::Response::TotalCost ? r.cost()
                 : r.claims > 0                  ? r.cost() / static_cast<double>(r.claims)
                                                 : std::numeric_limits<double>::quiet_NaN();
    }
    s += r.town_id + ',' + std::to_string(r.year) + ',' + std::to_string(r.exposure) + ',' + text::fmt(observed) + ',' +
         text::fmt(predicted);
    if (severity) {
      const double z = glm::predict_rate(*severity, r);
      s += ',' + text::fmt(z) + ',' + text::fmt(predicted * z);
    }
    s += '\n';
  }
  run.write("predictions.csv", s);
  run.notes()["rows"] = rows.size();
}

// --- cv ------------------------------------------------------------------

struct CvArgs {
  Common common;
  std::string panel;
  std::string models = "poisson,negbin,zip,zinb";
  std::optional<int> first_test_year, last_test_year;
  int spatial = 0;
  std::string regions;
  bool town_predictions = false;
  ForestFlags forest;
};

void cmd_cv(const CvArgs& a, Run& run) {
  const auto panel = parse_panel(run.table(a.panel));
  const auto [lo, hi] = validation::year_span(panel);
  std::vector<validation::CvFold> folds;
  if (a.spatial > 0) {
    std::map<std::string, int> region;
    if (!a.regions.empty()) {
      const auto t = run.table(a.regions);
      const auto id = t.column("town_id"), reg = t.column("region");
      for (std::size_t i = 0; i < t.size(); ++i) region[t.row(i)[id]] = static_cast<int>(t.integer(i, reg));
    } else {
      region = validation::block_regions(panel, a.spatial);
    }
    folds = validation::spatial_folds(panel, region, a.spatial);
  } else {
    folds = validation::temporal_folds(panel, a.first_test_year.value_or(lo + 1), a.last_test_year.value_or(hi));
  }
  require(!folds.empty(), ErrorCode::InsufficientHistory, "no validation folds in the requested range");
  std::vector<validation::ModelSpec> specs;
  for (const auto& name : split_list(a.models)) {
    auto spec = validation::model_spec(validation::model_kind_from_string(name));
    spec.forest = a.forest.h;
    specs.push_back(std::move(spec));
  }
  require(!specs.empty(), ErrorCode::UsageError, "--models lists no models");
  validation::ReportOptions opt;
  opt.workers = run.workers();
  opt.keep_town_predictions = a.town_predictions;
  const auto rep = validation::yearly_report(panel, specs, folds, opt);

  std::string f = "fold,test_year,model,aic,bic,rmse,deviance,predicted_total,observed_total,test_rows,flags\n";
  std::string y = "fold,test_year,model,predicted_total,observed_total,predicted_share,observed_share\n";
  const double g = rep.observed_grand_total > 0 ? rep.observed_grand_total : 1.0;
  for (const auto& r : rep.folds) {
    f += csv_row({r.fold, std::to_string(r.test_year), r.model, text::fmt(r.aic), text::fmt(r.bic), text::fmt(r.rmse),
                  text::fmt(r.deviance), text::fmt(r.predicted_total), text::fmt(r.observed_total),
                  std::to_string(r.test_rows), flags_field(r.flags)});
    y += csv_row({r.fold, std::to_string(r.test_year), r.model, text::fmt(r.predicted_total),
                  text::fmt(r.observed_total), text::fmt(r.predicted_total / g), text::fmt(r.observed_total / g)});
  }
  std::string s = "model,aic,bic,rmse,deviance,total_rmse\n";
  json summary = json::array();
  for (const auto& m : rep.summary) {
    s += csv_row({m.model, text::fmt(m.aic), text::fmt(m.bic), text::fmt(m.rmse), text::fmt(m.deviance),
                  text::fmt(m.total_rmse)});
    summary.push_back({{"model", m.model},
                       {"aic", text::fmt(m.aic)},
                       {"bic", text::fmt(m.bic)},
                       {"rmse", text::fmt(m.rmse)},
                       {"deviance", text::fmt(m.deviance)},
                       {"total_rmse", text::fmt(m.total_rmse)}});
  }
  run.write("cv_folds.csv", f);
  run.write("yearly_totals.csv", y);
  run.write("cv_summary.csv", s);
  json js;
  js["folds"] = folds.size();
  js["observed_grand_total"] = text::fmt(rep.observed_grand_total);
  js["models"] = summary;
  run.write("cv_summary.json", js.dump(2) + "\n");
  if (a.town_predictions) {
    std::string t = "fold,model,town_id,year,predicted,observed\n";
    const std::size_t m = specs.size();
    for (std::size_t fi = 0; fi < folds.size(); ++fi) {
      const auto test = validation::partition(panel, folds[fi]).test;
      for (std::size_t j = 0; j < m; ++j) {
        const auto& pred = rep.town_predictions[fi * m + j].second;
        for (std::size_t i = 0; i < test.size(); ++i)
          t += csv_row({folds[fi].label(), specs[j].id, test[i].town_id, std::to_string(test[i].year),
                        text::fmt(pred[i]), std::to_string(test[i].claims)});
      }
    }
    run.write("town_predictions.csv", t);
  }
}

// --- map -----------------------------------------------------------------

struct MapArgs {
  Common common;
  std::string input;
  std::string value = "predicted";
  std::optional<int> year;
  bool geojson = false;
};

void cmd_map(const MapArgs& a, Run& run) {
  const auto t = run.table(a.input);
  const auto id = t.column("town_id"), val = t.column(a.value);
  require(!a.year || t.has_column("year"), ErrorCode::SchemaError, a.input + ": --year given but the file has no 'year' column");
  const std::size_t year_col = a.year ? t.column("year") : 0;
  std::map<std::string, double> values;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (a.year && t.integer(i, year_col) != *a.year) continue;
    const auto& town = t.row(i)[id];
    require(values.emplace(town, t.number(i, val)).second, ErrorCode::DuplicateKey,
            t.location(i) + ": town '" + town + "' appears twice; pass --year");
  }
  std::string s = "town_id,value\n";
  for (const auto& [town, v] : values) s += csv_row({town, text::fmt(v)});
  run.write("map.csv", s);
  if (a.geojson) {
    json fc;
    fc["type"] = "FeatureCollection";
    fc["features"] = json::array();
    for (const auto& [town, v] : values) {
      json p;
      p["town_id"] = town;
      p[a.value] = std::isfinite(v) ? json(v) : json(nullptr);
      fc["features"].push_back({{"type", "Feature"}, {"geometry", nullptr}, {"properties", p}});
    }
    run.write("map.geojson", fc.dump(1) + "\n");
  }
  run.notes()["towns"] = values.size();
}

// --- report --------------------------------------------------------------

struct ReportArgs {
  Common common;
  std::string cv;
  std::string panel;
  std::optional<int> cost_year;
  double power = 1.5;
  ForestFlags forest;
};

void cmd_report(const ReportArgs& a, Run& run) {
  const auto summary = run.table((fs::path(a.cv) / "cv_summary.csv").string());
  const auto folds = run.table((fs::path(a.cv) / "cv_folds.csv").string());
  struct Row {
    std::string model;
    double aic, bic, rmse, deviance, total_rmse;
  };
  std::vector<Row> rows;
  const auto cm = summary.column("model"), ca = summary.column("aic"), cb = summary.column("bic"),
             cr = summary.column("rmse"), cd = summary.column("deviance"), ct = summary.column("total_rmse");
  for (std::size_t i = 0; i < summary.size(); ++i)
    rows.push_back({summary.row(i)[cm], summary.number(i, ca), summary.number(i, cb), summary.number(i, cr),
                    summary.number(i, cd), summary.number(i, ct)});
  require(!rows.empty(), ErrorCode::SchemaError, summary.source() + ": no models");
  auto rank = [&](double Row::*field) {
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      const double u = rows[x].*field, v = rows[y].*field;
      if (std::isnan(u) != std::isnan(v)) return std::isnan(v);
      return u < v;
    });
    std::vector<int> r(rows.size());
    for (std::size_t k = 0; k < order.size(); ++k) r[order[k]] = std::isnan(rows[order[k]].*field) ? 0 : static_cast<int>(k) + 1;
    return r;
  };
  const auto ra = rank(&Row::aic), rb = rank(&Row::bic), rr = rank(&Row::rmse), rt = rank(&Row::total_rmse);
  std::string csv = "model,aic,bic,rmse,deviance,total_rmse,rank_aic,rank_bic,rank_rmse,rank_total_rmse\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    auto rk = [](int v) { return v ? std::to_string(v) : std::string("-"); };
    csv += csv_row({r.model, text::fmt(r.aic), text::fmt(r.bic), text::fmt(r.rmse), text::fmt(r.deviance),
                    text::fmt(r.total_rmse), rk(ra[i]), rk(rb[i]), rk(rr[i]), rk(rt[i])});
  }
  run.write("report.csv", csv);

  // National totals per test year, normalized by the observed total over all folds.
  const auto fy = folds.column("test_year"), fm = folds.column("model"), fp = folds.column("predicted_total"),
             fo = folds.column("observed_total");
  std::map<std::pair<long long, std::string>, double> predicted;
  std::map<long long, double> observed;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    predicted[{folds.integer(i, fy), folds.row(i)[fm]}] += folds.number(i, fp);
    if (rows.front().model == folds.row(i)[fm]) observed[folds.integer(i, fy)] += folds.number(i, fo);
  }
  double grand = 0.0;
  for (const auto& [y, v] : observed) grand += v;
  if (grand <= 0.0) grand = 1.0;
  std::string yearly = "test_year,model,predicted_share,observed_share\n";
  for (const auto& [key, v] : predicted)
    yearly += csv_row({std::to_string(key.first), key.second, text::fmt(v / grand), text::fmt(observed[key.first] / grand)});
  run.write("report_yearly.csv", yearly);

  std::ostringstream txt;
  txt << "Cross-validation report\n\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %14s %14s %12s %14s %12s %4s\n", "model", "mean AIC", "mean BIC", "RMSE",
                "deviance", "total RMSE", "AIC#");
  txt << line;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::snprintf(line, sizeof line, "%-12s %14s %14s %12s %14s %12s %4s\n", r.model.c_str(), text::fmt(r.aic).c_str(),
                  text::fmt(r.bic).c_str(), text::fmt(r.rmse).c_str(), text::fmt(r.deviance).c_str(),
                  text::fmt(r.total_rmse).c_str(), ra[i] ? std::to_string(ra[i]).c_str() : "-");
    txt << line;
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (ra[i] == 1) best = i;
  if (ra[best] == 1) txt << "\nLowest mean AIC: " << rows[best].model << '\n';

  if (a.cost_year) {
    require(!a.panel.empty(), ErrorCode::UsageError, "--cost-year needs --panel");
    const auto panel = parse_panel(run.table(a.panel));
    cost::CostOptions opt;
    opt.tweedie_power = a.power;
    opt.forest = a.forest.h;
    opt.workers = run.workers();
    run.seed(a.forest.h.seed);
    const auto c = cost::compare_cost_models(panel, *a.cost_year, opt);
    std::string totals = "method,predicted_total,observed_total,town_rmse\n";
    txt << "\nTotal cost, " << c.year << '\n';
    for (std::size_t m = 0; m < c.methods.size(); ++m) {
      totals += csv_row({c.methods[m], text::fmt(c.totals[m]), c.observed_total ? text::fmt(*c.observed_total) : "",
                         c.rmse[m] ? text::fmt(*c.rmse[m]) : ""});
      txt << "  " << c.methods[m] << ": " << text::fmt(c.totals[m]) << '\n';
    }
    if (c.observed_total) txt << "  observed: " << text::fmt(*c.observed_total) << '\n';
    run.write("cost_totals.csv", totals);
    std::string towns = "town_id,year,method,count,avg_cost,total,observed\n";
    for (const auto& t : c.towns)
      for (std::size_t m = 0; m < c.methods.size(); ++m)
        towns += csv_row({t.town_id, std::to_string(t.year), c.methods[m], text::fmt(t.count[m]),
                          text::fmt(t.avg_cost[m]), text::fmt(t.total[m]), t.observed ? text::fmt(*t.observed) : ""});
    run.write("cost_towns.csv", towns);
  }
  run.write("report.txt", txt.str());
}

void emit_error(std::string_view code, std::string_view category, const std::string& message) {
  json e;
  e["error"] = {{"code", code}, {"category", category}, {"message", message}};
  std::cerr << e.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Drought subsidence claim modelling pipeline"};
  app.set_version_flag("--version", kArtifactVersion);
  app.set_config("--config", "", "INI/TOML file with option values; [section] per subcommand");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 success, 2 usage, 3 schema, 4 data, 5 numerical, 6 io, 1 internal.\n"
      "Errors print one JSON object {\"error\":{code,category,message}} on stderr.");

  IndicesArgs ia;
  auto* indices = app.add_subcommand("indices", "Climate series to yearly extreme indices");
  add_common(indices, ia.common);
  indices->add_option("--climate", ia.climate, "Monthly climate CSV")->required();
  indices->add_option("--geometry", ia.geometry, "Town/cell weights CSV; also writes town_indices.csv");
  indices->add_option("--reference-first", ia.reference_first, "First year of the standardization period");
  indices->add_option("--reference-last", ia.reference_last, "Last year of the standardization period");

  BuildArgs ba;
  auto* build = app.add_subcommand("build-panel", "Join raw inputs into the town-year panel");
  add_common(build, ba.common);
  build->add_option("--exposure", ba.exposure, "Exposure CSV")->required();
  build->add_option("--claims", ba.claims, "Claims CSV")->required();
  build->add_option("--indices", ba.indices, "Extreme indices CSV (town_id or cell_id)")->required();
  build->add_option("--clay", ba.clay, "Clay share CSV (town_id or cell_id)")->required();
  build->add_option("--cat-history", ba.cat_history, "Cat-recognition requests CSV");
  build->add_option("--geometry", ba.geometry, "Town/cell weights CSV for cell-level inputs");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic panel with known truth");
  add_common(synth, sa.common);
  synth->add_option("--generator", sa.generator, "Generator settings file (key value lines)");
  synth->add_option("--seed", sa.seed, "Override the generator seed");
  synth->add_option("--towns", sa.towns, "Override the number of towns");
  synth->add_option("--first-year", sa.first_year, "Override the first year");
  synth->add_option("--last-year", sa.last_year, "Override the last year");
  synth->add_option("--regions", sa.regions, "Override the number of shock regions");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit one model on a panel");
  add_common(fit, fa.common);
  fit->add_option("--panel", fa.panel, "Panel CSV")->required();
  fit->add_option("--model", fa.model,
                  "poisson|binomial|negbin|zip|zinb|rf-poisson|rf-squared|gamma|tweedie")
      ->required();
  fit->add_option("--columns", fa.columns, "Design columns (default: all; tweedie drops espi)");
  fit->add_option("--zero-columns", fa.zero_columns, "Zero-inflation columns");
  fit->add_option("--power", fa.power, "Tweedie power");
  fit->add_option("--train-first", fa.train_first, "First training year");
  fit->add_option("--train-last", fa.train_last, "Last training year");
  add_forest(fit, fa.forest);

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Predict a panel with a fitted model");
  add_common(predict, pa.common);
  predict->add_option("--model", pa.model, "Model file")->required();
  predict->add_option("--panel", pa.panel, "Panel CSV")->required();
  predict->add_option("--year", pa.year, "Only this year");
  predict->add_option("--severity", pa.severity, "Gamma severity model; adds average and total cost");

  CvArgs ca;
  auto* cv = app.add_subcommand("cv", "Leave-future-out or spatial cross-validation");
  add_common(cv, ca.common);
  cv->add_option("--panel", ca.panel, "Panel CSV")->required();
  cv->add_option("--models", ca.models, "Comma-separated model list");
  cv->add_option("--first-test-year", ca.first_test_year, "First test year (default: second panel year)");
  cv->add_option("--last-test-year", ca.last_test_year, "Last test year (default: last panel year)");
  cv->add_option("--spatial", ca.spatial, "Use K spatial folds instead of temporal ones");
  cv->add_option("--regions", ca.regions, "town_id,region CSV for spatial folds (default: contiguous blocks)");
  cv->add_flag("--town-predictions", ca.town_predictions, "Also write per-town test predictions");
  add_forest(cv, ca.forest);

  MapArgs ma;
  auto* map = app.add_subcommand("map", "Export (town_id, value) pairs for mapping");
  add_common(map, ma.common);
  map->add_option("--input", ma.input, "CSV with a town_id column")->required();
  map->add_option("--value", ma.value, "Column to export");
  map->add_option("--year", ma.year, "Only rows of this year");
  map->add_flag("--geojson", ma.geojson, "Also write map.geojson (properties only, null geometry)");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Summarize a cv run; optional total-cost comparison");
  add_common(report, ra.common);
  report->add_option("--cv", ra.cv, "Output directory of a cv run")->required();
  report->add_option("--panel", ra.panel, "Panel CSV for the cost comparison");
  report->add_option("--cost-year", ra.cost_year, "Target year of the cost comparison");
  report->add_option("--power", ra.power, "Tweedie power");
  add_forest(report, ra.forest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    emit_error("UsageError", "usage", e.what());
    return exit_code(ErrorCategory::Usage);
  }

  const std::string config_path = app.get_config_ptr()->count() ? app.get_config_ptr()->as<std::string>() : "";
  try {
    auto go = [&](auto& args, CLI::App* sub, auto&& body) {
      Run run(sub->get_name(), sub, args.common.out, args.common.workers);
      body(args, run);
      run.finish(config_path);
    };
    if (indices->parsed()) go(ia, indices, cmd_indices);
    else if (build->parsed()) go(ba, build, cmd_build_panel);
    else if (synth->parsed()) go(sa, synth, cmd_synth);
    else if (fit->parsed()) go(fa, fit, cmd_fit);
    else if (predict->parsed()) go(pa, predict, cmd_predict);
    else if (cv->parsed()) go(ca, cv, cmd_cv);
    else if (map->parsed()) go(ma, map, cmd_map);
    else if (report->parsed()) go(ra, report, cmd_report);
  } catch (const Error& e) {
    const auto cat = category(e.code());
    emit_error(to_string(e.code()), to_string(cat), e.what());
    return exit_code(cat);
  } catch (const std::exception& e) {
    emit_error("Internal", "internal", e.what());
    return 1;
  }
  return 0;
}
