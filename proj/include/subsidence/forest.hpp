#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "ingest.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "text_io.hpp"

namespace subsidence::forest {

enum class Mode { Squared, Poisson };

constexpr std::string_view to_string(Mode m) noexcept { return m == Mode::Squared ? "squared" : "poisson"; }

inline Mode mode_from_string(std::string_view s) {
  if (s == "squared") return Mode::Squared;
  if (s == "poisson") return Mode::Poisson;
  fail(ErrorCode::UsageError, "unknown forest mode '" + std::string(s) + "'");
}

inline const std::vector<std::string>& default_features() {
  static const std::vector<std::string> names{"essti", "esswi", "clay", "cat", "espi"};
  return names;
}

/// Row-major feature matrix with response and exposure.
struct Dataset {
  std::vector<std::string> features;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> exposure;
  // Stable row identity used to fix the sampling order.
  std::vector<std::string> keys;

  std::size_t size() const noexcept { return y.size(); }
  std::size_t width() const noexcept { return features.size(); }
  double value(std::size_t row, std::size_t f) const { return x[row * features.size() + f]; }

  void add(std::span<const double> row, double response, double expo, std::string key = {}) {
    require(row.size() == features.size(), ErrorCode::DimensionMismatch, "row width does not match the feature list");
    x.insert(x.end(), row.begin(), row.end());
    y.push_back(response);
    exposure.push_back(expo);
    keys.push_back(std::move(key));
  }
};

inline std::vector<double> panel_features(const TownYearRecord& r) {
  return {r.essti, r.esswi, r.clay, static_cast<double>(r.cat), r.espi};
}

/// Claim counts with exposure; rows with zero exposure are dropped.
inline Dataset make_dataset(const Panel& panel) {
  Dataset d;
  d.features = default_features();
  for (const auto& r : panel) {
    if (r.exposure <= 0) continue;
    char year[16];
    std::snprintf(year, sizeof year, "%06d", r.year);
    d.add(panel_features(r), static_cast<double>(r.claims), static_cast<double>(r.exposure), r.town_id + '\x1f' + year);
  }
  return d;
}

struct Hyperparameters {
  int n_trees = 200;
  int mtry = 3;
  int min_leaf = 50;
  // Maximum number of leaves per tree.
  int max_nodes = 512;
  bool bootstrap = true;
  std::uint64_t seed = 20180101;
};

inline void validate(const Hyperparameters& h, std::size_t width) {
  require(h.n_trees >= 1, ErrorCode::InvalidParam, "n_trees must be >= 1");
  require(h.mtry >= 1 && static_cast<std::size_t>(h.mtry) <= width, ErrorCode::InvalidParam,
          "mtry must lie in [1, " + std::to_string(width) + "]");
  require(h.min_leaf >= 1, ErrorCode::InvalidParam, "min_leaf must be >= 1");
  require(h.max_nodes >= 1, ErrorCode::InvalidParam, "max_nodes must be >= 1");
}

struct Node {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double weight = 0.0;
  double sum_y = 0.0;
  double sum_exposure = 0.0;
  std::size_t n = 0;
  double gain = 0.0;

  bool leaf() const noexcept { return feature < 0; }
  bool operator==(const Node&) const = default;
};

struct Tree {
  std::vector<Node> nodes;
  std::uint64_t seed = 0;

  int leaf_index(std::span<const double> x) const {
    int i = 0;
    while (!nodes[static_cast<std::size_t>(i)].leaf()) {
      const auto& nd = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    return i;
  }
  double leaf_weight(std::span<const double> x) const { return nodes[static_cast<std::size_t>(leaf_index(x))].weight; }
  std::size_t leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.leaf(); }));
  }
  bool operator==(const Tree&) const = default;
};

struct Forest {
  Mode mode = Mode::Poisson;
  Hyperparameters hyper;
  std::vector<std::string> features;
  std::vector<Tree> trees;
  double oob_deviance = std::numeric_limits<double>::quiet_NaN();
  double null_deviance = std::numeric_limits<double>::quiet_NaN();
  std::size_t oob_rows = 0;
  std::size_t n = 0;
  int year_first = 0;
  int year_last = 0;
};

struct Split {
  std::size_t feature = 0;
  double threshold = 0.0;
  double gain = 0.0;
};

namespace detail {

inline double xlogx_over(double y, double e) { return y > 0.0 ? y * std::log(y / e) : 0.0; }

// Node loss term whose decrease is the split gain.
inline double poisson_term(double y, double e) { return 2.0 * xlogx_over(y, e); }

inline bool better(double gain, std::size_t feature, double threshold, const Split& best, bool have) {
  if (!have) return true;
  const double tol = 1e-12 * std::max({1.0, std::abs(gain), std::abs(best.gain)});
  if (gain > best.gain + tol) return true;
  if (gain < best.gain - tol) return false;
  if (feature != best.feature) return feature < best.feature;
  return threshold < best.threshold;
}

}  // namespace detail

/// Exhaustive search over midpoints of sorted unique values. Squared gain is
/// the between-variance (SSE decrease over node size); Poisson gain is the
/// decrease of the deviance with leaf rates sum(y)/sum(E).
inline Split best_split(const Dataset& data, std::span<const std::size_t> rows, std::span<const std::size_t> features,
                        Mode mode, int min_leaf) {
  const std::size_t n = rows.size();
  const auto leaf = static_cast<std::size_t>(std::max(min_leaf, 1));
  require(n >= 2 * leaf, ErrorCode::NoValidSplit, "node has fewer than 2 * min_leaf rows");
  double total_y = 0.0, total_e = 0.0;
  for (auto r : rows) {
    total_y += data.y[r];
    total_e += data.exposure[r];
  }
  const double nn = static_cast<double>(n);
  const double parent = mode == Mode::Squared ? total_y * total_y / nn : detail::poisson_term(total_y, total_e);
  double scale = 0.0;
  if (mode == Mode::Squared) {
    const double mean = total_y / nn;
    for (auto r : rows) scale += (data.y[r] - mean) * (data.y[r] - mean);
    scale /= nn;
  } else {
    scale = std::abs(parent);
  }

  Split best;
  bool have = false;
  std::vector<std::size_t> order(rows.begin(), rows.end());
  for (auto f : features) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return data.value(a, f) < data.value(b, f); });
    double ly = 0.0, le = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      ly += data.y[order[i]];
      le += data.exposure[order[i]];
      const std::size_t nl = i + 1, nr = n - nl;
      const double xa = data.value(order[i], f), xb = data.value(order[i + 1], f);
      if (!(xa < xb) || nl < leaf || nr < leaf) continue;
      double gain;
      if (mode == Mode::Squared) {
        const double ry = total_y - ly;
        gain = (ly * ly / static_cast<double>(nl) + ry * ry / static_cast<double>(nr) - parent) / nn;
      } else {
        gain = detail::poisson_term(ly, le) + detail::poisson_term(total_y - ly, total_e - le) - parent;
      }
      double threshold = 0.5 * (xa + xb);
      if (!(threshold < xb)) threshold = xa;
      if (detail::better(gain, f, threshold, best, have)) {
        best = {f, threshold, gain};
        have = true;
      }
    }
  }
  if (!have || !(best.gain > 1e-12 * std::max(1.0, scale)))
    fail(ErrorCode::NoValidSplit, "no split satisfies min_leaf with positive gain");
  return best;
}

/// Grows one tree breadth-first on the given (possibly repeated) rows.
inline Tree grow_tree(const Dataset& data, std::vector<std::size_t> sample, const Hyperparameters& h, Mode mode,
                      std::uint64_t seed) {
  require(!sample.empty(), ErrorCode::InvalidParam, "empty sample");
  validate(h, data.width());
  Rng rng(seed);
  Tree tree;
  tree.seed = seed;
  std::vector<std::vector<std::size_t>> members;
  auto make_node = [&](std::vector<std::size_t> rows) {
    Node nd;
    for (auto r : rows) {
      nd.sum_y += data.y[r];
      nd.sum_exposure += data.exposure[r];
    }
    nd.n = rows.size();
    nd.weight = mode == Mode::Squared ? nd.sum_y / static_cast<double>(nd.n)
                                      : (nd.sum_exposure > 0.0 ? nd.sum_y / nd.sum_exposure : 0.0);
    tree.nodes.push_back(nd);
    members.push_back(std::move(rows));
    return static_cast<int>(tree.nodes.size() - 1);
  };
  make_node(std::move(sample));
  std::vector<std::size_t> all(data.width());
  std::iota(all.begin(), all.end(), 0);
  std::size_t leaves = 1;
  for (std::size_t cursor = 0; cursor < tree.nodes.size() && leaves < static_cast<std::size_t>(h.max_nodes); ++cursor) {
    if (members[cursor].size() < 2 * static_cast<std::size_t>(h.min_leaf)) continue;
    // Partial Fisher-Yates for the mtry candidates, then sorted.
    std::vector<std::size_t> cand = all;
    for (std::size_t j = 0; j < static_cast<std::size_t>(h.mtry); ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, cand.size() - 1);
      std::swap(cand[j], cand[pick(rng)]);
    }
    cand.resize(static_cast<std::size_t>(h.mtry));
    std::sort(cand.begin(), cand.end());
    Split s;
    try {
      s = best_split(data, members[cursor], cand, mode, h.min_leaf);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoValidSplit) throw;
      continue;
    }
    std::vector<std::size_t> left, right;
    for (auto r : members[cursor]) (data.value(r, s.feature) <= s.threshold ? left : right).push_back(r);
    members[cursor].clear();
    members[cursor].shrink_to_fit();
    const int l = make_node(std::move(left));
    const int r = make_node(std::move(right));
    auto& nd = tree.nodes[cursor];
    nd.feature = static_cast<int>(s.feature);
    nd.threshold = s.threshold;
    nd.gain = s.gain;
    nd.left = l;
    nd.right = r;
    ++leaves;
  }
  return tree;
}

/// Row order sorted by stable key, so sampling is independent of input order.
inline std::vector<std::size_t> canonical_order(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (data.keys.size() == data.size())
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return data.keys[a] < data.keys[b]; });
  return idx;
}

inline double tree_prediction(const Forest& f, const Tree& t, std::span<const double> x, double exposure) {
  const double w = t.leaf_weight(x);
  return f.mode == Mode::Poisson ? exposure * w : w;
}

/// Squared mode: mean of leaf weights. Poisson mode: exposure times the mean
/// leaf rate.
inline double forest_predict(const Forest& f, std::span<const double> x, double exposure) {
  require(x.size() == f.features.size(), ErrorCode::DimensionMismatch,
          "covariate vector has " + std::to_string(x.size()) + " entries, forest expects " +
              std::to_string(f.features.size()));
  require(!f.trees.empty(), ErrorCode::MissingModel, "forest has no trees");
  double total = 0.0;
  for (const auto& t : f.trees) total += t.leaf_weight(x);
  const double mean = total / static_cast<double>(f.trees.size());
  return f.mode == Mode::Poisson ? exposure * mean : mean;
}

inline double forest_predict(const Forest& f, const TownYearRecord& r) {
  return forest_predict(f, panel_features(r), static_cast<double>(r.exposure));
}

inline std::vector<double> forest_predict(const Forest& f, const Panel& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(forest_predict(f, r));
  return out;
}

/// Mean unit deviance: Poisson deviance in Poisson mode, squared error
/// otherwise.
inline double unit_loss(Mode mode, double y, double mu) {
  if (mode == Mode::Squared) return (y - mu) * (y - mu);
  if (mu <= 0.0) return y > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return 2.0 * (detail::xlogx_over(y, mu) - (y - mu));
}

/// Bagged forest. Tree t samples n rows with replacement from the rows in
/// canonical order using seed derive_seed(seed, {t}).
inline Forest forest_fit(const Dataset& data, const Hyperparameters& h, Mode mode, unsigned workers = 1) {
  validate(h, data.width());
  require(data.size() > 0, ErrorCode::InvalidParam, "empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i) {
    require(std::isfinite(data.y[i]) && data.y[i] >= (mode == Mode::Poisson ? 0.0 : -HUGE_VAL), ErrorCode::BadResponse,
            "row " + std::to_string(i) + ": invalid response");
    if (mode == Mode::Poisson)
      require(data.exposure[i] > 0.0, ErrorCode::BadResponse, "row " + std::to_string(i) + ": exposure must be > 0");
  }
  Forest f;
  f.mode = mode;
  f.hyper = h;
  f.features = data.features;
  f.n = data.size();
  const auto order = canonical_order(data);
  const std::size_t n = order.size();
  f.trees.resize(static_cast<std::size_t>(h.n_trees));
  std::vector<std::vector<char>> in_bag(static_cast<std::size_t>(h.n_trees));
  parallel_for(static_cast<std::size_t>(h.n_trees), workers, [&](std::size_t t) {
    const std::uint64_t seed = derive_seed(h.seed, {t});
    std::vector<std::size_t> sample;
    auto& bag = in_bag[t];
    bag.assign(n, 0);
    if (h.bootstrap) {
      Rng rng(derive_seed(seed, {0}));
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::vector<std::size_t> draws(n);
      for (auto& k : draws) k = pick(rng);
      std::sort(draws.begin(), draws.end());
      sample.reserve(n);
      for (auto k : draws) {
        bag[k] = 1;
        sample.push_back(order[k]);
      }
    } else {
      sample = order;
      std::fill(bag.begin(), bag.end(), 1);
    }
    f.trees[t] = grow_tree(data, std::move(sample), h, mode, derive_seed(seed, {1}));
  });

  // Out-of-bag loss against the intercept-only model on the same rows.
  double total_y = 0.0, total_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total_y += data.y[i];
    total_e += data.exposure[i];
  }
  double oob = 0.0, null = 0.0;
  std::size_t rows = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    const std::span<const double> x(&data.x[i * data.width()], data.width());
    double sum = 0.0;
    int count = 0;
    for (std::size_t t = 0; t < f.trees.size(); ++t)
      if (!in_bag[t][k]) {
        sum += f.trees[t].leaf_weight(x);
        ++count;
      }
    if (count == 0) continue;
    const double mean = sum / count;
    const double mu = mode == Mode::Poisson ? data.exposure[i] * mean : mean;
    const double base = mode == Mode::Poisson ? data.exposure[i] * total_y / total_e : total_y / static_cast<double>(n);
    oob += unit_loss(mode, data.y[i], mu);
    null += unit_loss(mode, data.y[i], base);
    ++rows;
  }
  f.oob_rows = rows;
  if (rows > 0) {
    f.oob_deviance = oob / static_cast<double>(rows);
    f.null_deviance = null / static_cast<double>(rows);
  }
  return f;
}

inline Forest forest_fit(const Panel& panel, const Hyperparameters& h, Mode mode, unsigned workers = 1) {
  Forest f = forest_fit(make_dataset(panel), h, mode, workers);
  if (!panel.empty()) {
    f.year_first = std::min_element(panel.begin(), panel.end(), [](auto& a, auto& b) { return a.year < b.year; })->year;
    f.year_last = std::max_element(panel.begin(), panel.end(), [](auto& a, auto& b) { return a.year < b.year; })->year;
  }
  return f;
}

inline constexpr std::string_view kForestHeader = "subsidence-forest v1";

/// Text tree dump; doubles are written round-trip exact.
inline std::string format_forest(const Forest& f) {
  std::ostringstream out;
  out << kForestHeader << "\n";
  out << "mode " << to_string(f.mode) << "\n";
  out << "features";
  for (const auto& name : f.features) out << ' ' << name;
  out << "\n";
  out << "n_trees " << f.hyper.n_trees << "\nmtry " << f.hyper.mtry << "\nmin_leaf " << f.hyper.min_leaf
      << "\nmax_nodes " << f.hyper.max_nodes << "\nbootstrap " << (f.hyper.bootstrap ? 1 : 0) << "\nseed "
      << f.hyper.seed << "\n";
  out << "n " << f.n << "\nyears " << f.year_first << ' ' << f.year_last << "\n";
  out << "oob_deviance " << text::fmt_exact(f.oob_deviance) << "\nnull_deviance " << text::fmt_exact(f.null_deviance)
      << "\noob_rows " << f.oob_rows << "\n";
  for (std::size_t t = 0; t < f.trees.size(); ++t) {
    const auto& tree = f.trees[t];
    out << "tree " << t << ' ' << tree.seed << ' ' << tree.nodes.size() << "\n";
    for (const auto& nd : tree.nodes)
      out << nd.feature << ' ' << text::fmt_exact(nd.threshold) << ' ' << nd.left << ' ' << nd.right << ' '
          << text::fmt_exact(nd.weight) << ' ' << text::fmt_exact(nd.sum_y) << ' ' << text::fmt_exact(nd.sum_exposure)
          << ' ' << nd.n << ' ' << text::fmt_exact(nd.gain) << "\n";
  }
  return out.str();
}

inline Forest parse_forest(const std::string& content, const std::string& source = "forest") {
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> std::vector<std::string> {
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::SchemaError, source + ": truncated forest file");
    ++line_no;
    return text::split(text::trim(line), ' ');
  };
  auto where = [&] { return source + ":" + std::to_string(line_no); };
  auto keyed = [&](std::string_view key, std::size_t arity) {
    auto f = next();
    require(f.size() == arity + 1 && f[0] == key, ErrorCode::SchemaError,
            where() + ": expected '" + std::string(key) + "'");
    return f;
  };
  require(std::getline(in, line) && text::trim(line) == kForestHeader, ErrorCode::ModelIncompatible,
          source + ": not a forest file (expected '" + std::string(kForestHeader) + "')");
  ++line_no;
  Forest f;
  f.mode = mode_from_string(keyed("mode", 1)[1]);
  {
    auto feats = next();
    require(!feats.empty() && feats[0] == "features", ErrorCode::SchemaError, where() + ": expected 'features'");
    f.features.assign(feats.begin() + 1, feats.end());
  }
  f.hyper.n_trees = static_cast<int>(text::parse_int(keyed("n_trees", 1)[1], where()));
  f.hyper.mtry = static_cast<int>(text::parse_int(keyed("mtry", 1)[1], where()));
  f.hyper.min_leaf = static_cast<int>(text::parse_int(keyed("min_leaf", 1)[1], where()));
  f.hyper.max_nodes = static_cast<int>(text::parse_int(keyed("max_nodes", 1)[1], where()));
  f.hyper.bootstrap = text::parse_int(keyed("bootstrap", 1)[1], where()) != 0;
  f.hyper.seed = std::stoull(keyed("seed", 1)[1]);
  f.n = static_cast<std::size_t>(text::parse_int(keyed("n", 1)[1], where()));
  {
    auto y = keyed("years", 2);
    f.year_first = static_cast<int>(text::parse_int(y[1], where()));
    f.year_last = static_cast<int>(text::parse_int(y[2], where()));
  }
  f.oob_deviance = text::parse_double(keyed("oob_deviance", 1)[1], where());
  f.null_deviance = text::parse_double(keyed("null_deviance", 1)[1], where());
  f.oob_rows = static_cast<std::size_t>(text::parse_int(keyed("oob_rows", 1)[1], where()));
  for (int t = 0; t < f.hyper.n_trees; ++t) {
    auto head = keyed("tree", 3);
    Tree tree;
    tree.seed = std::stoull(head[2]);
    const auto count = static_cast<std::size_t>(text::parse_int(head[3], where()));
    for (std::size_t k = 0; k < count; ++k) {
      auto v = next();
      require(v.size() == 9, ErrorCode::SchemaError, where() + ": expected 9 node fields");
      Node nd;
      nd.feature = static_cast<int>(text::parse_int(v[0], where()));
      nd.threshold = text::parse_double(v[1], where());
      nd.left = static_cast<int>(text::parse_int(v[2], where()));
      nd.right = static_cast<int>(text::parse_int(v[3], where()));
      nd.weight = text::parse_double(v[4], where());
      nd.sum_y = text::parse_double(v[5], where());
      nd.sum_exposure = text::parse_double(v[6], where());
      nd.n = static_cast<std::size_t>(text::parse_int(v[7], where()));
      nd.gain = text::parse_double(v[8], where());
      const int limit = static_cast<int>(count);
      require(nd.leaf() || (nd.feature < static_cast<int>(f.features.size()) && nd.left > 0 && nd.left < limit &&
                            nd.right > 0 && nd.right < limit),
              ErrorCode::SchemaError, where() + ": node references out of range");
      tree.nodes.push_back(nd);
    }
    require(!tree.nodes.empty(), ErrorCode::SchemaError, where() + ": empty tree");
    f.trees.push_back(std::move(tree));
  }
  return f;
}

}  // namespace subsidence::forest
