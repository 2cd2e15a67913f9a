#pragma once

// Text model files. GLM and zero-inflated models share a "key values..."
// layout; forests keep their own tree dump.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cost_models.hpp"
#include "error.hpp"
#include "forest.hpp"
#include "glm.hpp"
#include "text_io.hpp"
#include "zero_inflated.hpp"

namespace subsidence::model_io {

inline constexpr std::string_view kModelHeader = "subsidence-model v1";

inline std::string_view to_string(glm::Response r) noexcept {
  switch (r) {
    case glm::Response::ClaimCount: return "claims";
    case glm::Response::Severity: return "severity";
    case glm::Response::TotalCost: return "total";
  }
  return "?";
}

inline glm::Response response_from_string(std::string_view s) {
  if (s == "claims") return glm::Response::ClaimCount;
  if (s == "severity") return glm::Response::Severity;
  if (s == "total") return glm::Response::TotalCost;
  fail(ErrorCode::SchemaError, "unknown response kind '" + std::string(s) + "'");
}

namespace detail {

class Writer {
 public:
  explicit Writer(std::string_view type) { os_ << kModelHeader << '\n' << "type " << type << '\n'; }
  Writer& put(std::string_view key, std::string_view value) {
    os_ << key << ' ' << value << '\n';
    return *this;
  }
  Writer& num(std::string_view key, double v) { return put(key, text::fmt_exact(v)); }
  Writer& integer(std::string_view key, long long v) { return put(key, std::to_string(v)); }
  Writer& vec(std::string_view key, const Eigen::VectorXd& v) {
    os_ << key;
    for (Eigen::Index i = 0; i < v.size(); ++i) os_ << ' ' << text::fmt_exact(v[i]);
    os_ << '\n';
    return *this;
  }
  Writer& columns(std::string_view key, const std::vector<glm::Column>& c) {
    os_ << key;
    for (auto col : c) os_ << ' ' << glm::to_string(col);
    os_ << '\n';
    return *this;
  }
  Writer& words(std::string_view key, const std::vector<std::string>& w) {
    os_ << key;
    for (const auto& s : w) os_ << ' ' << s;
    os_ << '\n';
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

class Reader {
 public:
  Reader(const std::string& content, std::string source) : source_(std::move(source)) {
    std::istringstream in(content);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto body = text::trim(line);
      if (line_no == 1) {
        require(body == kModelHeader, ErrorCode::ModelIncompatible,
                source_ + ": not a model file (expected '" + std::string(kModelHeader) + "')");
        continue;
      }
      if (body.empty()) continue;
      auto fields = text::split(body, ' ');
      const std::string key = fields[0];
      fields.erase(fields.begin());
      require(entries_.emplace(key, std::move(fields)).second, ErrorCode::SchemaError,
              source_ + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    require(line_no > 0, ErrorCode::ModelIncompatible, source_ + ": empty model file");
  }

  const std::vector<std::string>& words(const std::string& key) const {
    const auto it = entries_.find(key);
    require(it != entries_.end(), ErrorCode::SchemaError, source_ + ": missing key '" + key + "'");
    return it->second;
  }
  bool has(const std::string& key) const { return entries_.contains(key); }
  std::string word(const std::string& key) const {
    const auto& w = words(key);
    require(w.size() == 1, ErrorCode::SchemaError, source_ + ": key '" + key + "' takes one value");
    return w[0];
  }
  double num(const std::string& key) const { return text::parse_double(word(key), source_ + ": " + key); }
  long long integer(const std::string& key) const { return text::parse_int(word(key), source_ + ": " + key); }
  Eigen::VectorXd vec(const std::string& key, std::size_t expected) const {
    const auto& w = words(key);
    require(w.size() == expected, ErrorCode::SchemaError,
            source_ + ": key '" + key + "' has " + std::to_string(w.size()) + " values, expected " +
                std::to_string(expected));
    Eigen::VectorXd v(static_cast<Eigen::Index>(w.size()));
    for (std::size_t i = 0; i < w.size(); ++i) v[static_cast<Eigen::Index>(i)] = text::parse_double(w[i], source_ + ": " + key);
    return v;
  }
  std::vector<glm::Column> columns(const std::string& key) const {
    std::vector<glm::Column> c;
    for (const auto& w : words(key)) c.push_back(glm::column_from_string(w));
    require(!c.empty(), ErrorCode::SchemaError, source_ + ": key '" + key + "' lists no columns");
    return c;
  }
  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::map<std::string, std::vector<std::string>> entries_;
};

}  // namespace detail

inline std::string format_model(const glm::FittedGlm& m) {
  detail::Writer w("glm");
  w.put("family", glm::to_string(m.family))
      .put("response", to_string(m.kind))
      .columns("columns", m.columns)
      .vec("coefficients", m.coefficients)
      .vec("std_errors", m.std_errors)
      .num("dispersion", m.dispersion)
      .num("theta", m.theta)
      .num("theta_se", m.theta_se)
      .num("tweedie_power", m.tweedie_power)
      .num("log_likelihood", m.log_likelihood)
      .integer("has_likelihood", m.has_likelihood ? 1 : 0)
      .num("deviance", m.deviance)
      .integer("n", static_cast<long long>(m.n))
      .integer("k", m.k)
      .put("years", std::to_string(m.year_first) + " " + std::to_string(m.year_last))
      .integer("iterations", m.iterations)
      .words("flags", m.flags);
  return w.str();
}

inline std::string format_model(const zi::ZeroInflatedModel& m) {
  detail::Writer w("zero-inflated");
  w.put("family", zi::to_string(m.family))
      .columns("zero_columns", m.zero_columns)
      .vec("zero_coefficients", m.zero_coefficients)
      .vec("zero_std_errors", m.zero_std_errors)
      .columns("count_columns", m.count_columns)
      .vec("count_coefficients", m.count_coefficients)
      .vec("count_std_errors", m.count_std_errors)
      .num("theta", m.theta)
      .num("theta_se", m.theta_se)
      .num("log_likelihood", m.log_likelihood)
      .num("base_log_likelihood", m.base_log_likelihood)
      .integer("k", m.k)
      .integer("n", static_cast<long long>(m.n))
      .put("years", std::to_string(m.year_first) + " " + std::to_string(m.year_last))
      .integer("iterations", m.iterations)
      .put("method", m.method.empty() ? "-" : m.method)
      .words("flags", m.flags);
  return w.str();
}

inline std::string format_model(const cost::FrequencyModel& m) {
  return std::visit(
      [](const auto& x) -> std::string {
        if constexpr (std::is_same_v<std::decay_t<decltype(x)>, forest::Forest>) return forest::format_forest(x);
        else return format_model(x);
      },
      m);
}

namespace detail {

inline std::pair<int, int> years(const Reader& r) {
  const auto& w = r.words("years");
  require(w.size() == 2, ErrorCode::SchemaError, r.source() + ": 'years' takes two values");
  return {static_cast<int>(text::parse_int(w[0], r.source())), static_cast<int>(text::parse_int(w[1], r.source()))};
}

inline glm::FittedGlm read_glm(const Reader& r) {
  glm::FittedGlm m;
  m.family = glm::family_from_string(r.word("family"));
  m.kind = response_from_string(r.word("response"));
  m.columns = r.columns("columns");
  m.coefficients = r.vec("coefficients", m.columns.size());
  m.std_errors = r.vec("std_errors", m.columns.size());
  m.dispersion = r.num("dispersion");
  m.theta = r.num("theta");
  m.theta_se = r.num("theta_se");
  m.tweedie_power = r.num("tweedie_power");
  m.log_likelihood = r.num("log_likelihood");
  m.has_likelihood = r.integer("has_likelihood") != 0;
  m.deviance = r.num("deviance");
  m.n = static_cast<std::size_t>(r.integer("n"));
  m.k = static_cast<int>(r.integer("k"));
  std::tie(m.year_first, m.year_last) = years(r);
  m.iterations = static_cast<int>(r.integer("iterations"));
  m.flags = r.words("flags");
  return m;
}

inline zi::ZeroInflatedModel read_zi(const Reader& r) {
  zi::ZeroInflatedModel m;
  m.family = zi::zi_family_from_string(r.word("family"));
  m.zero_columns = r.columns("zero_columns");
  m.zero_coefficients = r.vec("zero_coefficients", m.zero_columns.size());
  m.zero_std_errors = r.vec("zero_std_errors", m.zero_columns.size());
  m.count_columns = r.columns("count_columns");
  m.count_coefficients = r.vec("count_coefficients", m.count_columns.size());
  m.count_std_errors = r.vec("count_std_errors", m.count_columns.size());
  m.theta = r.num("theta");
  m.theta_se = r.num("theta_se");
  m.log_likelihood = r.num("log_likelihood");
  m.base_log_likelihood = r.num("base_log_likelihood");
  m.k = static_cast<int>(r.integer("k"));
  m.n = static_cast<std::size_t>(r.integer("n"));
  std::tie(m.year_first, m.year_last) = years(r);
  m.iterations = static_cast<int>(r.integer("iterations"));
  m.method = r.word("method");
  if (m.method == "-") m.method.clear();
  m.flags = r.words("flags");
  return m;
}

}  // namespace detail

/// Reads any model file. A wrong header is ModelIncompatible; a damaged
/// body is SchemaError.
inline cost::FrequencyModel parse_model(const std::string& content, const std::string& source = "model") {
  const auto first = text::trim(std::string_view(content).substr(0, content.find('\n')));
  if (first == forest::kForestHeader) return forest::parse_forest(content, source);
  const detail::Reader r(content, source);
  const auto type = r.word("type");
  try {
    if (type == "glm") return detail::read_glm(r);
    if (type == "zero-inflated") return detail::read_zi(r);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::UsageError) fail(ErrorCode::SchemaError, source + ": " + e.what());
    throw;
  }
  fail(ErrorCode::ModelIncompatible, source + ": unknown model type '" + type + "'");
}

inline void save_model(const std::string& path, const cost::FrequencyModel& m) { text::write_file(path, format_model(m)); }

inline cost::FrequencyModel load_model(const std::string& path) { return parse_model(text::read_file(path), path); }

/// Extracts a GLM or reports which kind the file holds.
inline glm::FittedGlm as_glm(const cost::FrequencyModel& m, const std::string& what) {
  const auto* g = std::get_if<glm::FittedGlm>(&m);
  require(g != nullptr, ErrorCode::ModelIncompatible, what + " must be a GLM, got " + cost::model_id(m));
  return *g;
}

}  // namespace subsidence::model_io
