#include "sublaplace/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "sublaplace/error.hpp"
#include "sublaplace/net.hpp"
#include "sublaplace/rng.hpp"

namespace sublaplace {

double sigmoid(double f) {
  if (f >= 0) return 1.0 / (1.0 + std::exp(-f));
  const double e = std::exp(f);
  return e / (1.0 + e);
}

Matrix Standardizer::transform(const Matrix& x) const {
  Matrix z = x;
  z.rowwise() -= feature_mean.transpose();
  z.array().rowwise() /= feature_std.transpose().array();
  return z;
}

Matrix Standardizer::inverse_transform(const Matrix& z) const {
  Matrix x = z;
  x.array().rowwise() *= feature_std.transpose().array();
  x.rowwise() += feature_mean.transpose();
  return x;
}

Vector Standardizer::transform_target(const Vector& y) const {
  if (!target_scaled) return y;
  return (y.array() - target_mean) / target_std;
}

Vector Standardizer::inverse_transform_target(const Vector& t) const {
  if (!target_scaled) return t;
  return t.array() * target_std + target_mean;
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  out.task = task;
  out.standardizer = standardizer;
  out.x.resize(static_cast<Index>(rows.size()), x.cols());
  out.y.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Index>(i)) = x.row(rows[i]);
    out.y[static_cast<Index>(i)] = y[rows[i]];
  }
  return out;
}

void Dataset::validate() const {
  if (x.rows() != y.size()) throw ShapeError("feature rows and targets differ in length");
  if (!x.allFinite() || !y.allFinite()) throw IngestError("dataset contains NaN or Inf");
  if (task == Task::Binary) {
    for (Index i = 0; i < y.size(); ++i)
      if (y[i] != 0.0 && y[i] != 1.0)
        throw IngestError("binary target at row " + std::to_string(i) + " is not 0 or 1");
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  if (delim == ' ') {
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) cells.push_back(tok);
    return cells;
  }
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  for (std::string& s : cells) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  }
  return cells;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

Dataset parse_csv(const std::string& text, const CsvOptions& options, const std::string& source) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    rows.push_back(split_line(line, options.delimiter));
    line_numbers.push_back(lineno);
  }
  if (rows.empty()) throw IngestError(source + ": file is empty");

  std::vector<std::string> header;
  {
    double tmp;
    const bool numeric = std::all_of(rows[0].begin(), rows[0].end(),
                                     [&](const std::string& c) { return parse_number(c, tmp); });
    if (!numeric) {
      header = rows[0];
      rows.erase(rows.begin());
      line_numbers.erase(line_numbers.begin());
    }
  }
  if (rows.empty()) throw IngestError(source + ": no data rows");
  const std::size_t ncols = header.empty() ? rows[0].size() : header.size();
  if (ncols < 2) throw IngestError(source + ": need at least one feature and a target column");

  std::size_t target = ncols;
  if (!header.empty()) {
    auto it = std::find(header.begin(), header.end(), options.target);
    if (it != header.end()) target = static_cast<std::size_t>(it - header.begin());
  }
  if (target == ncols) {
    std::size_t idx = 0;
    const auto [ptr, ec] =
        std::from_chars(options.target.data(), options.target.data() + options.target.size(), idx);
    if (ec != std::errc() || ptr != options.target.data() + options.target.size() || idx >= ncols)
      throw IngestError(source + ": target column '" + options.target + "' not found");
    target = idx;
  }

  Dataset ds;
  ds.task = options.task;
  ds.x.resize(static_cast<Index>(rows.size()), static_cast<Index>(ncols - 1));
  ds.y.resize(static_cast<Index>(rows.size()));
  std::vector<std::string> bad;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != ncols) {
      bad.push_back("line " + std::to_string(line_numbers[r]) + ": expected " + std::to_string(ncols) +
                    " cells, got " + std::to_string(rows[r].size()));
      continue;
    }
    Index feat = 0;
    for (std::size_t c = 0; c < ncols; ++c) {
      double v = 0.0;
      if (!parse_number(rows[r][c], v)) {
        bad.push_back("line " + std::to_string(line_numbers[r]) + " column " + std::to_string(c) +
                      ": non-numeric cell '" + rows[r][c] + "'");
        break;
      }
      if (c == target) {
        ds.y[static_cast<Index>(r)] = v;
      } else {
        ds.x(static_cast<Index>(r), feat++) = v;
      }
    }
  }
  if (!bad.empty()) {
    std::string msg = source + ": " + std::to_string(bad.size()) + " bad row(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 5); ++i) msg += "\n  " + bad[i];
    throw IngestError(msg);
  }
  ds.validate();
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), options, path.string());
}

Split split_standardize(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw PreconditionError("test_fraction must lie in (0, 1)");
  const Index n = ds.size();
  if (n < 2) throw PreconditionError("need at least two rows to split");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seed, {0x5b11}));
  rng.shuffle(order);
  Index n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<Index>(n_test, 1, n - 1);

  Split out;
  out.test_rows.assign(order.begin(), order.begin() + n_test);
  out.train_rows.assign(order.begin() + n_test, order.end());
  Dataset train = ds.subset(out.train_rows);
  Dataset test = ds.subset(out.test_rows);

  Standardizer st;
  st.feature_mean = train.x.colwise().mean().transpose();
  st.feature_std.resize(train.dim());
  for (Index c = 0; c < train.dim(); ++c) {
    const double var = (train.x.col(c).array() - st.feature_mean[c]).square().mean();
    double sd = std::sqrt(var);
    if (!(sd > 1e-12)) {
      sd = 1.0;
      st.clamped_columns.push_back(c);
      out.warnings.push_back("column " + std::to_string(c) + " has zero variance; std clamped to 1");
    }
    st.feature_std[c] = sd;
  }
  if (ds.task == Task::Regression) {
    st.target_scaled = true;
    st.target_mean = train.y.mean();
    double sd = std::sqrt((train.y.array() - st.target_mean).square().mean());
    if (!(sd > 1e-12)) {
      sd = 1.0;
      out.warnings.push_back("target has zero variance; std clamped to 1");
    }
    st.target_std = sd;
  }
  train.x = st.transform(train.x);
  test.x = st.transform(test.x);
  train.y = st.transform_target(train.y);
  test.y = st.transform_target(test.y);
  train.standardizer = st;
  test.standardizer = st;
  out.train = std::move(train);
  out.test = std::move(test);
  return out;
}

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (!(spec.noise_std > 0.0)) throw PreconditionError("noise_std must be positive");
  if (spec.input_dim < 1 || spec.n_train < 1 || spec.n_test < 0)
    throw PreconditionError("synthetic sizes must be positive");
  const Index d = spec.input_dim;

  std::function<double(const Eigen::Ref<const Vector>&)> oracle;
  if (spec.generator == Generator::SmoothSine) {
    Rng wrng(derive_seed(spec.seed, {0x51e, 1}));
    Vector w(d);
    for (Index i = 0; i < d; ++i) w[i] = wrng.normal() / std::sqrt(static_cast<double>(d));
    oracle = [w](const Eigen::Ref<const Vector>& x) { return std::sin(w.dot(x)); };
  } else {
    auto net = std::make_shared<const Mlp>(Mlp::initialize({d, 32, 32, 1}, derive_seed(spec.seed, {0x51e, 2})));
    oracle = [net](const Eigen::Ref<const Vector>& x) { return net->forward(x); };
  }

  Rng xrng(derive_seed(spec.seed, {0x51e, 3}));
  Rng yrng(derive_seed(spec.seed, {0x51e, 4}));
  auto draw = [&](Index n) {
    Dataset ds;
    ds.task = spec.task;
    ds.x.resize(n, d);
    ds.y.resize(n);
    Vector x(d);
    for (Index r = 0; r < n; ++r) {
      do {
        for (Index i = 0; i < d; ++i) x[i] = xrng.normal();
      } while (x.norm() > 6.0);
      ds.x.row(r) = x.transpose();
      const double h = oracle(x);
      if (spec.task == Task::Regression) {
        ds.y[r] = h + spec.noise_std * yrng.normal();
      } else {
        ds.y[r] = yrng.uniform() < sigmoid(h) ? 1.0 : 0.0;
      }
    }
    return ds;
  };
  SyntheticData out;
  out.train = draw(spec.n_train);
  out.test = draw(spec.n_test);
  out.oracle = std::move(oracle);
  return out;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  for (Index c = 0; c < ds.dim(); ++c) out << 'x' << c << ',';
  out << "y\n";
  char buf[40];
  for (Index r = 0; r < ds.size(); ++r) {
    for (Index c = 0; c < ds.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g,", ds.x(r, c));
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g\n", ds.y[r]);
    out << buf;
  }

  nlohmann::ordered_json meta;
  meta["seed"] = seed;
  meta["rows"] = ds.size();
  meta["features"] = ds.dim();
  meta["task"] = ds.task == Task::Regression ? "regression" : "binary";
  if (ds.standardizer) {
    const Standardizer& st = *ds.standardizer;
    meta["standardizer"] = {
        {"feature_mean", std::vector<double>(st.feature_mean.data(), st.feature_mean.data() + st.feature_mean.size())},
        {"feature_std", std::vector<double>(st.feature_std.data(), st.feature_std.data() + st.feature_std.size())},
        {"target_mean", st.target_mean},
        {"target_std", st.target_std},
        {"target_scaled", st.target_scaled},
        {"clamped_columns", st.clamped_columns}};
  }
  std::ofstream side(path.string() + ".meta.json", std::ios::binary);
  if (!side) throw IngestError("cannot write sidecar for " + path.string());
  side << meta.dump(2) << "\n";
}

}  // namespace sublaplace
