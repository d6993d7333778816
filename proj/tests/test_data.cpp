#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "sublaplace/data.hpp"
#include "sublaplace/error.hpp"

using namespace sublaplace;

TEST_CASE("two-row csv with a named target") {
  CsvOptions opt;
  opt.target = "b";
  const Dataset d = parse_csv("a,b\n1,2\n3,4\n", opt);
  REQUIRE(d.size() == 2);
  REQUIRE(d.dim() == 1);
  CHECK(d.x(0, 0) == 1.0);
  CHECK(d.x(1, 0) == 3.0);
  CHECK(d.y[0] == 2.0);
  CHECK(d.y[1] == 4.0);
}

TEST_CASE("csv target by index, whitespace delimiter, no header") {
  CsvOptions opt;
  opt.target = "0";
  opt.delimiter = ' ';
  const Dataset d = parse_csv("5  1 2\n6\t3 4\n", opt);
  REQUIRE(d.dim() == 2);
  CHECK(d.y[1] == 6.0);
  CHECK(d.x(1, 1) == 4.0);
}

TEST_CASE("csv ingestion errors") {
  CsvOptions opt;
  opt.target = "b";
  CHECK_THROWS_AS(parse_csv("", opt), IngestError);
  CHECK_THROWS_AS(parse_csv("a,c\n1,2\n", opt), IngestError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", opt), IngestError);
  try {
    parse_csv("a,b\n1,2\n3,x\n", opt);
    FAIL("expected an ingestion error");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  opt.task = Task::Binary;
  CHECK_THROWS_AS(parse_csv("a,b\n1,0\n2,0.5\n", opt), IngestError);
}

TEST_CASE("wine-shaped file keeps its dimensions") {
  std::ostringstream ss;
  for (int c = 0; c < 11; ++c) ss << "f" << c << ',';
  ss << "quality\n";
  for (int r = 0; r < 1599; ++r) {
    for (int c = 0; c < 11; ++c) ss << (r * 7 + c) % 13 << ',';
    ss << r % 6 << "\n";
  }
  CsvOptions opt;
  opt.target = "quality";
  const Dataset d = parse_csv(ss.str(), opt);
  CHECK(d.size() == 1599);
  CHECK(d.dim() == 11);
}

TEST_CASE("standardization uses training statistics only") {
  SyntheticSpec spec;
  spec.n_train = 300;
  spec.input_dim = 4;
  spec.seed = 3;
  Dataset all = make_synthetic(spec).train;
  all.x.col(2).setConstant(5.0);
  const Split s = split_standardize(all, 0.25, 9);
  for (Index c = 0; c < s.train.dim(); ++c) {
    const double m = s.train.x.col(c).mean();
    CHECK(std::abs(m) < 1e-10);
    if (c == 2) continue;
    const double sd = std::sqrt((s.train.x.col(c).array() - m).square().mean());
    CHECK(std::abs(sd - 1.0) < 1e-10);
  }
  CHECK(s.train.x.col(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.train.x.allFinite());
  REQUIRE(s.warnings.size() == 1);
  CHECK(s.train.standardizer->clamped_columns == std::vector<Index>{2});

  // Round trip back to raw values.
  const Matrix raw = s.train.standardizer->inverse_transform(s.train.x);
  const Vector yraw = s.train.standardizer->inverse_transform_target(s.train.y);
  for (std::size_t i = 0; i < s.train_rows.size(); ++i) {
    const Index r = s.train_rows[i];
    CHECK((raw.row(static_cast<Index>(i)) - all.x.row(r)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(yraw[static_cast<Index>(i)] - all.y[r]) < 1e-12);
  }
}

TEST_CASE("split is a seeded partition") {
  SyntheticSpec spec;
  spec.n_train = 101;
  const Dataset d = make_synthetic(spec).train;
  const Split a = split_standardize(d, 0.3, 5);
  const Split b = split_standardize(d, 0.3, 5);
  CHECK(a.train_rows == b.train_rows);
  CHECK(a.test_rows == b.test_rows);
  std::set<Index> seen(a.train_rows.begin(), a.train_rows.end());
  for (Index r : a.test_rows) CHECK(seen.insert(r).second);
  CHECK(seen.size() == 101);
  CHECK(*seen.rbegin() == 100);
  CHECK(split_standardize(d, 0.3, 6).test_rows != a.test_rows);
  CHECK_THROWS_AS(split_standardize(d, 1.0, 5), PreconditionError);
}

TEST_CASE("binary targets are left unscaled") {
  SyntheticSpec spec;
  spec.task = Task::Binary;
  spec.n_train = 200;
  const Dataset d = make_synthetic(spec).train;
  const Split s = split_standardize(d, 0.2, 1);
  for (Index i = 0; i < s.train.size(); ++i) CHECK((s.train.y[i] == 0.0 || s.train.y[i] == 1.0));
}

TEST_CASE("vanishing noise reproduces the generating function") {
  for (Generator g : {Generator::SmoothSine, Generator::PlantedMlp}) {
    SyntheticSpec spec;
    spec.generator = g;
    spec.noise_std = 1e-200;
    spec.n_train = 50;
    const SyntheticData s = make_synthetic(spec);
    for (Index i = 0; i < s.train.size(); ++i) CHECK(s.train.y[i] == s.oracle(s.train.x.row(i).transpose()));
    for (Index i = 0; i < s.train.size(); ++i) CHECK(s.train.x.row(i).norm() <= 6.0);
  }
}

TEST_CASE("residual variance matches the noise level") {
  SyntheticSpec spec;
  spec.n_train = 100000;
  spec.n_test = 1;
  spec.noise_std = 0.3;
  spec.input_dim = 5;
  const SyntheticData s = make_synthetic(spec);
  double ss = 0.0;
  for (Index i = 0; i < s.train.size(); ++i) {
    const double r = s.train.y[i] - s.oracle(s.train.x.row(i).transpose());
    ss += r * r;
  }
  const double n = static_cast<double>(s.train.size());
  const double var = ss / n;
  const double s2 = spec.noise_std * spec.noise_std;
  CHECK(std::abs(var - s2) < 3.0 * s2 * std::sqrt(2.0 / n));
}

TEST_CASE("synthetic data and written files are deterministic") {
  SyntheticSpec spec;
  spec.seed = 12;
  spec.n_train = 30;
  const SyntheticData a = make_synthetic(spec);
  const SyntheticData b = make_synthetic(spec);
  CHECK((a.train.x.array() == b.train.x.array()).all());
  CHECK((a.train.y.array() == b.train.y.array()).all());
  const auto dir = std::filesystem::temp_directory_path();
  write_dataset(a.train, dir / "sl_a.csv", 12);
  write_dataset(b.train, dir / "sl_b.csv", 12);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "sl_a.csv") == slurp(dir / "sl_b.csv"));
  CsvOptions opt;
  opt.target = "y";
  const Dataset back = load_csv(dir / "sl_a.csv", opt);
  CHECK((back.x.array() == a.train.x.array()).all());
  CHECK(std::filesystem::exists(dir / "sl_a.csv.meta.json"));
  for (const char* f : {"sl_a.csv", "sl_b.csv", "sl_a.csv.meta.json", "sl_b.csv.meta.json"})
    std::filesystem::remove(dir / f);
}
