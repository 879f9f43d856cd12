#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dust/metrics.hpp"

using namespace dust;

namespace {

MetricRow row(const std::string& mode, double dtau, int frame, Source source, double pf, double sf,
              double pd, double sd) {
  MetricRow r;
  r.experiment = "exp";
  r.mode = mode;
  r.delta_tau = dtau;
  r.frame = frame;
  r.source = source;
  r.psnr_full = pf;
  r.ssim_full = sf;
  r.psnr_dyn = pd;
  r.ssim_dyn = sd;
  r.has_dynamic = true;
  return r;
}

}  // namespace

TEST_CASE("a single row summarizes to itself") {
  const auto summaries = aggregate({row("dust", 0.1, 0, Source::vehicle, 30, 0.9, 25, 0.8)});
  REQUIRE(summaries.size() == 2);  // vehicle + pooled
  for (const auto& s : summaries) {
    CHECK(s.psnr_full == doctest::Approx(30.0));
    CHECK(s.ssim_full == doctest::Approx(0.9));
    CHECK(s.psnr_dyn == doctest::Approx(25.0));
    CHECK(s.rows == 1);
  }
}

TEST_CASE("hand-built four-row aggregation") {
  std::vector<MetricRow> rows = {row("dust", 0.1, 0, Source::vehicle, 30, 0.9, 24, 0.8),
                                 row("dust", 0.1, 1, Source::vehicle, 34, 0.7, 26, 0.6),
                                 row("dust", 0.1, 0, Source::infra, 20, 0.5, 18, 0.4),
                                 row("dust", 0.1, 1, Source::infra, 22, 0.6, 20, 0.5)};
  const auto summaries = aggregate(rows);
  REQUIRE(summaries.size() == 3);
  for (const auto& s : summaries) {
    if (s.source == "vehicle") {
      CHECK(s.psnr_full == doctest::Approx(32.0));
      CHECK(s.ssim_full == doctest::Approx(0.8));
    } else if (s.source == "infra") {
      CHECK(s.psnr_full == doctest::Approx(21.0));
    } else {
      CHECK(s.psnr_full == doctest::Approx(26.5));  // pooled mean of all four
      CHECK(s.rows == 4);
      // pooled mean equals the row-count weighted mean of per-source means
      CHECK(s.psnr_full == doctest::Approx((2 * 32.0 + 2 * 21.0) / 4.0));
    }
  }

  // permutation invariance
  std::reverse(rows.begin(), rows.end());
  const auto reversed = aggregate(rows);
  REQUIRE(reversed.size() == summaries.size());
  for (size_t i = 0; i < summaries.size(); ++i) {
    CHECK(reversed[i].source == summaries[i].source);
    CHECK(reversed[i].psnr_full == summaries[i].psnr_full);
  }
}

TEST_CASE("infinite psnr rows are excluded from means with a count") {
  const double inf = std::numeric_limits<double>::infinity();
  const auto summaries = aggregate({row("dust", 0.0, 0, Source::vehicle, inf, 1.0, inf, 1.0),
                                    row("dust", 0.0, 1, Source::vehicle, 30, 0.9, 24, 0.8)});
  for (const auto& s : summaries) {
    CHECK(s.psnr_full == doctest::Approx(30.0));  // the finite row only
    CHECK(s.psnr_full_finite == 1);
    CHECK(s.rows == 2);
    CHECK(s.ssim_full == doctest::Approx(0.95));  // ssim stays finite, all rows count
  }
}

TEST_CASE("aggregate rejects empty input") {
  CHECK_THROWS_AS(aggregate({}), std::invalid_argument);
}

TEST_CASE("mode gaps pair pooled rows per offset") {
  std::vector<MetricRow> rows;
  for (double dtau : {0.0, 0.1}) {
    rows.push_back(row("dust", dtau, 0, Source::vehicle, 30, 0.9, 25 + dtau * 10, 0.8));
    rows.push_back(row("single", dtau, 0, Source::vehicle, 30, 0.9, 20, 0.7));
  }
  const auto gaps = mode_gaps(aggregate(rows));
  REQUIRE(gaps.size() == 2);
  CHECK(gaps[0].delta_tau == 0.0);
  CHECK(gaps[0].psnr_dyn_gap == doctest::Approx(5.0));
  CHECK(gaps[1].psnr_dyn_gap == doctest::Approx(6.0));
}

TEST_CASE("report text is byte-stable and supports an empty theory section") {
  const auto summaries = aggregate({row("dust", 0.1, 0, Source::vehicle, 30, 0.9, 25, 0.8),
                                    row("single", 0.1, 0, Source::vehicle, 28, 0.8, 20, 0.7)});
  const std::string a = format_report(summaries, {});
  const std::string b = format_report(summaries, {});
  CHECK(a == b);
  CHECK(a.find("dust minus single") != std::string::npos);  // sign convention documented

  std::vector<TheoryCheck> checks = {{"demo_check", 1.0, 1.0, 0.1, true}};
  const std::string with_checks = format_report(summaries, checks);
  CHECK(with_checks.find("demo_check") != std::string::npos);
}

TEST_CASE("csv writers emit stable bytes") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "dust_metrics_test.csv").string();
  const std::vector<MetricRow> rows = {row("dust", 0.05, 0, Source::infra, 31.25, 0.91, 26.5, 0.82)};
  auto read = [&](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  write_metric_rows_csv(rows, path);
  const std::string first = read(path);
  write_metric_rows_csv(rows, path);
  CHECK(read(path) == first);
  CHECK(first.find("experiment,mode,delta_tau,frame,source") == 0);
  std::filesystem::remove(path);
}
