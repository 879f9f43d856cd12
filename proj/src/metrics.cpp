#include "dust/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace dust {

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct Accum {
  int rows = 0;
  int psnr_full_finite = 0, psnr_dyn_finite = 0;
  double psnr_full = 0, ssim_full = 0, psnr_dyn = 0, ssim_dyn = 0;
  int dyn_rows = 0;

  void add(const MetricRow& r) {
    ++rows;
    if (std::isfinite(r.psnr_full)) {
      psnr_full += r.psnr_full;
      ++psnr_full_finite;
    }
    ssim_full += r.ssim_full;
    if (r.has_dynamic) {
      ++dyn_rows;
      if (std::isfinite(r.psnr_dyn)) {
        psnr_dyn += r.psnr_dyn;
        ++psnr_dyn_finite;
      }
      ssim_dyn += r.ssim_dyn;
    }
  }

  SummaryRow finish(const std::string& mode, double dtau, const std::string& source) const {
    SummaryRow s;
    s.mode = mode;
    s.delta_tau = dtau;
    s.source = source;
    s.rows = rows;
    s.psnr_full_finite = psnr_full_finite;
    s.psnr_dyn_finite = psnr_dyn_finite;
    s.psnr_full = psnr_full_finite > 0 ? psnr_full / psnr_full_finite
                                       : std::numeric_limits<double>::infinity();
    s.ssim_full = rows > 0 ? ssim_full / rows : 0.0;
    s.psnr_dyn = psnr_dyn_finite > 0 ? psnr_dyn / psnr_dyn_finite
                                     : std::numeric_limits<double>::infinity();
    s.ssim_dyn = dyn_rows > 0 ? ssim_dyn / dyn_rows : 0.0;
    return s;
  }
};

}  // namespace

std::vector<SummaryRow> aggregate(const std::vector<MetricRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate: no metric rows");
  std::map<std::pair<std::string, double>, std::map<std::string, Accum>> groups;
  for (const auto& r : rows) {
    auto& g = groups[{r.mode, r.delta_tau}];
    g[source_name(r.source)].add(r);
    g["pooled"].add(r);
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, sources] : groups)
    for (const std::string name : {"vehicle", "infra", "pooled"}) {
      const auto it = sources.find(name);
      if (it != sources.end()) out.push_back(it->second.finish(key.first, key.second, name));
    }
  return out;
}

std::vector<GapRow> mode_gaps(const std::vector<SummaryRow>& summaries) {
  std::map<double, std::pair<const SummaryRow*, const SummaryRow*>> by_dtau;
  for (const auto& s : summaries) {
    if (s.source != "pooled") continue;
    if (s.mode == "dust") by_dtau[s.delta_tau].first = &s;
    if (s.mode == "single") by_dtau[s.delta_tau].second = &s;
  }
  std::vector<GapRow> out;
  for (const auto& [dtau, pair] : by_dtau) {
    if (pair.first == nullptr || pair.second == nullptr) continue;
    out.push_back({dtau, pair.first->psnr_dyn - pair.second->psnr_dyn,
                   pair.first->ssim_dyn - pair.second->ssim_dyn});
  }
  return out;
}

void write_metric_rows_csv(const std::vector<MetricRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "experiment,mode,delta_tau,frame,source,psnr_full,ssim_full,psnr_dyn,ssim_dyn\n";
  for (const auto& r : rows) {
    f << r.experiment << ',' << r.mode << ',' << num(r.delta_tau) << ',' << r.frame << ','
      << source_name(r.source) << ',' << num(r.psnr_full) << ',' << num(r.ssim_full) << ',';
    if (r.has_dynamic)
      f << num(r.psnr_dyn) << ',' << num(r.ssim_dyn) << '\n';
    else
      f << ",\n";
  }
}

void write_summary_csv(const std::vector<SummaryRow>& summaries, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "mode,delta_tau,source,rows,psnr_full,ssim_full,psnr_dyn,ssim_dyn,"
       "psnr_full_finite,psnr_dyn_finite\n";
  for (const auto& s : summaries)
    f << s.mode << ',' << num(s.delta_tau) << ',' << s.source << ',' << s.rows << ','
      << num(s.psnr_full) << ',' << num(s.ssim_full) << ',' << num(s.psnr_dyn) << ','
      << num(s.ssim_dyn) << ',' << s.psnr_full_finite << ',' << s.psnr_dyn_finite << '\n';
}

void write_theory_csv(const std::vector<TheoryCheck>& checks, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "name,measured,expected,tolerance,pass\n";
  for (const auto& c : checks)
    f << c.name << ',' << num(c.measured) << ',' << num(c.expected) << ',' << num(c.tolerance)
      << ',' << (c.pass ? "pass" : "FAIL") << '\n';
}

std::string format_report(const std::vector<SummaryRow>& summaries,
                          const std::vector<TheoryCheck>& checks) {
  std::ostringstream os;
  os << "reconstruction summary (means; psnr means exclude +inf rows)\n";
  os << "gap convention: dust minus single, dynamic-area pooled rows\n\n";
  if (!summaries.empty()) {
    os << "mode      dtau     source   rows  psnr_full  ssim_full  psnr_dyn  ssim_dyn\n";
    char buf[192];
    for (const auto& s : summaries) {
      std::snprintf(buf, sizeof(buf), "%-8s %7.3f  %-8s %4d  %9.3f  %9.4f  %8.3f  %8.4f\n",
                    s.mode.c_str(), s.delta_tau, s.source.c_str(), s.rows,
                    std::isinf(s.psnr_full) ? 999.0 : s.psnr_full, s.ssim_full,
                    std::isinf(s.psnr_dyn) ? 999.0 : s.psnr_dyn, s.ssim_dyn);
      os << buf;
    }
    const auto gaps = mode_gaps(summaries);
    if (!gaps.empty()) {
      os << "\ndynamic-area gaps (dust - single)\n";
      os << "dtau      psnr_gap   ssim_gap\n";
      for (const auto& g : gaps) {
        std::snprintf(buf, sizeof(buf), "%7.3f  %9.3f  %9.4f\n", g.delta_tau, g.psnr_dyn_gap,
                      g.ssim_dyn_gap);
        os << buf;
      }
    }
    os << '\n';
  }
  if (!checks.empty()) {
    os << "theory checks (measured / expected / tolerance)\n";
    for (const auto& c : checks) {
      os << (c.pass ? "pass  " : "FAIL  ") << c.name << ": " << num(c.measured) << " / "
         << num(c.expected) << " / " << num(c.tolerance) << '\n';
    }
  }
  return os.str();
}

}  // namespace dust
