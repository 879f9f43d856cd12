#pragma once

// Aggregation of per-frame metrics into summary tables (full-image vs
// dynamic-area, per mode and capture offset) and the plain-text report that
// also carries the theory-check rows.

#include <string>
#include <vector>

#include "dust/theory.hpp"

namespace dust {

struct MetricRow {
  std::string experiment;
  std::string mode;  // "dust" | "single"
  double delta_tau = 0.0;
  int frame = 0;
  Source source = Source::vehicle;
  double psnr_full = 0.0, ssim_full = 0.0;
  double psnr_dyn = 0.0, ssim_dyn = 0.0;
  bool has_dynamic = false;
};

struct SummaryRow {
  std::string mode;
  double delta_tau = 0.0;
  std::string source;  // "vehicle", "infra" or "pooled"
  int rows = 0;
  int psnr_full_finite = 0;  // +inf sentinels are excluded from the means
  int psnr_dyn_finite = 0;
  double psnr_full = 0.0, ssim_full = 0.0;
  double psnr_dyn = 0.0, ssim_dyn = 0.0;
};

/// Means grouped by (mode, delta_tau), per source and pooled. Rejects empty
/// input; permutation invariant.
std::vector<SummaryRow> aggregate(const std::vector<MetricRow>& rows);

/// Dynamic-area PSNR gap (dust minus single) per delta_tau, from pooled rows.
struct GapRow {
  double delta_tau = 0.0;
  double psnr_dyn_gap = 0.0;
  double ssim_dyn_gap = 0.0;
};

std::vector<GapRow> mode_gaps(const std::vector<SummaryRow>& summaries);

void write_metric_rows_csv(const std::vector<MetricRow>& rows, const std::string& path);
void write_summary_csv(const std::vector<SummaryRow>& summaries, const std::string& path);
void write_theory_csv(const std::vector<TheoryCheck>& checks, const std::string& path);

/// Byte-stable text report: summary tables, gap table (sign convention in
/// the header), and one line per theory check.
std::string format_report(const std::vector<SummaryRow>& summaries,
                          const std::vector<TheoryCheck>& checks);

}  // namespace dust
