#include "kplab/report.hpp"

#include <cstdio>
#include <fstream>

namespace kplab {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_report_csv(const std::string& path, const MetricsReport& report) {
  if (report.samples.empty()) {
    throw std::invalid_argument("write_report_csv: report has no sample rows");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
  f << "network,sample_id,n_fg,n_bg,m_hat,rho,rho_defined,no_knowledge,degenerate_epochs\n";
  for (const SampleMetrics& s : report.samples) {
    f << report.network << "," << s.sample_id << "," << s.n_fg << "," << s.n_bg << ","
      << s.m_hat << "," << format_double(s.rho) << "," << (s.rho_defined ? 1 : 0) << ","
      << (s.no_knowledge ? 1 : 0) << "," << s.degenerate_epochs << "\n";
  }
  if (!f) throw std::runtime_error("write_report_csv: write failed for " + path);
}

void write_summary(const std::string& path, const std::vector<MetricsReport>& reports,
                   const std::vector<std::pair<std::string, std::string>>& extra) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_summary: cannot open " + path);
  for (const MetricsReport& r : reports) {
    f << r.network << ".mean_n_fg=" << format_double(r.mean_n_fg) << "\n";
    f << r.network << ".mean_n_bg=" << format_double(r.mean_n_bg) << "\n";
    f << r.network << ".lambda=" << format_double(r.lambda) << "\n";
    f << r.network << ".d_mean=" << format_double(r.d_mean) << "\n";
    f << r.network << ".d_var=" << format_double(r.d_var) << "\n";
    f << r.network << ".mean_rho=" << format_double(r.mean_rho) << "\n";
    f << r.network << ".lambda_excluded=" << r.lambda_excluded << "\n";
    f << r.network << ".rho_excluded=" << r.rho_excluded << "\n";
    f << r.network << ".no_knowledge_samples=" << r.no_knowledge_samples << "\n";
    f << r.network << ".degenerate_fits=" << r.degenerate_fits << "\n";
    f << r.network << ".baseline_excluded=" << r.baseline_excluded << "\n";
  }
  for (const auto& [key, value] : extra) f << key << "=" << value << "\n";
  if (!f) throw std::runtime_error("write_summary: write failed for " + path);
}

}  // namespace kplab
