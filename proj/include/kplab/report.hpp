#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kplab/metrics.hpp"

namespace kplab {

// Per-sample rows, fixed column order:
//   network,sample_id,n_fg,n_bg,m_hat,rho,rho_defined,no_knowledge,degenerate_epochs
void write_report_csv(const std::string& path, const MetricsReport& report);

// Flat key=value summary: every aggregate per network plus the config echo.
// Keys are emitted in the order given, aggregates first.
void write_summary(const std::string& path, const std::vector<MetricsReport>& reports,
                   const std::vector<std::pair<std::string, std::string>>& extra);

std::string format_double(double v);

}  // namespace kplab
