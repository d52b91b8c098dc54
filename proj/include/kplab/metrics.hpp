#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kplab/nn.hpp"
#include "kplab/quantify.hpp"

namespace kplab {

class BaselineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean entropy over the background cells of one map; the reference level for
// the knowledge-point indicator.
double background_baseline(const EntropyMap& map);

// Cells with baseline - H_i > b, split by the foreground mask. fg_set holds
// the foreground member cell indices.
struct PointCounts {
  size_t n_fg = 0;
  size_t n_bg = 0;
  std::vector<size_t> fg_set;
  double baseline = 0.0;
};
PointCounts count_knowledge_points(const EntropyMap& map, double b);

// Mean over samples of n_fg / (n_fg + n_bg); zero-point samples are skipped
// and counted in *excluded. Throws when every sample is zero-point.
struct SampleCounts {
  size_t n_fg = 0;
  size_t n_bg = 0;
};
double lambda_ratio(const std::vector<SampleCounts>& rows, size_t* excluded = nullptr);

// Earliest epoch (1-based) attaining the maximum foreground count.
// counts[j] is the count after epoch j+1. All-zero series flag samples that
// never encode knowledge.
size_t richest_epoch(const std::vector<size_t>& fg_counts, bool* no_knowledge = nullptr);

// Mean and population variance over samples of the weight distance truncated
// at each sample's richest epoch.
struct LearningSpeed {
  double d_mean = 0.0;
  double d_var = 0.0;
  std::vector<double> per_sample;
};
LearningSpeed learning_speed(const CheckpointSeries& series, const std::vector<size_t>& m_hat);

// |S_M| / |union_j S_j| over the per-epoch foreground point sets of one
// sample. Throws BaselineError when the union is empty.
double stability_rho(const std::vector<std::vector<size_t>>& fg_sets);

// Everything the report layer needs for one network's probe sweep.
struct SampleMetrics {
  std::string sample_id;
  size_t n_fg = 0;   // final epoch
  size_t n_bg = 0;
  size_t m_hat = 0;
  double rho = 0.0;
  bool rho_defined = false;
  bool no_knowledge = false;
  bool lambda_eligible = false;  // final-epoch n_fg + n_bg > 0
  size_t degenerate_epochs = 0;  // all-clamped sigma fits skipped for this sample
};

struct MetricsReport {
  std::string network;  // "student", "baseline", "teacher"
  std::vector<SampleMetrics> samples;
  double mean_n_fg = 0.0;
  double mean_n_bg = 0.0;
  double lambda = 0.0;
  double d_mean = 0.0;
  double d_var = 0.0;
  double mean_rho = 0.0;
  size_t lambda_excluded = 0;
  size_t rho_excluded = 0;
  size_t no_knowledge_samples = 0;
  size_t degenerate_fits = 0;
  size_t baseline_excluded = 0;
};

// Aggregates per-epoch entropy maps into the full hypothesis metrics for one
// network. `epochs` lists the evaluated 1-based epoch indices ascending, the
// last being the final training epoch; maps[sample][k] pairs with epochs[k]
// and is null where the sigma fit was degenerate (all cells clamped).
MetricsReport build_report(const std::string& network,
                           const std::vector<std::string>& sample_ids,
                           const std::vector<size_t>& epochs,
                           const std::vector<std::vector<const EntropyMap*>>& maps,
                           const CheckpointSeries& series, double threshold_b);

}  // namespace kplab
