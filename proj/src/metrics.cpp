#include "kplab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace kplab {

double background_baseline(const EntropyMap& map) {
  double acc = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < map.entropy.size(); ++i) {
    if (!map.cell_foreground[i]) {
      acc += map.entropy[i];
      ++n;
    }
  }
  if (n == 0) {
    throw BaselineError("background_baseline: map has no background cells");
  }
  return acc / static_cast<double>(n);
}

PointCounts count_knowledge_points(const EntropyMap& map, double b) {
  if (b < 0.0) throw std::invalid_argument("count_knowledge_points: threshold must be >= 0");
  PointCounts counts;
  counts.baseline = background_baseline(map);
  for (size_t i = 0; i < map.entropy.size(); ++i) {
    if (counts.baseline - map.entropy[i] > b) {
      if (map.cell_foreground[i]) {
        ++counts.n_fg;
        counts.fg_set.push_back(i);
      } else {
        ++counts.n_bg;
      }
    }
  }
  return counts;
}

double lambda_ratio(const std::vector<SampleCounts>& rows, size_t* excluded) {
  double acc = 0.0;
  size_t used = 0, skipped = 0;
  for (const SampleCounts& r : rows) {
    const size_t total = r.n_fg + r.n_bg;
    if (total == 0) {
      ++skipped;
      continue;
    }
    acc += static_cast<double>(r.n_fg) / static_cast<double>(total);
    ++used;
  }
  if (excluded) *excluded = skipped;
  if (used == 0) {
    throw BaselineError("lambda_ratio: every sample has zero knowledge points");
  }
  return acc / static_cast<double>(used);
}

size_t richest_epoch(const std::vector<size_t>& fg_counts, bool* no_knowledge) {
  if (fg_counts.empty()) {
    throw std::invalid_argument("richest_epoch: no epochs evaluated");
  }
  size_t best = 0;
  for (size_t j = 1; j < fg_counts.size(); ++j) {
    if (fg_counts[j] > fg_counts[best]) best = j;  // strict: earliest epoch wins ties
  }
  if (no_knowledge) *no_knowledge = fg_counts[best] == 0;
  return best + 1;
}

LearningSpeed learning_speed(const CheckpointSeries& series, const std::vector<size_t>& m_hat) {
  LearningSpeed out;
  if (m_hat.empty()) throw std::invalid_argument("learning_speed: no samples");
  out.per_sample.reserve(m_hat.size());
  for (size_t m : m_hat) out.per_sample.push_back(weight_distance(series, m));
  double mean = 0.0;
  for (double d : out.per_sample) mean += d;
  mean /= static_cast<double>(out.per_sample.size());
  double var = 0.0;
  for (double d : out.per_sample) var += (d - mean) * (d - mean);
  var /= static_cast<double>(out.per_sample.size());  // population variance
  out.d_mean = mean;
  out.d_var = var;
  return out;
}

double stability_rho(const std::vector<std::vector<size_t>>& fg_sets) {
  if (fg_sets.empty()) throw std::invalid_argument("stability_rho: no epochs");
  std::set<size_t> united;
  for (const auto& s : fg_sets) united.insert(s.begin(), s.end());
  if (united.empty()) {
    throw BaselineError("stability_rho: union of knowledge points is empty");
  }
  return static_cast<double>(fg_sets.back().size()) / static_cast<double>(united.size());
}

MetricsReport build_report(const std::string& network,
                           const std::vector<std::string>& sample_ids,
                           const std::vector<size_t>& epochs,
                           const std::vector<std::vector<const EntropyMap*>>& maps,
                           const CheckpointSeries& series, double threshold_b) {
  if (sample_ids.size() != maps.size()) {
    throw std::invalid_argument("build_report: sample id / map count mismatch");
  }
  if (epochs.empty() || !std::is_sorted(epochs.begin(), epochs.end()) ||
      epochs.back() > series.epochs() || epochs.front() < 1) {
    throw std::invalid_argument("build_report: bad epoch list");
  }
  MetricsReport report;
  report.network = network;

  std::vector<SampleCounts> lambda_rows;
  std::vector<size_t> m_hat_values;
  double fg_acc = 0.0, bg_acc = 0.0, rho_acc = 0.0;
  size_t final_count = 0, rho_count = 0;

  for (size_t s = 0; s < maps.size(); ++s) {
    SampleMetrics row;
    row.sample_id = sample_ids[s];
    const auto& sample_maps = maps[s];
    if (sample_maps.size() != epochs.size()) {
      throw std::invalid_argument("build_report: sample maps do not align with the epoch list");
    }

    std::vector<size_t> valid_epochs;       // original 1-based epoch indices
    std::vector<size_t> valid_fg_counts;
    std::vector<std::vector<size_t>> valid_sets;
    bool baseline_failed = false;
    SampleCounts final_counts;
    bool final_valid = false;

    for (size_t j = 0; j < sample_maps.size(); ++j) {
      if (sample_maps[j] == nullptr) {
        ++row.degenerate_epochs;
        continue;
      }
      PointCounts pc;
      try {
        pc = count_knowledge_points(*sample_maps[j], threshold_b);
      } catch (const BaselineError&) {
        baseline_failed = true;
        break;
      }
      valid_epochs.push_back(epochs[j]);
      valid_fg_counts.push_back(pc.n_fg);
      valid_sets.push_back(std::move(pc.fg_set));
      if (j + 1 == sample_maps.size()) {
        final_counts = {pc.n_fg, pc.n_bg};
        final_valid = true;
      }
    }
    report.degenerate_fits += row.degenerate_epochs;

    if (baseline_failed) {
      ++report.baseline_excluded;
      report.samples.push_back(row);
      continue;
    }
    if (valid_epochs.empty()) {
      report.samples.push_back(row);
      continue;
    }

    bool no_knowledge = false;
    const size_t best_pos = richest_epoch(valid_fg_counts, &no_knowledge) - 1;
    row.m_hat = valid_epochs[best_pos];
    row.no_knowledge = no_knowledge;
    if (no_knowledge) ++report.no_knowledge_samples;
    m_hat_values.push_back(row.m_hat);

    if (final_valid) {
      row.n_fg = final_counts.n_fg;
      row.n_bg = final_counts.n_bg;
      row.lambda_eligible = final_counts.n_fg + final_counts.n_bg > 0;
      lambda_rows.push_back(final_counts);
      fg_acc += static_cast<double>(final_counts.n_fg);
      bg_acc += static_cast<double>(final_counts.n_bg);
      ++final_count;
      try {
        row.rho = stability_rho(valid_sets);
        row.rho_defined = true;
        rho_acc += row.rho;
        ++rho_count;
      } catch (const BaselineError&) {
        ++report.rho_excluded;
      }
    } else {
      ++report.rho_excluded;
    }
    report.samples.push_back(row);
  }

  if (final_count == 0) {
    throw BaselineError("build_report: no sample produced a usable final-epoch map");
  }
  report.mean_n_fg = fg_acc / static_cast<double>(final_count);
  report.mean_n_bg = bg_acc / static_cast<double>(final_count);
  report.lambda = lambda_ratio(lambda_rows, &report.lambda_excluded);
  if (!(report.lambda >= 0.0 && report.lambda <= 1.0)) {
    throw std::logic_error("build_report: lambda outside [0,1]");
  }
  const LearningSpeed speed = learning_speed(series, m_hat_values);
  report.d_mean = speed.d_mean;
  report.d_var = speed.d_var;
  if (report.d_var < 0.0) throw std::logic_error("build_report: negative variance");
  report.mean_rho = rho_count ? rho_acc / static_cast<double>(rho_count) : 0.0;
  if (rho_count && !(report.mean_rho > 0.0 && report.mean_rho <= 1.0)) {
    throw std::logic_error("build_report: rho outside (0,1]");
  }
  return report;
}

}  // namespace kplab
