#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kplab/dataset.hpp"
#include "kplab/distill.hpp"
#include "kplab/metrics.hpp"
#include "kplab/nn.hpp"
#include "kplab/quantify.hpp"

namespace kplab {

enum class Stage { Dataset, Teacher, Student, Baseline, Quantify, Report };
const char* stage_name(Stage s);
std::optional<Stage> parse_stage(const std::string& name);

// Every knob of a full run. All randomness flows from the three named seeds
// (data.seed, model.seed, quant.seed) so ablations can vary one at a time.
struct ExperimentConfig {
  uint64_t data_seed = 1;
  size_t n_per_class = 50;
  size_t classes = 4;
  size_t probe_size = 8;
  double subset_fraction = 1.0;  // student/baseline training share; teacher sees all

  uint64_t model_seed = 2;
  size_t teacher_epochs = 18;  // 3x the student/baseline budget
  size_t teacher_batch = 16;
  double teacher_lr = 0.08;
  double teacher_momentum = 0.9;

  size_t baseline_epochs = 6;
  size_t baseline_batch = 16;
  double baseline_lr = 0.08;
  double baseline_momentum = 0.9;

  std::string tap = "fc1";
  size_t phase1_epochs = 6;
  double phase1_lr = 0.08;
  size_t phase2_epochs = 3;
  double phase2_lr = 0.05;
  size_t distill_batch = 16;
  double distill_momentum = 0.9;

  QuantifierConfig quant;  // quant.seed is the third named seed

  double threshold_b = 0.2;
  size_t epoch_stride = 1;

  size_t threads = 0;  // 0 = hardware concurrency
  std::string out_dir = "kplab_out";

  ExperimentConfig();

  void validate() const;
  void set_key(const std::string& key, const std::string& value);
  static ExperimentConfig from_file(const std::string& path);
  std::vector<std::pair<std::string, std::string>> echo() const;

  TrainConfig teacher_train_config() const;
  TrainConfig baseline_train_config() const;
  DistillConfig distill_config() const;
  GridGeometry grid() const;
};

struct ExperimentResult {
  MetricsReport student;
  MetricsReport baseline;
  double teacher_mean_n_fg = 0.0;
  double teacher_mean_n_bg = 0.0;
  double teacher_lambda = 0.0;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
  double baseline_accuracy = 0.0;
  double phase1_initial_mse = 0.0;
  double phase1_final_mse = 0.0;
  std::string summary_path;
  std::string student_csv_path;
  std::string baseline_csv_path;
};

// Runs the full pipeline: dataset -> teacher -> distilled student -> baseline
// -> per-epoch quantification on the probe set -> reports and heatmaps.
// Existing stage artifacts under out_dir are loaded instead of recomputed, so
// an interrupted run resumes to the same bytes. stop_after, when set, ends
// the run after that stage (used by the resume tests and the CLI).
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                std::optional<Stage> stop_after = std::nullopt);

}  // namespace kplab
