#pragma once

#include <cstdint>
#include <string>

#include "kplab/nn.hpp"

namespace kplab {

struct DistillConfig {
  std::string tap = "fc1";
  size_t phase1_epochs = 8;
  double phase1_lr = 0.05;
  size_t phase2_epochs = 4;
  double phase2_lr = 0.05;
  double momentum = 0.9;
  size_t batch_size = 16;
  uint64_t seed = 0;

  void validate(const ModelSpec& teacher, const ModelSpec& student) const;
};

// Phase 1: train the student's layers at and below the tap against the
// teacher's tap feature with a pure squared-error loss. Labels are never
// read; layers above the tap keep their initialization. Snapshots per epoch,
// kind flag = 1.
CheckpointSeries distill_phase1(const Model& teacher, const ModelSpec& student_spec,
                                const LabeledDataset& data, const DistillConfig& cfg);

struct FinetuneResult {
  Model model;
  double accuracy = 0.0;
  std::vector<double> loss_curve;
};

// Phase 2: classification training of the layers above the tap only.
// Parameters at and below the tap are bit-identical before and after.
FinetuneResult head_finetune(const Model& student_phase1, const std::string& tap,
                             const LabeledDataset& data, const DistillConfig& cfg);

// Mean over samples of |f_T(x) - f_S(x)|^2 at the tap, no gradients.
double feature_mse(const Model& teacher, const Model& student, const std::string& tap,
                   const LabeledDataset& data);

}  // namespace kplab
