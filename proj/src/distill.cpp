#include "kplab/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kplab/rng.hpp"

namespace kplab {

void DistillConfig::validate(const ModelSpec& teacher, const ModelSpec& student) const {
  if (phase1_epochs < 1 || phase2_epochs < 1) {
    throw std::invalid_argument("DistillConfig: both phase epoch counts must be >= 1");
  }
  if (phase1_lr <= 0.0 || phase2_lr <= 0.0) {
    throw std::invalid_argument("DistillConfig: learning rates must be positive");
  }
  if (batch_size < 1) throw std::invalid_argument("DistillConfig: batch size must be >= 1");
  const size_t td = teacher.tap_dim(tap);    // throws if the tap is unknown
  const size_t sd = student.tap_dim(tap);
  if (td != sd) {
    throw std::invalid_argument("DistillConfig: tap '" + tap + "' is " + std::to_string(td) +
                                "-dim in the teacher but " + std::to_string(sd) +
                                "-dim in the student");
  }
}

namespace {

// Batched tap features: per-sample walk to the tap, stacked into [b,d] rows.
Tensor batch_features(const Model& model, const std::string& tap,
                      const std::vector<Tensor>& images) {
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images) rows.push_back(extract_feature(model, tap, img));
  return stack_rows(rows);
}

}  // namespace

CheckpointSeries distill_phase1(const Model& teacher, const ModelSpec& student_spec,
                                const LabeledDataset& data, const DistillConfig& cfg) {
  cfg.validate(teacher.spec, student_spec);
  if (data.empty()) throw std::invalid_argument("distill_phase1: dataset is empty");

  Model student = Model::init(student_spec, cfg.seed);
  const size_t tap_layer = student_spec.tap_layer(cfg.tap);
  student.set_trainable_above(tap_layer, false);

  CheckpointSeries series;
  series.seed = cfg.seed;
  series.kind = 1;
  series.weights.push_back(student.flat_params());

  SgdOptimizer opt(student, cfg.phase1_lr, cfg.momentum);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (size_t epoch = 1; epoch <= cfg.phase1_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x64697331ULL, epoch));  // "dis1"
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> images;
      for (size_t i = start; i < end; ++i) images.push_back(data[order[i]].image);
      // Teacher features carry no gradient; compute them outside the tape.
      Tensor target = batch_features(teacher, cfg.tap, images);
      student.zero_grads();
      double lv = 0.0;
      try {
        Tape tape;
        Tensor loss = mse(batch_features(student, cfg.tap, images), target);
        lv = loss.value();
        if (!std::isfinite(lv)) throw std::runtime_error("loss is not finite");
        backward(loss);
      } catch (const std::runtime_error& e) {
        throw TrainingError("distill_phase1: diverged at epoch " + std::to_string(epoch) + " (" +
                                e.what() + ")",
                            epoch);
      }
      opt.step();
      epoch_loss += lv;
      ++batches;
    }
    series.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
    series.weights.push_back(student.flat_params());
  }
  student.set_trainable_above(tap_layer, true);
  return series;
}

FinetuneResult head_finetune(const Model& student_phase1, const std::string& tap,
                             const LabeledDataset& data, const DistillConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("head_finetune: dataset is empty");
  const size_t tap_layer = student_phase1.spec.tap_layer(tap);

  FinetuneResult result;
  result.model = Model::init(student_phase1.spec, cfg.seed);
  result.model.set_flat_params(student_phase1.flat_params());
  result.model.set_trainable_at_or_below(tap_layer, false);

  SgdOptimizer opt(result.model, cfg.phase2_lr, cfg.momentum);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (size_t epoch = 1; epoch <= cfg.phase2_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x64697332ULL, epoch));  // "dis2"
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> images;
      std::vector<size_t> labels;
      for (size_t i = start; i < end; ++i) {
        images.push_back(data[order[i]].image);
        labels.push_back(data[order[i]].label);
      }
      result.model.zero_grads();
      double lv = 0.0;
      try {
        Tape tape;
        Tensor loss = softmax_crossentropy(forward_batch(result.model, images), labels);
        lv = loss.value();
        if (!std::isfinite(lv)) throw std::runtime_error("loss is not finite");
        backward(loss);
      } catch (const std::runtime_error& e) {
        throw TrainingError("head_finetune: diverged at epoch " + std::to_string(epoch) + " (" +
                                e.what() + ")",
                            epoch);
      }
      opt.step();
      epoch_loss += lv;
      ++batches;
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
  }
  result.model.set_trainable_at_or_below(tap_layer, true);
  result.accuracy = accuracy(result.model, data);
  return result;
}

double feature_mse(const Model& teacher, const Model& student, const std::string& tap,
                   const LabeledDataset& data) {
  if (data.empty()) throw std::invalid_argument("feature_mse: empty dataset");
  double acc = 0.0;
  for (const LabeledSample& s : data) {
    Tensor ft = extract_feature(teacher, tap, s.image);
    Tensor fs = extract_feature(student, tap, s.image);
    acc += mse(ft, fs).value();
  }
  return acc / static_cast<double>(data.size());
}

}  // namespace kplab
