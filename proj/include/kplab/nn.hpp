#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kplab/tensor.hpp"

namespace kplab {

struct LayerDesc {
  enum class Kind { Conv, Relu, MeanPool, Flatten, Dense };
  Kind kind;
  size_t channels = 0, kernel = 0, stride = 1, pad = 0;  // conv
  size_t window = 0;                                     // mean-pool
  size_t width = 0;                                      // dense

  static LayerDesc conv(size_t channels, size_t kernel, size_t stride, size_t pad);
  static LayerDesc relu();
  static LayerDesc meanpool(size_t window);
  static LayerDesc flatten();
  static LayerDesc dense(size_t width);
};

// Architecture plus named feature taps. A tap names the output of one layer;
// features and distillation losses are taken there.
struct ModelSpec {
  std::vector<size_t> input_shape;       // [c,h,w] or [n]
  std::vector<LayerDesc> layers;
  std::map<std::string, size_t> taps;    // tap name -> layer index
  size_t classes = 0;

  // 32x32 single-channel stack: two 3x3 conv blocks (8 and 16 channels, each
  // followed by relu and 2x2 mean-pool) into dense 64/32/classes, with taps
  // conv_top, fc1, fc2, fc3 at the respective layer outputs.
  static ModelSpec desk_default(size_t classes);

  void validate() const;
  std::vector<std::vector<size_t>> layer_output_shapes() const;
  size_t tap_layer(const std::string& name) const;
  size_t tap_dim(const std::string& name) const;
};

// A spec bound to concrete parameters. Conv layers own [out,in,k,k] kernels
// and [out] biases; dense layers own [in,out] weights and [out] biases.
struct Model {
  ModelSpec spec;
  std::vector<Tensor> params;
  std::vector<size_t> param_layer;  // owning layer index per param tensor

  static Model init(const ModelSpec& spec, uint64_t seed);

  size_t param_count() const;
  std::vector<double> flat_params() const;
  void set_flat_params(const std::vector<double>& flat);
  void zero_grads();
  void set_trainable_at_or_below(size_t layer_index, bool trainable);
  void set_trainable_above(size_t layer_index, bool trainable);
};

struct LabeledSample {
  Tensor image;
  size_t label = 0;
};
using LabeledDataset = std::vector<LabeledSample>;

struct TrainConfig {
  size_t epochs = 1;
  size_t batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
  uint64_t seed = 0;

  void validate() const;
};

// Thrown when the loss stops being finite; carries the offending epoch.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& msg, size_t epoch)
      : std::runtime_error(msg), epoch_index(epoch) {}
  size_t epoch_index;
};

// Per-epoch parameter snapshots; weights[0] is the initialization.
struct CheckpointSeries {
  std::vector<std::vector<double>> weights;
  uint64_t seed = 0;
  std::vector<double> loss_curve;
  double final_accuracy = 0.0;
  uint8_t kind = 0;  // 0 = scratch training, 1 = distill phase 1, 2 = final

  size_t epochs() const { return weights.empty() ? 0 : weights.size() - 1; }
  const std::vector<double>& at_epoch(size_t m) const;
};

// SGD with momentum; snapshots parameters after every epoch. Deterministic
// given cfg.seed. epochs == 0 returns only the initialization snapshot.
CheckpointSeries train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg);

// Batched logits for a list of [c,h,w] (or 1-D) inputs.
Tensor forward_batch(const Model& model, const std::vector<Tensor>& images);

// Single-sample forward through layers [0, upto]; upto == npos means all.
Tensor forward_sample(const Model& model, const Tensor& x, size_t upto_layer);

// Activation at a named tap, flattened to a vector.
Tensor extract_feature(const Model& model, const std::string& tap, const Tensor& x);
Tensor extract_feature(const std::vector<double>& flat_params, const ModelSpec& spec,
                       const std::string& tap, const Tensor& x);

double accuracy(const Model& model, const LabeledDataset& data);

// sum_{k=1..m} |w_k - w_{k-1}| / |w_0| over the concatenated parameter
// vector (L2 norms).
double weight_distance(const CheckpointSeries& series, size_t m);

// One SGD-with-momentum optimizer over a model's trainable parameters.
class SgdOptimizer {
 public:
  SgdOptimizer(Model& model, double lr, double momentum);
  void step();

 private:
  Model& model_;
  double lr_, momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace kplab
