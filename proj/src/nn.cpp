#include "kplab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kplab/rng.hpp"

namespace kplab {

LayerDesc LayerDesc::conv(size_t channels, size_t kernel, size_t stride, size_t pad) {
  LayerDesc d;
  d.kind = Kind::Conv;
  d.channels = channels;
  d.kernel = kernel;
  d.stride = stride;
  d.pad = pad;
  return d;
}
LayerDesc LayerDesc::relu() { return {Kind::Relu}; }
LayerDesc LayerDesc::meanpool(size_t window) {
  LayerDesc d;
  d.kind = Kind::MeanPool;
  d.window = window;
  return d;
}
LayerDesc LayerDesc::flatten() { return {Kind::Flatten}; }
LayerDesc LayerDesc::dense(size_t width) {
  LayerDesc d;
  d.kind = Kind::Dense;
  d.width = width;
  return d;
}

ModelSpec ModelSpec::desk_default(size_t classes) {
  ModelSpec s;
  s.input_shape = {1, 32, 32};
  s.classes = classes;
  s.layers = {
      LayerDesc::conv(8, 3, 1, 1),   // 0
      LayerDesc::relu(),             // 1
      LayerDesc::meanpool(2),        // 2
      LayerDesc::conv(16, 3, 1, 1),  // 3
      LayerDesc::relu(),             // 4
      LayerDesc::meanpool(2),        // 5  <- conv_top
      LayerDesc::flatten(),          // 6
      LayerDesc::dense(64),          // 7  <- fc1
      LayerDesc::relu(),             // 8
      LayerDesc::dense(32),          // 9  <- fc2
      LayerDesc::relu(),             // 10
      LayerDesc::dense(classes),     // 11 <- fc3
  };
  s.taps = {{"conv_top", 5}, {"fc1", 7}, {"fc2", 9}, {"fc3", 11}};
  return s;
}

std::vector<std::vector<size_t>> ModelSpec::layer_output_shapes() const {
  std::vector<std::vector<size_t>> shapes;
  std::vector<size_t> cur = input_shape;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& l = layers[i];
    switch (l.kind) {
      case LayerDesc::Kind::Conv: {
        if (cur.size() != 3) {
          throw std::invalid_argument("ModelSpec: conv layer " + std::to_string(i) +
                                      " needs a [c,h,w] input, got " + shape_str(cur));
        }
        const size_t h = cur[1], w = cur[2], k = l.kernel;
        if (k > h + 2 * l.pad || k > w + 2 * l.pad) {
          throw std::invalid_argument("ModelSpec: conv kernel exceeds padded input at layer " +
                                      std::to_string(i));
        }
        cur = {l.channels, (h + 2 * l.pad - k) / l.stride + 1, (w + 2 * l.pad - k) / l.stride + 1};
        break;
      }
      case LayerDesc::Kind::Relu:
        break;
      case LayerDesc::Kind::MeanPool: {
        if (cur.size() != 3 || l.window == 0 || cur[1] % l.window || cur[2] % l.window) {
          throw std::invalid_argument("ModelSpec: mean-pool window mismatch at layer " +
                                      std::to_string(i));
        }
        cur = {cur[0], cur[1] / l.window, cur[2] / l.window};
        break;
      }
      case LayerDesc::Kind::Flatten:
        cur = {shape_size(cur)};
        break;
      case LayerDesc::Kind::Dense: {
        if (cur.size() != 1) {
          throw std::invalid_argument("ModelSpec: dense layer " + std::to_string(i) +
                                      " needs a flat input, got " + shape_str(cur));
        }
        cur = {l.width};
        break;
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelSpec::validate() const {
  if (input_shape.empty() || classes < 1) {
    throw std::invalid_argument("ModelSpec: input shape and class count required");
  }
  if (layers.empty() || layers.back().kind != LayerDesc::Kind::Dense ||
      layers.back().width != classes) {
    throw std::invalid_argument("ModelSpec: final layer must be dense with width == classes");
  }
  auto shapes = layer_output_shapes();  // throws on inconsistent chains
  for (const auto& [name, idx] : taps) {
    if (idx >= layers.size()) {
      throw std::invalid_argument("ModelSpec: tap '" + name + "' names layer " +
                                  std::to_string(idx) + " of " + std::to_string(layers.size()));
    }
  }
}

size_t ModelSpec::tap_layer(const std::string& name) const {
  auto it = taps.find(name);
  if (it == taps.end()) throw std::invalid_argument("ModelSpec: unknown tap '" + name + "'");
  return it->second;
}

size_t ModelSpec::tap_dim(const std::string& name) const {
  return shape_size(layer_output_shapes()[tap_layer(name)]);
}

Model Model::init(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng(mix_seed(seed, 0x696e6974ULL));  // "init"
  std::vector<size_t> cur = spec.input_shape;
  auto shapes = spec.layer_output_shapes();
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    if (l.kind == LayerDesc::Kind::Conv) {
      const size_t fan_in = cur[0] * l.kernel * l.kernel;
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      std::vector<double> w(l.channels * cur[0] * l.kernel * l.kernel);
      for (double& v : w) v = rng.normal() * std;
      m.params.push_back(Tensor::from({l.channels, cur[0], l.kernel, l.kernel}, std::move(w), true));
      m.params.push_back(Tensor::zeros({l.channels}, true));
      m.param_layer.push_back(i);
      m.param_layer.push_back(i);
    } else if (l.kind == LayerDesc::Kind::Dense) {
      const size_t fan_in = cur[0];
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      std::vector<double> w(fan_in * l.width);
      for (double& v : w) v = rng.normal() * std;
      m.params.push_back(Tensor::from({fan_in, l.width}, std::move(w), true));
      m.params.push_back(Tensor::zeros({l.width}, true));
      m.param_layer.push_back(i);
      m.param_layer.push_back(i);
    }
    cur = shapes[i];
  }
  return m;
}

size_t Model::param_count() const {
  size_t n = 0;
  for (const Tensor& p : params) n += p.size();
  return n;
}

std::vector<double> Model::flat_params() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  for (const Tensor& p : params) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

void Model::set_flat_params(const std::vector<double>& flat) {
  if (flat.size() != param_count()) {
    throw std::invalid_argument("Model: flat vector has " + std::to_string(flat.size()) +
                                " values, model has " + std::to_string(param_count()));
  }
  size_t off = 0;
  for (Tensor& p : params) {
    std::copy(flat.begin() + off, flat.begin() + off + p.size(), p.raw_data().begin());
    off += p.size();
  }
}

void Model::zero_grads() {
  for (Tensor& p : params) p.clear_grad();
}

void Model::set_trainable_at_or_below(size_t layer_index, bool trainable) {
  for (size_t i = 0; i < params.size(); ++i) {
    if (param_layer[i] <= layer_index) params[i].impl()->requires_grad = trainable;
  }
}

void Model::set_trainable_above(size_t layer_index, bool trainable) {
  for (size_t i = 0; i < params.size(); ++i) {
    if (param_layer[i] > layer_index) params[i].impl()->requires_grad = trainable;
  }
}

const std::vector<double>& CheckpointSeries::at_epoch(size_t m) const {
  if (m >= weights.size()) {
    throw std::out_of_range("CheckpointSeries: epoch " + std::to_string(m) + " of " +
                            std::to_string(epochs()));
  }
  return weights[m];
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
}

namespace {

// Applies one layer to a per-sample activation (dense layers via a [1,n] view).
Tensor apply_layer_sample(const Model& model, size_t layer_index, size_t param_index,
                          const Tensor& x) {
  const LayerDesc& l = model.spec.layers[layer_index];
  switch (l.kind) {
    case LayerDesc::Kind::Conv:
      return add_channel_bias(
          conv2d(x, model.params[param_index], l.stride, l.pad), model.params[param_index + 1]);
    case LayerDesc::Kind::Relu:
      return relu(x);
    case LayerDesc::Kind::MeanPool:
      return meanpool2d(x, l.window);
    case LayerDesc::Kind::Flatten:
      return reshape(x, {x.size()});
    case LayerDesc::Kind::Dense: {
      Tensor row = reshape(x, {1, x.size()});
      Tensor out = add_row_bias(matmul(row, model.params[param_index]),
                                model.params[param_index + 1]);
      return reshape(out, {l.width});
    }
  }
  throw std::logic_error("apply_layer_sample: unreachable");
}

size_t first_param_index(const Model& model, size_t layer_index) {
  for (size_t i = 0; i < model.param_layer.size(); ++i) {
    if (model.param_layer[i] == layer_index) return i;
  }
  return model.params.size();
}

}  // namespace

Tensor forward_sample(const Model& model, const Tensor& x, size_t upto_layer) {
  if (x.shape() != model.spec.input_shape) {
    throw std::invalid_argument("forward_sample: input " + shape_str(x.shape()) +
                                " does not match spec " + shape_str(model.spec.input_shape));
  }
  Tensor cur = x;
  size_t pi = 0;
  for (size_t i = 0; i < model.spec.layers.size(); ++i) {
    cur = apply_layer_sample(model, i, pi, cur);
    const LayerDesc::Kind k = model.spec.layers[i].kind;
    if (k == LayerDesc::Kind::Conv || k == LayerDesc::Kind::Dense) pi += 2;
    if (i == upto_layer) return cur;
  }
  return cur;
}

Tensor forward_batch(const Model& model, const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("forward_batch: empty batch");
  // Per-sample through the spatial stack, batched through the dense head.
  size_t split = 0;
  for (size_t i = 0; i < model.spec.layers.size(); ++i) {
    if (model.spec.layers[i].kind == LayerDesc::Kind::Flatten) split = i + 1;
  }
  size_t split_param = 0;
  {
    size_t pi = 0;
    for (size_t i = 0; i < split; ++i) {
      const LayerDesc::Kind k = model.spec.layers[i].kind;
      if (k == LayerDesc::Kind::Conv || k == LayerDesc::Kind::Dense) pi += 2;
    }
    split_param = pi;
  }
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images) {
    Tensor cur = img;
    size_t pi = 0;
    for (size_t i = 0; i < split; ++i) {
      cur = apply_layer_sample(model, i, pi, cur);
      const LayerDesc::Kind k = model.spec.layers[i].kind;
      if (k == LayerDesc::Kind::Conv || k == LayerDesc::Kind::Dense) pi += 2;
    }
    if (cur.ndim() != 1) cur = reshape(cur, {cur.size()});
    rows.push_back(cur);
  }
  Tensor cur = stack_rows(rows);
  size_t pi = split_param;
  for (size_t i = split; i < model.spec.layers.size(); ++i) {
    const LayerDesc& l = model.spec.layers[i];
    switch (l.kind) {
      case LayerDesc::Kind::Dense:
        cur = add_row_bias(matmul(cur, model.params[pi]), model.params[pi + 1]);
        pi += 2;
        break;
      case LayerDesc::Kind::Relu:
        cur = relu(cur);
        break;
      default:
        throw std::invalid_argument("forward_batch: only dense/relu layers may follow flatten");
    }
  }
  return cur;
}

Tensor extract_feature(const Model& model, const std::string& tap, const Tensor& x) {
  const size_t layer = model.spec.tap_layer(tap);
  Tensor f = forward_sample(model, x, layer);
  if (f.ndim() != 1) f = reshape(f, {f.size()});
  return f;
}

Tensor extract_feature(const std::vector<double>& flat_params, const ModelSpec& spec,
                       const std::string& tap, const Tensor& x) {
  Model m = Model::init(spec, 0);
  m.set_flat_params(flat_params);
  return extract_feature(m, tap, x);
}

double accuracy(const Model& model, const LabeledDataset& data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  size_t hits = 0;
  for (const LabeledSample& s : data) {
    Tensor logits = forward_sample(model, s.image, static_cast<size_t>(-1));
    const auto& v = logits.data();
    size_t best = 0;
    for (size_t j = 1; j < v.size(); ++j) {
      if (v[j] > v[best]) best = j;
    }
    hits += (best == s.label) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

SgdOptimizer::SgdOptimizer(Model& model, double lr, double momentum)
    : model_(model), lr_(lr), momentum_(momentum) {
  velocity_.resize(model.params.size());
  for (size_t i = 0; i < model.params.size(); ++i) {
    velocity_[i].assign(model.params[i].size(), 0.0);
  }
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < model_.params.size(); ++i) {
    Tensor& p = model_.params[i];
    const std::vector<double>* g = p.grad();
    if (!p.requires_grad() || g == nullptr) continue;
    auto& v = velocity_[i];
    auto& w = p.raw_data();
    for (size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] - lr_ * (*g)[j];
      w[j] += v[j];
    }
  }
}

CheckpointSeries train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  for (const LabeledSample& s : data) {
    if (s.image.shape() != spec.input_shape) {
      throw std::invalid_argument("train: sample shape " + shape_str(s.image.shape()) +
                                  " does not match spec " + shape_str(spec.input_shape));
    }
    if (s.label >= spec.classes) {
      throw std::invalid_argument("train: label " + std::to_string(s.label) +
                                  " out of range for " + std::to_string(spec.classes));
    }
  }
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (cfg.lr <= 0.0) throw std::invalid_argument("train: learning rate must be positive");

  Model model = Model::init(spec, cfg.seed);
  CheckpointSeries series;
  series.seed = cfg.seed;
  series.kind = 0;
  series.weights.push_back(model.flat_params());

  SgdOptimizer opt(model, cfg.lr, cfg.momentum);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL, epoch));  // "shuf"
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> images;
      std::vector<size_t> labels;
      images.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        images.push_back(data[order[i]].image);
        labels.push_back(data[order[i]].label);
      }
      model.zero_grads();
      double lv = 0.0;
      try {
        Tape tape;
        Tensor loss = softmax_crossentropy(forward_batch(model, images), labels);
        lv = loss.value();
        if (!std::isfinite(lv)) throw std::runtime_error("loss is not finite");
        backward(loss);
      } catch (const std::runtime_error& e) {
        throw TrainingError("train: diverged at epoch " + std::to_string(epoch) + " (" +
                                e.what() + ")",
                            epoch);
      }
      opt.step();
      epoch_loss += lv;
      ++batches;
    }
    series.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
    series.weights.push_back(model.flat_params());
  }
  series.final_accuracy = accuracy(model, data);
  return series;
}

double weight_distance(const CheckpointSeries& series, size_t m) {
  if (m > series.epochs()) {
    throw std::out_of_range("weight_distance: epoch " + std::to_string(m) + " of " +
                            std::to_string(series.epochs()));
  }
  const auto& w0 = series.weights[0];
  double n0 = 0.0;
  for (double v : w0) n0 += v * v;
  n0 = std::sqrt(n0);
  if (n0 == 0.0) throw std::runtime_error("weight_distance: initial parameters are all zero");
  double total = 0.0;
  for (size_t k = 1; k <= m; ++k) {
    const auto& a = series.weights[k];
    const auto& b = series.weights[k - 1];
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double diff = a[i] - b[i];
      d += diff * diff;
    }
    total += std::sqrt(d) / n0;
  }
  return total;
}

}  // namespace kplab
