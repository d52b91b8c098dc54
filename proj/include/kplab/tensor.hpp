#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace kplab {

// Dense row-major tensor of 64-bit reals with optional gradient storage.
// Values are immutable once an op has produced them; gradients are written
// only during backward(). Ops executed while a Tape is active and touching a
// requires_grad tensor are recorded for reverse-mode differentiation.
class Tensor {
 public:
  struct Impl {
    std::vector<size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(const std::vector<size_t>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<size_t>& shape, double value, bool requires_grad = false);
  static Tensor from(const std::vector<size_t>& shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<size_t>& shape() const { return impl_->shape; }
  size_t size() const { return impl_->data.size(); }
  size_t ndim() const { return impl_->shape.size(); }
  const std::vector<double>& data() const { return impl_->data; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  // nullptr until backward() has accumulated into this tensor
  const std::vector<double>* grad() const {
    return (impl_ && !impl_->grad.empty()) ? &impl_->grad : nullptr;
  }
  void clear_grad() {
    if (impl_) impl_->grad.clear();
  }

  double value() const;  // scalar tensors only

  // Mutation is reserved for parameter updates between tape scopes.
  std::vector<double>& raw_data() { return impl_->data; }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  friend class Tape;
  friend Tensor make_op_output(std::vector<size_t> shape, bool requires_grad);
};

// Records ops in execution order; backward() replays them reversed, which is
// a reverse topological order of the computation DAG. Gradients accumulate
// additively across fan-out. One tape per thread may be active at a time.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t node_count() const { return nodes_.size(); }

  static Tape* active();

 private:
  struct Node {
    void (*fn)(void*);
    std::shared_ptr<void> ctx;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;

  friend void backward(const Tensor& loss);
  friend void record_node(void (*fn)(void*), std::shared_ptr<void> ctx);
};

// Runs reverse-mode accumulation for a scalar loss recorded on the active
// tape. Every tracked tensor that contributed ends up with grad = d loss/d t.
void backward(const Tensor& loss);

// Element-wise NaN/Inf screening of op outputs. Enabled by default; release
// pipelines may switch it off for speed.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- primitive ops ----

Tensor matmul(const Tensor& a, const Tensor& b);                 // [m,k]x[k,n]
Tensor conv2d(const Tensor& x, const Tensor& kernels, size_t stride, size_t pad);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor exp_elem(const Tensor& a);
Tensor sum(const Tensor& a);  // scalar
Tensor reshape(const Tensor& a, const std::vector<size_t>& shape);
Tensor meanpool2d(const Tensor& x, size_t window);               // [c,h,w]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);    // [c,h,w]+[c]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);        // [b,n]+[n]
Tensor stack_rows(const std::vector<Tensor>& rows);              // k x [n] -> [k,n]

// Broadcasts one value per grid cell to a [channels,img_h,img_w] tensor;
// the backward pass sums pixel (and channel) gradients into each cell.
Tensor expand_cells(const Tensor& cells, size_t channels, size_t img_h, size_t img_w,
                    size_t cell_h, size_t cell_w);

// Mean over the batch dimension of the per-sample squared L2 distance.
// 1-D operands are treated as a single sample.
Tensor mse(const Tensor& a, const Tensor& b);

// Mean over the batch of -log softmax(logits)[target]; logits [b,k] or [k].
Tensor softmax_crossentropy(const Tensor& logits, const std::vector<size_t>& targets);

size_t shape_size(const std::vector<size_t>& shape);
std::string shape_str(const std::vector<size_t>& shape);

}  // namespace kplab
