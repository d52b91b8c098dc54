#include "kplab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kplab {

namespace {

thread_local Tape* t_active_tape = nullptr;
std::atomic<bool> g_finite_checks{true};

void check_finite(const char* op, const std::vector<double>& data) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value produced");
    }
  }
}

std::vector<double>& grad_buf(const std::shared_ptr<Tensor::Impl>& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

}  // namespace

size_t shape_size(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor make_op_output(std::vector<size_t> shape, bool requires_grad) {
  auto impl = std::make_shared<Tensor::Impl>();
  impl->shape = std::move(shape);
  impl->data.assign(shape_size(impl->shape), 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const std::vector<size_t>& shape, bool requires_grad) {
  for (size_t d : shape) {
    if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
  }
  return make_op_output(shape, requires_grad);
}

Tensor Tensor::full(const std::vector<size_t>& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from(const std::vector<size_t>& shape, std::vector<double> data,
                    bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
  Tensor t = zeros(shape, requires_grad);
  t.impl_->data = std::move(data);
  check_finite("Tensor::from", t.impl_->data);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw std::invalid_argument("Tensor::value: tensor is not a scalar");
  }
  return impl_->data[0];
}

Tape::Tape() {
  prev_ = t_active_tape;
  t_active_tape = this;
}

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void record_node(void (*fn)(void*), std::shared_ptr<void> ctx) {
  t_active_tape->nodes_.push_back({fn, std::move(ctx)});
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  Tape* tape = Tape::active();
  if (tape == nullptr) throw std::invalid_argument("backward: no active tape");
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss was not produced under the active tape");
  }
  grad_buf(loss.impl())[0] += 1.0;
  for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) {
    it->fn(it->ctx.get());
  }
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

namespace {

using ImplPtr = std::shared_ptr<Tensor::Impl>;

bool tracked(const Tensor& t) { return Tape::active() != nullptr && t.requires_grad(); }

// Records a backward closure when the output is tracked. Ctx is a struct
// holding shared_ptrs to the impls plus whatever the backward pass needs.
template <typename Ctx>
void record(bool want, Ctx ctx, void (*fn)(void*)) {
  if (!want) return;
  record_node(fn, std::make_shared<Ctx>(std::move(ctx)));
}

struct BinCtx {
  ImplPtr a, b, out;
};

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const bool want = tracked(a) || tracked(b);
  Tensor out = make_op_output(a.shape(), want);
  const size_t n = out.size();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite("add", out.data());
  record(want, BinCtx{a.impl(), b.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<BinCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    if (c->a->requires_grad) {
      auto& ga = grad_buf(c->a);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const bool want = tracked(a) || tracked(b);
  Tensor out = make_op_output(a.shape(), want);
  const size_t n = out.size();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  check_finite("sub", out.data());
  record(want, BinCtx{a.impl(), b.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<BinCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    if (c->a->requires_grad) {
      auto& ga = grad_buf(c->a);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const bool want = tracked(a) || tracked(b);
  Tensor out = make_op_output(a.shape(), want);
  const size_t n = out.size();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite("mul", out.data());
  record(want, BinCtx{a.impl(), b.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<BinCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    if (c->a->requires_grad) {
      auto& ga = grad_buf(c->a);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c->b->data[i];
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * c->a->data[i];
    }
  });
  return out;
}

namespace {
struct UnCtx {
  ImplPtr a, out;
  double s = 0.0;
};
}  // namespace

Tensor scale(const Tensor& a, double s) {
  const bool want = tracked(a);
  Tensor out = make_op_output(a.shape(), want);
  const size_t n = out.size();
  const double* pa = a.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  check_finite("scale", out.data());
  record(want, UnCtx{a.impl(), out.impl(), s}, [](void* p) {
    auto* c = static_cast<UnCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& ga = grad_buf(c->a);
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c->s;
  });
  return out;
}

Tensor exp_elem(const Tensor& a) {
  const bool want = tracked(a);
  Tensor out = make_op_output(a.shape(), want);
  const size_t n = out.size();
  const double* pa = a.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  check_finite("exp", out.data());
  record(want, UnCtx{a.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<UnCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& ga = grad_buf(c->a);
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c->out->data[i];
  });
  return out;
}

Tensor relu(const Tensor& x) {
  const bool want = tracked(x);
  Tensor out = make_op_output(x.shape(), want);
  const size_t n = out.size();
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  check_finite("relu", out.data());
  record(want, UnCtx{x.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<UnCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& ga = grad_buf(c->a);
    for (size_t i = 0; i < go.size(); ++i) {
      if (c->a->data[i] > 0.0) ga[i] += go[i];
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  const bool want = tracked(a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = make_op_output({1}, want);
  out.raw_data()[0] = s;
  check_finite("sum", out.data());
  record(want, UnCtx{a.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<UnCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& ga = grad_buf(c->a);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
  });
  return out;
}

Tensor reshape(const Tensor& a, const std::vector<size_t>& shape) {
  if (shape_size(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  const bool want = tracked(a);
  Tensor out = make_op_output(shape, want);
  out.raw_data() = a.data();
  record(want, UnCtx{a.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<UnCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& ga = grad_buf(c->a);
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return out;
}

namespace {
struct MatmulCtx {
  ImplPtr a, b, out;
  size_t m, k, n;
};
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw std::invalid_argument("matmul: operands must be 2-D, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const size_t m = a.shape()[0], k = a.shape()[1];
  if (b.shape()[0] != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const size_t n = b.shape()[1];
  const bool want = tracked(a) || tracked(b);
  Tensor out = make_op_output({m, n}, want);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    double* orow = po + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = pb + kk * n;
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite("matmul", out.data());
  record(want, MatmulCtx{a.impl(), b.impl(), out.impl(), m, k, n}, [](void* p) {
    auto* c = static_cast<MatmulCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    if (c->a->requires_grad) {  // dA = dOut * B^T
      auto& ga = grad_buf(c->a);
      for (size_t i = 0; i < c->m; ++i) {
        for (size_t j = 0; j < c->n; ++j) {
          const double g = go[i * c->n + j];
          const double* brow = c->b->data.data() + j;
          for (size_t kk = 0; kk < c->k; ++kk) ga[i * c->k + kk] += g * brow[kk * c->n];
        }
      }
    }
    if (c->b->requires_grad) {  // dB = A^T * dOut
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < c->m; ++i) {
        const double* arow = c->a->data.data() + i * c->k;
        const double* grow = go.data() + i * c->n;
        for (size_t kk = 0; kk < c->k; ++kk) {
          const double av = arow[kk];
          double* gbrow = gb.data() + kk * c->n;
          for (size_t j = 0; j < c->n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

namespace {
struct ConvCtx {
  ImplPtr x, k, out;
  size_t stride, pad;
};

// Cross-correlation (no kernel flip); the standard convention for learned
// kernels, stated here so file formats and tests agree on orientation.
void conv2d_shapes(const Tensor& x, const Tensor& kernels, size_t stride, size_t pad,
                   size_t& c_in, size_t& h, size_t& w, size_t& c_out, size_t& k, size_t& oh,
                   size_t& ow) {
  if (x.ndim() != 3) {
    throw std::invalid_argument("conv2d: input must be [c,h,w], got " + shape_str(x.shape()));
  }
  if (kernels.ndim() != 4) {
    throw std::invalid_argument("conv2d: kernels must be [c_out,c_in,k,k], got " +
                                shape_str(kernels.shape()));
  }
  c_in = x.shape()[0];
  h = x.shape()[1];
  w = x.shape()[2];
  c_out = kernels.shape()[0];
  k = kernels.shape()[2];
  if (kernels.shape()[1] != c_in || kernels.shape()[3] != k) {
    throw std::invalid_argument("conv2d: kernel shape " + shape_str(kernels.shape()) +
                                " does not match input channels " + std::to_string(c_in));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (k > h + 2 * pad || k > w + 2 * pad) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, size_t stride, size_t pad) {
  size_t c_in, h, w, c_out, k, oh, ow;
  conv2d_shapes(x, kernels, stride, pad, c_in, h, w, c_out, k, oh, ow);
  const bool want = tracked(x) || tracked(kernels);
  Tensor out = make_op_output({c_out, oh, ow}, want);
  const double* px = x.data().data();
  const double* pk = kernels.data().data();
  double* po = out.raw_data().data();
  for (size_t co = 0; co < c_out; ++co) {
    for (size_t ci = 0; ci < c_in; ++ci) {
      const double* kern = pk + (co * c_in + ci) * k * k;
      const double* xc = px + ci * h * w;
      double* oc = po + co * oh * ow;
      for (size_t oy = 0; oy < oh; ++oy) {
        const long iy0 = static_cast<long>(oy * stride) - static_cast<long>(pad);
        for (size_t ox = 0; ox < ow; ++ox) {
          const long ix0 = static_cast<long>(ox * stride) - static_cast<long>(pad);
          double acc = 0.0;
          for (size_t ky = 0; ky < k; ++ky) {
            const long iy = iy0 + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* xrow = xc + iy * w;
            const double* krow = kern + ky * k;
            for (size_t kx = 0; kx < k; ++kx) {
              const long ix = ix0 + static_cast<long>(kx);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += xrow[ix] * krow[kx];
            }
          }
          oc[oy * ow + ox] += acc;
        }
      }
    }
  }
  check_finite("conv2d", out.data());
  record(want, ConvCtx{x.impl(), kernels.impl(), out.impl(), stride, pad}, [](void* p) {
    auto* c = static_cast<ConvCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const size_t c_in = c->x->shape[0], h = c->x->shape[1], w = c->x->shape[2];
    const size_t c_out = c->out->shape[0], oh = c->out->shape[1], ow = c->out->shape[2];
    const size_t k = c->k->shape[2];
    const bool gx = c->x->requires_grad;
    const bool gk = c->k->requires_grad;
    auto* xg = gx ? &grad_buf(c->x) : nullptr;
    auto* kg = gk ? &grad_buf(c->k) : nullptr;
    for (size_t co = 0; co < c_out; ++co) {
      for (size_t ci = 0; ci < c_in; ++ci) {
        const double* kern = c->k->data.data() + (co * c_in + ci) * k * k;
        const double* xc = c->x->data.data() + ci * h * w;
        const double* goc = go.data() + co * oh * ow;
        double* xgc = gx ? xg->data() + ci * h * w : nullptr;
        double* kgc = gk ? kg->data() + (co * c_in + ci) * k * k : nullptr;
        for (size_t oy = 0; oy < oh; ++oy) {
          const long iy0 = static_cast<long>(oy * c->stride) - static_cast<long>(c->pad);
          for (size_t ox = 0; ox < ow; ++ox) {
            const double g = goc[oy * ow + ox];
            if (g == 0.0) continue;
            const long ix0 = static_cast<long>(ox * c->stride) - static_cast<long>(c->pad);
            for (size_t ky = 0; ky < k; ++ky) {
              const long iy = iy0 + static_cast<long>(ky);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (size_t kx = 0; kx < k; ++kx) {
                const long ix = ix0 + static_cast<long>(kx);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                if (gx) xgc[iy * w + ix] += g * kern[ky * k + kx];
                if (gk) kgc[ky * k + kx] += g * xc[iy * w + ix];
              }
            }
          }
        }
      }
    }
  });
  return out;
}

namespace {
struct PoolCtx {
  ImplPtr x, out;
  size_t window;
};
}  // namespace

Tensor meanpool2d(const Tensor& x, size_t window) {
  if (x.ndim() != 3) {
    throw std::invalid_argument("meanpool2d: input must be [c,h,w], got " + shape_str(x.shape()));
  }
  const size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw std::invalid_argument("meanpool2d: window " + std::to_string(window) +
                                " must divide spatial extents of " + shape_str(x.shape()));
  }
  const size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  const bool want = tracked(x);
  Tensor out = make_op_output({c, oh, ow}, want);
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (size_t ch = 0; ch < c; ++ch) {
    const double* xc = px + ch * h * w;
    double* oc = po + ch * oh * ow;
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (size_t dy = 0; dy < window; ++dy) {
          const double* row = xc + (oy * window + dy) * w + ox * window;
          for (size_t dx = 0; dx < window; ++dx) acc += row[dx];
        }
        oc[oy * ow + ox] = acc * inv;
      }
    }
  }
  check_finite("meanpool2d", out.data());
  record(want, PoolCtx{x.impl(), out.impl(), window}, [](void* p) {
    auto* c = static_cast<PoolCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& gx = grad_buf(c->x);
    const size_t ch = c->x->shape[0], h = c->x->shape[1], w = c->x->shape[2];
    const size_t win = c->window, oh = h / win, ow = w / win;
    const double inv = 1.0 / static_cast<double>(win * win);
    for (size_t cc = 0; cc < ch; ++cc) {
      for (size_t oy = 0; oy < oh; ++oy) {
        for (size_t ox = 0; ox < ow; ++ox) {
          const double g = go[(cc * oh + oy) * ow + ox] * inv;
          for (size_t dy = 0; dy < win; ++dy) {
            double* row = gx.data() + (cc * h + oy * win + dy) * w + ox * win;
            for (size_t dx = 0; dx < win; ++dx) row[dx] += g;
          }
        }
      }
    }
  });
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 3 || bias.ndim() != 1 || bias.shape()[0] != x.shape()[0]) {
    throw std::invalid_argument("add_channel_bias: need [c,h,w] and [c], got " +
                                shape_str(x.shape()) + " and " + shape_str(bias.shape()));
  }
  const size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  const bool want = tracked(x) || tracked(bias);
  Tensor out = make_op_output(x.shape(), want);
  const double* px = x.data().data();
  const double* pb = bias.data().data();
  double* po = out.raw_data().data();
  for (size_t ch = 0; ch < c; ++ch) {
    const double b = pb[ch];
    for (size_t i = 0; i < hw; ++i) po[ch * hw + i] = px[ch * hw + i] + b;
  }
  check_finite("add_channel_bias", out.data());
  record(want, BinCtx{x.impl(), bias.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<BinCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const size_t ch = c->a->shape[0], hw = c->a->shape[1] * c->a->shape[2];
    if (c->a->requires_grad) {
      auto& gx = grad_buf(c->a);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t cc = 0; cc < ch; ++cc) {
        double acc = 0.0;
        for (size_t i = 0; i < hw; ++i) acc += go[cc * hw + i];
        gb[cc] += acc;
      }
    }
  });
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw std::invalid_argument("add_row_bias: need [b,n] and [n], got " + shape_str(x.shape()) +
                                " and " + shape_str(bias.shape()));
  }
  const size_t b = x.shape()[0], n = x.shape()[1];
  const bool want = tracked(x) || tracked(bias);
  Tensor out = make_op_output(x.shape(), want);
  const double* px = x.data().data();
  const double* pb = bias.data().data();
  double* po = out.raw_data().data();
  for (size_t i = 0; i < b; ++i) {
    for (size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] + pb[j];
  }
  check_finite("add_row_bias", out.data());
  record(want, BinCtx{x.impl(), bias.impl(), out.impl()}, [](void* p) {
    auto* c = static_cast<BinCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const size_t b = c->a->shape[0], n = c->a->shape[1];
    if (c->a->requires_grad) {
      auto& gx = grad_buf(c->a);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < b; ++i) {
        for (size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    }
  });
  return out;
}

namespace {
struct StackCtx {
  std::vector<ImplPtr> rows;
  ImplPtr out;
};
}  // namespace

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const size_t n = rows[0].size();
  bool want = false;
  for (const Tensor& r : rows) {
    if (r.ndim() != 1 || r.size() != n) {
      throw std::invalid_argument("stack_rows: rows must be 1-D of equal length");
    }
    want = want || tracked(r);
  }
  Tensor out = make_op_output({rows.size(), n}, want);
  double* po = out.raw_data().data();
  for (size_t i = 0; i < rows.size(); ++i) {
    const double* pr = rows[i].data().data();
    std::copy(pr, pr + n, po + i * n);
  }
  StackCtx ctx;
  ctx.out = out.impl();
  for (const Tensor& r : rows) ctx.rows.push_back(r.impl());
  record(want, std::move(ctx), [](void* p) {
    auto* c = static_cast<StackCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const size_t n = c->out->shape[1];
    for (size_t i = 0; i < c->rows.size(); ++i) {
      if (!c->rows[i]->requires_grad) continue;
      auto& gr = grad_buf(c->rows[i]);
      for (size_t j = 0; j < n; ++j) gr[j] += go[i * n + j];
    }
  });
  return out;
}

namespace {
struct CellCtx {
  ImplPtr cells, out;
  size_t cell_h, cell_w;
};
}  // namespace

Tensor expand_cells(const Tensor& cells, size_t channels, size_t img_h, size_t img_w,
                    size_t cell_h, size_t cell_w) {
  if (cell_h == 0 || cell_w == 0 || img_h % cell_h != 0 || img_w % cell_w != 0) {
    throw std::invalid_argument("expand_cells: cell size must divide the image extents");
  }
  const size_t ch = img_h / cell_h, cw = img_w / cell_w;
  if (cells.ndim() != 1 || cells.size() != ch * cw) {
    throw std::invalid_argument("expand_cells: expected " + std::to_string(ch * cw) +
                                " cells, got " + shape_str(cells.shape()));
  }
  const bool want = tracked(cells);
  Tensor out = make_op_output({channels, img_h, img_w}, want);
  const double* pc = cells.data().data();
  double* po = out.raw_data().data();
  for (size_t c = 0; c < channels; ++c) {
    for (size_t y = 0; y < img_h; ++y) {
      const double* crow = pc + (y / cell_h) * cw;
      double* orow = po + (c * img_h + y) * img_w;
      for (size_t x = 0; x < img_w; ++x) orow[x] = crow[x / cell_w];
    }
  }
  check_finite("expand_cells", out.data());
  record(want, CellCtx{cells.impl(), out.impl(), cell_h, cell_w}, [](void* p) {
    auto* c = static_cast<CellCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    auto& gc = grad_buf(c->cells);
    const size_t channels = c->out->shape[0], img_h = c->out->shape[1], img_w = c->out->shape[2];
    const size_t cw = img_w / c->cell_w;
    for (size_t ch = 0; ch < channels; ++ch) {
      for (size_t y = 0; y < img_h; ++y) {
        double* grow = gc.data() + (y / c->cell_h) * cw;
        const double* orow = go.data() + (ch * img_h + y) * img_w;
        for (size_t x = 0; x < img_w; ++x) grow[x / c->cell_w] += orow[x];
      }
    }
  });
  return out;
}

namespace {
struct MseCtx {
  ImplPtr a, b, out;
  double inv_batch;
};
}  // namespace

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const double inv_batch = 1.0 / static_cast<double>(a.ndim() >= 2 ? a.shape()[0] : 1);
  const bool want = tracked(a) || tracked(b);
  double acc = 0.0;
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = pa[i] - pb[i];
    acc += d * d;
  }
  Tensor out = make_op_output({1}, want);
  out.raw_data()[0] = acc * inv_batch;
  check_finite("mse", out.data());
  record(want, MseCtx{a.impl(), b.impl(), out.impl(), inv_batch}, [](void* p) {
    auto* c = static_cast<MseCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const double s = 2.0 * c->inv_batch * go[0];
    if (c->a->requires_grad) {
      auto& ga = grad_buf(c->a);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += s * (c->a->data[i] - c->b->data[i]);
    }
    if (c->b->requires_grad) {
      auto& gb = grad_buf(c->b);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (c->a->data[i] - c->b->data[i]);
    }
  });
  return out;
}

namespace {
struct CeCtx {
  ImplPtr logits, out;
  std::vector<double> softmax;  // cached probabilities [b,k]
  std::vector<size_t> targets;
};
}  // namespace

Tensor softmax_crossentropy(const Tensor& logits, const std::vector<size_t>& targets) {
  size_t b, k;
  if (logits.ndim() == 2) {
    b = logits.shape()[0];
    k = logits.shape()[1];
  } else if (logits.ndim() == 1) {
    b = 1;
    k = logits.shape()[0];
  } else {
    throw std::invalid_argument("softmax_crossentropy: logits must be [b,k] or [k]");
  }
  if (targets.size() != b) {
    throw std::invalid_argument("softmax_crossentropy: expected " + std::to_string(b) +
                                " targets, got " + std::to_string(targets.size()));
  }
  for (size_t t : targets) {
    if (t >= k) {
      throw std::invalid_argument("softmax_crossentropy: class index " + std::to_string(t) +
                                  " out of range for " + std::to_string(k) + " classes");
    }
  }
  const bool want = tracked(logits);
  std::vector<double> probs(b * k);
  const double* pl = logits.data().data();
  double loss = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const double* row = pl + i * k;
    double mx = row[0];
    for (size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    loss -= std::log(probs[i * k + targets[i]]);
  }
  Tensor out = make_op_output({1}, want);
  out.raw_data()[0] = loss / static_cast<double>(b);
  check_finite("softmax_crossentropy", out.data());
  record(want, CeCtx{logits.impl(), out.impl(), std::move(probs), targets}, [](void* p) {
    auto* c = static_cast<CeCtx*>(p);
    const auto& go = c->out->grad;
    if (go.empty()) return;
    const size_t b = c->targets.size();
    const size_t k = c->softmax.size() / b;
    const double s = go[0] / static_cast<double>(b);
    auto& gl = grad_buf(c->logits);
    for (size_t i = 0; i < b; ++i) {
      for (size_t j = 0; j < k; ++j) {
        double g = c->softmax[i * k + j];
        if (j == c->targets[i]) g -= 1.0;
        gl[i * k + j] += s * g;
      }
    }
  });
  return out;
}

}  // namespace kplab
