#pragma once

// Shared test helpers: the finite-difference gradient oracle and small
// graph/model builders. Test-only; nothing here is part of the library.

#include <cmath>
#include <functional>
#include <vector>

#include "kplab/rng.hpp"
#include "kplab/tensor.hpp"

namespace kptest {

// Max relative error between reverse-mode gradients and central finite
// differences (step 1e-5) over every element of every leaf. The loss
// builder must read the leaves' current data each call.
inline double max_rel_grad_error(const std::function<kplab::Tensor()>& loss_fn,
                                 std::vector<kplab::Tensor>& leaves, double step = 1e-5) {
  using namespace kplab;
  for (Tensor& l : leaves) l.clear_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    backward(loss);
    for (Tensor& l : leaves) {
      const std::vector<double>* g = l.grad();
      analytic.push_back(g ? *g : std::vector<double>(l.size(), 0.0));
    }
  }
  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li].raw_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double up = loss_fn().value();
      data[i] = keep - step;
      const double down = loss_fn().value();
      data[i] = keep;
      const double fd = (up - down) / (2.0 * step);
      const double ad = analytic[li][i];
      const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline kplab::Tensor random_tensor(const std::vector<size_t>& shape, kplab::Rng& rng,
                                   bool requires_grad, double scale = 1.0) {
  std::vector<double> data(kplab::shape_size(shape));
  for (double& v : data) v = rng.normal() * scale;
  return kplab::Tensor::from(shape, std::move(data), requires_grad);
}

}  // namespace kptest
