#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kplab/nn.hpp"
#include "kplab/tensor.hpp"

namespace kplab {

// 0.5 * log(2*pi*e), the per-cell entropy offset of a unit-variance Gaussian.
inline double gaussian_entropy_const() { return 0.5 * std::log(2.0 * 3.14159265358979323846 * std::exp(1.0)); }

class DegenerateFeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GridGeometry {
  size_t img_h = 0, img_w = 0;
  size_t cell_h = 0, cell_w = 0;

  size_t cells_h() const { return img_h / cell_h; }
  size_t cells_w() const { return img_w / cell_w; }
  size_t cell_count() const { return cells_h() * cells_w(); }

  void validate() const {
    if (cell_h == 0 || cell_w == 0 || img_h == 0 || img_w == 0 || img_h % cell_h != 0 ||
        img_w % cell_w != 0) {
      throw std::invalid_argument("GridGeometry: cell size must divide the image extents");
    }
  }
  bool operator==(const GridGeometry&) const = default;
};

struct QuantifierConfig {
  double alpha = 1.0;
  double tau = 0.0;          // <= 0 selects 0.01 * std(input)
  size_t n_mc_delta = 256;   // draws for the feature-variance estimate
  size_t n_steps = 600;
  size_t n_mc_loss = 8;      // fresh perturbation draws per step
  double lr_sigma = 0.05;
  double sigma_init = 0.1;
  double psi_min = std::log(1e-4);
  double psi_max = std::log(1e2);
  size_t grid_h = 4, grid_w = 4;  // cell size in pixels
  size_t avg_window = 400;   // sigma readout averages exp(psi) over this tail
  size_t n_mc_validation = 64;
  double grad_clip = 10.0;
  uint64_t seed = 0;

  void validate() const;
};

// Per-cell perturbation scales fitted for one sample at one tap, plus the
// quantities needed to audit the fit.
struct SigmaField {
  GridGeometry grid;
  std::vector<double> sigma;  // row-major cells, input units
  std::string sample_id;
  std::string tap;
  double delta_f2 = 0.0;
  double loss_initial = 0.0;  // fixed validation noise set
  double loss_final = 0.0;
  bool all_clamped_high = false;
};

struct EntropyMap {
  GridGeometry grid;
  std::vector<double> entropy;
  std::vector<uint8_t> cell_foreground;
  std::string sample_id;
  std::string tap;
};

// A frozen feature extractor; called under whatever tape is active.
using FeatureFn = std::function<Tensor(const Tensor&)>;

// Deep-copies the parameters with gradients disabled so concurrent fits
// never share gradient buffers.
FeatureFn model_feature(const Model& model, const std::string& tap);

// Monte-Carlo estimate of E |f(x + tau*delta) - f(x)|^2, delta ~ N(0,I).
// Throws DegenerateFeatureError when the feature is locally constant.
double estimate_delta_f2(const FeatureFn& feature, const Tensor& x, double tau, size_t n,
                         uint64_t seed);

// Gradient descent on psi = log sigma for
//   Loss = E|f(x + sigma o delta) - f*|^2 / delta_f2 - alpha * sum_i H_i,
// one sigma per grid cell shared by its pixels, noise i.i.d. per pixel.
SigmaField optimize_sigma(const FeatureFn& feature, const Tensor& x, const QuantifierConfig& cfg,
                          const std::string& sample_id = "", const std::string& tap = "");

// H_i = log sigma_i + 0.5*log(2*pi*e) per cell; mask marks foreground cells.
EntropyMap entropy_map(const SigmaField& field, const std::vector<uint8_t>& cell_foreground);

// CSV with header (cell_row, cell_col, <value_name>, is_foreground).
void write_field_csv(const std::string& path, const GridGeometry& grid,
                     const std::vector<double>& values, const std::vector<uint8_t>& foreground,
                     const std::string& value_name);
void read_field_csv(const std::string& path, GridGeometry& grid, std::vector<double>& values,
                    std::vector<uint8_t>& foreground);

// Sidecar key=value audit record for a fit (delta_f2, losses, clamp flag).
void write_fit_meta(const std::string& path, const SigmaField& field);
void read_fit_meta(const std::string& path, SigmaField& field);

}  // namespace kplab
