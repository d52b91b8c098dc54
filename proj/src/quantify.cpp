#include "kplab/quantify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "kplab/rng.hpp"

namespace kplab {

void QuantifierConfig::validate() const {
  if (alpha <= 0.0) throw std::invalid_argument("QuantifierConfig: alpha must be positive");
  if (n_mc_delta < 2) throw std::invalid_argument("QuantifierConfig: n_mc_delta must be >= 2");
  if (n_steps < 1) throw std::invalid_argument("QuantifierConfig: n_steps must be >= 1");
  if (n_mc_loss < 1) throw std::invalid_argument("QuantifierConfig: n_mc_loss must be >= 1");
  if (lr_sigma <= 0.0) throw std::invalid_argument("QuantifierConfig: lr_sigma must be positive");
  if (sigma_init <= 0.0) {
    throw std::invalid_argument("QuantifierConfig: sigma_init must be positive");
  }
  const double psi0 = std::log(sigma_init);
  if (!(psi_min < psi0 && psi0 < psi_max)) {
    throw std::invalid_argument("QuantifierConfig: log(sigma_init) must lie inside psi bounds");
  }
  if (avg_window > n_steps) {
    throw std::invalid_argument("QuantifierConfig: avg_window cannot exceed n_steps");
  }
  if (grid_h == 0 || grid_w == 0) {
    throw std::invalid_argument("QuantifierConfig: grid cell size must be positive");
  }
}

FeatureFn model_feature(const Model& model, const std::string& tap) {
  model.spec.tap_layer(tap);  // fail fast on unknown taps
  auto frozen = std::make_shared<Model>(Model::init(model.spec, 0));
  frozen->set_flat_params(model.flat_params());
  for (Tensor& p : frozen->params) p.impl()->requires_grad = false;
  return [frozen, tap](const Tensor& x) { return extract_feature(*frozen, tap, x); };
}

namespace {

double input_std(const Tensor& x) {
  const auto& v = x.data();
  double mean = 0.0;
  for (double a : v) mean += a;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double a : v) var += (a - mean) * (a - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

double effective_tau(const QuantifierConfig& cfg, const Tensor& x) {
  if (cfg.tau > 0.0) return cfg.tau;
  return 0.01 * input_std(x);
}

// Lagrangian of the perturbation objective for a given noise set; sigma is
// broadcast cell -> pixel, entropy term summed over cells.
double lagrangian_at(const FeatureFn& feature, const Tensor& x, const Tensor& f_star,
                     const std::vector<double>& sigma_cells, const GridGeometry& grid,
                     const std::vector<std::vector<double>>& noise, double delta_f2,
                     double alpha) {
  const size_t channels = x.shape()[0];
  Tensor sig = Tensor::from({grid.cell_count()}, sigma_cells, false);
  Tensor sig_pix = expand_cells(sig, channels, grid.img_h, grid.img_w, grid.cell_h, grid.cell_w);
  double feat = 0.0;
  for (const auto& draw : noise) {
    Tensor delta = Tensor::from(x.shape(), draw, false);
    Tensor xp = add(x, mul(sig_pix, delta));
    Tensor d = sub(feature(xp), f_star);
    feat += sum(mul(d, d)).value();
  }
  feat /= static_cast<double>(noise.size()) * delta_f2;
  double entropy = 0.0;
  for (double s : sigma_cells) entropy += std::log(s) + gaussian_entropy_const();
  return feat - alpha * entropy;
}

}  // namespace

double estimate_delta_f2(const FeatureFn& feature, const Tensor& x, double tau, size_t n,
                         uint64_t seed) {
  if (tau <= 0.0) throw std::invalid_argument("estimate_delta_f2: tau must be positive");
  if (n < 2) throw std::invalid_argument("estimate_delta_f2: need at least 2 draws");
  Tensor f_star = feature(x);
  Rng rng(mix_seed(seed, 0x64663273ULL));  // "df2s"
  std::vector<double> draw(x.size());
  double acc = 0.0;
  for (size_t k = 0; k < n; ++k) {
    rng.fill_normal(draw);
    std::vector<double> xp = x.data();
    for (size_t i = 0; i < xp.size(); ++i) xp[i] += tau * draw[i];
    Tensor fx = feature(Tensor::from(x.shape(), std::move(xp), false));
    const auto& a = fx.data();
    const auto& b = f_star.data();
    double d2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      d2 += d * d;
    }
    acc += d2;
  }
  const double result = acc / static_cast<double>(n);
  if (result <= 0.0) {
    throw DegenerateFeatureError(
        "estimate_delta_f2: feature is locally constant; the quantifier cannot normalize by it");
  }
  return result;
}

SigmaField optimize_sigma(const FeatureFn& feature, const Tensor& x, const QuantifierConfig& cfg,
                          const std::string& sample_id, const std::string& tap) {
  cfg.validate();
  if (x.ndim() != 3) {
    throw std::invalid_argument("optimize_sigma: input must be [c,h,w], got " +
                                shape_str(x.shape()));
  }
  GridGeometry grid{x.shape()[1], x.shape()[2], cfg.grid_h, cfg.grid_w};
  grid.validate();
  const size_t cells = grid.cell_count();
  const size_t channels = x.shape()[0];

  const double tau = effective_tau(cfg, x);
  const double delta_f2 =
      estimate_delta_f2(feature, x, tau, cfg.n_mc_delta, mix_seed(cfg.seed, 0x64656c66ULL));

  Tensor f_star = feature(x);

  // Fixed validation noise, independent of the optimization stream, so the
  // loss-decrease check is not confounded by the per-step MC variance.
  std::vector<std::vector<double>> validation(cfg.n_mc_validation,
                                              std::vector<double>(x.size()));
  {
    Rng vrng(mix_seed(cfg.seed, 0x76616c69ULL));  // "vali"
    for (auto& draw : validation) vrng.fill_normal(draw);
  }

  std::vector<double> psi(cells, std::log(cfg.sigma_init));
  SigmaField field;
  field.grid = grid;
  field.sample_id = sample_id;
  field.tap = tap;
  field.delta_f2 = delta_f2;
  {
    std::vector<double> sigma0(cells, cfg.sigma_init);
    field.loss_initial =
        lagrangian_at(feature, x, f_star, sigma0, grid, validation, delta_f2, cfg.alpha);
  }

  Rng step_rng(mix_seed(cfg.seed, 0x73746570ULL));  // "step"
  std::vector<double> sigma_avg(cells, 0.0);
  size_t averaged = 0;
  std::vector<double> draw(x.size());

  for (size_t step = 1; step <= cfg.n_steps; ++step) {
    try {
      Tape tape;
      Tensor psi_t = Tensor::from({cells}, psi, true);
      Tensor sig_pix = expand_cells(exp_elem(psi_t), channels, grid.img_h, grid.img_w,
                                    grid.cell_h, grid.cell_w);
      Tensor feat_acc;
      for (size_t k = 0; k < cfg.n_mc_loss; ++k) {
        step_rng.fill_normal(draw);
        Tensor delta = Tensor::from(x.shape(), draw, false);
        Tensor xp = add(x, mul(sig_pix, delta));
        Tensor d = sub(feature(xp), f_star);
        Tensor sq = sum(mul(d, d));
        feat_acc = feat_acc.defined() ? add(feat_acc, sq) : sq;
      }
      Tensor loss = sub(scale(feat_acc, 1.0 / (static_cast<double>(cfg.n_mc_loss) * delta_f2)),
                        scale(sum(psi_t), cfg.alpha));
      if (!std::isfinite(loss.value())) {
        throw std::runtime_error("non-finite loss");
      }
      backward(loss);

      const std::vector<double>* g = psi_t.grad();
      double norm = 0.0;
      for (double v : *g) norm += v * v;
      norm = std::sqrt(norm);
      const double clip = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
      for (size_t i = 0; i < cells; ++i) {
        psi[i] -= cfg.lr_sigma * clip * (*g)[i];
        psi[i] = std::clamp(psi[i], cfg.psi_min, cfg.psi_max);
      }
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("optimize_sigma: " + std::string(e.what()) + " at iteration " +
                               std::to_string(step));
    }
    if (step > cfg.n_steps - cfg.avg_window) {
      for (size_t i = 0; i < cells; ++i) sigma_avg[i] += std::exp(psi[i]);
      ++averaged;
    }
  }

  field.sigma.resize(cells);
  if (averaged == 0) {
    for (size_t i = 0; i < cells; ++i) field.sigma[i] = std::exp(psi[i]);
  } else {
    for (size_t i = 0; i < cells; ++i) field.sigma[i] = sigma_avg[i] / averaged;
  }
  field.all_clamped_high = true;
  for (double p : psi) {
    if (p < cfg.psi_max - 1e-12) {
      field.all_clamped_high = false;
      break;
    }
  }
  field.loss_final =
      lagrangian_at(feature, x, f_star, field.sigma, grid, validation, delta_f2, cfg.alpha);
  return field;
}

EntropyMap entropy_map(const SigmaField& field, const std::vector<uint8_t>& cell_foreground) {
  if (cell_foreground.size() != field.grid.cell_count()) {
    throw std::invalid_argument("entropy_map: mask has " +
                                std::to_string(cell_foreground.size()) + " cells, field has " +
                                std::to_string(field.grid.cell_count()));
  }
  EntropyMap map;
  map.grid = field.grid;
  map.sample_id = field.sample_id;
  map.tap = field.tap;
  map.cell_foreground = cell_foreground;
  map.entropy.resize(field.sigma.size());
  for (size_t i = 0; i < field.sigma.size(); ++i) {
    map.entropy[i] = std::log(field.sigma[i]) + gaussian_entropy_const();
  }
  return map;
}

void write_field_csv(const std::string& path, const GridGeometry& grid,
                     const std::vector<double>& values, const std::vector<uint8_t>& foreground,
                     const std::string& value_name) {
  if (values.size() != grid.cell_count() || foreground.size() != grid.cell_count()) {
    throw std::invalid_argument("write_field_csv: value/mask size does not match the grid");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_field_csv: cannot open " + path);
  f << "cell_row,cell_col," << value_name << ",is_foreground\n";
  char num[40];
  for (size_t r = 0; r < grid.cells_h(); ++r) {
    for (size_t c = 0; c < grid.cells_w(); ++c) {
      const size_t i = r * grid.cells_w() + c;
      std::snprintf(num, sizeof(num), "%.17g", values[i]);
      f << r << "," << c << "," << num << "," << (foreground[i] ? 1 : 0) << "\n";
    }
  }
  if (!f) throw std::runtime_error("write_field_csv: write failed for " + path);
}

void read_field_csv(const std::string& path, GridGeometry& grid, std::vector<double>& values,
                    std::vector<uint8_t>& foreground) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_field_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("read_field_csv: empty file " + path);
  values.clear();
  foreground.clear();
  size_t max_row = 0, max_col = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    size_t row, col;
    double value;
    int fg;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%d", &row, &col, &value, &fg) != 4) {
      throw std::runtime_error("read_field_csv: malformed row in " + path);
    }
    max_row = std::max(max_row, row);
    max_col = std::max(max_col, col);
    values.push_back(value);
    foreground.push_back(fg ? 1 : 0);
  }
  if (values.size() != (max_row + 1) * (max_col + 1)) {
    throw std::runtime_error("read_field_csv: grid is not dense in " + path);
  }
  // Cell pixel size is carried by the fit meta; callers overwrite as needed.
  grid.img_h = max_row + 1;
  grid.img_w = max_col + 1;
  grid.cell_h = 1;
  grid.cell_w = 1;
}

void write_fit_meta(const std::string& path, const SigmaField& field) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_fit_meta: cannot open " + path);
  char num[40];
  f << "sample_id=" << field.sample_id << "\n";
  f << "tap=" << field.tap << "\n";
  std::snprintf(num, sizeof(num), "%.17g", field.delta_f2);
  f << "delta_f2=" << num << "\n";
  std::snprintf(num, sizeof(num), "%.17g", field.loss_initial);
  f << "loss_initial=" << num << "\n";
  std::snprintf(num, sizeof(num), "%.17g", field.loss_final);
  f << "loss_final=" << num << "\n";
  f << "all_clamped_high=" << (field.all_clamped_high ? 1 : 0) << "\n";
  f << "cell_h=" << field.grid.cell_h << "\n";
  f << "cell_w=" << field.grid.cell_w << "\n";
  f << "img_h=" << field.grid.img_h << "\n";
  f << "img_w=" << field.grid.img_w << "\n";
}

void read_fit_meta(const std::string& path, SigmaField& field) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_fit_meta: cannot open " + path);
  std::string line;
  while (std::getline(f, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "sample_id") field.sample_id = val;
    else if (key == "tap") field.tap = val;
    else if (key == "delta_f2") field.delta_f2 = std::strtod(val.c_str(), nullptr);
    else if (key == "loss_initial") field.loss_initial = std::strtod(val.c_str(), nullptr);
    else if (key == "loss_final") field.loss_final = std::strtod(val.c_str(), nullptr);
    else if (key == "all_clamped_high") field.all_clamped_high = (val == "1");
    else if (key == "cell_h") field.grid.cell_h = std::strtoul(val.c_str(), nullptr, 10);
    else if (key == "cell_w") field.grid.cell_w = std::strtoul(val.c_str(), nullptr, 10);
    else if (key == "img_h") field.grid.img_h = std::strtoul(val.c_str(), nullptr, 10);
    else if (key == "img_w") field.grid.img_w = std::strtoul(val.c_str(), nullptr, 10);
  }
}

}  // namespace kplab
