#include "kplab/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "kplab/checkpoint.hpp"
#include "kplab/heatmap.hpp"
#include "kplab/report.hpp"
#include "kplab/rng.hpp"

namespace fs = std::filesystem;

namespace kplab {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Dataset: return "dataset";
    case Stage::Teacher: return "teacher";
    case Stage::Student: return "student";
    case Stage::Baseline: return "baseline";
    case Stage::Quantify: return "quantify";
    case Stage::Report: return "report";
  }
  return "?";
}

std::optional<Stage> parse_stage(const std::string& name) {
  for (Stage s : {Stage::Dataset, Stage::Teacher, Stage::Student, Stage::Baseline,
                  Stage::Quantify, Stage::Report}) {
    if (name == stage_name(s)) return s;
  }
  return std::nullopt;
}

ExperimentConfig::ExperimentConfig() {
  // Pipeline profile: cheaper than the oracle-grade QuantifierConfig
  // defaults; the knowledge-point threshold b = 0.2 tolerates far more sigma
  // noise than the closed-form recovery tests do.
  quant.seed = 3;
  quant.n_steps = 200;
  quant.avg_window = 100;
  quant.n_mc_delta = 128;
}

void ExperimentConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("config: data.classes must be >= 2");
  if (n_per_class < 1) throw std::invalid_argument("config: data.n_per_class must be >= 1");
  if (probe_size < 1) throw std::invalid_argument("config: data.probe_size must be >= 1");
  if (subset_fraction <= 0.0 || subset_fraction > 1.0) {
    throw std::invalid_argument("config: data.subset_fraction must be in (0,1]");
  }
  if (threshold_b < 0.0) throw std::invalid_argument("config: metrics.b must be >= 0");
  if (epoch_stride < 1) throw std::invalid_argument("config: metrics.epoch_stride must be >= 1");
  if (out_dir.empty()) throw std::invalid_argument("config: run.out_dir must be set");
  teacher_train_config().validate();
  baseline_train_config().validate();
  quant.validate();
  const ModelSpec spec = ModelSpec::desk_default(classes);
  distill_config().validate(spec, spec);
  grid().validate();
}

TrainConfig ExperimentConfig::teacher_train_config() const {
  return {teacher_epochs, teacher_batch, teacher_lr, teacher_momentum,
          mix_seed(model_seed, 0x74656163ULL)};  // "teac"
}

TrainConfig ExperimentConfig::baseline_train_config() const {
  return {baseline_epochs, baseline_batch, baseline_lr, baseline_momentum,
          mix_seed(model_seed, 0x62617365ULL)};  // "base"
}

DistillConfig ExperimentConfig::distill_config() const {
  DistillConfig d;
  d.tap = tap;
  d.phase1_epochs = phase1_epochs;
  d.phase1_lr = phase1_lr;
  d.phase2_epochs = phase2_epochs;
  d.phase2_lr = phase2_lr;
  d.batch_size = distill_batch;
  d.momentum = distill_momentum;
  d.seed = mix_seed(model_seed, 0x73747564ULL);  // "stud"
  return d;
}

GridGeometry ExperimentConfig::grid() const { return {32, 32, quant.grid_h, quant.grid_w}; }

namespace {

uint64_t to_u64(const std::string& v) { return std::strtoull(v.c_str(), nullptr, 10); }
size_t to_sz(const std::string& v) { return static_cast<size_t>(to_u64(v)); }
double to_f64(const std::string& v) { return std::strtod(v.c_str(), nullptr); }

}  // namespace

void ExperimentConfig::set_key(const std::string& key, const std::string& value) {
  if (key == "data.seed") data_seed = to_u64(value);
  else if (key == "data.n_per_class") n_per_class = to_sz(value);
  else if (key == "data.classes") classes = to_sz(value);
  else if (key == "data.probe_size") probe_size = to_sz(value);
  else if (key == "data.subset_fraction") subset_fraction = to_f64(value);
  else if (key == "model.seed") model_seed = to_u64(value);
  else if (key == "teacher.epochs") teacher_epochs = to_sz(value);
  else if (key == "teacher.batch") teacher_batch = to_sz(value);
  else if (key == "teacher.lr") teacher_lr = to_f64(value);
  else if (key == "teacher.momentum") teacher_momentum = to_f64(value);
  else if (key == "baseline.epochs") baseline_epochs = to_sz(value);
  else if (key == "baseline.batch") baseline_batch = to_sz(value);
  else if (key == "baseline.lr") baseline_lr = to_f64(value);
  else if (key == "baseline.momentum") baseline_momentum = to_f64(value);
  else if (key == "distill.tap") tap = value;
  else if (key == "distill.phase1_epochs") phase1_epochs = to_sz(value);
  else if (key == "distill.phase1_lr") phase1_lr = to_f64(value);
  else if (key == "distill.phase2_epochs") phase2_epochs = to_sz(value);
  else if (key == "distill.phase2_lr") phase2_lr = to_f64(value);
  else if (key == "distill.batch") distill_batch = to_sz(value);
  else if (key == "distill.momentum") distill_momentum = to_f64(value);
  else if (key == "quant.seed") quant.seed = to_u64(value);
  else if (key == "quant.alpha") quant.alpha = to_f64(value);
  else if (key == "quant.tau") quant.tau = to_f64(value);
  else if (key == "quant.n_mc_delta") quant.n_mc_delta = to_sz(value);
  else if (key == "quant.n_steps") quant.n_steps = to_sz(value);
  else if (key == "quant.n_mc_loss") quant.n_mc_loss = to_sz(value);
  else if (key == "quant.lr_sigma") quant.lr_sigma = to_f64(value);
  else if (key == "quant.sigma_init") quant.sigma_init = to_f64(value);
  else if (key == "quant.psi_min") quant.psi_min = to_f64(value);
  else if (key == "quant.psi_max") quant.psi_max = to_f64(value);
  else if (key == "quant.grid_h") quant.grid_h = to_sz(value);
  else if (key == "quant.grid_w") quant.grid_w = to_sz(value);
  else if (key == "quant.avg_window") quant.avg_window = to_sz(value);
  else if (key == "quant.n_mc_validation") quant.n_mc_validation = to_sz(value);
  else if (key == "quant.grad_clip") quant.grad_clip = to_f64(value);
  else if (key == "metrics.b") threshold_b = to_f64(value);
  else if (key == "metrics.epoch_stride") epoch_stride = to_sz(value);
  else if (key == "run.threads") threads = to_sz(value);
  else if (key == "run.out_dir") out_dir = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  ExperimentConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) {
      line.pop_back();
    }
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: missing '=' at " + path + ":" + std::to_string(lineno));
    }
    cfg.set_key(line.substr(start, eq - start), line.substr(eq + 1));
  }
  return cfg;
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::echo() const {
  auto u = [](uint64_t v) { return std::to_string(v); };
  return {
      {"data.seed", u(data_seed)},
      {"data.n_per_class", u(n_per_class)},
      {"data.classes", u(classes)},
      {"data.probe_size", u(probe_size)},
      {"data.subset_fraction", format_double(subset_fraction)},
      {"model.seed", u(model_seed)},
      {"teacher.epochs", u(teacher_epochs)},
      {"teacher.batch", u(teacher_batch)},
      {"teacher.lr", format_double(teacher_lr)},
      {"teacher.momentum", format_double(teacher_momentum)},
      {"baseline.epochs", u(baseline_epochs)},
      {"baseline.batch", u(baseline_batch)},
      {"baseline.lr", format_double(baseline_lr)},
      {"baseline.momentum", format_double(baseline_momentum)},
      {"distill.tap", tap},
      {"distill.phase1_epochs", u(phase1_epochs)},
      {"distill.phase1_lr", format_double(phase1_lr)},
      {"distill.phase2_epochs", u(phase2_epochs)},
      {"distill.phase2_lr", format_double(phase2_lr)},
      {"distill.batch", u(distill_batch)},
      {"distill.momentum", format_double(distill_momentum)},
      {"quant.seed", u(quant.seed)},
      {"quant.alpha", format_double(quant.alpha)},
      {"quant.tau", format_double(quant.tau)},
      {"quant.n_mc_delta", u(quant.n_mc_delta)},
      {"quant.n_steps", u(quant.n_steps)},
      {"quant.n_mc_loss", u(quant.n_mc_loss)},
      {"quant.lr_sigma", format_double(quant.lr_sigma)},
      {"quant.sigma_init", format_double(quant.sigma_init)},
      {"quant.psi_min", format_double(quant.psi_min)},
      {"quant.psi_max", format_double(quant.psi_max)},
      {"quant.grid_h", u(quant.grid_h)},
      {"quant.grid_w", u(quant.grid_w)},
      {"quant.avg_window", u(quant.avg_window)},
      {"quant.n_mc_validation", u(quant.n_mc_validation)},
      {"quant.grad_clip", format_double(quant.grad_clip)},
      {"metrics.b", format_double(threshold_b)},
      {"metrics.epoch_stride", u(epoch_stride)},
      {"run.threads", u(threads)},
      {"run.out_dir", out_dir},
  };
}

namespace {

struct ProbeSplit {
  LabeledDataset train_full;    // teacher data
  LabeledDataset train_subset;  // student/baseline data
  std::vector<MaskedSample> probe;
};

// Teacher trains on everything; student/baseline on the leading fraction of
// each class; the probe set is the per-class tail, disjoint from training.
ProbeSplit split_dataset(const MaskedDataset& data, const ExperimentConfig& cfg) {
  const size_t probe_per_class = (cfg.probe_size + cfg.classes - 1) / cfg.classes;
  const size_t per_class = data.samples.size() / cfg.classes;
  if (per_class <= probe_per_class) {
    throw std::invalid_argument("split_dataset: probe set would consume a whole class");
  }
  const size_t train_per_class = per_class - probe_per_class;
  const size_t subset_per_class = std::max<size_t>(
      1, static_cast<size_t>(std::floor(cfg.subset_fraction * train_per_class)));
  ProbeSplit split;
  for (size_t cls = 0; cls < cfg.classes; ++cls) {
    const size_t base = cls * per_class;
    for (size_t i = 0; i < train_per_class; ++i) {
      const MaskedSample& s = data.samples[base + i];
      split.train_full.push_back({s.image, s.label});
      if (i < subset_per_class) split.train_subset.push_back({s.image, s.label});
    }
    for (size_t i = train_per_class; i < per_class; ++i) {
      if (split.probe.size() < cfg.probe_size) split.probe.push_back(data.samples[base + i]);
    }
  }
  return split;
}

struct FitJob {
  std::string net;       // "student", "baseline", "teacher"
  size_t epoch = 0;      // 1-based
  size_t sample = 0;     // probe index
  uint64_t seed = 0;
  const std::vector<double>* weights = nullptr;
};

std::string fit_stem(const std::string& dir, const FitJob& job) {
  return dir + "/" + job.net + "_e" + std::to_string(job.epoch) + "_s" +
         std::to_string(job.sample);
}

// One sigma fit: skipped when its artifacts already exist on disk.
SigmaField run_fit(const FitJob& job, const ModelSpec& spec, const MaskedSample& sample,
                   const ExperimentConfig& cfg, const std::vector<uint8_t>& cell_mask,
                   const std::string& dir) {
  const std::string stem = fit_stem(dir, job);
  const std::string sigma_path = stem + "_sigma.csv";
  const std::string entropy_path = stem + "_entropy.csv";
  const std::string meta_path = stem + "_fit.txt";
  if (fs::exists(sigma_path) && fs::exists(meta_path)) {
    SigmaField field;
    read_fit_meta(meta_path, field);
    GridGeometry parsed;
    std::vector<uint8_t> fg;
    read_field_csv(sigma_path, parsed, field.sigma, fg);
    return field;
  }
  Model model = Model::init(spec, 0);
  model.set_flat_params(*job.weights);
  QuantifierConfig qc = cfg.quant;
  qc.seed = job.seed;
  SigmaField field = optimize_sigma(model_feature(model, cfg.tap), sample.image, qc, sample.id,
                                    cfg.tap);
  EntropyMap map = entropy_map(field, cell_mask);
  write_field_csv(sigma_path, field.grid, field.sigma, cell_mask, "sigma");
  write_field_csv(entropy_path, map.grid, map.entropy, cell_mask, "H");
  write_fit_meta(meta_path, field);
  return field;
}

template <typename Fn>
void run_stage(Stage stage, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    throw std::runtime_error("stage " + std::string(stage_name(stage)) + ": " + e.what());
  }
}

std::vector<size_t> evaluated_epochs(size_t total, size_t stride) {
  std::vector<size_t> epochs;
  for (size_t e = stride; e <= total; e += stride) epochs.push_back(e);
  if (epochs.empty() || epochs.back() != total) epochs.push_back(total);
  return epochs;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, std::optional<Stage> stop_after) {
  ExperimentConfig cfg = config;
  if (const char* env = std::getenv("KPLAB_OUT"); env && *env) cfg.out_dir = env;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/quant");
  fs::create_directories(cfg.out_dir + "/heatmaps");

  ExperimentResult result;
  const ModelSpec spec = ModelSpec::desk_default(cfg.classes);
  const GridGeometry grid = cfg.grid();

  MaskedDataset data;
  ProbeSplit split;
  run_stage(Stage::Dataset, [&] {
    data = gen_dataset(cfg.data_seed, cfg.n_per_class, cfg.classes, grid);
    split = split_dataset(data, cfg);
    if (split.probe.empty()) throw std::runtime_error("probe set is empty");
  });
  if (stop_after == Stage::Dataset) return result;

  CheckpointSeries teacher_series;
  Model teacher = Model::init(spec, 0);
  run_stage(Stage::Teacher, [&] {
    const std::string path = cfg.out_dir + "/teacher.kpchk";
    if (checkpoint_exists(path)) {
      teacher_series = load_checkpoints(path);
    } else {
      teacher_series = train(spec, split.train_full, cfg.teacher_train_config());
      save_checkpoints(path, teacher_series);
    }
    teacher.set_flat_params(teacher_series.weights.back());
    result.teacher_accuracy = accuracy(teacher, split.train_full);
  });
  if (stop_after == Stage::Teacher) return result;

  CheckpointSeries student_series;
  Model student_final = Model::init(spec, 0);
  run_stage(Stage::Student, [&] {
    const std::string p1 = cfg.out_dir + "/student_phase1.kpchk";
    const DistillConfig dcfg = cfg.distill_config();
    if (checkpoint_exists(p1)) {
      student_series = load_checkpoints(p1);
    } else {
      student_series = distill_phase1(teacher, spec, split.train_subset, dcfg);
      save_checkpoints(p1, student_series);
    }
    {
      Model s0 = Model::init(spec, 0);
      s0.set_flat_params(student_series.weights.front());
      result.phase1_initial_mse = feature_mse(teacher, s0, cfg.tap, split.train_subset);
      s0.set_flat_params(student_series.weights.back());
      result.phase1_final_mse = feature_mse(teacher, s0, cfg.tap, split.train_subset);
    }
    const std::string pf = cfg.out_dir + "/student_final.kpchk";
    if (checkpoint_exists(pf)) {
      CheckpointSeries fin = load_checkpoints(pf);
      student_final.set_flat_params(fin.weights.back());
      result.student_accuracy = fin.final_accuracy;
    } else {
      Model phase1 = Model::init(spec, 0);
      phase1.set_flat_params(student_series.weights.back());
      FinetuneResult fin = head_finetune(phase1, cfg.tap, split.train_subset, dcfg);
      student_final = fin.model;
      result.student_accuracy = fin.accuracy;
      CheckpointSeries snap;
      snap.kind = 2;
      snap.seed = dcfg.seed;
      snap.final_accuracy = fin.accuracy;
      snap.loss_curve = fin.loss_curve;
      snap.weights.push_back(fin.model.flat_params());
      save_checkpoints(pf, snap);
    }
  });
  if (stop_after == Stage::Student) return result;

  CheckpointSeries baseline_series;
  run_stage(Stage::Baseline, [&] {
    const std::string path = cfg.out_dir + "/baseline.kpchk";
    if (checkpoint_exists(path)) {
      baseline_series = load_checkpoints(path);
    } else {
      baseline_series = train(spec, split.train_subset, cfg.baseline_train_config());
      save_checkpoints(path, baseline_series);
    }
    Model b = Model::init(spec, 0);
    b.set_flat_params(baseline_series.weights.back());
    result.baseline_accuracy = accuracy(b, split.train_subset);
  });
  if (stop_after == Stage::Baseline) return result;

  const std::vector<size_t> student_epochs = evaluated_epochs(student_series.epochs(),
                                                              cfg.epoch_stride);
  const std::vector<size_t> baseline_epochs = evaluated_epochs(baseline_series.epochs(),
                                                               cfg.epoch_stride);
  std::vector<std::vector<uint8_t>> cell_masks;
  for (const MaskedSample& s : split.probe) {
    cell_masks.push_back(grid_reduced_mask(s.mask, grid));
  }

  // Per-fit seeds are derived, not threaded through a shared stream, so the
  // worker pool order cannot perturb results.
  std::vector<FitJob> jobs;
  auto job_seed = [&](uint64_t net_id, size_t epoch, size_t sample) {
    return mix_seed(mix_seed(cfg.quant.seed, net_id), epoch, sample);
  };
  for (size_t s = 0; s < split.probe.size(); ++s) {
    for (size_t e : student_epochs) {
      jobs.push_back({"student", e, s, job_seed(1, e, s), &student_series.weights[e]});
    }
    for (size_t e : baseline_epochs) {
      jobs.push_back({"baseline", e, s, job_seed(2, e, s), &baseline_series.weights[e]});
    }
    jobs.push_back({"teacher", teacher_series.epochs(), s,
                    job_seed(3, teacher_series.epochs(), s), &teacher_series.weights.back()});
  }

  std::map<std::string, SigmaField> fits;  // keyed by artifact stem
  run_stage(Stage::Quantify, [&] {
    size_t n_threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
    if (n_threads == 0) n_threads = 1;
    n_threads = std::min(n_threads, jobs.size());
    std::vector<SigmaField> out(jobs.size());
    std::vector<std::string> error;
    std::mutex error_mu;
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          out[i] = run_fit(jobs[i], spec, split.probe[jobs[i].sample], cfg,
                           cell_masks[jobs[i].sample], cfg.out_dir + "/quant");
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(error_mu);
          error.push_back(e.what());
          return;
        }
      }
    };
    if (n_threads <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    if (!error.empty()) throw std::runtime_error(error.front());
    for (size_t i = 0; i < jobs.size(); ++i) {
      fits.emplace(fit_stem("", jobs[i]), std::move(out[i]));
    }
  });
  if (stop_after == Stage::Quantify) return result;

  run_stage(Stage::Report, [&] {
    auto collect = [&](const std::string& net, const std::vector<size_t>& epochs,
                       std::vector<std::vector<EntropyMap>>& storage)
        -> std::vector<std::vector<const EntropyMap*>> {
      std::vector<std::vector<const EntropyMap*>> maps(split.probe.size());
      storage.assign(split.probe.size(), {});
      for (size_t s = 0; s < split.probe.size(); ++s) {
        storage[s].reserve(epochs.size());
        for (size_t e : epochs) {
          const SigmaField& field = fits.at(fit_stem("", FitJob{net, e, s}));
          storage[s].push_back(entropy_map(field, cell_masks[s]));
          maps[s].push_back(field.all_clamped_high ? nullptr : &storage[s].back());
        }
      }
      return maps;
    };
    std::vector<std::string> ids;
    for (const MaskedSample& s : split.probe) ids.push_back(s.id);

    std::vector<std::vector<EntropyMap>> student_maps, baseline_maps, teacher_maps;
    result.student = build_report("student", ids, student_epochs,
                                  collect("student", student_epochs, student_maps),
                                  student_series, cfg.threshold_b);
    result.baseline = build_report("baseline", ids, baseline_epochs,
                                   collect("baseline", baseline_epochs, baseline_maps),
                                   baseline_series, cfg.threshold_b);
    MetricsReport teacher_report =
        build_report("teacher", ids, {teacher_series.epochs()},
                     collect("teacher", {teacher_series.epochs()}, teacher_maps),
                     teacher_series, cfg.threshold_b);
    result.teacher_mean_n_fg = teacher_report.mean_n_fg;
    result.teacher_mean_n_bg = teacher_report.mean_n_bg;
    result.teacher_lambda = teacher_report.lambda;

    result.student_csv_path = cfg.out_dir + "/report_student.csv";
    result.baseline_csv_path = cfg.out_dir + "/report_baseline.csv";
    write_report_csv(result.student_csv_path, result.student);
    write_report_csv(result.baseline_csv_path, result.baseline);

    for (size_t s = 0; s < split.probe.size(); ++s) {
      emit_heatmap(student_maps[s].back(),
                   cfg.out_dir + "/heatmaps/student_s" + std::to_string(s) + ".pgm");
      emit_heatmap(baseline_maps[s].back(),
                   cfg.out_dir + "/heatmaps/baseline_s" + std::to_string(s) + ".pgm");
      emit_heatmap(teacher_maps[s].back(),
                   cfg.out_dir + "/heatmaps/teacher_s" + std::to_string(s) + ".pgm");
    }

    std::vector<std::pair<std::string, std::string>> extra = {
        {"teacher.mean_n_fg", format_double(result.teacher_mean_n_fg)},
        {"teacher.mean_n_bg", format_double(result.teacher_mean_n_bg)},
        {"teacher.lambda", format_double(result.teacher_lambda)},
        {"teacher.accuracy", format_double(result.teacher_accuracy)},
        {"student.accuracy", format_double(result.student_accuracy)},
        {"baseline.accuracy", format_double(result.baseline_accuracy)},
        {"student.phase1_initial_mse", format_double(result.phase1_initial_mse)},
        {"student.phase1_final_mse", format_double(result.phase1_final_mse)},
    };
    for (const auto& kv : cfg.echo()) extra.push_back(kv);
    result.summary_path = cfg.out_dir + "/summary.txt";
    write_summary(result.summary_path, {result.student, result.baseline}, extra);
  });
  return result;
}

}  // namespace kplab
