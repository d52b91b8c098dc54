// kplab: train small classifiers, distill students from teachers at an
// intermediate layer, and quantify per-cell information discarding into
// knowledge-point metrics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "kplab/checkpoint.hpp"
#include "kplab/dataset.hpp"
#include "kplab/distill.hpp"
#include "kplab/experiment.hpp"
#include "kplab/heatmap.hpp"
#include "kplab/report.hpp"
#include "kplab/rng.hpp"

namespace fs = std::filesystem;
using namespace kplab;

namespace {

struct ConfigState {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// Every ExperimentConfig knob becomes a --key flag; a key=value file seeds
// the defaults and explicit flags win.
void add_config_options(CLI::App* cmd, ConfigState& state) {
  cmd->add_option("--config", state.config_file, "key=value config file");
  ExperimentConfig defaults;
  for (const auto& [key, value] : defaults.echo()) {
    cmd->add_option_function<std::string>(
           "--" + key,
           [&state, k = key](const std::string& v) { state.overrides.emplace_back(k, v); },
           "config key (default " + value + ")")
        ->type_name("VALUE");
  }
}

ExperimentConfig resolve_config(const ConfigState& state) {
  ExperimentConfig cfg;
  if (!state.config_file.empty()) cfg = ExperimentConfig::from_file(state.config_file);
  for (const auto& [key, value] : state.overrides) cfg.set_key(key, value);
  return cfg;
}

void write_image_pgm(const std::string& path, const Tensor& image) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path);
  const size_t h = image.shape()[1], w = image.shape()[2];
  std::fprintf(f, "P2\n%zu %zu\n255\n", w, h);
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      const int v = static_cast<int>(std::lround(255.0 * image.data()[y * w + x]));
      std::fprintf(f, "%d%c", std::clamp(v, 0, 255), x + 1 < w ? ' ' : '\n');
    }
  }
  std::fclose(f);
}

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  MaskedDataset data = gen_dataset(cfg.data_seed, cfg.n_per_class, cfg.classes, cfg.grid());
  std::FILE* labels = std::fopen((out + "/labels.csv").c_str(), "w");
  if (!labels) throw std::runtime_error("cannot open " + out + "/labels.csv");
  std::fprintf(labels, "id,label\n");
  for (const MaskedSample& s : data.samples) {
    write_image_pgm(out + "/" + s.id + ".pgm", s.image);
    std::vector<double> m(s.mask.begin(), s.mask.end());
    write_image_pgm(out + "/" + s.id + "_mask.pgm",
                    Tensor::from(s.image.shape(), std::move(m), false));
    std::fprintf(labels, "%s,%zu\n", s.id.c_str(), s.label);
  }
  std::fclose(labels);
  std::printf("wrote %zu samples to %s\n", data.samples.size(), out.c_str());
  return 0;
}

int cmd_run(const ExperimentConfig& cfg, const std::string& stop_after) {
  std::optional<Stage> stop;
  if (!stop_after.empty()) {
    stop = parse_stage(stop_after);
    if (!stop) throw std::runtime_error("unknown stage '" + stop_after + "'");
  }
  ExperimentResult r = run_experiment(cfg, stop);
  if (stop) {
    std::printf("stopped after stage %s\n", stop_after.c_str());
    return 0;
  }
  std::printf("teacher  acc=%.3f mean_n_fg=%.2f lambda=%.3f\n", r.teacher_accuracy,
              r.teacher_mean_n_fg, r.teacher_lambda);
  std::printf("student  acc=%.3f mean_n_fg=%.2f lambda=%.3f d_mean=%.3f d_var=%.3f rho=%.3f\n",
              r.student_accuracy, r.student.mean_n_fg, r.student.lambda, r.student.d_mean,
              r.student.d_var, r.student.mean_rho);
  std::printf("baseline acc=%.3f mean_n_fg=%.2f lambda=%.3f d_mean=%.3f d_var=%.3f rho=%.3f\n",
              r.baseline_accuracy, r.baseline.mean_n_fg, r.baseline.lambda, r.baseline.d_mean,
              r.baseline.d_var, r.baseline.mean_rho);
  std::printf("summary: %s\n", r.summary_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-point laboratory"};
  app.require_subcommand(1);

  ConfigState gen_state;
  std::string gen_out = "dataset_out";
  CLI::App* gen = app.add_subcommand("gen-data", "emit the synthetic dataset as PGM + labels");
  add_config_options(gen, gen_state);
  gen->add_option("--out", gen_out, "output directory");

  ConfigState train_state;
  std::string train_role = "teacher";
  CLI::App* tr = app.add_subcommand("train", "train one network from scratch and checkpoint it");
  add_config_options(tr, train_state);
  tr->add_option("--role", train_role, "teacher or baseline")
      ->check(CLI::IsMember({"teacher", "baseline"}));

  ConfigState distill_state;
  CLI::App* di = app.add_subcommand(
      "distill", "distill a student from an existing teacher checkpoint (both phases)");
  add_config_options(di, distill_state);

  ConfigState probe_state;
  std::string probe_checkpoint;
  size_t probe_epoch = 0, probe_sample = 0;
  std::string probe_out = "probe";
  CLI::App* pr = app.add_subcommand("probe", "fit sigma for one probe sample at one checkpoint");
  add_config_options(pr, probe_state);
  pr->add_option("--checkpoint", probe_checkpoint, "KPCHK1 file")->required();
  pr->add_option("--epoch", probe_epoch, "epoch snapshot to probe (default: last)");
  pr->add_option("--sample", probe_sample, "probe-set index");
  pr->add_option("--out", probe_out, "output stem");

  ConfigState metrics_state;
  CLI::App* me = app.add_subcommand(
      "metrics", "rebuild reports from existing artifacts (resumes missing stages)");
  add_config_options(me, metrics_state);

  ConfigState run_state;
  std::string stop_after;
  CLI::App* ru = app.add_subcommand("run", "full pipeline: train, distill, quantify, report");
  add_config_options(ru, run_state);
  ru->add_option("--stop-after", stop_after,
                 "end after this stage (dataset|teacher|student|baseline|quantify|report)");

  std::string hm_in, hm_out = "heatmap.pgm";
  CLI::App* hm = app.add_subcommand("heatmap", "convert an entropy CSV to a PGM heatmap");
  hm->add_option("--in", hm_in, "entropy CSV")->required();
  hm->add_option("--out", hm_out, "output PGM path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(resolve_config(gen_state), gen_out);

    if (tr->parsed()) {
      ExperimentConfig cfg = resolve_config(train_state);
      const Stage stop = train_role == "teacher" ? Stage::Teacher : Stage::Baseline;
      run_experiment(cfg, stop);
      std::printf("wrote %s/%s.kpchk\n", cfg.out_dir.c_str(), train_role.c_str());
      return 0;
    }

    if (di->parsed()) {
      ExperimentConfig cfg = resolve_config(distill_state);
      run_experiment(cfg, Stage::Student);
      std::printf("wrote %s/student_phase1.kpchk and %s/student_final.kpchk\n",
                  cfg.out_dir.c_str(), cfg.out_dir.c_str());
      return 0;
    }

    if (pr->parsed()) {
      ExperimentConfig cfg = resolve_config(probe_state);
      CheckpointSeries series = load_checkpoints(probe_checkpoint);
      const size_t epoch = probe_epoch ? probe_epoch : series.epochs();
      MaskedDataset data = gen_dataset(cfg.data_seed, cfg.n_per_class, cfg.classes, cfg.grid());
      // probe samples are the per-class tail, as in the run pipeline
      const size_t probe_per_class = (cfg.probe_size + cfg.classes - 1) / cfg.classes;
      const size_t per_class = data.samples.size() / cfg.classes;
      std::vector<const MaskedSample*> probe;
      for (size_t cls = 0; cls < cfg.classes && probe.size() < cfg.probe_size; ++cls) {
        for (size_t i = per_class - probe_per_class; i < per_class; ++i) {
          if (probe.size() < cfg.probe_size) probe.push_back(&data.samples[cls * per_class + i]);
        }
      }
      if (probe_sample >= probe.size()) {
        throw std::runtime_error("probe sample index out of range");
      }
      const MaskedSample& sample = *probe[probe_sample];
      Model model = Model::init(ModelSpec::desk_default(cfg.classes), 0);
      model.set_flat_params(series.at_epoch(epoch));
      QuantifierConfig qc = cfg.quant;
      qc.seed = mix_seed(cfg.quant.seed, epoch, probe_sample);
      SigmaField field =
          optimize_sigma(model_feature(model, cfg.tap), sample.image, qc, sample.id, cfg.tap);
      const auto cells = grid_reduced_mask(sample.mask, cfg.grid());
      EntropyMap map = entropy_map(field, cells);
      write_field_csv(probe_out + "_sigma.csv", field.grid, field.sigma, cells, "sigma");
      write_field_csv(probe_out + "_entropy.csv", map.grid, map.entropy, cells, "H");
      write_fit_meta(probe_out + "_fit.txt", field);
      emit_heatmap(map, probe_out + ".pgm");
      std::printf("sample %s epoch %zu: delta_f2=%.6g loss %.4f -> %.4f%s\n", sample.id.c_str(),
                  epoch, field.delta_f2, field.loss_initial, field.loss_final,
                  field.all_clamped_high ? " (degenerate: all cells clamped)" : "");
      return 0;
    }

    if (me->parsed()) return cmd_run(resolve_config(metrics_state), "");
    if (ru->parsed()) return cmd_run(resolve_config(run_state), stop_after);

    if (hm->parsed()) {
      GridGeometry grid;
      EntropyMap map;
      read_field_csv(hm_in, grid, map.entropy, map.cell_foreground);
      map.grid = {grid.img_h, grid.img_w, 1, 1};  // cells are already cells
      emit_heatmap(map, hm_out);
      std::printf("wrote %s\n", hm_out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
