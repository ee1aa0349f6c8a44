#include "pimsm/analysis.hpp"
#include "pimsm/errors.hpp"
#include "pimsm/experiment.hpp"
#include "pimsm/hypernet.hpp"
#include "pimsm/scalemap.hpp"
#include "pimsm/spectral.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace pimsm;
using nlohmann::json;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--seed", c.seed, "single seed, overrides the config's seed list");
  sub->add_option("--out", c.out, "output path");
  sub->add_option("--preset", c.preset, "pimsm | single-scale | learnable-delta | random-delta");
}

experiment::ExperimentConfig load_config(const Common& c) {
  experiment::ExperimentConfig cfg;
  if (!c.config.empty()) cfg = experiment::ExperimentConfig::load(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.preset.empty()) cfg.presets = {msssm::preset_from_string(c.preset)};
  return cfg;
}

void write_json(const json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

signalgen::LabeledSequenceSet dataset_for(const Common& c, const std::string& data_dir) {
  if (!data_dir.empty()) return experiment::load_csv_dataset(data_dir);
  const auto cfg = load_config(c);
  return experiment::make_dataset(cfg.data, cfg.seeds.front());
}

int finish(const experiment::ResultBundle& b) {
  std::cout << b.summary.to_csv();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale state space models with spectrum-derived steps"};
  app.require_subcommand(1);

  Common common;
  std::string data_dir, fit_path, checkpoint, checkpoint_b, data_b;
  int K = 3;
  double w = 0.3;
  std::string mode = "per-band";
  double step = 1.0, f_min = 0.0, f_max = 0.5;
  Index window = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset as CSV files");
  add_common(synth, common);

  auto* fit = app.add_subcommand("fit-spectrum", "offline piecewise power-law fit of a dataset");
  add_common(fit, common);
  fit->add_option("--data", data_dir, "CSV dataset directory");
  fit->add_option("--K", K, "number of segments");
  fit->add_option("--f-min", f_min, "lowest frequency used (0 = 1/T)");
  fit->add_option("--f-max", f_max, "highest frequency used");

  auto* map = app.add_subcommand("map-delta", "map a spectral fit to ordered per-scale steps");
  add_common(map, common);
  map->add_option("--fit", fit_path, "fit JSON written by fit-spectrum")->required();
  map->add_option("--w", w, "within-band weight");
  map->add_option("--mode", mode, "per-band | global");
  map->add_option("--step", step, "acquisition step");

  auto* trn = app.add_subcommand("train", "train and evaluate per the config");
  add_common(trn, common);
  auto* pre = app.add_subcommand("pretrain", "masked reconstruction pretraining");
  add_common(pre, common);

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a CSV dataset");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--data", data_dir, "CSV dataset directory");
  eval->add_option("--window", window, "backbone input length (0 = full)");

  auto* drift = app.add_subcommand("drift", "full vs early-window representation drift");
  add_common(drift, common);
  drift->add_option("--checkpoint", checkpoint, "model for view A");
  drift->add_option("--checkpoint-b", checkpoint_b, "model for view B");
  drift->add_option("--data", data_dir, "CSV dataset directory");
  drift->add_option("--window", window, "view B input length (0 = ceil(T/8))");

  auto* kern = app.add_subcommand("kernel-study", "exponential-mixture approximation of power-law kernels");
  add_common(kern, common);
  auto* abl = app.add_subcommand("ablate", "sweep of the mixing weight and normalisation mode");
  add_common(abl, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) {
      const auto cfg = load_config(common);
      if (common.out.empty()) throw ParameterError("synth needs --out");
      const auto set = experiment::make_dataset(cfg.data, cfg.seeds.front());
      experiment::write_csv_dataset(set, common.out);
      std::cout << "wrote " << set.size() << " sequences to " << common.out << "\n";
      return kOk;
    }
    if (fit->parsed()) {
      const auto set = dataset_for(common, data_dir);
      const double lo = f_min > 0.0 ? f_min : 1.0 / static_cast<double>(set.length());
      std::vector<spectral::Spectrum> cons;
      json per = json::array();
      for (const auto& x : set.sequences) {
        std::vector<spectral::Spectrum> ch;
        for (Index c = 0; c < x.cols(); ++c) ch.push_back(spectral::periodogram(x, c, lo, f_max));
        cons.push_back(spectral::consensus_spectrum(ch));
        per.push_back(spectral::init_fit(cons.back(), K).to_json());
      }
      const auto pooled = spectral::consensus_spectrum(cons);
      const auto raw = spectral::init_fit(pooled, K);
      json j{{"fit", spectral::clamp_exponents(raw).to_json()},
             {"raw_fit", raw.to_json()},
             {"acquisition_step", set.acquisition_step},
             {"sequences", per}};
      write_json(j, common.out);
      return kOk;
    }
    if (map->parsed()) {
      const json j = read_json(fit_path);
      spectral::PiecewiseFit pf;
      try {
        pf = spectral::PiecewiseFit::from_json(j.contains("fit") ? j.at("fit") : j);
      } catch (const json::exception& e) {
        throw DataError(fit_path + ": " + e.what());
      }
      if (j.contains("acquisition_step") && map->count("--step") == 0) step = j.at("acquisition_step").get<double>();
      scalemap::MapOptions opts;
      opts.w = w;
      opts.mode = scalemap::mode_from_string(mode);
      const auto sa = scalemap::assign_scales(pf, opts, step);
      write_json(sa.to_json(), common.out);
      return kOk;
    }
    if (trn->parsed() || pre->parsed()) {
      auto cfg = load_config(common);
      if (pre->parsed()) cfg.task = experiment::Task::Pretrain;
      else if (cfg.task == experiment::Task::Pretrain) throw ParameterError("use the pretrain subcommand");
      return finish(experiment::run_experiment(cfg));
    }
    if (eval->parsed()) {
      const auto model = msssm::load_checkpoint(checkpoint);
      const auto set = dataset_for(common, data_dir);
      const auto prep = train::prepare(set, model.cfg.hyper, window);
      const auto ev = train::evaluate(model, prep);
      json j{{"metric", ev.metric}, {"task_loss", ev.task_loss}, {"n", prep.size()},
             {"metric_name", model.cfg.task == msssm::TaskKind::Classification ? "accuracy" : "mse"}};
      write_json(j, common.out);
      return kOk;
    }
    if (drift->parsed()) {
      if (!checkpoint.empty()) {
        const auto a = msssm::load_checkpoint(checkpoint);
        const auto b = checkpoint_b.empty() ? a : msssm::load_checkpoint(checkpoint_b);
        const auto set = dataset_for(common, data_dir);
        const Index W = window > 0 ? window : (set.length() + 7) / 8;
        const auto va = train::prepare(set, a.cfg.hyper, 0);
        const auto vb = train::prepare(set, b.cfg.hyper, W);
        auto rep = analysis::drift_report(a, va, b, vb).to_json();
        rep["window"] = W;
        write_json(rep, common.out);
        return kOk;
      }
      auto cfg = load_config(common);
      cfg.axis = experiment::Axis::Truncation;
      if (cfg.task != experiment::Task::Forecast) cfg.task = experiment::Task::Classify;
      if (window > 0) cfg.truncation_window = window;
      return finish(experiment::run_experiment(cfg));
    }
    if (kern->parsed()) {
      auto cfg = load_config(common);
      cfg.task = experiment::Task::KernelStudy;
      return finish(experiment::run_experiment(cfg));
    }
    if (abl->parsed()) {
      auto cfg = load_config(common);
      cfg.task = experiment::Task::Ablation;
      return finish(experiment::run_experiment(cfg));
    }
  } catch (const ParameterError& e) {
    std::cerr << "error (config): " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "error (data): " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "error (data): " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
