#pragma once

// Batch experiment harness: configuration, CSV datasets, the truncation,
// low-resource and ablation axes, and result bundles.

#include "pimsm/analysis.hpp"
#include "pimsm/signalgen.hpp"
#include "pimsm/train.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pimsm::experiment {

enum class Task { Classify, Forecast, Pretrain, KernelStudy, Ablation };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

enum class Axis { None, Truncation, LowResource };
std::string to_string(Axis a);
Axis axis_from_string(const std::string& s);

struct DatasetSource {
  std::string csv_dir;  // used when non-empty
  std::string generator = "two-timescale";  // two-timescale | colored-forecast
  nlohmann::json params = nlohmann::json::object();
};

struct ExperimentConfig {
  Task task = Task::Classify;
  Axis axis = Axis::None;
  DatasetSource data;
  std::vector<msssm::Preset> presets{msssm::Preset::Pimsm};
  train::TrainConfig train;
  bool auto_f_min = true;       // hypernet f_min = 1/T unless given
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  Index truncation_window = 0;  // 0 = ceil(T/8)
  std::vector<double> ratios{0.01, 0.05, 0.10, 1.0};
  std::vector<double> grid_w{0.0, 0.3, 0.5, 1.0};
  std::vector<scalemap::MapMode> grid_modes{scalemap::MapMode::PerBand, scalemap::MapMode::Global};
  double kernel_alpha = 2.0;
  std::vector<std::size_t> kernel_K{1, 2, 3, 4, 5};
  std::size_t kernel_restarts = 32;
  bool save_checkpoints = false;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

/// FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);
/// Build version string (git describe when available).
std::string version_string();

/// Directory of per-sequence CSVs (T rows, d comma-separated columns) and a
/// manifest.json with acquisition_step and a `sequences` array of
/// {file, label?, target_file?, split?} entries.
signalgen::LabeledSequenceSet load_csv_dataset(const std::string& dir);
void write_csv_dataset(const signalgen::LabeledSequenceSet& set, const std::string& dir);

/// Generated or loaded dataset for one seed.
signalgen::LabeledSequenceSet make_dataset(const DatasetSource& src, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train, val, test;
};
/// Class-stratified split when labels exist, seeded shuffle otherwise. A
/// `split` field in the dataset metadata overrides it.
Split make_split(const signalgen::LabeledSequenceSet& data, double val_fraction, double test_fraction,
                 std::uint64_t seed);

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  [[nodiscard]] std::string to_csv() const;
  [[nodiscard]] std::size_t column(const std::string& name) const;
  [[nodiscard]] double number(std::size_t row, const std::string& name) const;
};

struct ResultBundle {
  Table runs;     // one row per seed and condition
  Table summary;  // mean and std over seeds
  nlohmann::json provenance;
  nlohmann::json extra = nlohmann::json::object();
};

/// Runs the configured task and axis. Writes runs.csv, summary.csv and
/// bundle.json (plus per-run logs) into out_dir when it is set.
ResultBundle run_experiment(const ExperimentConfig& cfg);

/// Writes a bundle's files into `dir`.
void write_bundle(const ResultBundle& bundle, const std::string& dir);

}  // namespace pimsm::experiment
