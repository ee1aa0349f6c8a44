#include "pimsm/experiment.hpp"

#include "pimsm/errors.hpp"
#include "pimsm/hypernet.hpp"
#include "pimsm/rng.hpp"
#include "pimsm/scalemap.hpp"
#include "pimsm/spectral.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#ifndef PIMSM_VERSION
#define PIMSM_VERSION "0.1.0"
#endif

namespace pimsm::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Task t) {
  switch (t) {
    case Task::Classify: return "classify";
    case Task::Forecast: return "forecast";
    case Task::Pretrain: return "pretrain";
    case Task::KernelStudy: return "kernel-study";
    case Task::Ablation: return "ablation";
  }
  return "classify";
}

Task task_from_string(const std::string& s) {
  if (s == "classify") return Task::Classify;
  if (s == "forecast") return Task::Forecast;
  if (s == "pretrain") return Task::Pretrain;
  if (s == "kernel-study") return Task::KernelStudy;
  if (s == "ablation") return Task::Ablation;
  throw ParameterError("unknown task '" + s + "'");
}

std::string to_string(Axis a) {
  switch (a) {
    case Axis::None: return "none";
    case Axis::Truncation: return "truncation";
    case Axis::LowResource: return "low-resource";
  }
  return "none";
}

Axis axis_from_string(const std::string& s) {
  if (s == "none") return Axis::None;
  if (s == "truncation") return Axis::Truncation;
  if (s == "low-resource") return Axis::LowResource;
  throw ParameterError("unknown axis '" + s + "'");
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

Matrix read_csv_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0, width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_line(line);
    std::vector<double> vals(cells.size());
    bool numeric = true;
    for (std::size_t c = 0; c < cells.size(); ++c) numeric = numeric && parse_double(cells[c], vals[c]);
    if (line_no == 1 && !numeric) {
      width = cells.size();
      continue;
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": ragged row (row " +
                      std::to_string(rows.size()) + " has " + std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(width) + ")");
    for (std::size_t c = 0; c < cells.size(); ++c)
      if (!parse_double(cells[c], vals[c]))
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": non-numeric cell '" + cells[c] +
                        "' in row " + std::to_string(rows.size()) + ", column " + std::to_string(c));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw DataError(path.string() + ": no data rows");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < width; ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  return m;
}

void write_csv_matrix(const Matrix& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << 'c' << c;
  out << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << fmt17(m(r, c));
    out << '\n';
  }
}

const json& field(const json& j, const std::string& name, const std::string& where) {
  if (!j.is_object() || !j.contains(name)) throw DataError(where + ": missing field '" + name + "'");
  return j.at(name);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// Per-column standardisation of x, with the same affine map applied to y.
void standardize_pair(Matrix& x, Matrix* y) {
  for (Index c = 0; c < x.cols(); ++c) {
    const double mu = x.col(c).mean();
    const double sd = std::sqrt((x.col(c).array() - mu).square().mean());
    const double scale = sd > 0.0 ? sd : 1.0;
    x.col(c) = ((x.col(c).array() - mu) / scale).matrix();
    if (y != nullptr && y->size() > 0) y->col(c) = ((y->col(c).array() - mu) / scale).matrix();
  }
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ParameterError("seeds must be nonempty");
  if (presets.empty()) throw ParameterError("presets must be nonempty");
  if (!data.csv_dir.empty() && !fs::is_directory(data.csv_dir))
    throw IoError("dataset directory not found: " + data.csv_dir);
  if (data.csv_dir.empty() && data.generator != "two-timescale" && data.generator != "colored-forecast")
    throw ParameterError("unknown generator '" + data.generator + "'");
  if (!(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0))
    throw ParameterError("val_fraction and test_fraction must be positive with sum below 1");
  if (truncation_window < 0) throw ParameterError("truncation_window must be nonnegative");
  for (const double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw ParameterError("ratios must lie in (0, 1]");
  if (axis == Axis::LowResource && ratios.empty()) throw ParameterError("ratios must be nonempty");
  for (const double w : grid_w)
    if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("ablation w must lie in [0, 1]");
  if (task == Task::Ablation && (grid_w.empty() || grid_modes.empty()))
    throw ParameterError("ablation grid must be nonempty");
  if (task == Task::KernelStudy) {
    if (!(kernel_alpha > 1.0)) throw ParameterError("kernel alpha must exceed 1");
    if (kernel_K.empty() || kernel_restarts == 0) throw ParameterError("kernel K list and restarts must be nonempty");
  }
  if (task == Task::Forecast && data.csv_dir.empty() && data.generator != "colored-forecast")
    throw ParameterError("forecast task needs the colored-forecast generator or a CSV set with targets");
  train.weights.validate();
  for (const auto p : presets) {
    auto m = train.model;
    m.preset = p;
    m.validate();
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["task"] = to_string(task);
  j["axis"] = to_string(axis);
  json d;
  if (!data.csv_dir.empty()) d["csv_dir"] = data.csv_dir;
  else {
    d["generator"] = data.generator;
    d["params"] = data.params;
  }
  j["dataset"] = d;
  json ps = json::array();
  for (const auto p : presets) ps.push_back(msssm::to_string(p));
  j["presets"] = ps;
  j["train"] = train.to_json();
  j["auto_f_min"] = auto_f_min;
  j["seeds"] = seeds;
  j["out"] = out_dir;
  j["val_fraction"] = val_fraction;
  j["test_fraction"] = test_fraction;
  j["truncation_window"] = truncation_window;
  j["ratios"] = ratios;
  json modes = json::array();
  for (const auto m : grid_modes) modes.push_back(scalemap::to_string(m));
  j["ablation"] = {{"w", grid_w}, {"modes", modes}};
  j["kernel"] = {{"alpha", kernel_alpha}, {"K", kernel_K}, {"restarts", kernel_restarts}};
  j["save_checkpoints"] = save_checkpoints;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  if (!j.is_object()) throw ParameterError("experiment config must be a JSON object");
  try {
    c.task = task_from_string(j.value("task", std::string("classify")));
    c.axis = axis_from_string(j.value("axis", std::string("none")));
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.data.csv_dir = d.value("csv_dir", std::string());
      c.data.generator = d.value("generator", c.data.generator);
      if (d.contains("params")) c.data.params = d.at("params");
    }
    if (j.contains("presets")) {
      c.presets.clear();
      for (const auto& p : j.at("presets")) c.presets.push_back(msssm::preset_from_string(p.get<std::string>()));
    } else if (j.contains("preset")) {
      c.presets = {msssm::preset_from_string(j.at("preset").get<std::string>())};
    }
    if (j.contains("train")) {
      c.train = train::TrainConfig::from_json(j.at("train"));
      const auto& t = j.at("train");
      const bool has_fmin = t.contains("model") && t.at("model").contains("hyper") &&
                            t.at("model").at("hyper").contains("f_min");
      c.auto_f_min = j.value("auto_f_min", !has_fmin);
    } else {
      c.auto_f_min = j.value("auto_f_min", true);
    }
    c.seeds = j.value("seeds", c.seeds);
    c.out_dir = j.value("out", c.out_dir);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.truncation_window = j.value("truncation_window", c.truncation_window);
    c.ratios = j.value("ratios", c.ratios);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      c.grid_w = a.value("w", c.grid_w);
      if (a.contains("modes")) {
        c.grid_modes.clear();
        for (const auto& m : a.at("modes")) c.grid_modes.push_back(scalemap::mode_from_string(m.get<std::string>()));
      }
    }
    if (j.contains("kernel")) {
      const auto& k = j.at("kernel");
      c.kernel_alpha = k.value("alpha", c.kernel_alpha);
      c.kernel_K = k.value("K", c.kernel_K);
      c.kernel_restarts = k.value("restarts", c.kernel_restarts);
    }
    c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParameterError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string version_string() { return PIMSM_VERSION; }

// ---------------------------------------------------------------- datasets

signalgen::LabeledSequenceSet load_csv_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + dir);
  const fs::path mpath = root / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("missing manifest: " + mpath.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  const std::string where = mpath.string();
  signalgen::LabeledSequenceSet set;
  const auto& step = field(m, "acquisition_step", where);
  if (!step.is_number()) throw DataError(where + ": field 'acquisition_step' must be a number");
  set.acquisition_step = step.get<double>();
  const auto& seqs = field(m, "sequences", where);
  if (!seqs.is_array() || seqs.empty()) throw DataError(where + ": field 'sequences' must be a nonempty array");
  if (m.contains("generator")) set.metadata["generator"] = m.at("generator");

  std::size_t labelled = 0, with_targets = 0, with_split = 0;
  json splits = json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& e = seqs[i];
    const std::string ew = where + ": sequences[" + std::to_string(i) + "]";
    const auto& file = field(e, "file", ew);
    if (!file.is_string()) throw DataError(ew + ": field 'file' must be a string");
    Matrix x = read_csv_matrix(root / file.get<std::string>());
    Matrix y;
    if (e.contains("target_file")) {
      y = read_csv_matrix(root / e.at("target_file").get<std::string>());
      if (y.cols() != x.cols()) throw DataError(ew + ": target columns differ from sequence columns");
      ++with_targets;
    }
    if (e.contains("label")) {
      if (!e.at("label").is_number_integer()) throw DataError(ew + ": field 'label' must be an integer");
      set.class_labels.push_back(e.at("label").get<int>());
      ++labelled;
    }
    if (e.contains("split")) {
      splits.push_back(e.at("split"));
      ++with_split;
    }
    standardize_pair(x, &y);
    set.sequences.push_back(std::move(x));
    if (y.size() > 0) set.targets.push_back(std::move(y));
  }
  const std::size_t n = seqs.size();
  if (labelled != 0 && labelled != n) throw DataError(where + ": field 'label' present on only some sequences");
  if (with_targets != 0 && with_targets != n)
    throw DataError(where + ": field 'target_file' present on only some sequences");
  if (with_split != 0 && with_split != n) throw DataError(where + ": field 'split' present on only some sequences");
  if (with_split == n) {
    for (const auto& s : splits) {
      const std::string v = s.get<std::string>();
      if (v != "train" && v != "val" && v != "test") throw DataError(where + ": split must be train, val or test");
    }
    set.metadata["split"] = splits;
  }
  try {
    set.validate();
  } catch (const ParameterError& e) {
    throw DataError(where + ": " + e.what());
  }
  return set;
}

void write_csv_dataset(const signalgen::LabeledSequenceSet& set, const std::string& dir) {
  set.validate();
  const fs::path root(dir);
  fs::create_directories(root);
  json m;
  m["acquisition_step"] = set.acquisition_step;
  if (set.metadata.contains("generator")) m["generator"] = set.metadata.at("generator");
  json seqs = json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%05zu.csv", i);
    write_csv_matrix(set.sequences[i], root / name);
    json e{{"file", name}};
    if (!set.class_labels.empty()) e["label"] = set.class_labels[i];
    if (!set.targets.empty()) {
      char tname[32];
      std::snprintf(tname, sizeof tname, "target_%05zu.csv", i);
      write_csv_matrix(set.targets[i], root / tname);
      e["target_file"] = tname;
    }
    if (set.metadata.contains("split")) e["split"] = set.metadata.at("split").at(i);
    seqs.push_back(e);
  }
  m["sequences"] = seqs;
  write_text(root / "manifest.json", m.dump(2) + "\n");
}

signalgen::LabeledSequenceSet make_dataset(const DatasetSource& src, std::uint64_t seed) {
  if (!src.csv_dir.empty()) return load_csv_dataset(src.csv_dir);
  const json& p = src.params;
  try {
    if (src.generator == "two-timescale") {
      signalgen::TwoTimescaleConfig c;
      c.n_per_class = p.value("n_per_class", c.n_per_class);
      c.T = p.value("T", c.T);
      c.d = p.value("d", c.d);
      c.signal_amplitude = p.value("signal_amplitude", c.signal_amplitude);
      c.components = p.value("components", c.components);
      c.acquisition_step = p.value("acquisition_step", c.acquisition_step);
      if (p.contains("slow_band")) c.slow_band = {p.at("slow_band").at(0), p.at("slow_band").at(1)};
      if (p.contains("fast_band")) c.fast_band = {p.at("fast_band").at(0), p.at("fast_band").at(1)};
      if (p.contains("background")) {
        const auto& b = p.at("background");
        c.background.knees = b.value("knees", c.background.knees);
        c.background.exponents = b.value("exponents", c.background.exponents);
      }
      c.seed = seed;
      auto set = signalgen::gen_two_timescale_task(c);
      set.metadata["generator"] = {{"name", "two-timescale"}, {"params", p}, {"seed", seed}};
      return set;
    }
    if (src.generator == "colored-forecast") {
      const Index T = p.value("T", Index{96});
      const Index H = p.value("horizon", Index{8});
      const Index d = p.value("d", Index{1});
      const std::size_t count = p.value("count", std::size_t{128});
      signalgen::PiecewiseSpec spec{p.value("knees", std::vector<double>{0.03, 0.15}),
                                    p.value("exponents", std::vector<double>{1.0, 2.0, 0.8}),
                                    1.0 / static_cast<double>(T + H), 0.5, 1.0};
      if (H <= 0 || H >= T) throw ParameterError("colored-forecast: horizon must lie in (0, T)");
      const auto raw = signalgen::gen_colored_noise(spec, T + H, d, seed, count);
      signalgen::LabeledSequenceSet set;
      set.acquisition_step = p.value("acquisition_step", 1.0);
      for (const auto& s : raw.sequences) {
        Matrix x = s.topRows(T);
        Matrix y = s.bottomRows(H);
        standardize_pair(x, &y);
        set.sequences.push_back(std::move(x));
        set.targets.push_back(std::move(y));
      }
      set.metadata["generator"] = {{"name", "colored-forecast"}, {"params", p}, {"seed", seed}};
      return set;
    }
  } catch (const json::exception& e) {
    throw ParameterError("dataset params: " + std::string(e.what()));
  }
  throw ParameterError("unknown generator '" + src.generator + "'");
}

Split make_split(const signalgen::LabeledSequenceSet& data, double val_fraction, double test_fraction,
                 std::uint64_t seed) {
  Split s;
  const std::size_t N = data.size();
  if (data.metadata.contains("split")) {
    const auto& sp = data.metadata.at("split");
    for (std::size_t i = 0; i < N; ++i) {
      const std::string v = sp.at(i).get<std::string>();
      (v == "train" ? s.train : v == "val" ? s.val : s.test).push_back(i);
    }
    if (s.train.empty() || s.val.empty() || s.test.empty()) throw DataError("manifest split leaves a part empty");
    return s;
  }
  std::mt19937_64 rng(derive_seed(seed, {0x5B1}));
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < N; ++i) groups[data.class_labels.empty() ? 0 : data.class_labels[i]].push_back(i);
  for (auto& [label, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto nt = static_cast<std::size_t>(std::llround(test_fraction * n));
    const auto nv = static_cast<std::size_t>(std::llround(val_fraction * n));
    for (std::size_t k = 0; k < idx.size(); ++k)
      (k < nt ? s.test : k < nt + nv ? s.val : s.train).push_back(idx[k]);
  }
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  if (s.train.empty() || s.val.empty() || s.test.empty()) throw DataError("dataset too small to split");
  return s;
}

// ---------------------------------------------------------------- tables

std::string Table::to_csv() const {
  std::string out;
  for (std::size_t c = 0; c < columns.size(); ++c) out += (c ? "," : "") + columns[c];
  out += '\n';
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) out += (c ? "," : "") + r[c];
    out += '\n';
  }
  return out;
}

std::size_t Table::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw ParameterError("no column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

double Table::number(std::size_t row, const std::string& name) const {
  const std::string& cell = rows.at(row).at(column(name));
  double v = std::numeric_limits<double>::quiet_NaN();
  if (cell != "nan" && !parse_double(cell, v)) throw ParameterError("cell '" + cell + "' is not numeric");
  return v;
}

namespace {

// Groups rows by the key columns (in first-seen order) and reports the mean
// and sample std of each value column over rows whose status is "ok".
Table summarize(const Table& runs, const std::vector<std::string>& keys, const std::vector<std::string>& values) {
  Table s;
  s.columns = keys;
  s.columns.push_back("n_ok");
  s.columns.push_back("n_failed");
  for (const auto& v : values) {
    s.columns.push_back(v + "_mean");
    s.columns.push_back(v + "_std");
  }
  const std::size_t status = runs.column("status");
  std::vector<std::vector<std::string>> order;
  std::map<std::vector<std::string>, std::vector<std::size_t>> members;
  for (std::size_t r = 0; r < runs.rows.size(); ++r) {
    std::vector<std::string> key;
    for (const auto& k : keys) key.push_back(runs.rows[r][runs.column(k)]);
    if (!members.count(key)) order.push_back(key);
    members[key].push_back(r);
  }
  for (const auto& key : order) {
    std::vector<std::size_t> ok;
    for (const auto r : members[key])
      if (runs.rows[r][status] == "ok") ok.push_back(r);
    std::vector<std::string> row = key;
    row.push_back(std::to_string(ok.size()));
    row.push_back(std::to_string(members[key].size() - ok.size()));
    for (const auto& v : values) {
      std::vector<double> xs;
      for (const auto r : ok) xs.push_back(runs.number(r, v));
      if (xs.empty()) {
        row.emplace_back("nan");
        row.emplace_back("nan");
        continue;
      }
      const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
      double ss = 0.0;
      for (const double x : xs) ss += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
      row.push_back(fmt(mean));
      row.push_back(fmt(sd));
    }
    s.rows.push_back(std::move(row));
  }
  return s;
}

std::string failure_status(const std::exception& e) {
  std::string msg = e.what();
  std::replace(msg.begin(), msg.end(), ',', ';');
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  return "failed: " + msg;
}

struct RunContext {
  const ExperimentConfig& cfg;
  fs::path out;
  json provenance_runs = json::array();
};

struct Prepared {
  signalgen::LabeledSequenceSet data;
  Split split;
  train::PreparedSet train, val, test;
  spectral::HyperNetConfig hyper;
};

train::TrainConfig seed_config(const ExperimentConfig& cfg, const signalgen::LabeledSequenceSet& data,
                               msssm::Preset preset, std::uint64_t seed) {
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.mask.seed = seed;
  auto& m = tc.model;
  m.preset = preset;
  m.d_in = data.channels();
  m.acquisition_step = data.acquisition_step;
  if (cfg.task == Task::Forecast) {
    m.task = msssm::TaskKind::Forecast;
    m.horizon = data.targets.front().rows();
  } else if (!data.class_labels.empty()) {
    m.task = msssm::TaskKind::Classification;
    m.classes = std::max(2, data.num_classes());
  }
  if (cfg.task == Task::Pretrain) tc.pretrain = true;
  if (cfg.auto_f_min) m.hyper.f_min = 1.0 / static_cast<double>(data.length());
  m.validate();
  return tc;
}

Prepared prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed, Index window) {
  Prepared p;
  p.data = make_dataset(cfg.data, seed);
  if (cfg.task == Task::Forecast && p.data.targets.empty()) throw DataError("forecast task needs targets");
  if ((cfg.task == Task::Classify || cfg.task == Task::Ablation) && p.data.class_labels.empty())
    throw DataError("classification task needs labels");
  p.split = make_split(p.data, cfg.val_fraction, cfg.test_fraction, seed);
  p.hyper = seed_config(cfg, p.data, cfg.presets.front(), seed).model.hyper;
  const auto all = train::prepare(p.data, p.hyper, window);
  p.train = train::subset(all, p.split.train);
  p.val = train::subset(all, p.split.val);
  p.test = train::subset(all, p.split.test);
  return p;
}

json spectral_provenance(const train::PreparedSet& train, const msssm::ModelConfig& m,
                         const msssm::Model* trained) {
  const auto pooled = spectral::consensus_spectrum(train.consensus);
  const auto fit = spectral::clamp_exponents(spectral::init_fit(pooled, m.hyper.K));
  json j{{"fit", fit.to_json()}, {"scale_assignment", scalemap::assign_scales(fit, m.map, m.acquisition_step).to_json()}};
  if (trained != nullptr && trained->hyper) {
    const auto learned = spectral::hypernet_forward(trained->params, *trained->hyper, pooled);
    j["learned_fit"] = learned.to_json();
    j["learned_scale_assignment"] = scalemap::assign_scales(learned, m.map, m.acquisition_step).to_json();
  }
  return j;
}

std::string run_name(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) {
    if (!s.empty()) s += "_";
    s += p;
  }
  return s;
}

struct Fitted {
  train::TrainResult result;
  train::Evaluation test;
};

Fitted fit_and_eval(RunContext& ctx, const train::TrainConfig& tc, const train::PreparedSet& tr,
                    const train::PreparedSet& val, const train::PreparedSet& test, const std::string& name) {
  Fitted f{train::train_loop(tc, tr, &val), {}};
  f.test = train::evaluate(f.result.model, test, 64, 0.0);
  if (!ctx.out.empty()) {
    fs::create_directories(ctx.out / "logs");
    train::write_metric_log(f.result.log, (ctx.out / "logs" / (name + ".csv")).string());
    if (ctx.cfg.save_checkpoints) {
      fs::create_directories(ctx.out / "checkpoints");
      msssm::save_checkpoint(f.result.model, (ctx.out / "checkpoints" / (name + ".ckpt")).string());
    }
  }
  return f;
}

std::string metric_name(const ExperimentConfig& cfg) {
  if (cfg.task == Task::Pretrain) return "masked_l1";
  return cfg.task == Task::Forecast ? "mse" : "acc";
}

ResultBundle run_basic(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const std::string mn = metric_name(cfg);
  ResultBundle b;
  b.runs.columns = {"seed", "preset", "val_" + mn, "test_" + mn, "status"};
  for (const auto seed : cfg.seeds) {
    const auto prep = prepare_seed(cfg, seed, 0);
    for (const auto preset : cfg.presets) {
      const auto tc = seed_config(cfg, prep.data, preset, seed);
      std::vector<std::string> row{std::to_string(seed), msssm::to_string(preset)};
      json prov{{"seed", seed}, {"preset", msssm::to_string(preset)}};
      try {
        const auto f = fit_and_eval(ctx, tc, prep.train, prep.val, prep.test,
                                    run_name({to_string(cfg.task), msssm::to_string(preset), "seed" + std::to_string(seed)}));
        double test_metric = f.test.metric;
        if (cfg.task == Task::Pretrain) {
          engine::Tape t;
          engine::Bound p(t, f.result.model.params);
          std::vector<std::size_t> idx(prep.test.size());
          std::iota(idx.begin(), idx.end(), 0);
          std::vector<const Matrix*> seqs;
          std::vector<Matrix> masks;
          for (const auto i : idx) {
            seqs.push_back(&prep.test.inputs[i]);
            masks.push_back(train::make_mask(prep.test.inputs[i].rows(), prep.test.inputs[i].cols(), tc.mask,
                                             derive_seed(seed, {0x7E57, i})));
          }
          const auto bctx = train::batch_context(prep.test, idx);
          test_metric = train::masked_pretrain_loss(f.result.model, p, seqs, masks, &bctx).scalar();
        }
        row.push_back(fmt(f.result.best_val_metric));
        row.push_back(fmt(test_metric));
        row.emplace_back("ok");
        prov.update(spectral_provenance(prep.train, tc.model, &f.result.model));
      } catch (const NumericError& e) {
        row.emplace_back("nan");
        row.emplace_back("nan");
        row.push_back(failure_status(e));
        prov["failure"] = e.what();
      }
      b.runs.rows.push_back(row);
      ctx.provenance_runs.push_back(prov);
    }
  }
  b.summary = summarize(b.runs, {"preset"}, {"val_" + mn, "test_" + mn});
  return b;
}

ResultBundle run_truncation(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const std::string mn = cfg.task == Task::Forecast ? "mse" : "acc";
  ResultBundle b;
  b.runs.columns = {"seed", "preset", "window", mn + "_full", mn + "_trunc", "gap", "cka", "dcor", "l2", "status"};
  for (const auto seed : cfg.seeds) {
    const auto full = prepare_seed(cfg, seed, 0);
    const Index T = full.data.length();
    const Index W = cfg.truncation_window > 0 ? cfg.truncation_window : (T + 7) / 8;
    if (W > T) throw ParameterError("truncation_window exceeds the sequence length");
    const auto all_trunc = train::prepare(full.data, full.hyper, W);
    const auto trunc_train = train::subset(all_trunc, full.split.train);
    const auto trunc_val = train::subset(all_trunc, full.split.val);
    const auto trunc_test = train::subset(all_trunc, full.split.test);
    for (const auto preset : cfg.presets) {
      const auto tc = seed_config(cfg, full.data, preset, seed);
      const std::string base = run_name({"truncation", msssm::to_string(preset), "seed" + std::to_string(seed)});
      std::vector<std::string> row{std::to_string(seed), msssm::to_string(preset), std::to_string(W)};
      json prov{{"seed", seed}, {"preset", msssm::to_string(preset)}, {"window", W}};
      try {
        const auto a = fit_and_eval(ctx, tc, full.train, full.val, full.test, base + "_full");
        auto tt = tc;
        tt.window = W;
        const auto c = fit_and_eval(ctx, tt, trunc_train, trunc_val, trunc_test, base + "_trunc");
        const auto rep = analysis::drift_report(a.result.model, full.test, c.result.model, trunc_test);
        for (const double v : {a.test.metric, c.test.metric, a.test.metric - c.test.metric, rep.cka, rep.dcor, rep.l2})
          row.push_back(fmt(v));
        row.emplace_back("ok");
        prov.update(spectral_provenance(full.train, tc.model, &a.result.model));
        prov["drift"] = rep.to_json();
      } catch (const NumericError& e) {
        for (int k = 0; k < 6; ++k) row.emplace_back("nan");
        row.push_back(failure_status(e));
        prov["failure"] = e.what();
      }
      b.runs.rows.push_back(row);
      ctx.provenance_runs.push_back(prov);
    }
  }
  b.summary = summarize(b.runs, {"preset", "window"}, {mn + "_full", mn + "_trunc", "gap", "cka", "dcor", "l2"});
  return b;
}

std::vector<std::size_t> subsample(const train::PreparedSet& train, double ratio, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < train.size(); ++i) groups[train.labels.empty() ? 0 : train.labels[i]].push_back(i);
  std::mt19937_64 rng(derive_seed(seed, {0x10E, static_cast<std::uint64_t>(std::llround(ratio * 1e6))}));
  std::vector<std::size_t> out;
  for (auto& [label, idx] : groups) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(idx.size()) - 1e-9)));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, idx.size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

ResultBundle run_low_resource(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  const std::string mn = metric_name(cfg);
  ResultBundle b;
  b.runs.columns = {"seed", "preset", "ratio", "n_train", "val_" + mn, "test_" + mn, "status"};
  for (const auto seed : cfg.seeds) {
    const auto prep = prepare_seed(cfg, seed, 0);
    for (const auto preset : cfg.presets) {
      const auto tc = seed_config(cfg, prep.data, preset, seed);
      for (const double ratio : cfg.ratios) {
        const auto idx = subsample(prep.train, ratio, seed);
        const auto tr = train::subset(prep.train, idx);
        std::vector<std::string> row{std::to_string(seed), msssm::to_string(preset), fmt(ratio), std::to_string(idx.size())};
        json prov{{"seed", seed}, {"preset", msssm::to_string(preset)}, {"ratio", ratio}, {"n_train", idx.size()}};
        try {
          const auto f = fit_and_eval(ctx, tc, tr, prep.val, prep.test,
                                      run_name({"lowres", msssm::to_string(preset), fmt(ratio), "seed" + std::to_string(seed)}));
          row.push_back(fmt(f.result.best_val_metric));
          row.push_back(fmt(f.test.metric));
          row.emplace_back("ok");
          prov.update(spectral_provenance(tr, tc.model, &f.result.model));
        } catch (const NumericError& e) {
          row.emplace_back("nan");
          row.emplace_back("nan");
          row.push_back(failure_status(e));
          prov["failure"] = e.what();
        }
        b.runs.rows.push_back(row);
        ctx.provenance_runs.push_back(prov);
      }
    }
  }
  b.summary = summarize(b.runs, {"preset", "ratio"}, {"val_" + mn, "test_" + mn});
  return b;
}

ResultBundle run_ablation(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  ResultBundle b;
  b.runs.columns = {"mode", "w", "seed", "val_acc", "test_acc", "status"};
  for (const auto seed : cfg.seeds) {
    const auto prep = prepare_seed(cfg, seed, 0);
    for (const auto mode : cfg.grid_modes) {
      for (const double w : cfg.grid_w) {
        auto tc = seed_config(cfg, prep.data, msssm::Preset::Pimsm, seed);
        tc.model.map.w = w;
        tc.model.map.mode = mode;
        std::vector<std::string> row{scalemap::to_string(mode), fmt(w), std::to_string(seed)};
        json prov{{"seed", seed}, {"mode", scalemap::to_string(mode)}, {"w", w}};
        try {
          const auto f = fit_and_eval(ctx, tc, prep.train, prep.val, prep.test,
                                      run_name({"ablation", scalemap::to_string(mode), fmt(w), "seed" + std::to_string(seed)}));
          row.push_back(fmt(f.result.best_val_metric));
          row.push_back(fmt(f.test.metric));
          row.emplace_back("ok");
          prov.update(spectral_provenance(prep.train, tc.model, &f.result.model));
        } catch (const NumericError& e) {
          row.emplace_back("nan");
          row.emplace_back("nan");
          row.push_back(failure_status(e));
          prov["failure"] = e.what();
        }
        b.runs.rows.push_back(row);
        ctx.provenance_runs.push_back(prov);
      }
    }
  }
  b.summary = summarize(b.runs, {"mode", "w"}, {"val_acc", "test_acc"});
  return b;
}

ResultBundle run_kernel_study(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  ResultBundle b;
  b.runs.columns = {"seed", "K", "error", "relative_error", "status"};
  json studies = json::array();
  analysis::MixtureOptions opts;
  opts.restarts = cfg.kernel_restarts;
  for (const auto seed : cfg.seeds) {
    const auto study = analysis::approximation_rate_study(cfg.kernel_alpha, cfg.kernel_K, seed, 0.05, opts);
    for (const auto& r : study.rows)
      b.runs.rows.push_back({std::to_string(seed), std::to_string(r.K), fmt(r.error), fmt(r.relative_error), "ok"});
    studies.push_back(study.to_json());
    ctx.provenance_runs.push_back({{"seed", seed}});
  }
  b.extra["rate_studies"] = studies;
  b.summary = summarize(b.runs, {"K"}, {"error", "relative_error"});
  return b;
}

}  // namespace

ResultBundle run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunContext ctx{cfg, cfg.out_dir.empty() ? fs::path() : fs::path(cfg.out_dir)};
  if (!ctx.out.empty()) fs::create_directories(ctx.out);
  ResultBundle b;
  if (cfg.task == Task::KernelStudy) b = run_kernel_study(ctx);
  else if (cfg.task == Task::Ablation) b = run_ablation(ctx);
  else if (cfg.axis == Axis::Truncation) b = run_truncation(ctx);
  else if (cfg.axis == Axis::LowResource) b = run_low_resource(ctx);
  else b = run_basic(ctx);
  const json cj = cfg.to_json();
  b.provenance = {{"config", cj}, {"config_hash", config_hash(cj)}, {"version", version_string()},
                  {"seeds", cfg.seeds}, {"runs", ctx.provenance_runs}};
  if (!ctx.out.empty()) write_bundle(b, ctx.out.string());
  return b;
}

void write_bundle(const ResultBundle& bundle, const std::string& dir) {
  fs::create_directories(dir);
  write_text(fs::path(dir) / "runs.csv", bundle.runs.to_csv());
  write_text(fs::path(dir) / "summary.csv", bundle.summary.to_csv());
  json j{{"provenance", bundle.provenance}, {"extra", bundle.extra}};
  write_text(fs::path(dir) / "bundle.json", j.dump(2) + "\n");
}

}  // namespace pimsm::experiment
