#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgm_dte/data.hpp"
#include "dgm_dte/graphs.hpp"
#include "dgm_dte/imbalance.hpp"
#include "dgm_dte/metrics.hpp"
#include "dgm_dte/model.hpp"

namespace dgm {

void to_json(nlohmann::json& j, const GraphOptions& o);
void from_json(const nlohmann::json& j, GraphOptions& o);

/// Everything one command needs: model, generator, split, shot regions,
/// graph construction. JSON sections: model, generator, split, shots, graphs.
struct RunConfig {
  DgmConfig model;
  GeneratorSpec generator;
  SplitSpec split;
  ShotSpec shots;
  GraphOptions graphs;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_json(const nlohmann::json& j);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Split, graphs built on the training part, node indices and labels.
struct Experiment {
  TemporalSplit split;
  GraphContext ctx;
  OrderIndex train_index;
  OrderIndex val_index;
  OrderIndex test_index;
  std::vector<double> train_labels;
  std::vector<double> val_labels;
  std::vector<double> test_labels;
  std::vector<Shot> test_shots;
};

Experiment prepare_experiment(std::span<const Order> orders, const RunConfig& cfg);

/// Density used for tail re-weighting: tail-class training labels for the
/// routed layout, all training labels when every order takes the tail path.
/// Empty when re-weighting is off or no tail label exists.
std::optional<LabelDensity> fit_tail_density(const DgmConfig& cfg, std::span<const double> train_labels);

double mean_label(std::span<const double> labels);

struct TrainedRun {
  DgmModel model;
  TrainResult result;
};

TrainedRun train_model(const Experiment& exp, const DgmConfig& cfg,
                       const std::function<void(const EpochLog&)>& on_epoch = {});

/// Test-split report; with `balanced_seed` the test split is first
/// resampled to equal counts per label bin.
EvalReport evaluate_test(const DgmModel& model, const Experiment& exp, const ShotSpec& shots,
                         std::optional<std::uint64_t> balanced_seed = std::nullopt);

/// Checkpoint payload: parameters plus the run configuration.
void save_model(const DgmModel& model, const RunConfig& cfg, const std::filesystem::path& path);
std::string model_checkpoint_json(const DgmModel& model, const RunConfig& cfg);

/// Rebuilds the model described by `cfg` and copies the checkpoint values
/// in; shape mismatches throw.
DgmModel load_model(const CheckpointData& ckpt, const RunConfig& cfg, const Experiment& exp);

struct AblationRow {
  std::string variant;
  bool failed = false;
  std::string error;
  std::vector<EvalReport> runs;  // one per seed
  EvalReport median;             // element-wise median over seeds
};

double median(std::vector<double> v);
EvalReport median_report(std::span<const EvalReport> runs, const std::string& variant);

std::string format_ablation_table(std::span<const AblationRow> rows);
nlohmann::json ablation_json(std::span<const AblationRow> rows, std::span<const std::uint64_t> seeds);

/// Keeps the first occurrence of each value; returns the number dropped.
std::size_t dedupe_values(std::vector<double>& values);

}  // namespace dgm
