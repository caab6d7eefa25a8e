#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "satts/adapt.hpp"
#include "satts/numkit.hpp"
#include "satts/select.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

namespace satts::bench {

// ---------------------------------------------------------------------------
// Synthetic shifted-regression tasks: a smooth parametric field on a 1-D grid
// whose generating parameters move to a disjoint range at deployment. Plus
// the evaluation metrics, a proxy A-distance shift diagnostic, and the runner
// that compares adaptation methods across seeds.
// ---------------------------------------------------------------------------

enum class Task { Bump, Heat1d };

Task task_from_name(const std::string& name);
std::string task_name(Task t);

struct Band {
  double lo = 0.0;
  double hi = 1.0;
};

struct TaskConfig {
  Task task = Task::Bump;
  int grid_size = 64;  // K field nodes on [0, 1]
  int n_train = 512;
  int n_val = 256;
  int n_target = 256;
  double noise_frac = 0.01;  // noise sigma as a fraction of the clean field's peak
  uint64_t seed = 0;
  Band shift_src;  // range of the shifted parameter at training time
  Band shift_tgt;  // range at deployment; equal to shift_src only for the
                   // no-shift control, otherwise must be disjoint

  /// gap_level 0 = no-shift control; 1..3 = increasing parameter gaps.
  static TaskConfig preset(Task task, int gap_level);

  int param_dim() const { return task == Task::Bump ? 3 : 4; }
  void validate() const;
  nlohmann::json to_json() const;
  static TaskConfig from_json(const nlohmann::json& j);
};

/// Noise-free field for one parameter vector; bump: A exp(-(x-c)^2 / 2s^2),
/// heat-1d steady state: T0 + (T1-T0) x + (q / 2k) x (1-x).
std::vector<double> closed_form_field(const TaskConfig& cfg, const std::vector<double>& params);

enum class Domain { SourceTrain, SourceVal, TargetTest };

std::string domain_name(Domain d);

// Per-field output statistics plus per-dimension input statistics, always
// fitted on source-train only; every split carries the same record.
struct Normalization {
  std::vector<double> in_mean, in_std;    // length P
  std::vector<double> out_mean, out_std;  // length K

  static Normalization fit(const Matrix& train_inputs, const Matrix& train_targets);
  static Normalization identity(int p, int k);
};

struct Dataset {
  Matrix inputs;   // N x P, raw parameter units
  Matrix targets;  // N x K, raw field units
  Domain domain = Domain::SourceTrain;
  Normalization norm;
};

struct TaskData {
  Dataset train, val, target;
  TaskConfig cfg;
};

TaskData gen_task(const TaskConfig& cfg);

Matrix normalize_inputs(const Matrix& x, const Normalization& n);
Matrix normalize_targets(const Matrix& y, const Normalization& n);
Matrix denormalize_targets(const Matrix& y, const Normalization& n);

struct MetricSet {
  double rmse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
};

/// Error metrics over all entries after z-scoring both sides by the record's
/// output statistics; pass Normalization::identity for pre-normalized data.
MetricSet metrics(const Matrix& pred, const Matrix& truth, const Normalization& norm);

// ===== proxy A-distance ====================================================

/// 2 (1 - 2 eps), clipped below at 0.
double pad_from_error(double eps);

/// Trains a linear logistic domain classifier on the two output sets
/// (stratified 70/30 split, 5 repetitions averaged) and converts the held-out
/// error into a proxy A-distance in [0, 2].
double pad_estimate(const Matrix& y_src, const Matrix& y_tgt, uint64_t seed);

// ===== experiment runner ===================================================

struct ExperimentConfig {
  // Adjusts the library defaults to the deployment regime the benchmark is
  // meant to probe: the surrogate stops well short of convergence (real
  // deployments rarely interpolate), the labeled anchor set spans a full
  // adaptation batch, and the ratio Gaussians are shrunk hard because a
  // short target stream leaves the fit very few samples.
  ExperimentConfig();

  TaskConfig task;
  int latent_dim = 8;
  std::vector<int> hidden = {32, 32};
  surrogate::TrainConfig train;
  adapt::AdaptationConfig adapt;  // lambda / alpha mode / batch size; lr and method set per arm
  select::LineSearchConfig search;
  std::vector<std::string> methods = {"source", "tent", "ssa", "satts", "oracle"};
  int seeds = 20;          // adaptation runs per method
  double fixed_lr = 0.01;  // ssa / tent / satts-no-iwv
  double tau = 0.95;       // retained-variance fraction for the artifact
  int subset_m = 64;       // labeled subset size; lambda defaults to m / batch
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct ArmResult {
  std::string method;
  std::vector<MetricSet> per_seed;
  MetricSet mean, sd;          // sd = sample std over seeds, zeros when seeds < 2
  double step_seconds = 0.0;   // mean wall time per adaptation step
  std::vector<double> chosen_lrs;  // selection-based arms, one entry per seed
  std::vector<int> chosen_steps;
  int fallback_count = 0;
  std::string error;  // non-empty: the arm failed and carries no metrics
};

struct ExperimentReport {
  nlohmann::json config;  // resolved configuration echo
  double pad = 0.0;       // source-val vs target outputs
  std::vector<ArmResult> arms;

  const ArmResult* arm(const std::string& method) const;
};

/// Pretrains once, builds the source artifact, then runs every requested
/// method over `seeds` independently ordered target streams and aggregates.
/// A failing arm is recorded and the rest of the run continues.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

/// report.json (stable key order), table.txt, plot.svg under out_dir.
/// Re-emitting an unchanged report reproduces the files byte for byte.
void emit_report(const ExperimentReport& report, const std::string& out_dir);

struct StepOverhead {
  double satts_seconds = 0.0;  // mean per step
  double ssa_seconds = 0.0;
  double ratio = 0.0;
};

/// Times single adaptation steps of both methods on clones of the same model
/// and batch.
StepOverhead measure_step_overhead(const surrogate::SurrogateModel& model,
                                   const srcstats::SourceStatsArtifact& artifact,
                                   const Matrix& batch, int reps);

/// Per-seed mean and sample standard deviation.
void aggregate(const std::vector<MetricSet>& per_seed, MetricSet* mean, MetricSet* sd);

// Dataset file, magic "STTDATA1": config + domain tag + normalization record
// + raw matrices.
void save_dataset(const Dataset& d, const TaskConfig& cfg, const std::string& path);

struct LoadedDataset {
  Dataset data;
  TaskConfig cfg;
};

LoadedDataset load_dataset(const std::string& path);

}  // namespace satts::bench
