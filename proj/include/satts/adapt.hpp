#pragma once

#include <limits>
#include <string>
#include <vector>

#include "satts/numkit.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

namespace satts::adapt {

// ---------------------------------------------------------------------------
// Test-time adaptation of layer-norm parameters in phi, driven by alignment
// of projected target statistics against the stored source eigenstructure,
// optionally regularized by the source risk on the D-optimal subset. SSA and
// Tent are the baselines the method is compared against.
// ---------------------------------------------------------------------------

enum class Method { None, Satts, Ssa, Tent };

// The alignment ambiguity: scaled-features applies the importance weights to
// the projected features and therefore compares against alpha^2-scaled source
// eigenvalues (zero loss at perfect alignment); weighted-kl keeps projections
// unscaled and multiplies the per-direction divergence terms by alpha.
enum class AlphaMode { ScaledFeatures, WeightedKl };

inline constexpr double kEpsVar = 1e-8;  // floor for variances and eigenvalue denominators

struct AdaptationConfig {
  Method method = Method::Satts;
  AlphaMode alpha_mode = AlphaMode::ScaledFeatures;
  double lambda_src = -1.0;  // < 0: default m / batch_size
  double lr = 0.01;
  int batch_size = 64;
  int ssa_top_k = -1;  // < 0: default C / 2
  int max_steps = std::numeric_limits<int>::max();
  surrogate::OptimizerState::Kind optimizer = surrogate::OptimizerState::Kind::Sgd;
  uint64_t seed = 0;

  void validate() const;
  double resolve_lambda(int subset_m) const;
  int resolve_top_k(int latent_dim) const;
};

struct ProjectedTargetStats {
  std::vector<double> mean;  // per-direction batch mean of the projections
  std::vector<double> var;   // per-direction population variance, floored at kEpsVar
};

struct Projection {
  Matrix ztilde;  // B x C projected features
  ProjectedTargetStats stats;
};

/// ztilde = (Z - mean_src) V, with the importance-weight column scaling in
/// scaled-features mode. Needs B >= 2 for the variance.
Projection project_target(const Matrix& z_tgt, const srcstats::SourceStats& stats,
                          AlphaMode mode);

/// Per-direction symmetric KL between the projected target statistics and the
/// source eigenvalue statistics, summed over the retained leading directions.
/// Trailing directions carry noise-scale eigenvalues whose 1/lambda terms
/// would dominate the objective, so they are excluded.
double kl_alignment_loss(const ProjectedTargetStats& proj, const srcstats::SourceStats& stats,
                         AlphaMode mode);

/// d loss / d Z for kl_alignment_loss, flowing through the batch mean and
/// variance of the projections.
Matrix kl_alignment_backward(const Projection& proj, const srcstats::SourceStats& stats,
                             AlphaMode mode);

/// The baseline alignment: hard truncation to the top_k leading directions,
/// alpha-weighted divergence terms, unscaled projections.
double ssa_alignment_loss(const ProjectedTargetStats& proj, const srcstats::SourceStats& stats,
                          int top_k);
Matrix ssa_alignment_backward(const Projection& proj, const srcstats::SourceStats& stats,
                              int top_k);

/// Mean squared 2-norm residual over the stored subset samples.
double source_risk(const surrogate::SurrogateModel& model,
                   const srcstats::DOptimalSubset& subset);

struct StepRecord {
  int step = 0;      // 1-based position in the stream
  double l_kl = 0.0;
  double r_src = 0.0;
  double l_tta = 0.0;
  std::vector<double> snapshot;  // adaptable params after the update
  bool ok = true;                // false: step rolled back on a numeric failure
};

struct AdaptTrace {
  std::vector<StepRecord> records;
  double step_seconds_total = 0.0;
  int steps_timed = 0;
};

/// One composite-objective update on a single target batch: alignment loss on
/// the target rows plus lambda times the source risk on the subset rows,
/// evaluated in one concatenated forward pass. Losses are recorded before the
/// parameter update; a non-finite loss rolls the step back.
StepRecord satts_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                      const srcstats::SourceStats& stats,
                      const srcstats::DOptimalSubset& subset, const AdaptationConfig& cfg,
                      surrogate::OptimizerState& opt, int step_index);

StepRecord ssa_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                    const srcstats::SourceStats& stats, const AdaptationConfig& cfg,
                    surrogate::OptimizerState& opt, int step_index);

/// Entropy minimization on the Gaussian head: mean over the batch of
/// (1/2) sum_k log(2 pi e sigma^2). Requires a variance-head model.
StepRecord tent_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                     const AdaptationConfig& cfg, surrogate::OptimizerState& opt,
                     int step_index);

/// Online single pass: one update per stream batch, snapshots kept per step.
/// Method none returns an empty trace and leaves the model untouched.
AdaptTrace run_adaptation(surrogate::SurrogateModel& model, const std::vector<Matrix>& stream,
                          const srcstats::SourceStats& stats,
                          const srcstats::DOptimalSubset& subset, const AdaptationConfig& cfg);

/// Plain-text table: header then one "step,l_kl,r_src,l_tta" row per record.
void export_trace(const AdaptTrace& trace, const std::string& path);

// Snapshot file, magic "STTSNAP1": full step records including snapshots.
void save_snapshots(const AdaptTrace& trace, const std::string& path);
AdaptTrace load_snapshots(const std::string& path);

}  // namespace satts::adapt
