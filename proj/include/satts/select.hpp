#pragma once

#include <limits>
#include <string>
#include <vector>

#include "satts/adapt.hpp"
#include "satts/numkit.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

namespace satts::select {

// ---------------------------------------------------------------------------
// Unsupervised selection of the adaptation learning rate and stopping step:
// a Gaussian density ratio in a reduced latent space turns the stored labeled
// subset into an importance-weighted estimate of target risk, which drives a
// line search over learning rates with per-step early stopping.
// ---------------------------------------------------------------------------

struct LatentGaussianPair {
  Matrix basis;                // C x r, top-r source eigendirections as columns
  std::vector<double> center;  // source latent mean, subtracted before reduction
  numkit::GaussianParams src;  // fitted in the reduced space
  numkit::GaussianParams tgt;
  double ratio_ceiling = 50.0;  // may be +inf
};

/// Fits both Gaussians from latent samples after reduction onto the top-r
/// source directions. Needs >= 2 samples per side.
LatentGaussianPair fit_latent_pair(const Matrix& z_src, const Matrix& z_tgt,
                                   const srcstats::SourceStats& stats,
                                   double ratio_ceiling = 50.0, double eps_scale = 1e-6);

/// Same, but the source side comes straight from the stored eigenstructure
/// (mean zero, diagonal eigenvalue covariance in the reduced space), so no
/// source samples are needed at test time.
LatentGaussianPair pair_from_stats(const srcstats::SourceStats& stats, const Matrix& z_tgt,
                                   double ratio_ceiling = 50.0, double eps_scale = 1e-6);

/// exp(logpdf_tgt - logpdf_src) at the reduced projection of z, clipped to
/// the ceiling.
double density_ratio(const std::vector<double>& z, const LatentGaussianPair& pair);

/// Mean of beta_i * r2_i; the importance-weighted risk core.
double weighted_risk(const std::vector<double>& betas, const std::vector<double>& sq_residuals);

/// Importance-weighted target-risk estimate on the stored subset, with the
/// density ratio evaluated at the current model's latents.
double iwv_risk(const surrogate::SurrogateModel& model, const srcstats::DOptimalSubset& subset,
                const LatentGaussianPair& pair);

struct CandidateRow {
  double lr = 0.0;
  int step = 0;
  double iwv = std::numeric_limits<double>::quiet_NaN();
  bool valid = true;
};

struct SelectionResult {
  double lr = 0.0;
  int step = 0;  // 0 on fallback (unadapted source model)
  double iwv = std::numeric_limits<double>::infinity();
  std::vector<CandidateRow> table;  // baseline row first, then grid order
  bool fallback = false;
};

struct LineSearchConfig {
  std::vector<double> grid = {0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001};
  int patience = 1;  // stop a learning rate after this many non-improving steps
  double ratio_ceiling = 50.0;
  double eps_scale = 1e-6;
  bool frozen_latents = false;  // evaluate the ratio at pre-adaptation latents
};

/// Runs one adaptation per grid entry over the stream (concurrently), scoring
/// the importance-weighted risk after every step. The model comes in as the
/// pretrained source model and leaves holding the selected parameters; on
/// fallback it is left bit-identical. Per-learning-rate traces are exported
/// through traces_out for downstream selectors.
SelectionResult lr_line_search(surrogate::SurrogateModel& model,
                               const std::vector<Matrix>& stream,
                               const srcstats::SourceStatsArtifact& artifact,
                               const adapt::AdaptationConfig& base_cfg,
                               const LineSearchConfig& search,
                               std::vector<adapt::AdaptTrace>* traces_out = nullptr);

struct Choice {
  double lr = 0.0;
  int step = 0;      // 0 = unadapted baseline
  double score = 0;  // the minimized quantity
  bool diagnostic_only = false;  // true for label-using selectors
};

/// Picks the snapshot minimizing the plain subset risk. Ties go to the lowest
/// step, then the lowest learning rate. include_baseline adds the unadapted
/// model as a step-0 candidate.
Choice source_best_select(const surrogate::SurrogateModel& pretrained,
                          const std::vector<double>& lrs,
                          const std::vector<adapt::AdaptTrace>& traces,
                          const srcstats::DOptimalSubset& subset, bool include_baseline);

/// Label-using lower bound: picks the snapshot minimizing true target RMSE
/// (normalized units of the given matrices). Always includes the baseline.
Choice oracle_select(const surrogate::SurrogateModel& pretrained,
                     const std::vector<double>& lrs,
                     const std::vector<adapt::AdaptTrace>& traces, const Matrix& target_x,
                     const Matrix& target_y);

/// Reconstructs the model a choice refers to.
surrogate::SurrogateModel apply_choice(const surrogate::SurrogateModel& pretrained,
                                       const std::vector<double>& lrs,
                                       const std::vector<adapt::AdaptTrace>& traces,
                                       const Choice& choice);

/// Key-value header plus a per-candidate table, for the selection report file.
void write_selection_report(const SelectionResult& result, const std::string& path);

/// Global root-mean-square error of model predictions over all entries.
double model_rmse(const surrogate::SurrogateModel& model, const Matrix& x, const Matrix& y);

}  // namespace satts::select
