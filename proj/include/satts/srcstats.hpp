#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "satts/numkit.hpp"
#include "satts/surrogate.hpp"

namespace satts::srcstats {

// ---------------------------------------------------------------------------
// The source statistics carried into test time: latent mean/eigenstructure,
// the small D-optimal labeled subset, and per-direction importance weights.
// Together these are the only source knowledge available after deployment.
// ---------------------------------------------------------------------------

struct SourceStats {
  std::vector<double> mean;     // latent column mean, length C
  std::vector<double> eigvals;  // descending, >= 0
  Matrix eigvecs;               // C x C, orthonormal columns
  int retained = 0;             // r: components covering tau of the variance
  double tau = 0.95;
  std::vector<double> alpha;    // importance weights, >= 1 (empty until computed)

  int dim() const { return static_cast<int>(mean.size()); }
};

struct DOptimalSubset {
  std::vector<int> indices;  // rows of the source set the subset came from
  Matrix inputs;             // m x P, model-space units
  Matrix targets;            // m x K
  int m() const { return inputs.rows(); }
};

struct SourceStatsArtifact {
  SourceStats stats;
  DOptimalSubset subset;
  std::string checkpoint_crc;  // hash binding the artifact to its model file
  nlohmann::json meta;         // creation settings echo (no timestamps: reruns must match)
};

/// Latent mean + eigenstructure of Z (population covariance), with the
/// retained-component count from the cumulative variance threshold tau.
/// All-zero eigenvalues degenerate to retained = 1 with a warning.
SourceStats fit_source_stats(const Matrix& z, double tau);

/// Quasi D-optimal m-subset: center by the stats mean, whiten onto the
/// retained nonzero eigendirections, take the first m column pivots of the
/// whitened feature matrix (samples as columns).
std::vector<int> doptimal_select(const Matrix& z, const SourceStats& stats, int m);

/// alpha_k = 1 + ||W v_k||_2 per eigendirection, where W maps latents to the
/// mean prediction head.
std::vector<double> importance_weights(const Matrix& decoder_w, const SourceStats& stats);

/// Runs the full construction against a labeled source validation set.
SourceStatsArtifact build_artifact(const surrogate::SurrogateModel& model, const Matrix& val_x,
                                   const Matrix& val_y, double tau, int m,
                                   const std::string& checkpoint_crc = "");

// Artifact file, magic "STTSTAT1".
void save_artifact(const SourceStatsArtifact& artifact, const std::string& path);
SourceStatsArtifact load_artifact(const std::string& path);

}  // namespace satts::srcstats
