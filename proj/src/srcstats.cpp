#include "satts/srcstats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "satts/io.hpp"

namespace satts::srcstats {

SourceStats fit_source_stats(const Matrix& z, double tau) {
  if (z.rows() < 2) fail_validation("fit_source_stats: need at least 2 latent samples");
  if (tau <= 0.0 || tau > 1.0) fail_validation("fit_source_stats: tau must lie in (0, 1]");

  auto [mean, cov] = numkit::covariance(z);
  numkit::EigResult eig = numkit::sym_eig(cov);

  SourceStats s;
  s.mean = std::move(mean);
  s.eigvals = std::move(eig.values);
  s.eigvecs = std::move(eig.vectors);
  s.tau = tau;

  double total = 0.0;
  for (double v : s.eigvals) total += v;
  if (total <= 0.0) {
    std::fprintf(stderr,
                 "warning: latent covariance is identically zero; retaining one component\n");
    s.retained = 1;
    return s;
  }
  double cum = 0.0;
  const double bar = (tau - 1e-12) * total;
  for (size_t k = 0; k < s.eigvals.size(); ++k) {
    cum += s.eigvals[k];
    if (cum >= bar) {
      s.retained = static_cast<int>(k) + 1;
      break;
    }
  }
  if (s.retained == 0) s.retained = static_cast<int>(s.eigvals.size());
  return s;
}

std::vector<int> doptimal_select(const Matrix& z, const SourceStats& stats, int m) {
  const int n = z.rows();
  if (m < 1 || m > n)
    fail_validation("doptimal_select: m must lie in [1, sample count]");
  if (z.cols() != stats.dim()) fail_shape("doptimal_select: latent dimension mismatch");

  // Skip numerically dead directions among the retained ones.
  const double lead = stats.eigvals.empty() ? 0.0 : stats.eigvals[0];
  std::vector<int> live;
  for (int k = 0; k < stats.retained; ++k)
    if (stats.eigvals[static_cast<size_t>(k)] > 1e-12 * std::max(lead, 1.0))
      live.push_back(k);
  if (live.empty()) {
    std::vector<int> idx(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;  // degenerate cloud: any subset spans nothing, take the first m
  }

  const Matrix zc = numkit::center_rows(z, stats.mean);
  const int r = static_cast<int>(live.size());
  Matrix yt(r, n);  // whitened features, samples as columns
  for (int j = 0; j < r; ++j) {
    const int k = live[static_cast<size_t>(j)];
    const double scale = 1.0 / std::sqrt(stats.eigvals[static_cast<size_t>(k)]);
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int c = 0; c < z.cols(); ++c) dot += zc(i, c) * stats.eigvecs(c, k);
      yt(j, i) = dot * scale;
    }
  }

  numkit::QrPivotResult qr = numkit::qr_pivot(yt);
  return {qr.pivots.begin(), qr.pivots.begin() + m};
}

std::vector<double> importance_weights(const Matrix& decoder_w, const SourceStats& stats) {
  const int c = stats.dim();
  if (decoder_w.cols() != c) fail_shape("importance_weights: decoder/stats dimension mismatch");
  std::vector<double> alpha(static_cast<size_t>(c));
  for (int k = 0; k < c; ++k) {
    double sq = 0.0;
    for (int o = 0; o < decoder_w.rows(); ++o) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += decoder_w(o, j) * stats.eigvecs(j, k);
      sq += dot * dot;
    }
    alpha[static_cast<size_t>(k)] = 1.0 + std::sqrt(sq);
  }
  return alpha;
}

SourceStatsArtifact build_artifact(const surrogate::SurrogateModel& model, const Matrix& val_x,
                                   const Matrix& val_y, double tau, int m,
                                   const std::string& checkpoint_crc) {
  if (val_x.rows() != val_y.rows())
    fail_shape("build_artifact: validation inputs/targets row mismatch");
  if (val_y.cols() != model.spec().output_dim)
    fail_shape("build_artifact: validation targets do not match the model output dim");

  surrogate::ForwardCache cache = surrogate::forward(model, val_x);
  const Matrix& z = cache.latent;

  SourceStatsArtifact art;
  art.stats = fit_source_stats(z, tau);
  // Importance weights come from the mean prediction head only.
  Matrix w = model.decoder_weight();
  if (model.spec().variance_head) {
    Matrix w_mean(model.spec().output_dim, w.cols());
    for (int i = 0; i < w_mean.rows(); ++i)
      std::copy(w.row(i), w.row(i) + w.cols(), w_mean.row(i));
    w = std::move(w_mean);
  }
  art.stats.alpha = importance_weights(w, art.stats);

  art.subset.indices = doptimal_select(z, art.stats, m);
  art.subset.inputs = Matrix(m, val_x.cols());
  art.subset.targets = Matrix(m, val_y.cols());
  for (int i = 0; i < m; ++i) {
    const int src = art.subset.indices[static_cast<size_t>(i)];
    std::copy(val_x.row(src), val_x.row(src) + val_x.cols(), art.subset.inputs.row(i));
    std::copy(val_y.row(src), val_y.row(src) + val_y.cols(), art.subset.targets.row(i));
  }

  art.checkpoint_crc = checkpoint_crc;
  art.meta = nlohmann::json{{"tool_version", kToolVersion},
                            {"n_val", val_x.rows()},
                            {"tau", tau},
                            {"m", m},
                            {"spec", model.spec().to_json()}};
  return art;
}

void save_artifact(const SourceStatsArtifact& artifact, const std::string& path) {
  io::BinaryWriter w;
  w.magic("STTSTAT1");
  w.u32(1);
  w.f64_array(artifact.stats.mean);
  w.f64_array(artifact.stats.eigvals);
  w.matrix(artifact.stats.eigvecs);
  w.u32(static_cast<uint32_t>(artifact.stats.retained));
  w.f64(artifact.stats.tau);
  w.f64_array(artifact.stats.alpha);
  w.i32_array(artifact.subset.indices);
  w.matrix(artifact.subset.inputs);
  w.matrix(artifact.subset.targets);
  w.string32(artifact.checkpoint_crc);
  w.string32(artifact.meta.dump());
  w.finish_to_file(path);
}

SourceStatsArtifact load_artifact(const std::string& path) {
  io::BinaryReader r(path, "STTSTAT1");
  const uint32_t version = r.u32();
  if (version != 1)
    fail_format(path + ": unsupported artifact version " + std::to_string(version));

  SourceStatsArtifact art;
  art.stats.mean = r.f64_array();
  art.stats.eigvals = r.f64_array();
  art.stats.eigvecs = r.matrix();
  art.stats.retained = static_cast<int>(r.u32());
  art.stats.tau = r.f64();
  art.stats.alpha = r.f64_array();
  art.subset.indices = r.i32_array();
  art.subset.inputs = r.matrix();
  art.subset.targets = r.matrix();
  art.checkpoint_crc = r.string32();
  try {
    art.meta = nlohmann::json::parse(r.string32());
  } catch (const nlohmann::json::exception& e) {
    fail_format(path + ": bad artifact metadata: " + e.what());
  }

  const int c = art.stats.dim();
  if (art.stats.eigvecs.rows() != c || art.stats.eigvecs.cols() != c ||
      static_cast<int>(art.stats.eigvals.size()) != c ||
      art.stats.retained < 1 || art.stats.retained > c)
    fail_format(path + ": inconsistent statistics dimensions");
  if (art.subset.inputs.rows() != art.subset.targets.rows() ||
      art.subset.inputs.rows() != static_cast<int>(art.subset.indices.size()))
    fail_format(path + ": inconsistent subset dimensions");
  return art;
}

}  // namespace satts::srcstats
