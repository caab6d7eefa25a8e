#include "satts/select.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "satts/io.hpp"

namespace satts::select {

// ===== density-ratio machinery =============================================

namespace {

// Projection onto the pair's reduced space: (z - center) basis.
std::vector<double> reduce_vec(const double* z, const LatentGaussianPair& pair) {
  const int c = pair.basis.rows();
  const int r = pair.basis.cols();
  std::vector<double> out(static_cast<size_t>(r), 0.0);
  for (int i = 0; i < c; ++i) {
    const double zi = z[i] - pair.center[static_cast<size_t>(i)];
    for (int j = 0; j < r; ++j) out[static_cast<size_t>(j)] += zi * pair.basis(i, j);
  }
  return out;
}

Matrix reduce_rows(const Matrix& z, const LatentGaussianPair& pair) {
  Matrix out(z.rows(), pair.basis.cols());
  for (int i = 0; i < z.rows(); ++i) {
    const std::vector<double> y = reduce_vec(z.row(i), pair);
    std::copy(y.begin(), y.end(), out.row(i));
  }
  return out;
}

Matrix top_r_basis(const srcstats::SourceStats& stats) {
  const int c = stats.dim();
  const int r = stats.retained;
  Matrix basis(c, r);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < r; ++j) basis(i, j) = stats.eigvecs(i, j);
  return basis;
}

}  // namespace

LatentGaussianPair fit_latent_pair(const Matrix& z_src, const Matrix& z_tgt,
                                   const srcstats::SourceStats& stats, double ratio_ceiling,
                                   double eps_scale) {
  if (z_src.rows() < 2 || z_tgt.rows() < 2)
    fail_validation("latent pair needs at least 2 samples per side");
  if (z_src.cols() != stats.dim() || z_tgt.cols() != stats.dim())
    fail_shape("latent dimension does not match the source statistics");

  LatentGaussianPair pair;
  pair.basis = top_r_basis(stats);
  pair.center = stats.mean;
  pair.ratio_ceiling = ratio_ceiling;

  const numkit::MeanCov src = numkit::covariance(reduce_rows(z_src, pair));
  const numkit::MeanCov tgt = numkit::covariance(reduce_rows(z_tgt, pair));
  pair.src = numkit::make_gaussian(src.mean, src.cov, eps_scale);
  pair.tgt = numkit::make_gaussian(tgt.mean, tgt.cov, eps_scale);
  return pair;
}

LatentGaussianPair pair_from_stats(const srcstats::SourceStats& stats, const Matrix& z_tgt,
                                   double ratio_ceiling, double eps_scale) {
  if (z_tgt.rows() < 2) fail_validation("latent pair needs at least 2 target samples");
  if (z_tgt.cols() != stats.dim())
    fail_shape("latent dimension does not match the source statistics");

  LatentGaussianPair pair;
  pair.basis = top_r_basis(stats);
  pair.center = stats.mean;
  pair.ratio_ceiling = ratio_ceiling;

  // In the reduced coordinates the fitted source density is exact: mean zero,
  // covariance diag(lambda_1..lambda_r), because the basis diagonalizes the
  // source covariance.
  const int r = stats.retained;
  Matrix src_cov(r, r);
  for (int j = 0; j < r; ++j) src_cov(j, j) = stats.eigvals[static_cast<size_t>(j)];
  pair.src = numkit::make_gaussian(std::vector<double>(static_cast<size_t>(r), 0.0), src_cov,
                                   eps_scale);

  const numkit::MeanCov tgt = numkit::covariance(reduce_rows(z_tgt, pair));
  pair.tgt = numkit::make_gaussian(tgt.mean, tgt.cov, eps_scale);
  return pair;
}

double density_ratio(const std::vector<double>& z, const LatentGaussianPair& pair) {
  if (static_cast<int>(z.size()) != pair.basis.rows())
    fail_shape("density_ratio: latent dimension mismatch");
  const std::vector<double> y = reduce_vec(z.data(), pair);
  const double log_ratio = numkit::gauss_logpdf(y, pair.tgt) - numkit::gauss_logpdf(y, pair.src);
  const double beta = std::exp(log_ratio);
  return beta > pair.ratio_ceiling ? pair.ratio_ceiling : beta;
}

double weighted_risk(const std::vector<double>& betas, const std::vector<double>& sq_residuals) {
  if (betas.size() != sq_residuals.size() || betas.empty())
    fail_validation("weighted_risk: need matching non-empty weight and residual lists");
  double acc = 0.0;
  for (size_t i = 0; i < betas.size(); ++i) acc += betas[i] * sq_residuals[i];
  return acc / static_cast<double>(betas.size());
}

// ===== importance-weighted risk ============================================

namespace {

std::vector<double> subset_sq_residuals(const surrogate::ForwardCache& cache,
                                        const Matrix& targets) {
  std::vector<double> out(static_cast<size_t>(targets.rows()), 0.0);
  for (int i = 0; i < targets.rows(); ++i) {
    double acc = 0.0;
    for (int k = 0; k < targets.cols(); ++k) {
      const double d = cache.predictions(i, k) - targets(i, k);
      acc += d * d;
    }
    out[static_cast<size_t>(i)] = acc;
  }
  return out;
}

std::vector<double> subset_betas(const Matrix& latents, const LatentGaussianPair& pair) {
  std::vector<double> betas(static_cast<size_t>(latents.rows()), 0.0);
  for (int i = 0; i < latents.rows(); ++i) {
    std::vector<double> z(latents.row(i), latents.row(i) + latents.cols());
    betas[static_cast<size_t>(i)] = density_ratio(z, pair);
  }
  return betas;
}

}  // namespace

double iwv_risk(const surrogate::SurrogateModel& model, const srcstats::DOptimalSubset& subset,
                const LatentGaussianPair& pair) {
  if (subset.m() == 0) fail_validation("iwv_risk: empty subset");
  const surrogate::ForwardCache cache = surrogate::forward(model, subset.inputs);
  return weighted_risk(subset_betas(cache.latent, pair),
                       subset_sq_residuals(cache, subset.targets));
}

namespace {

struct RiskEstimate {
  double risk = 0.0;
  double weight_sum = 0.0;  // 0: every subset sample fell off the target density
};

// Candidates keep their say only while they retain at least this fraction of
// the baseline's importance mass. Destructive steps drain mass well before
// they drive it to zero: the subset latents slide off the target density and
// the shrinking weights read as a spurious drop in weighted risk. Steps that
// actually help hold their mass or gain some, so the floor sits close to 1.
constexpr double kMinEvidenceFraction = 0.9;

}  // namespace

// ===== learning-rate line search ===========================================

SelectionResult lr_line_search(surrogate::SurrogateModel& model,
                               const std::vector<Matrix>& stream,
                               const srcstats::SourceStatsArtifact& artifact,
                               const adapt::AdaptationConfig& base_cfg,
                               const LineSearchConfig& search,
                               std::vector<adapt::AdaptTrace>* traces_out) {
  if (search.grid.empty()) fail_validation("line search: empty learning-rate grid");
  if (search.patience < 1) fail_validation("line search: patience must be >= 1");

  int target_rows = 0;
  for (const Matrix& b : stream) target_rows += b.rows();
  if (target_rows < 2) fail_validation("line search: need at least 2 target samples");
  Matrix z_tgt;
  {
    Matrix all(target_rows, model.spec().input_dim);
    int at = 0;
    for (const Matrix& b : stream) {
      for (int i = 0; i < b.rows(); ++i, ++at)
        std::copy(b.row(i), b.row(i) + b.cols(), all.row(at));
    }
    z_tgt = surrogate::forward(model, all).latent;
  }
  const LatentGaussianPair pair =
      pair_from_stats(artifact.stats, z_tgt, search.ratio_ceiling, search.eps_scale);

  // The ratio is normally re-evaluated at the current model's subset latents;
  // the frozen variant pins the weights computed before any adaptation.
  std::vector<double> frozen;
  if (search.frozen_latents)
    frozen = subset_betas(surrogate::forward(model, artifact.subset.inputs).latent, pair);
  auto eval_iwv = [&](const surrogate::SurrogateModel& m) {
    const surrogate::ForwardCache cache = surrogate::forward(m, artifact.subset.inputs);
    const std::vector<double> betas =
        search.frozen_latents ? frozen : subset_betas(cache.latent, pair);
    RiskEstimate est;
    est.risk = weighted_risk(betas, subset_sq_residuals(cache, artifact.subset.targets));
    for (double b : betas) est.weight_sum += b;
    return est;
  };

  const RiskEstimate baseline = eval_iwv(model);

  const int n_lr = static_cast<int>(search.grid.size());
  std::vector<adapt::AdaptTrace> traces(static_cast<size_t>(n_lr));
  std::vector<std::string> failures(static_cast<size_t>(n_lr));
  parallel_for(n_lr, [&](int j) {
    surrogate::SurrogateModel trial = model;
    adapt::AdaptationConfig cfg = base_cfg;
    cfg.lr = search.grid[static_cast<size_t>(j)];
    try {
      traces[static_cast<size_t>(j)] =
          adapt::run_adaptation(trial, stream, artifact.stats, artifact.subset, cfg);
    } catch (const Error& e) {
      failures[static_cast<size_t>(j)] = e.what();
    }
  });
  for (int j = 0; j < n_lr; ++j) {
    if (!failures[static_cast<size_t>(j)].empty())
      std::fprintf(stderr, "warning: lr %g dropped from line search: %s\n",
                   search.grid[static_cast<size_t>(j)], failures[static_cast<size_t>(j)].c_str());
  }

  SelectionResult result;
  result.table.push_back({0.0, 0, baseline.risk, true});

  // Scan each trace in grid order, stopping a learning rate once its risk has
  // failed to improve for `patience` consecutive steps; later snapshots are
  // not candidates (they stay in the trace for the diagnostic selectors).
  int best_lr_idx = -1;
  int best_step = 0;
  double best = baseline.risk;
  for (int j = 0; j < n_lr; ++j) {
    const adapt::AdaptTrace& trace = traces[static_cast<size_t>(j)];
    surrogate::SurrogateModel scratch = model;
    double lr_best = baseline.risk;
    int streak = 0;
    bool warned_zero = false;
    for (const adapt::StepRecord& rec : trace.records) {
      scratch.restore_adaptable(rec.snapshot);
      const RiskEstimate est = eval_iwv(scratch);
      const double iwv = est.risk;
      // Risks are only comparable between estimates carrying commensurate
      // importance mass. A candidate whose total weight collapsed relative to
      // the baseline has pushed the subset latents off the target density;
      // its low "risk" measures lost evidence, not lower risk.
      const bool no_weight =
          est.weight_sum <= 0.0 || est.weight_sum < kMinEvidenceFraction * baseline.weight_sum;
      const bool valid = rec.ok && std::isfinite(iwv) && !no_weight;
      if (no_weight && !warned_zero) {
        std::fprintf(stderr,
                     "warning: lr %g step %d: importance mass dropped, skipping\n",
                     search.grid[static_cast<size_t>(j)], rec.step);
        warned_zero = true;
      }
      result.table.push_back({search.grid[static_cast<size_t>(j)], rec.step, iwv, valid});
      if (valid && iwv < lr_best) {
        lr_best = iwv;
        streak = 0;
      } else if (++streak >= search.patience) {
        break;
      }
      if (!valid) continue;
      const bool wins = iwv < best ||
                        (iwv == best && best_lr_idx >= 0 &&
                         (rec.step < best_step || (rec.step == best_step && j < best_lr_idx)));
      if (wins) {
        best = iwv;
        best_lr_idx = j;
        best_step = rec.step;
      }
    }
  }

  if (best_lr_idx < 0) {
    result.fallback = true;
    result.iwv = baseline.risk;
  } else {
    result.lr = search.grid[static_cast<size_t>(best_lr_idx)];
    result.step = best_step;
    result.iwv = best;
    result.fallback = false;
    model.restore_adaptable(
        traces[static_cast<size_t>(best_lr_idx)].records[static_cast<size_t>(best_step - 1)].snapshot);
  }
  if (traces_out) *traces_out = std::move(traces);
  return result;
}

// ===== diagnostic selectors ================================================

namespace {

struct Scored {
  double lr;
  int step;
  double score;
};

// Lowest score; ties go to the lowest step, then the lowest learning rate.
bool better(const Scored& a, const Scored& b) {
  if (a.score != b.score) return a.score < b.score;
  if (a.step != b.step) return a.step < b.step;
  return a.lr < b.lr;
}

Choice pick_best(const surrogate::SurrogateModel& pretrained, const std::vector<double>& lrs,
                 const std::vector<adapt::AdaptTrace>& traces,
                 const std::function<double(const surrogate::SurrogateModel&)>& score,
                 bool include_baseline) {
  if (lrs.size() != traces.size()) fail_validation("selector: lr list and trace list differ");
  bool any = false;
  Scored best{0.0, 0, 0.0};
  surrogate::SurrogateModel scratch = pretrained;
  if (include_baseline) {
    best = {0.0, 0, score(pretrained)};
    any = true;
  }
  for (size_t j = 0; j < traces.size(); ++j) {
    for (const adapt::StepRecord& rec : traces[j].records) {
      if (!rec.ok) continue;
      scratch.restore_adaptable(rec.snapshot);
      const double s = score(scratch);
      if (!std::isfinite(s)) continue;
      const Scored cand{lrs[j], rec.step, s};
      if (!any || better(cand, best)) {
        best = cand;
        any = true;
      }
    }
  }
  if (!any) fail_validation("selector: no scoreable candidates");
  return {best.lr, best.step, best.score, false};
}

}  // namespace

Choice source_best_select(const surrogate::SurrogateModel& pretrained,
                          const std::vector<double>& lrs,
                          const std::vector<adapt::AdaptTrace>& traces,
                          const srcstats::DOptimalSubset& subset, bool include_baseline) {
  return pick_best(
      pretrained, lrs, traces,
      [&](const surrogate::SurrogateModel& m) { return adapt::source_risk(m, subset); },
      include_baseline);
}

Choice oracle_select(const surrogate::SurrogateModel& pretrained,
                     const std::vector<double>& lrs,
                     const std::vector<adapt::AdaptTrace>& traces, const Matrix& target_x,
                     const Matrix& target_y) {
  Choice c = pick_best(
      pretrained, lrs, traces,
      [&](const surrogate::SurrogateModel& m) { return model_rmse(m, target_x, target_y); },
      true);
  c.diagnostic_only = true;
  return c;
}

surrogate::SurrogateModel apply_choice(const surrogate::SurrogateModel& pretrained,
                                       const std::vector<double>& lrs,
                                       const std::vector<adapt::AdaptTrace>& traces,
                                       const Choice& choice) {
  surrogate::SurrogateModel model = pretrained;
  if (choice.step == 0) return model;
  for (size_t j = 0; j < lrs.size(); ++j) {
    if (lrs[j] != choice.lr) continue;
    for (const adapt::StepRecord& rec : traces[j].records) {
      if (rec.step == choice.step) {
        model.restore_adaptable(rec.snapshot);
        return model;
      }
    }
  }
  fail_validation("apply_choice: choice does not name a recorded snapshot");
}

// ===== reporting ===========================================================

double model_rmse(const surrogate::SurrogateModel& model, const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.rows() == 0) fail_shape("model_rmse: mismatched evaluation set");
  const surrogate::ForwardCache cache = surrogate::forward(model, x);
  double acc = 0.0;
  for (int i = 0; i < y.rows(); ++i)
    for (int k = 0; k < y.cols(); ++k) {
      const double d = cache.predictions(i, k) - y(i, k);
      acc += d * d;
    }
  return std::sqrt(acc / (static_cast<double>(y.rows()) * y.cols()));
}

void write_selection_report(const SelectionResult& result, const std::string& path) {
  std::string text;
  char buf[160];
  std::vector<double> grid;
  for (const CandidateRow& row : result.table)
    if (row.lr > 0.0 && (grid.empty() || grid.back() != row.lr)) grid.push_back(row.lr);
  text += "grid:";
  for (double lr : grid) {
    std::snprintf(buf, sizeof buf, " %g", lr);
    text += buf;
  }
  std::snprintf(buf, sizeof buf, "\nchosen_lr: %g\nchosen_step: %d\nchosen_iwv: %.17g\n",
                result.lr, result.step, result.iwv);
  text += buf;
  text += result.fallback ? "fallback: true\n" : "fallback: false\n";
  text += "lr,step,iwv,valid\n";
  for (const CandidateRow& row : result.table) {
    std::snprintf(buf, sizeof buf, "%g,%d,%.17g,%d\n", row.lr, row.step, row.iwv,
                  row.valid ? 1 : 0);
    text += buf;
  }
  io::write_file_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

}  // namespace satts::select
