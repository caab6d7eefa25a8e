#include "satts/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "satts/io.hpp"

namespace satts::adapt {

void AdaptationConfig::validate() const {
  if (lr < 0.0) fail_validation("adaptation config: learning rate must be >= 0");
  if (batch_size < 2) fail_validation("adaptation config: batch size must be >= 2");
  if (max_steps < 0) fail_validation("adaptation config: max_steps must be >= 0");
  if (lambda_src >= 0.0 && !std::isfinite(lambda_src))
    fail_validation("adaptation config: lambda must be finite");
}

double AdaptationConfig::resolve_lambda(int subset_m) const {
  if (lambda_src >= 0.0) return lambda_src;
  return static_cast<double>(subset_m) / batch_size;
}

int AdaptationConfig::resolve_top_k(int latent_dim) const {
  if (ssa_top_k > 0) {
    if (ssa_top_k > latent_dim) fail_validation("adaptation config: ssa_top_k exceeds latent dim");
    return ssa_top_k;
  }
  return std::max(1, latent_dim / 2);
}

// ===== projection and alignment losses =====================================

Projection project_target(const Matrix& z_tgt, const srcstats::SourceStats& stats,
                          AlphaMode mode) {
  const int b = z_tgt.rows(), c = z_tgt.cols();
  if (b < 2) fail_validation("project_target: need at least 2 samples for batch statistics");
  if (c != stats.dim()) fail_shape("project_target: latent dimension mismatch");
  if (mode == AlphaMode::ScaledFeatures && static_cast<int>(stats.alpha.size()) != c)
    fail_validation("project_target: importance weights missing from source stats");

  Projection p;
  p.ztilde = Matrix(b, c);
  for (int i = 0; i < b; ++i) {
    for (int k = 0; k < c; ++k) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j)
        dot += (z_tgt(i, j) - stats.mean[static_cast<size_t>(j)]) * stats.eigvecs(j, k);
      if (mode == AlphaMode::ScaledFeatures) dot *= stats.alpha[static_cast<size_t>(k)];
      p.ztilde(i, k) = dot;
    }
  }

  p.stats.mean.assign(static_cast<size_t>(c), 0.0);
  p.stats.var.assign(static_cast<size_t>(c), 0.0);
  for (int k = 0; k < c; ++k) {
    double mu = 0.0;
    for (int i = 0; i < b; ++i) mu += p.ztilde(i, k);
    mu /= b;
    double var = 0.0;
    for (int i = 0; i < b; ++i) {
      const double d = p.ztilde(i, k) - mu;
      var += d * d;
    }
    var /= b;
    p.stats.mean[static_cast<size_t>(k)] = mu;
    p.stats.var[static_cast<size_t>(k)] = std::max(var, kEpsVar);
  }
  return p;
}

namespace {

// Reference eigenvalue for direction k under the given mode.
double ref_lambda(const srcstats::SourceStats& stats, AlphaMode mode, int k) {
  const double lam = std::max(stats.eigvals[static_cast<size_t>(k)], kEpsVar);
  if (mode == AlphaMode::ScaledFeatures) {
    const double a = stats.alpha[static_cast<size_t>(k)];
    return a * a * lam;
  }
  return lam;
}

// Symmetric-KL summand between N(m, s2) and N(0, lam), halved.
double kl_term(double m, double s2, double lam) {
  return 0.5 * ((m * m + lam) / s2 + (m * m + s2) / lam - 2.0);
}

// d(kl_term)/dm and d(kl_term)/ds2.
void kl_term_grad(double m, double s2, double lam, double* dm, double* ds2) {
  *dm = m * (1.0 / s2 + 1.0 / lam);
  *ds2 = 0.5 * (-(m * m + lam) / (s2 * s2) + 1.0 / lam);
}

// Pushes per-direction (dm, ds2) through the batch statistics and the
// projection back to latent space. Any alpha factors on the loss summands are
// already folded into dm/ds2 by the callers.
Matrix stats_backward(const Projection& proj, const srcstats::SourceStats& stats,
                      AlphaMode mode, const std::vector<double>& dm,
                      const std::vector<double>& ds2) {
  const int b = proj.ztilde.rows(), c = proj.ztilde.cols();

  // The variance floor kills the s2 path where it binds.
  std::vector<double> raw_var(static_cast<size_t>(c), 0.0);
  for (int k = 0; k < c; ++k) {
    double mu = 0.0;
    for (int i = 0; i < b; ++i) mu += proj.ztilde(i, k);
    mu /= b;
    double var = 0.0;
    for (int i = 0; i < b; ++i) {
      const double d = proj.ztilde(i, k) - mu;
      var += d * d;
    }
    raw_var[static_cast<size_t>(k)] = var / b;
  }

  Matrix d_zt(b, c);
  for (int k = 0; k < c; ++k) {
    const double mu = proj.stats.mean[static_cast<size_t>(k)];
    const double g_m = dm[static_cast<size_t>(k)];
    const double g_v =
        raw_var[static_cast<size_t>(k)] < kEpsVar ? 0.0 : ds2[static_cast<size_t>(k)];
    for (int i = 0; i < b; ++i)
      d_zt(i, k) = g_m / b + g_v * (2.0 / b) * (proj.ztilde(i, k) - mu);
  }

  // Back through the projection: ztilde = (Z - mean) V (alpha per column in
  // scaled mode), so dZ = (d_zt * alpha) V^T.
  Matrix dz(b, c);
  for (int i = 0; i < b; ++i) {
    for (int k = 0; k < c; ++k) {
      double v = d_zt(i, k);
      if (mode == AlphaMode::ScaledFeatures) v *= stats.alpha[static_cast<size_t>(k)];
      if (v == 0.0) continue;
      for (int j = 0; j < c; ++j) dz(i, j) += v * stats.eigvecs(j, k);
    }
  }
  return dz;
}

}  // namespace

// Only the retained leading directions enter the loss. Trailing eigenvalues
// sit at noise scale (the final layer-norm even pins one to exactly zero), so
// their 1/lambda terms would swamp the objective the moment adaptation nudges
// any variance into them.
double kl_alignment_loss(const ProjectedTargetStats& proj, const srcstats::SourceStats& stats,
                         AlphaMode mode) {
  const int c = stats.dim();
  if (static_cast<int>(proj.mean.size()) != c)
    fail_shape("kl_alignment_loss: dimension mismatch");
  if (static_cast<int>(stats.alpha.size()) != c)
    fail_validation("kl_alignment_loss: importance weights missing from source stats");
  const int r = std::clamp(stats.retained, 1, c);
  double loss = 0.0;
  for (int k = 0; k < r; ++k) {
    const double term = kl_term(proj.mean[static_cast<size_t>(k)],
                                proj.var[static_cast<size_t>(k)], ref_lambda(stats, mode, k));
    loss += mode == AlphaMode::WeightedKl ? stats.alpha[static_cast<size_t>(k)] * term : term;
  }
  if (!std::isfinite(loss)) fail_numeric("kl_alignment_loss: non-finite value");
  return loss;
}

Matrix kl_alignment_backward(const Projection& proj, const srcstats::SourceStats& stats,
                             AlphaMode mode) {
  const int c = stats.dim();
  const int r = std::clamp(stats.retained, 1, c);
  std::vector<double> dm(static_cast<size_t>(c), 0.0), ds2(static_cast<size_t>(c), 0.0);
  for (int k = 0; k < r; ++k) {
    kl_term_grad(proj.stats.mean[static_cast<size_t>(k)], proj.stats.var[static_cast<size_t>(k)],
                 ref_lambda(stats, mode, k), &dm[static_cast<size_t>(k)],
                 &ds2[static_cast<size_t>(k)]);
    if (mode == AlphaMode::WeightedKl) {
      dm[static_cast<size_t>(k)] *= stats.alpha[static_cast<size_t>(k)];
      ds2[static_cast<size_t>(k)] *= stats.alpha[static_cast<size_t>(k)];
    }
  }
  return stats_backward(proj, stats, mode, dm, ds2);
}

double ssa_alignment_loss(const ProjectedTargetStats& proj, const srcstats::SourceStats& stats,
                          int top_k) {
  if (top_k < 1 || top_k > stats.dim())
    fail_validation("ssa_alignment_loss: top_k out of range");
  if (static_cast<int>(stats.alpha.size()) != stats.dim())
    fail_validation("ssa_alignment_loss: importance weights missing from source stats");
  double loss = 0.0;
  for (int k = 0; k < top_k; ++k) {
    const double lam = std::max(stats.eigvals[static_cast<size_t>(k)], kEpsVar);
    loss += stats.alpha[static_cast<size_t>(k)] *
            kl_term(proj.mean[static_cast<size_t>(k)], proj.var[static_cast<size_t>(k)], lam);
  }
  if (!std::isfinite(loss)) fail_numeric("ssa_alignment_loss: non-finite value");
  return loss;
}

Matrix ssa_alignment_backward(const Projection& proj, const srcstats::SourceStats& stats,
                              int top_k) {
  const int c = stats.dim();
  std::vector<double> dm(static_cast<size_t>(c), 0.0), ds2(static_cast<size_t>(c), 0.0);
  for (int k = 0; k < top_k; ++k) {
    double gm, gv;
    kl_term_grad(proj.stats.mean[static_cast<size_t>(k)], proj.stats.var[static_cast<size_t>(k)],
                 std::max(stats.eigvals[static_cast<size_t>(k)], kEpsVar), &gm, &gv);
    dm[static_cast<size_t>(k)] = stats.alpha[static_cast<size_t>(k)] * gm;
    ds2[static_cast<size_t>(k)] = stats.alpha[static_cast<size_t>(k)] * gv;
  }
  return stats_backward(proj, stats, AlphaMode::WeightedKl, dm, ds2);
}

// ===== source risk =========================================================

double source_risk(const surrogate::SurrogateModel& model,
                   const srcstats::DOptimalSubset& subset) {
  if (subset.m() == 0) fail_validation("source_risk: empty subset");
  surrogate::ForwardCache cache = surrogate::forward(model, subset.inputs);
  return surrogate::mse_value_and_grad(cache.predictions, subset.targets, nullptr);
}

// ===== adaptation steps ====================================================

namespace {

StepRecord guarded_step(surrogate::SurrogateModel& model, int step_index,
                        const std::function<StepRecord()>& body) {
  const std::vector<double> before = model.snapshot_adaptable();
  try {
    return body();
  } catch (const Error& e) {
    if (e.kind() != Error::Kind::Numeric) throw;
    model.restore_adaptable(before);
    std::fprintf(stderr, "warning: step %d rolled back (%s)\n", step_index, e.what());
    StepRecord rec;
    rec.step = step_index;
    rec.ok = false;
    rec.snapshot = before;
    return rec;
  }
}

}  // namespace

StepRecord satts_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                      const srcstats::SourceStats& stats,
                      const srcstats::DOptimalSubset& subset, const AdaptationConfig& cfg,
                      surrogate::OptimizerState& opt, int step_index) {
  cfg.validate();
  const int b = batch_x.rows(), m = subset.m();
  const double lambda = cfg.resolve_lambda(m);

  return guarded_step(model, step_index, [&]() -> StepRecord {
    Matrix joint(b + m, batch_x.cols());
    for (int i = 0; i < b; ++i)
      std::copy(batch_x.row(i), batch_x.row(i) + batch_x.cols(), joint.row(i));
    for (int i = 0; i < m; ++i)
      std::copy(subset.inputs.row(i), subset.inputs.row(i) + subset.inputs.cols(),
                joint.row(b + i));

    surrogate::ForwardCache cache = surrogate::forward(model, joint);

    Matrix z_tgt(b, cache.latent.cols());
    for (int i = 0; i < b; ++i)
      std::copy(cache.latent.row(i), cache.latent.row(i) + cache.latent.cols(), z_tgt.row(i));
    const Projection proj = project_target(z_tgt, stats, cfg.alpha_mode);
    const double l_kl = kl_alignment_loss(proj.stats, stats, cfg.alpha_mode);

    Matrix pred_s(m, cache.predictions.cols());
    for (int i = 0; i < m; ++i)
      std::copy(cache.predictions.row(b + i), cache.predictions.row(b + i) + pred_s.cols(),
                pred_s.row(i));
    Matrix d_pred_s;
    const double r_src = surrogate::mse_value_and_grad(pred_s, subset.targets, &d_pred_s);
    const double l_tta = l_kl + lambda * r_src;
    if (!std::isfinite(l_tta)) fail_numeric("satts_step: non-finite composite loss");

    const Matrix d_z_tgt = kl_alignment_backward(proj, stats, cfg.alpha_mode);
    Matrix d_latent(b + m, cache.latent.cols());
    for (int i = 0; i < b; ++i)
      std::copy(d_z_tgt.row(i), d_z_tgt.row(i) + d_z_tgt.cols(), d_latent.row(i));

    Matrix d_output(cache.output.rows(), cache.output.cols());
    for (int i = 0; i < m; ++i)
      for (int k = 0; k < d_pred_s.cols(); ++k)
        d_output(b + i, k) = lambda * d_pred_s(i, k);

    surrogate::Gradients grads = surrogate::backward(model, cache, d_output, &d_latent,
                                                     surrogate::ParamFilter::LayerNormPhi);
    surrogate::optimizer_step(model, grads, opt, cfg.lr);

    StepRecord rec;
    rec.step = step_index;
    rec.l_kl = l_kl;
    rec.r_src = r_src;
    rec.l_tta = l_tta;
    rec.snapshot = model.snapshot_adaptable();
    return rec;
  });
}

StepRecord ssa_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                    const srcstats::SourceStats& stats, const AdaptationConfig& cfg,
                    surrogate::OptimizerState& opt, int step_index) {
  cfg.validate();
  const int top_k = cfg.resolve_top_k(stats.dim());

  return guarded_step(model, step_index, [&]() -> StepRecord {
    surrogate::ForwardCache cache = surrogate::forward(model, batch_x);
    const Projection proj = project_target(cache.latent, stats, AlphaMode::WeightedKl);
    const double loss = ssa_alignment_loss(proj.stats, stats, top_k);

    const Matrix d_latent = ssa_alignment_backward(proj, stats, top_k);
    Matrix d_output(cache.output.rows(), cache.output.cols());
    surrogate::Gradients grads = surrogate::backward(model, cache, d_output, &d_latent,
                                                     surrogate::ParamFilter::LayerNormPhi);
    surrogate::optimizer_step(model, grads, opt, cfg.lr);

    StepRecord rec;
    rec.step = step_index;
    rec.l_kl = loss;
    rec.l_tta = loss;
    rec.snapshot = model.snapshot_adaptable();
    return rec;
  });
}

StepRecord tent_step(surrogate::SurrogateModel& model, const Matrix& batch_x,
                     const AdaptationConfig& cfg, surrogate::OptimizerState& opt,
                     int step_index) {
  cfg.validate();
  if (!model.spec().variance_head)
    fail_validation("tent_step: model was built without a variance head");

  return guarded_step(model, step_index, [&]() -> StepRecord {
    surrogate::ForwardCache cache = surrogate::forward(model, batch_x);
    const int n = cache.output.rows();
    const int k_out = model.spec().output_dim;

    // Mean over the batch of the Gaussian predictive entropy.
    double loss = 0.0;
    Matrix d_output(cache.output.rows(), cache.output.cols());
    constexpr double log_2pi_e = 2.8378770664093453;
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < k_out; ++k) {
        const double v = cache.variances(i, k);
        const double s = cache.output(i, k_out + k);
        loss += 0.5 * (log_2pi_e + std::log(v));
        d_output(i, k_out + k) = surrogate::sigmoid(s) / (2.0 * v * n);
      }
    }
    loss /= n;
    if (!std::isfinite(loss)) fail_numeric("tent_step: non-finite entropy");

    surrogate::Gradients grads = surrogate::backward(model, cache, d_output, nullptr,
                                                     surrogate::ParamFilter::LayerNormPhi);
    surrogate::optimizer_step(model, grads, opt, cfg.lr);

    StepRecord rec;
    rec.step = step_index;
    rec.l_kl = loss;
    rec.l_tta = loss;
    rec.snapshot = model.snapshot_adaptable();
    return rec;
  });
}

// ===== stream driver =======================================================

AdaptTrace run_adaptation(surrogate::SurrogateModel& model, const std::vector<Matrix>& stream,
                          const srcstats::SourceStats& stats,
                          const srcstats::DOptimalSubset& subset, const AdaptationConfig& cfg) {
  cfg.validate();
  AdaptTrace trace;
  if (cfg.method == Method::None) return trace;

  surrogate::OptimizerState opt;
  opt.kind = cfg.optimizer;

  int step = 0;
  for (const Matrix& batch : stream) {
    if (step >= cfg.max_steps) break;
    ++step;
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord rec;
    switch (cfg.method) {
      case Method::Satts: rec = satts_step(model, batch, stats, subset, cfg, opt, step); break;
      case Method::Ssa: rec = ssa_step(model, batch, stats, cfg, opt, step); break;
      case Method::Tent: rec = tent_step(model, batch, cfg, opt, step); break;
      case Method::None: break;
    }
    const auto t1 = std::chrono::steady_clock::now();
    trace.step_seconds_total += std::chrono::duration<double>(t1 - t0).count();
    trace.steps_timed += 1;
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

// ===== trace export ========================================================

void export_trace(const AdaptTrace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail_io("cannot open for writing: " + path);
  out << "step,l_kl,r_src,l_tta\n";
  char line[160];
  for (const StepRecord& r : trace.records) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", r.step, r.l_kl, r.r_src, r.l_tta);
    out << line;
  }
  if (!out) fail_io("write failed: " + path);
}

void save_snapshots(const AdaptTrace& trace, const std::string& path) {
  io::BinaryWriter w;
  w.magic("STTSNAP1");
  w.u32(1);
  w.u32(static_cast<uint32_t>(trace.records.size()));
  for (const StepRecord& r : trace.records) {
    w.u32(static_cast<uint32_t>(r.step));
    w.f64(r.l_kl);
    w.f64(r.r_src);
    w.f64(r.l_tta);
    w.u8(r.ok ? 1 : 0);
    w.f64_array(r.snapshot);
  }
  w.finish_to_file(path);
}

AdaptTrace load_snapshots(const std::string& path) {
  io::BinaryReader r(path, "STTSNAP1");
  const uint32_t version = r.u32();
  if (version != 1)
    fail_format(path + ": unsupported snapshot version " + std::to_string(version));
  AdaptTrace trace;
  const uint32_t count = r.u32();
  trace.records.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    StepRecord& rec = trace.records[i];
    rec.step = static_cast<int>(r.u32());
    rec.l_kl = r.f64();
    rec.r_src = r.f64();
    rec.l_tta = r.f64();
    rec.ok = r.u8() != 0;
    rec.snapshot = r.f64_array();
  }
  return trace;
}

}  // namespace satts::adapt
