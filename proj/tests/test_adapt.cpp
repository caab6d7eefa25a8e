#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "satts/adapt.hpp"
#include "satts/common.hpp"
#include "satts/io.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

using namespace satts;
using namespace satts::adapt;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("satts_adapt_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

surrogate::SurrogateModel tiny_model(uint64_t seed, bool variance_head = false) {
  surrogate::SurrogateSpec spec;
  spec.input_dim = 2;
  spec.latent_dim = 3;
  spec.output_dim = 4;
  spec.hidden = {8};
  spec.variance_head = variance_head;
  spec.seed = seed;
  spec.validate();
  return surrogate::SurrogateModel::build(spec);
}

// model + artifact pair with real eigenstructure and importance weights
struct Rig {
  surrogate::SurrogateModel model;
  srcstats::SourceStatsArtifact art;
};

Rig make_rig(uint64_t seed, bool variance_head = false) {
  Rig rig{tiny_model(seed, variance_head), {}};
  Rng rng(seed + 100);
  const Matrix vx = random_matrix(rng, 48, 2);
  const Matrix vy = random_matrix(rng, 48, 4);
  rig.art = srcstats::build_artifact(rig.model, vx, vy, 0.95, 4);
  return rig;
}

// one-direction stats for closed-form loss values
srcstats::SourceStats scalar_stats(double lam) {
  srcstats::SourceStats s;
  s.mean = {0.0};
  s.eigvals = {lam};
  s.eigvecs = Matrix::from_rows({{1.0}});
  s.retained = 1;
  s.alpha = {1.0};
  return s;
}

}  // namespace

// ===== config resolution ===================================================

TEST_CASE("lambda and top-k defaults resolve from the problem size") {
  AdaptationConfig cfg;
  CHECK(cfg.resolve_lambda(8) == doctest::Approx(0.125).epsilon(1e-15));
  cfg.lambda_src = 0.7;
  CHECK(cfg.resolve_lambda(8) == 0.7);
  cfg.lambda_src = 0.0;
  CHECK(cfg.resolve_lambda(8) == 0.0);

  AdaptationConfig tk;
  CHECK(tk.resolve_top_k(8) == 4);
  CHECK(tk.resolve_top_k(3) == 1);
  tk.ssa_top_k = 5;
  CHECK(tk.resolve_top_k(8) == 5);
  CHECK_THROWS_AS(tk.resolve_top_k(4), Error);

  AdaptationConfig bad;
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = AdaptationConfig{};
  bad.lr = -0.1;
  CHECK_THROWS_AS(bad.validate(), Error);
}

// ===== projection ==========================================================

TEST_CASE("projection onto a rotated frame, with and without feature scaling") {
  const double c = 1.0 / std::sqrt(2.0);
  srcstats::SourceStats s;
  s.mean = {1.0, 1.0};
  s.eigvals = {1.0, 1.0};
  s.eigvecs = Matrix::from_rows({{c, -c}, {c, c}});
  s.retained = 2;
  s.alpha = {2.0, 1.0};

  const Matrix z = Matrix::from_rows({{2.0, 1.0}, {1.0, 2.0}, {0.0, 0.0}});

  const Projection scaled = project_target(z, s, AlphaMode::ScaledFeatures);
  CHECK(scaled.ztilde(0, 0) == doctest::Approx(2.0 * c).epsilon(1e-12));
  CHECK(scaled.ztilde(0, 1) == doctest::Approx(-c).epsilon(1e-12));
  CHECK(scaled.ztilde(1, 0) == doctest::Approx(2.0 * c).epsilon(1e-12));
  CHECK(scaled.ztilde(1, 1) == doctest::Approx(c).epsilon(1e-12));
  CHECK(scaled.ztilde(2, 0) == doctest::Approx(-4.0 * c).epsilon(1e-12));
  CHECK(scaled.ztilde(2, 1) == doctest::Approx(0.0).epsilon(1e-12));
  // batch statistics of the scaled projections
  CHECK(scaled.stats.mean[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scaled.stats.var[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(scaled.stats.var[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const Projection plain = project_target(z, s, AlphaMode::WeightedKl);
  CHECK(plain.ztilde(0, 0) == doctest::Approx(c).epsilon(1e-12));
  CHECK(plain.ztilde(2, 0) == doctest::Approx(-2.0 * c).epsilon(1e-12));

  CHECK_THROWS_AS(project_target(Matrix::from_rows({{1.0, 2.0}}), s, AlphaMode::WeightedKl),
                  Error);
  CHECK_THROWS_AS(project_target(Matrix(4, 3), s, AlphaMode::WeightedKl), Error);
  s.alpha.clear();
  CHECK_THROWS_AS(project_target(z, s, AlphaMode::ScaledFeatures), Error);
}

// ===== alignment losses ====================================================

TEST_CASE("alignment loss closed forms") {
  const srcstats::SourceStats s = scalar_stats(1.0);

  ProjectedTargetStats matched;
  matched.mean = {0.0};
  matched.var = {1.0};
  CHECK(kl_alignment_loss(matched, s, AlphaMode::WeightedKl) ==
        doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kl_alignment_loss(matched, s, AlphaMode::ScaledFeatures) ==
        doctest::Approx(0.0).epsilon(1e-15));

  // variance off by 2x: 0.5 (1/2 + 2/1 - 2) = 0.25
  ProjectedTargetStats wide;
  wide.mean = {0.0};
  wide.var = {2.0};
  CHECK(kl_alignment_loss(wide, s, AlphaMode::WeightedKl) ==
        doctest::Approx(0.25).epsilon(1e-12));

  // unit mean offset at matched unit variance: 0.5 (2 + 2 - 2) = 1
  ProjectedTargetStats off;
  off.mean = {1.0};
  off.var = {1.0};
  CHECK(kl_alignment_loss(off, s, AlphaMode::WeightedKl) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssa_alignment_loss(off, s, 1) == doctest::Approx(1.0).epsilon(1e-12));

  // weighted mode multiplies the summand by alpha
  srcstats::SourceStats s2 = scalar_stats(1.0);
  s2.alpha = {3.0};
  CHECK(kl_alignment_loss(off, s2, AlphaMode::WeightedKl) ==
        doctest::Approx(3.0).epsilon(1e-12));
  // scaled mode compares against alpha^2-inflated eigenvalues instead
  ProjectedTargetStats scaled_match;
  scaled_match.mean = {0.0};
  scaled_match.var = {9.0};
  CHECK(kl_alignment_loss(scaled_match, s2, AlphaMode::ScaledFeatures) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("directions beyond the retained count do not enter the loss") {
  srcstats::SourceStats s;
  s.mean = {0.0, 0.0, 0.0};
  s.eigvals = {2.0, 1.0, 1e-9};
  s.eigvecs = Matrix::from_rows({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
  s.retained = 2;
  s.alpha = {1.0, 1.0, 1.0};

  ProjectedTargetStats tame;
  tame.mean = {0.0, 0.0, 0.0};
  tame.var = {2.0, 1.0, 1e-9};
  ProjectedTargetStats wild = tame;
  wild.var[2] = 1e6;  // a trailing direction blowing up must be invisible
  wild.mean[2] = 50.0;

  for (AlphaMode mode : {AlphaMode::WeightedKl, AlphaMode::ScaledFeatures}) {
    const double a = kl_alignment_loss(tame, s, mode);
    const double b = kl_alignment_loss(wild, s, mode);
    CHECK(a == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(b == a);
  }
  // ssa with top_k = 3 does see it
  CHECK(ssa_alignment_loss(wild, s, 3) > 1.0);
  CHECK(ssa_alignment_loss(wild, s, 2) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("unshifted batches are a near fixed point of the alignment loss") {
  // feed fresh inputs from the source distribution itself: the projected
  // batch statistics should sit within sampling noise of the stored ones,
  // bounded at 0.05 per latent direction for a batch of 64
  const surrogate::SurrogateModel model = tiny_model(77);
  Rng fit_rng(78);
  const Matrix vx = random_matrix(fit_rng, 512, 2);
  const Matrix vy = random_matrix(fit_rng, 512, 4);
  const srcstats::SourceStatsArtifact art = srcstats::build_artifact(model, vx, vy, 0.95, 4);

  const int c = art.stats.dim();
  for (uint64_t batch_seed = 0; batch_seed < 5; ++batch_seed) {
    Rng rng(200 + batch_seed);
    const Matrix x = random_matrix(rng, 64, 2);
    const Matrix z = surrogate::forward(model, x).latent;
    const Projection proj = project_target(z, art.stats, AlphaMode::ScaledFeatures);
    CHECK(kl_alignment_loss(proj.stats, art.stats, AlphaMode::ScaledFeatures) <= 0.05 * c);
  }
}

// ===== gradients against finite differences ================================

namespace {

// loss as a pure function of the latent batch
double kl_loss_of(const Matrix& z, const srcstats::SourceStats& s, AlphaMode mode) {
  return kl_alignment_loss(project_target(z, s, mode).stats, s, mode);
}

double ssa_loss_of(const Matrix& z, const srcstats::SourceStats& s, int top_k) {
  return ssa_alignment_loss(project_target(z, s, AlphaMode::WeightedKl).stats, s, top_k);
}

void check_latent_grad(const Matrix& z, const srcstats::SourceStats& s, AlphaMode mode,
                       int ssa_top_k) {
  Matrix analytic;
  if (ssa_top_k > 0)
    analytic = ssa_alignment_backward(project_target(z, s, AlphaMode::WeightedKl), s, ssa_top_k);
  else
    analytic = kl_alignment_backward(project_target(z, s, mode), s, mode);

  double max_rel = 0.0;
  Matrix pert = z;
  for (int i = 0; i < z.rows(); ++i) {
    for (int j = 0; j < z.cols(); ++j) {
      const double save = pert(i, j);
      const double h = 1e-6 * std::max(1.0, std::abs(save));
      pert(i, j) = save + h;
      const double up = ssa_top_k > 0 ? ssa_loss_of(pert, s, ssa_top_k)
                                      : kl_loss_of(pert, s, mode);
      pert(i, j) = save - h;
      const double dn = ssa_top_k > 0 ? ssa_loss_of(pert, s, ssa_top_k)
                                      : kl_loss_of(pert, s, mode);
      pert(i, j) = save;
      const double fd = (up - dn) / (2.0 * h);
      const double rel =
          std::abs(fd - analytic(i, j)) / std::max({1.0, std::abs(fd), std::abs(analytic(i, j))});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel <= 1e-4);
}

}  // namespace

TEST_CASE("alignment gradients flow correctly through the batch statistics") {
  Rng rng(7);
  for (int rep = 0; rep < 4; ++rep) {
    const Matrix latents = random_matrix(rng, 64, 3);
    srcstats::SourceStats s = srcstats::fit_source_stats(latents, 0.95);
    s.alpha = {1.5, 2.0, 1.2};

    const Matrix z = random_matrix(rng, 8, 3, 1.5);
    check_latent_grad(z, s, AlphaMode::WeightedKl, 0);
    check_latent_grad(z, s, AlphaMode::ScaledFeatures, 0);
    check_latent_grad(z, s, AlphaMode::WeightedKl, 2);
    check_latent_grad(z, s, AlphaMode::WeightedKl, 3);
  }
}

namespace {

// replicate the composite objective of one adaptation step as a pure function
double satts_objective(const surrogate::SurrogateModel& model, const Matrix& batch_x,
                       const srcstats::SourceStatsArtifact& art, const AdaptationConfig& cfg) {
  const int b = batch_x.rows(), m = art.subset.m();
  Matrix joint(b + m, batch_x.cols());
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < batch_x.cols(); ++j) joint(i, j) = batch_x(i, j);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < batch_x.cols(); ++j) joint(b + i, j) = art.subset.inputs(i, j);
  const surrogate::ForwardCache cache = surrogate::forward(model, joint);
  Matrix z(b, cache.latent.cols());
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < z.cols(); ++j) z(i, j) = cache.latent(i, j);
  const double l_kl =
      kl_alignment_loss(project_target(z, art.stats, cfg.alpha_mode).stats, art.stats,
                        cfg.alpha_mode);
  Matrix pred(m, cache.predictions.cols());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < pred.cols(); ++j) pred(i, j) = cache.predictions(b + i, j);
  const double r_src = surrogate::mse_value_and_grad(pred, art.subset.targets, nullptr);
  return l_kl + cfg.resolve_lambda(m) * r_src;
}

double tent_objective(const surrogate::SurrogateModel& model, const Matrix& batch_x) {
  const surrogate::ForwardCache cache = surrogate::forward(model, batch_x);
  constexpr double log_2pi_e = 2.8378770664093453;
  double loss = 0.0;
  for (int i = 0; i < cache.variances.rows(); ++i)
    for (int k = 0; k < cache.variances.cols(); ++k)
      loss += 0.5 * (log_2pi_e + std::log(cache.variances(i, k)));
  return loss / cache.variances.rows();
}

// with plain sgd at lr = 1, the parameter delta IS the negative gradient
template <typename StepFn, typename LossFn>
void check_step_gradient(surrogate::SurrogateModel& model, StepFn step, LossFn loss_at) {
  const std::vector<double> before = model.snapshot_adaptable();
  step();
  const std::vector<double> after = model.snapshot_adaptable();
  model.restore_adaptable(before);

  const std::vector<int> ids = model.filtered_tensors(surrogate::ParamFilter::LayerNormPhi);
  double max_rel = 0.0;
  size_t flat = 0;
  for (int id : ids) {
    const surrogate::TensorInfo& t = model.layout()[static_cast<size_t>(id)];
    for (int k = 0; k < t.rows * t.cols; ++k, ++flat) {
      const double g = before[flat] - after[flat];
      double* p = model.tensor_data(id) + k;
      const double save = *p;
      const double h = 1e-6 * std::max(1.0, std::abs(save));
      *p = save + h;
      const double up = loss_at();
      *p = save - h;
      const double dn = loss_at();
      *p = save;
      const double fd = (up - dn) / (2.0 * h);
      const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel <= 1e-4);
}

}  // namespace

TEST_CASE("full step gradients match finite differences end to end") {
  Rng rng(8);
  for (AlphaMode mode : {AlphaMode::ScaledFeatures, AlphaMode::WeightedKl}) {
    Rig rig = make_rig(21);
    const Matrix batch = random_matrix(rng, 6, 2);
    AdaptationConfig cfg;
    cfg.alpha_mode = mode;
    cfg.lr = 1.0;
    surrogate::OptimizerState opt = surrogate::OptimizerState::sgd();
    check_step_gradient(
        rig.model,
        [&] { satts_step(rig.model, batch, rig.art.stats, rig.art.subset, cfg, opt, 1); },
        [&] { return satts_objective(rig.model, batch, rig.art, cfg); });
  }

  Rig trig = make_rig(22, /*variance_head=*/true);
  const Matrix batch = random_matrix(rng, 6, 2);
  AdaptationConfig cfg;
  cfg.lr = 1.0;
  surrogate::OptimizerState opt = surrogate::OptimizerState::sgd();
  check_step_gradient(trig.model,
                      [&] { tent_step(trig.model, batch, cfg, opt, 1); },
                      [&] { return tent_objective(trig.model, batch); });
}

// ===== reductions and invariants ===========================================

TEST_CASE("one step with matching truncation and no anchor reduces to the baseline") {
  Rng rng(9);
  for (int rep = 0; rep < 8; ++rep) {
    Rig rig = make_rig(30 + static_cast<uint64_t>(rep));
    surrogate::SurrogateModel twin = rig.model;

    const Matrix batch = random_matrix(rng, 8, 2);
    AdaptationConfig cfg;
    cfg.alpha_mode = AlphaMode::WeightedKl;
    cfg.lambda_src = 0.0;
    cfg.ssa_top_k = rig.art.stats.retained;
    cfg.lr = 0.05;

    surrogate::OptimizerState oa = surrogate::OptimizerState::sgd();
    surrogate::OptimizerState ob = surrogate::OptimizerState::sgd();
    const StepRecord ra = satts_step(rig.model, batch, rig.art.stats, rig.art.subset, cfg, oa, 1);
    const StepRecord rb = ssa_step(twin, batch, rig.art.stats, cfg, ob, 1);

    CHECK(std::abs(ra.l_kl - rb.l_kl) <= 1e-12 * (1.0 + std::abs(rb.l_kl)));
    const std::vector<double> pa = rig.model.snapshot_adaptable();
    const std::vector<double> pb = twin.snapshot_adaptable();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(std::abs(pa[i] - pb[i]) <= 1e-12);
  }
}

TEST_CASE("source risk is the subset residual and hits hand values") {
  Rig rig = make_rig(40);
  const surrogate::ForwardCache cache = surrogate::forward(rig.model, rig.art.subset.inputs);

  // shift every target one unit away in two output coordinates: risk 2
  srcstats::DOptimalSubset shifted = rig.art.subset;
  for (int i = 0; i < shifted.m(); ++i) {
    for (int j = 0; j < 4; ++j) shifted.targets(i, j) = cache.predictions(i, j);
    shifted.targets(i, 0) += 1.0;
    shifted.targets(i, 1) -= 1.0;
  }
  CHECK(source_risk(rig.model, shifted) == doctest::Approx(2.0).epsilon(1e-12));

  srcstats::DOptimalSubset empty;
  CHECK_THROWS_AS(source_risk(rig.model, empty), Error);
}

TEST_CASE("adaptation only ever touches the layer-norm parameters in phi") {
  Rig rig = make_rig(41);
  const std::vector<double> before = rig.model.params();

  Rng rng(10);
  std::vector<Matrix> stream;
  for (int i = 0; i < 4; ++i) stream.push_back(random_matrix(rng, 8, 2));
  AdaptationConfig cfg;
  cfg.lr = 0.05;
  const AdaptTrace trace = run_adaptation(rig.model, stream, rig.art.stats, rig.art.subset, cfg);
  REQUIRE(trace.records.size() == 4);

  const std::vector<double>& after = rig.model.params();
  CHECK(after != before);
  std::vector<bool> adaptable(before.size(), false);
  for (int id : rig.model.filtered_tensors(surrogate::ParamFilter::LayerNormPhi)) {
    const surrogate::TensorInfo& t = rig.model.layout()[static_cast<size_t>(id)];
    for (int k = 0; k < t.rows * t.cols; ++k) adaptable[t.offset + static_cast<size_t>(k)] = true;
  }
  for (size_t i = 0; i < before.size(); ++i)
    if (!adaptable[i]) CHECK(after[i] == before[i]);  // bit-identical outside the LN set
}

TEST_CASE("repeated small steps on one batch do not increase the objective") {
  Rig rig = make_rig(42);
  Rng rng(11);
  const Matrix batch = random_matrix(rng, 16, 2);
  std::vector<Matrix> stream(10, batch);
  AdaptationConfig cfg;
  cfg.lr = 1e-4;
  const AdaptTrace trace = run_adaptation(rig.model, stream, rig.art.stats, rig.art.subset, cfg);
  REQUIRE(trace.records.size() == 10);
  for (size_t i = 1; i < trace.records.size(); ++i) {
    CHECK(trace.records[i].ok);
    CHECK(trace.records[i].l_tta <= trace.records[i - 1].l_tta + 1e-9);
  }
}

TEST_CASE("a poisoned batch rolls the step back") {
  Rig rig = make_rig(43);
  const std::vector<double> before = rig.model.snapshot_adaptable();
  Matrix batch(4, 2);
  batch(2, 1) = std::numeric_limits<double>::quiet_NaN();
  AdaptationConfig cfg;
  surrogate::OptimizerState opt = surrogate::OptimizerState::sgd();
  const StepRecord rec = satts_step(rig.model, batch, rig.art.stats, rig.art.subset, cfg, opt, 3);
  CHECK(!rec.ok);
  CHECK(rec.step == 3);
  CHECK(rig.model.snapshot_adaptable() == before);
}

TEST_CASE("tent needs a variance head and matches its closed-form entropy") {
  Rig plain = make_rig(44);
  Rng rng(12);
  const Matrix batch = random_matrix(rng, 6, 2);
  AdaptationConfig cfg;
  surrogate::OptimizerState opt = surrogate::OptimizerState::sgd();
  CHECK_THROWS_AS(tent_step(plain.model, batch, cfg, opt, 1), Error);

  Rig rig = make_rig(45, /*variance_head=*/true);
  const double want = tent_objective(rig.model, batch);
  surrogate::OptimizerState opt2 = surrogate::OptimizerState::sgd();
  const StepRecord rec = tent_step(rig.model, batch, cfg, opt2, 1);
  CHECK(rec.l_kl == doctest::Approx(want).epsilon(1e-12));
}

// ===== stream driver and persistence =======================================

TEST_CASE("method none returns an empty trace and leaves the model untouched") {
  Rig rig = make_rig(46);
  const std::vector<double> before = rig.model.params();
  Rng rng(13);
  std::vector<Matrix> stream{random_matrix(rng, 8, 2)};
  AdaptationConfig cfg;
  cfg.method = Method::None;
  const AdaptTrace trace = run_adaptation(rig.model, stream, rig.art.stats, rig.art.subset, cfg);
  CHECK(trace.records.empty());
  CHECK(rig.model.params() == before);
}

TEST_CASE("max steps truncates the stream") {
  Rig rig = make_rig(47);
  Rng rng(14);
  std::vector<Matrix> stream;
  for (int i = 0; i < 5; ++i) stream.push_back(random_matrix(rng, 8, 2));
  AdaptationConfig cfg;
  cfg.max_steps = 2;
  const AdaptTrace trace = run_adaptation(rig.model, stream, rig.art.stats, rig.art.subset, cfg);
  CHECK(trace.records.size() == 2);
  CHECK(trace.records[1].step == 2);
}

TEST_CASE("snapshots and traces survive the round trip") {
  TempDir tmp;
  Rig rig = make_rig(48);
  Rng rng(15);
  std::vector<Matrix> stream;
  for (int i = 0; i < 3; ++i) stream.push_back(random_matrix(rng, 8, 2));
  AdaptationConfig cfg;
  cfg.lr = 0.02;
  const AdaptTrace trace = run_adaptation(rig.model, stream, rig.art.stats, rig.art.subset, cfg);

  const std::string snap = tmp.file("trace.bin");
  save_snapshots(trace, snap);
  const AdaptTrace back = load_snapshots(snap);
  REQUIRE(back.records.size() == trace.records.size());
  for (size_t i = 0; i < trace.records.size(); ++i) {
    CHECK(back.records[i].step == trace.records[i].step);
    CHECK(back.records[i].l_kl == trace.records[i].l_kl);
    CHECK(back.records[i].r_src == trace.records[i].r_src);
    CHECK(back.records[i].l_tta == trace.records[i].l_tta);
    CHECK(back.records[i].ok == trace.records[i].ok);
    CHECK(back.records[i].snapshot == trace.records[i].snapshot);
  }
  const std::string snap2 = tmp.file("trace2.bin");
  save_snapshots(back, snap2);
  CHECK(io::read_file_bytes(snap) == io::read_file_bytes(snap2));

  std::vector<uint8_t> bytes = io::read_file_bytes(snap);
  bytes[bytes.size() / 2] ^= 0x01;
  io::write_file_bytes(snap, bytes);
  CHECK_THROWS_AS(load_snapshots(snap), Error);

  // text export round-trips the losses through %.17g
  const std::string csv = tmp.file("trace.csv");
  export_trace(trace, csv);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,l_kl,r_src,l_tta");
  for (const StepRecord& r : trace.records) {
    std::string line;
    REQUIRE(std::getline(in, line));
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    CHECK(std::stoi(field) == r.step);
    std::getline(ss, field, ',');
    CHECK(std::stod(field) == r.l_kl);
    std::getline(ss, field, ',');
    CHECK(std::stod(field) == r.r_src);
    std::getline(ss, field, ',');
    CHECK(std::stod(field) == r.l_tta);
  }
}
