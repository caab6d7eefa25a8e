#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "satts/bench.hpp"
#include "satts/common.hpp"
#include "satts/io.hpp"
#include "satts/surrogate.hpp"

using namespace satts;
using namespace satts::surrogate;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("satts_surrogate_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

SurrogateSpec small_spec(uint64_t seed, bool variance_head = false) {
  SurrogateSpec spec;
  spec.input_dim = 2;
  spec.latent_dim = 3;
  spec.output_dim = 3;
  spec.hidden = {4};
  spec.variance_head = variance_head;
  spec.seed = seed;
  spec.validate();
  return spec;
}

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

double population_var(const double* v, int n, double* mean_out) {
  double mu = 0.0;
  for (int i = 0; i < n; ++i) mu += v[i];
  mu /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) var += (v[i] - mu) * (v[i] - mu);
  *mean_out = mu;
  return var / n;
}

}  // namespace

// ===== structure ===========================================================

TEST_CASE("spec validation fills layer-norm sites and rejects bad shapes") {
  SurrogateSpec spec = small_spec(0);
  CHECK(spec.ln_sites == 2);  // one hidden layer + the latent norm

  SurrogateSpec bad = spec;
  bad.latent_dim = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = spec;
  bad.ln_sites = 5;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("layout covers the parameter store exactly once") {
  const SurrogateModel model = SurrogateModel::build(small_spec(1));
  size_t total = 0;
  for (const TensorInfo& t : model.layout()) {
    CHECK(t.offset == total);  // contiguous, in order
    total += static_cast<size_t>(t.rows) * static_cast<size_t>(t.cols);
  }
  CHECK(total == model.n_params());
}

TEST_CASE("the adaptable set is exactly the layer-norm tensors inside phi") {
  const SurrogateModel model = SurrogateModel::build(small_spec(2));
  const std::vector<int> ids = model.filtered_tensors(ParamFilter::LayerNormPhi);
  REQUIRE(!ids.empty());
  size_t ln_params = 0;
  for (int id : ids) {
    const TensorInfo& t = model.layout()[static_cast<size_t>(id)];
    CHECK(t.layer_norm);
    CHECK(t.in_phi);
    ln_params += static_cast<size_t>(t.rows) * static_cast<size_t>(t.cols);
  }
  // scale + shift per site, latent_dim or hidden width each
  CHECK(ln_params == static_cast<size_t>(2 * 4 + 2 * 3));
  CHECK(model.filtered_tensors(ParamFilter::All).size() == model.layout().size());

  const std::vector<double> snap = model.snapshot_adaptable();
  CHECK(snap.size() == ln_params);
}

TEST_CASE("snapshot and restore round-trip the adaptable parameters") {
  SurrogateModel model = SurrogateModel::build(small_spec(3));
  const std::vector<double> before = model.params();
  const std::vector<double> snap = model.snapshot_adaptable();

  for (int id : model.filtered_tensors(ParamFilter::LayerNormPhi)) {
    double* p = model.tensor_data(id);
    const TensorInfo& t = model.layout()[static_cast<size_t>(id)];
    for (int k = 0; k < t.rows * t.cols; ++k) p[k] += 0.25;
  }
  CHECK(model.params() != before);
  model.restore_adaptable(snap);
  CHECK(model.params() == before);

  CHECK_THROWS_AS(model.restore_adaptable(std::vector<double>(3, 0.0)), Error);
}

TEST_CASE("identical seeds build identical models, different seeds differ") {
  const SurrogateModel a = SurrogateModel::build(small_spec(7));
  const SurrogateModel b = SurrogateModel::build(small_spec(7));
  const SurrogateModel c = SurrogateModel::build(small_spec(8));
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());
}

// ===== forward =============================================================

TEST_CASE("forward shapes and the phi/g split") {
  const SurrogateModel model = SurrogateModel::build(small_spec(4));
  Rng rng(10);
  const Matrix x = random_matrix(rng, 5, 2);
  const ForwardCache cache = forward(model, x);

  CHECK(cache.latent.rows() == 5);
  CHECK(cache.latent.cols() == 3);
  CHECK(cache.predictions.rows() == 5);
  CHECK(cache.predictions.cols() == 3);
  CHECK(cache.variances.empty());

  // the decoder is strictly affine in the latent: recompute by hand
  const Matrix w = model.decoder_weight();
  const int bias_id = model.tensor_index("dec.b");
  REQUIRE(bias_id >= 0);
  const double* b = model.tensor_data(bias_id);
  for (int i = 0; i < 5; ++i) {
    for (int k = 0; k < 3; ++k) {
      double acc = b[k];
      for (int c = 0; c < 3; ++c) acc += w(k, c) * cache.latent(i, c);
      CHECK(cache.predictions(i, k) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("normalized pre-activations have zero mean and unit variance") {
  const SurrogateModel model = SurrogateModel::build(small_spec(5));
  Rng rng(11);
  // wide inputs keep every site's pre-activation variance far above ln_eps,
  // which is what makes the unit-variance bound meaningful
  const Matrix x = random_matrix(rng, 6, 2, 20.0);
  const ForwardCache cache = forward(model, x);

  REQUIRE(cache.layers.size() == 2);
  bool checked_strong_site = false;
  for (const auto& layer : cache.layers) {
    for (int i = 0; i < layer.xhat.rows(); ++i) {
      double mean = 0.0;
      const double var = population_var(layer.xhat.row(i), layer.xhat.cols(), &mean);
      CHECK(std::abs(mean) <= 1e-9);
      // reconstruct the raw variance the site saw from its cached 1/std
      const double rstd = layer.rstd[static_cast<size_t>(i)];
      const double raw_var = 1.0 / (rstd * rstd) - model.spec().ln_eps;
      if (raw_var >= 10.0) {
        CHECK(std::abs(var - 1.0) <= 1e-6);
        checked_strong_site = true;
      }
      // exact identity regardless of scale: var(xhat) = v / (v + eps)
      CHECK(var == doctest::Approx(raw_var / (raw_var + model.spec().ln_eps)).epsilon(1e-9));
    }
  }
  CHECK(checked_strong_site);
}

TEST_CASE("variance head splits the decoder rows and stays positive") {
  const SurrogateModel model = SurrogateModel::build(small_spec(6, /*variance_head=*/true));
  Rng rng(12);
  const Matrix x = random_matrix(rng, 4, 2);
  const ForwardCache cache = forward(model, x);
  CHECK(cache.output.cols() == 6);
  CHECK(cache.predictions.cols() == 3);
  REQUIRE(cache.variances.rows() == 4);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 3; ++k) CHECK(cache.variances(i, k) > 0.0);
}

TEST_CASE("softplus and sigmoid hand values") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softplus(50.0) == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(softplus(-50.0) > 0.0);
}

// ===== gradients ===========================================================

namespace {

// flat central finite differences of the given loss over every parameter the
// filter selects
void check_gradients(SurrogateModel& model, const Matrix& x, const Matrix* y,
                     const LossSpec& loss, ParamFilter filter, double tol) {
  const LossResult res = loss_and_grads(model, x, y, loss, filter);
  double max_rel = 0.0;
  for (size_t gi = 0; gi < res.grads.tensor_ids.size(); ++gi) {
    const int id = res.grads.tensor_ids[gi];
    const TensorInfo& t = model.layout()[static_cast<size_t>(id)];
    for (int k = 0; k < t.rows * t.cols; ++k) {
      double* p = model.tensor_data(id) + k;
      const double save = *p;
      const double h = 1e-6 * std::max(1.0, std::abs(save));
      *p = save + h;
      const double up = loss_and_grads(model, x, y, loss, filter).loss;
      *p = save - h;
      const double dn = loss_and_grads(model, x, y, loss, filter).loss;
      *p = save;
      const double fd = (up - dn) / (2.0 * h);
      const double an = res.grads.chunks[gi][static_cast<size_t>(k)];
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel <= tol);
}

}  // namespace

TEST_CASE("analytic gradients match finite differences") {
  Rng rng(13);
  for (int rep = 0; rep < 5; ++rep) {
    SurrogateModel model = SurrogateModel::build(small_spec(20 + static_cast<uint64_t>(rep)));
    const Matrix x = random_matrix(rng, 6, 2);
    const Matrix y = random_matrix(rng, 6, 3);
    check_gradients(model, x, &y, LossSpec::mse(), ParamFilter::All, 1e-4);
    check_gradients(model, x, &y, LossSpec::mse(), ParamFilter::LayerNormPhi, 1e-4);
  }
}

TEST_CASE("gaussian likelihood gradients match finite differences") {
  Rng rng(14);
  SurrogateModel model = SurrogateModel::build(small_spec(30, /*variance_head=*/true));
  const Matrix x = random_matrix(rng, 5, 2);
  const Matrix y = random_matrix(rng, 5, 3);
  check_gradients(model, x, &y, gaussian_nll_loss(), ParamFilter::All, 1e-4);
}

TEST_CASE("filtered gradients only touch layer-norm tensors in phi") {
  Rng rng(15);
  SurrogateModel model = SurrogateModel::build(small_spec(31));
  const Matrix x = random_matrix(rng, 4, 2);
  const Matrix y = random_matrix(rng, 4, 3);
  const LossResult res = loss_and_grads(model, x, &y, LossSpec::mse(), ParamFilter::LayerNormPhi);
  CHECK(res.grads.tensor_ids == model.filtered_tensors(ParamFilter::LayerNormPhi));
}

TEST_CASE("mse hand value") {
  const Matrix pred = Matrix::from_rows({{1.0, 0.0}});
  const Matrix truth = Matrix::from_rows({{0.0, 2.0}});
  Matrix d;
  // squared 2-norm per row: 1 + 4 = 5
  CHECK(mse_value_and_grad(pred, truth, &d) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(d(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(d(0, 1) == doctest::Approx(-4.0).epsilon(1e-15));
}

// ===== optimizers ==========================================================

TEST_CASE("sgd applies theta minus lr grad, and lr zero is a no-op") {
  SurrogateModel model = SurrogateModel::build(small_spec(40));
  const std::vector<double> before = model.params();
  LossResult res;
  {
    Rng rng(16);
    const Matrix x = random_matrix(rng, 4, 2);
    const Matrix y = random_matrix(rng, 4, 3);
    res = loss_and_grads(model, x, &y, LossSpec::mse(), ParamFilter::LayerNormPhi);
  }
  OptimizerState opt = OptimizerState::sgd();
  optimizer_step(model, res.grads, opt, 0.0);
  CHECK(model.params() == before);

  optimizer_step(model, res.grads, opt, 0.1);
  for (size_t gi = 0; gi < res.grads.tensor_ids.size(); ++gi) {
    const TensorInfo& t = model.layout()[static_cast<size_t>(res.grads.tensor_ids[gi])];
    const double* p = model.tensor_data(res.grads.tensor_ids[gi]);
    for (int k = 0; k < t.rows * t.cols; ++k) {
      const double want = before[t.offset + static_cast<size_t>(k)] -
                          0.1 * res.grads.chunks[gi][static_cast<size_t>(k)];
      CHECK(p[k] == doctest::Approx(want).epsilon(1e-15));
    }
  }
  CHECK_THROWS_AS(optimizer_step(model, res.grads, opt, -1.0), Error);
}

TEST_CASE("adam first step is a signed unit move scaled by lr") {
  SurrogateModel model = SurrogateModel::build(small_spec(41));
  const std::vector<double> before = model.params();
  Rng rng(17);
  const Matrix x = random_matrix(rng, 4, 2);
  const Matrix y = random_matrix(rng, 4, 3);
  const LossResult res = loss_and_grads(model, x, &y, LossSpec::mse(), ParamFilter::LayerNormPhi);
  OptimizerState opt = OptimizerState::adam();
  optimizer_step(model, res.grads, opt, 0.01);
  for (size_t gi = 0; gi < res.grads.tensor_ids.size(); ++gi) {
    const TensorInfo& t = model.layout()[static_cast<size_t>(res.grads.tensor_ids[gi])];
    const double* p = model.tensor_data(res.grads.tensor_ids[gi]);
    for (int k = 0; k < t.rows * t.cols; ++k) {
      const double g = res.grads.chunks[gi][static_cast<size_t>(k)];
      // bias-corrected m/v cancel on step one: update = g / (|g| + eps)
      const double want = before[t.offset + static_cast<size_t>(k)] -
                          0.01 * g / (std::abs(g) + opt.eps);
      CHECK(p[k] == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

// ===== pretraining =========================================================

TEST_CASE("pretraining is deterministic and reduces validation loss") {
  Rng rng(18);
  const Matrix xtr = random_matrix(rng, 64, 2);
  Matrix ytr(64, 3);
  for (int i = 0; i < 64; ++i)
    for (int k = 0; k < 3; ++k)
      ytr(i, k) = std::sin(xtr(i, 0) + k) + 0.3 * xtr(i, 1);
  const Matrix xval = random_matrix(rng, 32, 2);
  Matrix yval(32, 3);
  for (int i = 0; i < 32; ++i)
    for (int k = 0; k < 3; ++k)
      yval(i, k) = std::sin(xval(i, 0) + k) + 0.3 * xval(i, 1);

  TrainConfig tc;
  tc.epochs = 40;
  tc.patience = 40;
  tc.seed = 5;

  SurrogateModel a = SurrogateModel::build(small_spec(50));
  const PretrainResult ra = pretrain(a, xtr, ytr, xval, yval, tc);
  SurrogateModel b = SurrogateModel::build(small_spec(50));
  const PretrainResult rb = pretrain(b, xtr, ytr, xval, yval, tc);

  CHECK(a.params() == b.params());
  CHECK(a.ema_params() == b.ema_params());
  CHECK(ra.best_epoch == rb.best_epoch);
  REQUIRE(!ra.history.empty());
  CHECK(ra.history.back().val_loss < ra.history.front().val_loss);
  CHECK(ra.best_val_loss <= ra.history.front().val_loss);
  CHECK(a.has_ema());

  // promote_ema swaps the shadow in as the active weights
  const std::vector<double> shadow = a.ema_params();
  a.promote_ema();
  CHECK(a.params() == shadow);
}

TEST_CASE("zero learning rate and zero epochs leave the weights alone") {
  Rng rng(19);
  const Matrix x = random_matrix(rng, 16, 2);
  const Matrix y = random_matrix(rng, 16, 3);

  SurrogateModel model = SurrogateModel::build(small_spec(51));
  const std::vector<double> before = model.params();

  TrainConfig tc;
  tc.epochs = 0;
  tc.patience = 0;
  const PretrainResult r0 = pretrain(model, x, y, x, y, tc);
  CHECK(model.params() == before);
  CHECK(r0.epochs_run == 0);

  TrainConfig tc2;
  tc2.lr = 0.0;
  tc2.weight_decay = 0.0;
  tc2.epochs = 3;
  tc2.patience = 3;
  pretrain(model, x, y, x, y, tc2);
  CHECK(model.params() == before);
}

TEST_CASE("default training reaches deployment accuracy on the bump task") {
  const bench::TaskConfig task = bench::TaskConfig::preset(bench::Task::Bump, 0);
  const bench::TaskData data = bench::gen_task(task);
  const bench::Normalization& norm = data.train.norm;

  SurrogateSpec spec;
  spec.input_dim = task.param_dim();
  spec.latent_dim = 8;
  spec.hidden = {32, 32};
  spec.output_dim = task.grid_size;
  spec.seed = 0;
  spec.validate();
  SurrogateModel model = SurrogateModel::build(spec);

  const PretrainResult res = pretrain(model, bench::normalize_inputs(data.train.inputs, norm),
                                      bench::normalize_targets(data.train.targets, norm),
                                      bench::normalize_inputs(data.val.inputs, norm),
                                      bench::normalize_targets(data.val.targets, norm),
                                      TrainConfig{});
  double best = std::numeric_limits<double>::infinity();
  for (const EpochRecord& e : res.history) best = std::min(best, e.val_rmse);
  CHECK(best <= 0.05);
}

// ===== checkpoints =========================================================

TEST_CASE("checkpoints round-trip byte-exactly and reject corruption") {
  TempDir tmp;
  Rng rng(20);
  SurrogateModel model = SurrogateModel::build(small_spec(60));
  {
    // give it a non-trivial EMA and an epoch count worth preserving
    const Matrix x = random_matrix(rng, 16, 2);
    const Matrix y = random_matrix(rng, 16, 3);
    TrainConfig tc;
    tc.epochs = 2;
    tc.patience = 2;
    pretrain(model, x, y, x, y, tc);
  }

  const std::string path = tmp.file("model.ckpt");
  save_checkpoint(model, path);
  const SurrogateModel back = load_checkpoint(path);
  CHECK(back.params() == model.params());
  CHECK(back.ema_params() == model.ema_params());
  CHECK(back.trained_epochs == model.trained_epochs);
  CHECK(back.spec().to_json() == model.spec().to_json());

  // saving the loaded model reproduces the file bit for bit
  const std::string path2 = tmp.file("model2.ckpt");
  save_checkpoint(back, path2);
  CHECK(io::read_file_bytes(path) == io::read_file_bytes(path2));

  std::vector<uint8_t> bytes = io::read_file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x10;
  io::write_file_bytes(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}
