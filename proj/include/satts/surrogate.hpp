#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "satts/common.hpp"
#include "satts/numkit.hpp"

namespace satts::surrogate {

// ---------------------------------------------------------------------------
// Model definition. f = g(phi(x)): phi is a conditioner + layer-normalized
// MLP body ending in a normalized latent code z (no activation after the last
// norm), g is a strictly affine decoder. Only the layer-norm scale/shift
// parameters inside phi are adaptable at test time; everything else is frozen
// once pretraining ends.
// ---------------------------------------------------------------------------

enum class Activation { Gelu, Tanh };

struct SurrogateSpec {
  int input_dim = 0;   // P simulation parameters
  int latent_dim = 0;  // C latent channels
  int output_dim = 0;  // K field points
  std::vector<int> hidden;
  int ln_sites = -1;   // hidden layers + final latent norm; -1 = derive
  Activation activation = Activation::Gelu;
  bool variance_head = false;  // doubles decoder rows; second half = raw variances
  double ln_eps = 1e-5;
  uint64_t seed = 0;

  /// Fills ln_sites when left at -1 and checks all invariants.
  void validate();

  int decoder_rows() const { return variance_head ? 2 * output_dim : output_dim; }

  nlohmann::json to_json() const;
  static SurrogateSpec from_json(const nlohmann::json& j);
};

struct TensorInfo {
  std::string name;
  int rows = 0;  // 1 for bias / norm-scale / norm-shift vectors
  int cols = 0;
  size_t offset = 0;  // into the flat parameter store
  bool layer_norm = false;
  bool in_phi = true;
};

enum class ParamFilter { All, LayerNormPhi };

class SurrogateModel {
 public:
  static SurrogateModel build(const SurrogateSpec& spec);

  const SurrogateSpec& spec() const { return spec_; }
  const std::vector<TensorInfo>& layout() const { return layout_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& ema_params() { return ema_; }
  const std::vector<double>& ema_params() const { return ema_; }
  bool has_ema() const { return !ema_.empty(); }
  size_t n_params() const { return params_.size(); }

  int tensor_index(const std::string& name) const;  // -1 when absent
  double* tensor_data(int idx) { return params_.data() + layout_[static_cast<size_t>(idx)].offset; }
  const double* tensor_data(int idx) const {
    return params_.data() + layout_[static_cast<size_t>(idx)].offset;
  }

  /// Decoder weight as stored: rows = K (or 2K with a variance head), cols = C.
  Matrix decoder_weight() const;

  /// Indices of tensors selected by the filter, in layout order.
  std::vector<int> filtered_tensors(ParamFilter filter) const;

  /// Copies the adaptable (layer-norm-in-phi) parameters into one flat vector.
  std::vector<double> snapshot_adaptable() const;
  void restore_adaptable(const std::vector<double>& snap);

  /// Replaces active params with the EMA shadow (deployment weights).
  void promote_ema();

  int trained_epochs = 0;

 private:
  SurrogateSpec spec_;
  std::vector<TensorInfo> layout_;
  std::vector<double> params_;
  std::vector<double> ema_;

  friend SurrogateModel load_checkpoint(const std::string& path);
};

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

struct ForwardCache {
  struct Layer {
    Matrix input;             // rows entering this dense layer
    Matrix xhat;              // normalized pre-activation (before scale/shift)
    std::vector<double> rstd; // per-row 1/sqrt(var + eps)
    Matrix lnout;             // after scale/shift
    Matrix act;               // after the activation (last layer: == lnout)
  };
  std::vector<Layer> layers;
  Matrix latent;       // N x C features at the phi/g split
  Matrix output;       // raw affine decode, N x decoder_rows
  Matrix predictions;  // N x K mean head
  Matrix variances;    // N x K softplus head (empty without variance head)
};

ForwardCache forward(const SurrogateModel& model, const Matrix& inputs);

/// Sparse gradient container: only tensors passing the filter are present.
struct Gradients {
  std::vector<int> tensor_ids;               // indices into model layout
  std::vector<std::vector<double>> chunks;   // matching flat tensor data

  double global_norm() const;
  void scale(double s);
};

/// Reverse pass from output-space and (optionally) latent-space gradients.
/// d_output must match cache.output's shape; d_latent_extra, when given, is
/// added to the latent gradient at the phi/g split (used by alignment losses
/// that act on z directly).
Gradients backward(const SurrogateModel& model, const ForwardCache& cache,
                   const Matrix& d_output, const Matrix* d_latent_extra,
                   ParamFilter filter);

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// Composite hook contract: given latents, raw outputs and optional targets,
/// fill d_latents / d_outputs (preallocated, zeroed) and return the loss.
using CompositeHook = std::function<double(const Matrix& latents, const Matrix& outputs,
                                           const Matrix* targets, Matrix& d_latents,
                                           Matrix& d_outputs)>;

struct LossSpec {
  enum class Kind { Mse, Composite };
  Kind kind = Kind::Mse;
  CompositeHook hook;

  static LossSpec mse() { return {}; }
  static LossSpec composite(CompositeHook h);
};

/// Mean-over-rows squared 2-norm residual and its gradient; the building
/// block shared by pretraining and the source-risk regularizer.
double mse_value_and_grad(const Matrix& pred, const Matrix& targets, Matrix* d_pred);

/// Gaussian negative log-likelihood for variance-head models (mean over rows),
/// packaged as a composite hook.
LossSpec gaussian_nll_loss();

double softplus(double x);
double sigmoid(double x);

struct LossResult {
  double loss = 0.0;
  Gradients grads;
};

LossResult loss_and_grads(const SurrogateModel& model, const Matrix& inputs,
                          const Matrix* targets, const LossSpec& loss,
                          ParamFilter filter);

// ---------------------------------------------------------------------------
// Optimizers.
// ---------------------------------------------------------------------------

struct OptimizerState {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<int> tensor_ids;  // fixed on first step
  std::vector<std::vector<double>> m1, m2;

  static OptimizerState sgd() { return {}; }
  static OptimizerState adam() {
    OptimizerState s;
    s.kind = Kind::Adam;
    return s;
  }
};

/// theta <- theta - lr * update. lr = 0 is a legal no-op; negative lr is a
/// validation error.
void optimizer_step(SurrogateModel& model, const Gradients& grads, OptimizerState& state,
                    double lr);

// ---------------------------------------------------------------------------
// Pretraining.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;  // decoupled, dense weight matrices only
  int epochs = 300;
  int patience = 30;           // stop once val fails to improve for > patience epochs
  int batch_size = 64;
  double clip_norm = 5.0;      // global gradient-norm ceiling; <= 0 disables
  double ema_decay = 0.95;
  uint64_t seed = 0;
  LossSpec loss = LossSpec::mse();

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rmse = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
};

/// Trains in place; on return the model holds the best-validation raw weights
/// with the matching EMA shadow. Validation is scored on the EMA weights.
PretrainResult pretrain(SurrogateModel& model, const Matrix& train_x, const Matrix& train_y,
                        const Matrix& val_x, const Matrix& val_y, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints (magic "STTCKPT1").
// ---------------------------------------------------------------------------

void save_checkpoint(const SurrogateModel& model, const std::string& path);
SurrogateModel load_checkpoint(const std::string& path);

}  // namespace satts::surrogate
