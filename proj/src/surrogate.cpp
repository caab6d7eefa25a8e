#include "satts/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "satts/io.hpp"

namespace satts::surrogate {

namespace {

constexpr double kVarFloor = 1e-8;           // additive floor under softplus variances
constexpr uint64_t kInitStream = 0x1717;     // build() rng stream tag

bool all_finite(const Matrix& m) {
  const double* p = m.data();
  for (size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

std::string activation_name(Activation a) {
  return a == Activation::Gelu ? "gelu" : "tanh";
}

Activation activation_from_name(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "tanh") return Activation::Tanh;
  fail_validation("unknown activation: " + s);
}

constexpr double kInvSqrt2 = 0.7071067811865476;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
}

}  // namespace

// ===== spec ================================================================

void SurrogateSpec::validate() {
  if (input_dim < 1) fail_validation("spec: input_dim must be >= 1");
  if (latent_dim < 2) fail_validation("spec: latent_dim must be >= 2");
  if (output_dim < 1) fail_validation("spec: output_dim must be >= 1");
  for (int h : hidden)
    if (h < 1) fail_validation("spec: hidden widths must be >= 1");
  if (ln_eps <= 0.0) fail_validation("spec: ln_eps must be positive");
  const int expected = static_cast<int>(hidden.size()) + 1;
  if (ln_sites == -1) ln_sites = expected;
  if (ln_sites != expected)
    fail_validation("spec: ln_sites must equal hidden layers + 1 (one site per dense block)");
  if (ln_sites < 1) fail_validation("spec: at least one layer-norm site required");
}

nlohmann::json SurrogateSpec::to_json() const {
  return nlohmann::json{{"input_dim", input_dim},
                        {"latent_dim", latent_dim},
                        {"output_dim", output_dim},
                        {"hidden", hidden},
                        {"ln_sites", ln_sites},
                        {"activation", activation_name(activation)},
                        {"variance_head", variance_head},
                        {"ln_eps", ln_eps},
                        {"seed", seed}};
}

SurrogateSpec SurrogateSpec::from_json(const nlohmann::json& j) {
  SurrogateSpec s;
  try {
    s.input_dim = j.at("input_dim").get<int>();
    s.latent_dim = j.at("latent_dim").get<int>();
    s.output_dim = j.at("output_dim").get<int>();
    s.hidden = j.value("hidden", std::vector<int>{});
    s.ln_sites = j.value("ln_sites", -1);
    s.activation = activation_from_name(j.value("activation", std::string("gelu")));
    s.variance_head = j.value("variance_head", false);
    s.ln_eps = j.value("ln_eps", 1e-5);
    s.seed = j.value("seed", static_cast<uint64_t>(0));
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ===== model build =========================================================

SurrogateModel SurrogateModel::build(const SurrogateSpec& spec_in) {
  SurrogateSpec spec = spec_in;
  spec.validate();

  SurrogateModel m;
  m.spec_ = spec;

  const int n_layers = static_cast<int>(spec.hidden.size()) + 1;
  size_t offset = 0;
  auto add = [&](const std::string& name, int rows, int cols, bool ln, bool phi) {
    m.layout_.push_back({name, rows, cols, offset, ln, phi});
    offset += static_cast<size_t>(rows) * static_cast<size_t>(cols);
  };

  for (int l = 0; l < n_layers; ++l) {
    const int in = l == 0 ? spec.input_dim : spec.hidden[static_cast<size_t>(l - 1)];
    const int out =
        l < n_layers - 1 ? spec.hidden[static_cast<size_t>(l)] : spec.latent_dim;
    const std::string tag = std::to_string(l);
    add("phi.dense" + tag + ".w", out, in, false, true);
    add("phi.dense" + tag + ".b", 1, out, false, true);
    add("phi.ln" + tag + ".g", 1, out, true, true);
    add("phi.ln" + tag + ".b", 1, out, true, true);
  }
  add("dec.w", spec.decoder_rows(), spec.latent_dim, false, false);
  add("dec.b", 1, spec.decoder_rows(), false, false);

  m.params_.assign(offset, 0.0);
  Rng rng(derive_seed(spec.seed, kInitStream));
  for (const TensorInfo& t : m.layout_) {
    double* p = m.params_.data() + t.offset;
    const size_t n = static_cast<size_t>(t.rows) * static_cast<size_t>(t.cols);
    if (t.name.ends_with(".w")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
      for (size_t i = 0; i < n; ++i) p[i] = rng.uniform(-bound, bound);
    } else if (t.layer_norm && t.name.ends_with(".g")) {
      std::fill(p, p + n, 1.0);
    }  // biases and norm shifts stay zero
  }
  return m;
}

int SurrogateModel::tensor_index(const std::string& name) const {
  for (size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name == name) return static_cast<int>(i);
  return -1;
}

Matrix SurrogateModel::decoder_weight() const {
  const int idx = tensor_index("dec.w");
  const TensorInfo& t = layout_[static_cast<size_t>(idx)];
  Matrix w(t.rows, t.cols);
  std::copy(tensor_data(idx), tensor_data(idx) + w.size(), w.data());
  return w;
}

std::vector<int> SurrogateModel::filtered_tensors(ParamFilter filter) const {
  std::vector<int> ids;
  for (size_t i = 0; i < layout_.size(); ++i) {
    if (filter == ParamFilter::All ||
        (layout_[i].layer_norm && layout_[i].in_phi))
      ids.push_back(static_cast<int>(i));
  }
  return ids;
}

std::vector<double> SurrogateModel::snapshot_adaptable() const {
  std::vector<double> snap;
  for (int id : filtered_tensors(ParamFilter::LayerNormPhi)) {
    const TensorInfo& t = layout_[static_cast<size_t>(id)];
    const double* p = params_.data() + t.offset;
    snap.insert(snap.end(), p, p + static_cast<size_t>(t.rows) * t.cols);
  }
  return snap;
}

void SurrogateModel::restore_adaptable(const std::vector<double>& snap) {
  size_t pos = 0;
  for (int id : filtered_tensors(ParamFilter::LayerNormPhi)) {
    const TensorInfo& t = layout_[static_cast<size_t>(id)];
    const size_t n = static_cast<size_t>(t.rows) * t.cols;
    if (pos + n > snap.size()) fail_shape("restore_adaptable: snapshot too short");
    std::copy(snap.begin() + static_cast<long>(pos), snap.begin() + static_cast<long>(pos + n),
              params_.begin() + static_cast<long>(t.offset));
    pos += n;
  }
  if (pos != snap.size()) fail_shape("restore_adaptable: snapshot size mismatch");
}

void SurrogateModel::promote_ema() {
  if (!ema_.empty()) params_ = ema_;
}

// ===== forward =============================================================

ForwardCache forward(const SurrogateModel& model, const Matrix& inputs) {
  const SurrogateSpec& spec = model.spec();
  if (inputs.cols() != spec.input_dim)
    fail_shape("forward: batch has " + std::to_string(inputs.cols()) +
               " input columns, model expects " + std::to_string(spec.input_dim));
  if (inputs.rows() < 1) fail_shape("forward: empty batch");
  if (!all_finite(inputs)) fail_numeric("forward: non-finite values in the input batch");

  const int n_layers = static_cast<int>(spec.hidden.size()) + 1;
  const int n = inputs.rows();
  ForwardCache cache;
  cache.layers.resize(static_cast<size_t>(n_layers));

  Matrix cur = inputs;
  for (int l = 0; l < n_layers; ++l) {
    auto& lc = cache.layers[static_cast<size_t>(l)];
    const std::string tag = std::to_string(l);
    const int wi = model.tensor_index("phi.dense" + tag + ".w");
    const TensorInfo& wt = model.layout()[static_cast<size_t>(wi)];
    const double* w = model.tensor_data(wi);
    const double* b = model.tensor_data(model.tensor_index("phi.dense" + tag + ".b"));
    const double* g = model.tensor_data(model.tensor_index("phi.ln" + tag + ".g"));
    const double* be = model.tensor_data(model.tensor_index("phi.ln" + tag + ".b"));
    const int in = wt.cols, out = wt.rows;

    lc.input = std::move(cur);
    Matrix pre(n, out);
    for (int i = 0; i < n; ++i) {
      const double* xi = lc.input.row(i);
      double* pi = pre.row(i);
      for (int o = 0; o < out; ++o) {
        const double* wo = w + static_cast<size_t>(o) * in;
        double s = b[o];
        for (int k = 0; k < in; ++k) s += xi[k] * wo[k];
        pi[o] = s;
      }
    }

    lc.xhat = Matrix(n, out);
    lc.rstd.resize(static_cast<size_t>(n));
    lc.lnout = Matrix(n, out);
    for (int i = 0; i < n; ++i) {
      const double* pi = pre.row(i);
      double mu = 0.0;
      for (int o = 0; o < out; ++o) mu += pi[o];
      mu /= out;
      double var = 0.0;
      for (int o = 0; o < out; ++o) {
        const double d = pi[o] - mu;
        var += d * d;
      }
      var /= out;
      const double rstd = 1.0 / std::sqrt(var + spec.ln_eps);
      lc.rstd[static_cast<size_t>(i)] = rstd;
      double* xh = lc.xhat.row(i);
      double* lo = lc.lnout.row(i);
      for (int o = 0; o < out; ++o) {
        xh[o] = (pi[o] - mu) * rstd;
        lo[o] = g[o] * xh[o] + be[o];
      }
    }

    if (l < n_layers - 1) {
      lc.act = Matrix(n, out);
      for (int i = 0; i < n; ++i) {
        const double* lo = lc.lnout.row(i);
        double* ao = lc.act.row(i);
        for (int o = 0; o < out; ++o)
          ao[o] = spec.activation == Activation::Gelu ? gelu(lo[o]) : std::tanh(lo[o]);
      }
    } else {
      lc.act = lc.lnout;  // latent layer: no activation
    }
    if (!all_finite(lc.act))
      fail_numeric("forward: non-finite activations in phi.dense" + tag);
    cur = lc.act;
  }

  cache.latent = cur;

  const int di = model.tensor_index("dec.w");
  const TensorInfo& dt = model.layout()[static_cast<size_t>(di)];
  const double* dw = model.tensor_data(di);
  const double* db = model.tensor_data(model.tensor_index("dec.b"));
  const int c = dt.cols, rows_out = dt.rows;

  cache.output = Matrix(n, rows_out);
  for (int i = 0; i < n; ++i) {
    const double* zi = cache.latent.row(i);
    double* oi = cache.output.row(i);
    for (int o = 0; o < rows_out; ++o) {
      const double* wo = dw + static_cast<size_t>(o) * c;
      double s = db[o];
      for (int k = 0; k < c; ++k) s += zi[k] * wo[k];
      oi[o] = s;
    }
  }
  if (!all_finite(cache.output)) fail_numeric("forward: non-finite decoder outputs");

  const int k_out = spec.output_dim;
  cache.predictions = Matrix(n, k_out);
  for (int i = 0; i < n; ++i)
    std::copy(cache.output.row(i), cache.output.row(i) + k_out, cache.predictions.row(i));
  if (spec.variance_head) {
    cache.variances = Matrix(n, k_out);
    for (int i = 0; i < n; ++i) {
      const double* oi = cache.output.row(i);
      double* vi = cache.variances.row(i);
      for (int k = 0; k < k_out; ++k) vi[k] = softplus(oi[k_out + k]) + kVarFloor;
    }
  }
  return cache;
}

// ===== backward ============================================================

double Gradients::global_norm() const {
  double s = 0.0;
  for (const auto& c : chunks)
    for (double v : c) s += v * v;
  return std::sqrt(s);
}

void Gradients::scale(double s) {
  for (auto& c : chunks)
    for (double& v : c) v *= s;
}

Gradients backward(const SurrogateModel& model, const ForwardCache& cache,
                   const Matrix& d_output, const Matrix* d_latent_extra,
                   ParamFilter filter) {
  const SurrogateSpec& spec = model.spec();
  const int n = cache.output.rows();
  if (!d_output.same_shape(cache.output))
    fail_shape("backward: d_output shape mismatch");
  if (d_latent_extra && !d_latent_extra->same_shape(cache.latent))
    fail_shape("backward: d_latent shape mismatch");

  const bool want_dense = filter == ParamFilter::All;
  std::vector<std::vector<double>> acc(model.layout().size());
  auto grad_of = [&](int id) -> std::vector<double>& {
    auto& v = acc[static_cast<size_t>(id)];
    if (v.empty()) {
      const TensorInfo& t = model.layout()[static_cast<size_t>(id)];
      v.assign(static_cast<size_t>(t.rows) * t.cols, 0.0);
    }
    return v;
  };

  // Decoder: output = latent * Wd^T + bd.
  const int di = model.tensor_index("dec.w");
  const TensorInfo& dt = model.layout()[static_cast<size_t>(di)];
  const double* dw = model.tensor_data(di);
  const int c = dt.cols, rows_out = dt.rows;

  Matrix d_latent(n, c);
  if (d_latent_extra) d_latent = *d_latent_extra;
  for (int i = 0; i < n; ++i) {
    const double* doi = d_output.row(i);
    double* dzi = d_latent.row(i);
    for (int o = 0; o < rows_out; ++o) {
      const double v = doi[o];
      if (v == 0.0) continue;
      const double* wo = dw + static_cast<size_t>(o) * c;
      for (int k = 0; k < c; ++k) dzi[k] += v * wo[k];
    }
  }
  if (want_dense) {
    auto& gdw = grad_of(di);
    auto& gdb = grad_of(model.tensor_index("dec.b"));
    for (int i = 0; i < n; ++i) {
      const double* doi = d_output.row(i);
      const double* zi = cache.latent.row(i);
      for (int o = 0; o < rows_out; ++o) {
        const double v = doi[o];
        gdb[static_cast<size_t>(o)] += v;
        if (v == 0.0) continue;
        double* row = gdw.data() + static_cast<size_t>(o) * c;
        for (int k = 0; k < c; ++k) row[k] += v * zi[k];
      }
    }
  }

  // Walk phi backwards.
  const int n_layers = static_cast<int>(spec.hidden.size()) + 1;
  Matrix d_act = std::move(d_latent);
  for (int l = n_layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<size_t>(l)];
    const std::string tag = std::to_string(l);
    const int wi = model.tensor_index("phi.dense" + tag + ".w");
    const TensorInfo& wt = model.layout()[static_cast<size_t>(wi)];
    const double* w = model.tensor_data(wi);
    const int gi = model.tensor_index("phi.ln" + tag + ".g");
    const double* g = model.tensor_data(gi);
    const int in = wt.cols, out = wt.rows;

    // Through the activation (absent on the latent layer).
    Matrix d_lnout;
    if (l < n_layers - 1) {
      d_lnout = Matrix(n, out);
      for (int i = 0; i < n; ++i) {
        const double* lo = lc.lnout.row(i);
        const double* da = d_act.row(i);
        const double* ao = lc.act.row(i);
        double* dl = d_lnout.row(i);
        for (int o = 0; o < out; ++o) {
          const double deriv = spec.activation == Activation::Gelu
                                   ? gelu_grad(lo[o])
                                   : 1.0 - ao[o] * ao[o];
          dl[o] = da[o] * deriv;
        }
      }
    } else {
      d_lnout = std::move(d_act);
    }

    // Norm-site parameter gradients (needed for every filter).
    {
      auto& gg = grad_of(gi);
      auto& gb = grad_of(model.tensor_index("phi.ln" + tag + ".b"));
      for (int i = 0; i < n; ++i) {
        const double* dl = d_lnout.row(i);
        const double* xh = lc.xhat.row(i);
        for (int o = 0; o < out; ++o) {
          gg[static_cast<size_t>(o)] += dl[o] * xh[o];
          gb[static_cast<size_t>(o)] += dl[o];
        }
      }
    }

    // Through the normalization to the dense pre-activation.
    Matrix d_pre(n, out);
    for (int i = 0; i < n; ++i) {
      const double* dl = d_lnout.row(i);
      const double* xh = lc.xhat.row(i);
      const double rstd = lc.rstd[static_cast<size_t>(i)];
      double m1 = 0.0, m2 = 0.0;
      for (int o = 0; o < out; ++o) {
        const double dxh = dl[o] * g[o];
        m1 += dxh;
        m2 += dxh * xh[o];
      }
      m1 /= out;
      m2 /= out;
      double* dp = d_pre.row(i);
      for (int o = 0; o < out; ++o) {
        const double dxh = dl[o] * g[o];
        dp[o] = rstd * (dxh - m1 - xh[o] * m2);
      }
    }

    if (want_dense) {
      auto& gw = grad_of(wi);
      auto& gb = grad_of(model.tensor_index("phi.dense" + tag + ".b"));
      for (int i = 0; i < n; ++i) {
        const double* dp = d_pre.row(i);
        const double* xi = lc.input.row(i);
        for (int o = 0; o < out; ++o) {
          const double v = dp[o];
          gb[static_cast<size_t>(o)] += v;
          if (v == 0.0) continue;
          double* row = gw.data() + static_cast<size_t>(o) * in;
          for (int k = 0; k < in; ++k) row[k] += v * xi[k];
        }
      }
    }

    if (l > 0) {
      d_act = Matrix(n, in);
      for (int i = 0; i < n; ++i) {
        const double* dp = d_pre.row(i);
        double* dx = d_act.row(i);
        for (int o = 0; o < out; ++o) {
          const double v = dp[o];
          if (v == 0.0) continue;
          const double* wo = w + static_cast<size_t>(o) * in;
          for (int k = 0; k < in; ++k) dx[k] += v * wo[k];
        }
      }
    }
  }

  Gradients grads;
  for (int id : model.filtered_tensors(filter)) {
    grads.tensor_ids.push_back(id);
    auto& v = acc[static_cast<size_t>(id)];
    if (v.empty()) {
      const TensorInfo& t = model.layout()[static_cast<size_t>(id)];
      v.assign(static_cast<size_t>(t.rows) * t.cols, 0.0);
    }
    grads.chunks.push_back(std::move(v));
  }
  return grads;
}

// ===== losses ==============================================================

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

LossSpec LossSpec::composite(CompositeHook h) {
  LossSpec s;
  s.kind = Kind::Composite;
  s.hook = std::move(h);
  return s;
}

double mse_value_and_grad(const Matrix& pred, const Matrix& targets, Matrix* d_pred) {
  if (!pred.same_shape(targets)) fail_shape("mse: prediction/target shape mismatch");
  const int n = pred.rows();
  if (n == 0) fail_shape("mse: empty batch");
  double loss = 0.0;
  if (d_pred) *d_pred = Matrix(pred.rows(), pred.cols());
  for (int i = 0; i < n; ++i) {
    const double* pi = pred.row(i);
    const double* yi = targets.row(i);
    double* di = d_pred ? d_pred->row(i) : nullptr;
    for (int k = 0; k < pred.cols(); ++k) {
      const double r = pi[k] - yi[k];
      loss += r * r;
      if (di) di[k] = 2.0 * r / n;
    }
  }
  return loss / n;
}

LossSpec gaussian_nll_loss() {
  return LossSpec::composite([](const Matrix& latents, const Matrix& outputs,
                                const Matrix* targets, Matrix& d_latents,
                                Matrix& d_outputs) -> double {
    (void)latents;
    (void)d_latents;
    if (!targets) fail_validation("gaussian nll: targets required");
    const int k_out = targets->cols();
    if (outputs.cols() != 2 * k_out)
      fail_shape("gaussian nll: model lacks a variance head");
    const int n = outputs.rows();
    constexpr double log_2pi = 1.8378770664093453;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* oi = outputs.row(i);
      const double* yi = targets->row(i);
      double* di = d_outputs.row(i);
      for (int k = 0; k < k_out; ++k) {
        const double mu = oi[k];
        const double s = oi[k_out + k];
        const double v = softplus(s) + kVarFloor;
        const double r = mu - yi[k];
        loss += 0.5 * (log_2pi + std::log(v)) + r * r / (2.0 * v);
        di[k] = r / (v * n);
        di[k_out + k] = (0.5 / v - r * r / (2.0 * v * v)) * sigmoid(s) / n;
      }
    }
    return loss / n;
  });
}

LossResult loss_and_grads(const SurrogateModel& model, const Matrix& inputs,
                          const Matrix* targets, const LossSpec& loss,
                          ParamFilter filter) {
  ForwardCache cache = forward(model, inputs);
  Matrix d_output(cache.output.rows(), cache.output.cols());
  Matrix d_latent(cache.latent.rows(), cache.latent.cols());
  double value = 0.0;

  if (loss.kind == LossSpec::Kind::Mse) {
    if (!targets) fail_validation("mse loss: targets required");
    Matrix d_pred;
    value = mse_value_and_grad(cache.predictions, *targets, &d_pred);
    for (int i = 0; i < d_pred.rows(); ++i)
      std::copy(d_pred.row(i), d_pred.row(i) + d_pred.cols(), d_output.row(i));
  } else {
    if (!loss.hook) fail_validation("composite loss: hook not set");
    value = loss.hook(cache.latent, cache.output, targets, d_latent, d_output);
  }
  if (!std::isfinite(value)) fail_numeric("loss is non-finite");

  LossResult res;
  res.loss = value;
  res.grads = backward(model, cache, d_output, &d_latent, filter);
  return res;
}

// ===== optimizer ===========================================================

void optimizer_step(SurrogateModel& model, const Gradients& grads, OptimizerState& state,
                    double lr) {
  if (lr < 0.0) fail_validation("optimizer_step: negative learning rate");
  if (state.tensor_ids.empty() && state.step_count == 0) {
    state.tensor_ids = grads.tensor_ids;
    if (state.kind == OptimizerState::Kind::Adam) {
      state.m1.resize(grads.chunks.size());
      state.m2.resize(grads.chunks.size());
      for (size_t i = 0; i < grads.chunks.size(); ++i) {
        state.m1[i].assign(grads.chunks[i].size(), 0.0);
        state.m2[i].assign(grads.chunks[i].size(), 0.0);
      }
    }
  }
  if (state.tensor_ids != grads.tensor_ids)
    fail_validation("optimizer_step: gradient layout does not match optimizer state");

  state.step_count += 1;
  for (size_t i = 0; i < grads.tensor_ids.size(); ++i) {
    const TensorInfo& t = model.layout()[static_cast<size_t>(grads.tensor_ids[i])];
    double* p = model.params().data() + t.offset;
    const auto& g = grads.chunks[i];
    if (state.kind == OptimizerState::Kind::Sgd) {
      for (size_t k = 0; k < g.size(); ++k) p[k] -= lr * g[k];
    } else {
      auto& m1 = state.m1[i];
      auto& m2 = state.m2[i];
      const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
      const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
      for (size_t k = 0; k < g.size(); ++k) {
        m1[k] = state.beta1 * m1[k] + (1.0 - state.beta1) * g[k];
        m2[k] = state.beta2 * m2[k] + (1.0 - state.beta2) * g[k] * g[k];
        const double mhat = m1[k] / bc1;
        const double vhat = m2[k] / bc2;
        p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      }
    }
  }
}

// ===== pretraining =========================================================

void TrainConfig::validate() const {
  if (lr < 0.0) fail_validation("train config: learning rate must be >= 0");
  if (epochs < 0) fail_validation("train config: epochs must be >= 0");
  if (patience < 0 || patience > epochs)
    fail_validation("train config: patience must lie in [0, epochs]");
  if (batch_size < 1) fail_validation("train config: batch size must be >= 1");
  if (ema_decay < 0.0 || ema_decay >= 1.0)
    fail_validation("train config: ema decay must lie in [0, 1)");
}

namespace {

Matrix gather_rows(const Matrix& src, const std::vector<int>& idx, int begin, int end) {
  Matrix out(end - begin, src.cols());
  for (int i = begin; i < end; ++i)
    std::copy(src.row(idx[static_cast<size_t>(i)]),
              src.row(idx[static_cast<size_t>(i)]) + src.cols(), out.row(i - begin));
  return out;
}

double eval_loss(const SurrogateModel& model, const Matrix& x, const Matrix& y,
                 const LossSpec& loss, double* rmse_out) {
  ForwardCache cache = forward(model, x);
  double value;
  if (loss.kind == LossSpec::Kind::Mse) {
    value = mse_value_and_grad(cache.predictions, y, nullptr);
  } else {
    Matrix dz(cache.latent.rows(), cache.latent.cols());
    Matrix doo(cache.output.rows(), cache.output.cols());
    value = loss.hook(cache.latent, cache.output, &y, dz, doo);
  }
  if (rmse_out) {
    double sse = 0.0;
    for (int i = 0; i < cache.predictions.rows(); ++i)
      for (int k = 0; k < cache.predictions.cols(); ++k) {
        const double r = cache.predictions(i, k) - y(i, k);
        sse += r * r;
      }
    *rmse_out = std::sqrt(sse / (static_cast<double>(y.rows()) * y.cols()));
  }
  return value;
}

}  // namespace

PretrainResult pretrain(SurrogateModel& model, const Matrix& train_x, const Matrix& train_y,
                        const Matrix& val_x, const Matrix& val_y, const TrainConfig& cfg) {
  cfg.validate();
  if (train_x.rows() == 0 || val_x.rows() == 0)
    fail_validation("pretrain: empty dataset");
  if (train_x.rows() != train_y.rows() || val_x.rows() != val_y.rows())
    fail_shape("pretrain: inputs/targets row mismatch");

  PretrainResult res;
  if (cfg.epochs == 0) return res;

  Rng rng(derive_seed(cfg.seed, 0x7a41));
  OptimizerState opt = OptimizerState::adam();
  model.ema_params() = model.params();

  std::vector<int> order(static_cast<size_t>(train_x.rows()));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  SurrogateModel ema_view = model;  // scratch clone scored with EMA weights
  std::vector<double> best_raw = model.params();
  std::vector<double> best_ema = model.ema_params();
  int streak = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * epoch /
                                      std::max(1, cfg.epochs)));
    rng.shuffle(order);

    double train_loss_sum = 0.0;
    const int n = train_x.rows();
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      const Matrix bx = gather_rows(train_x, order, start, stop);
      const Matrix by = gather_rows(train_y, order, start, stop);
      LossResult lr_res = loss_and_grads(model, bx, &by, cfg.loss, ParamFilter::All);
      train_loss_sum += lr_res.loss * (stop - start);

      if (cfg.clip_norm > 0.0) {
        const double gn = lr_res.grads.global_norm();
        if (gn > cfg.clip_norm) lr_res.grads.scale(cfg.clip_norm / gn);
      }
      optimizer_step(model, lr_res.grads, opt, lr);

      if (cfg.weight_decay > 0.0) {
        for (const TensorInfo& t : model.layout()) {
          if (t.layer_norm || t.rows == 1) continue;  // dense weight matrices only
          double* p = model.params().data() + t.offset;
          const size_t cnt = static_cast<size_t>(t.rows) * t.cols;
          for (size_t k = 0; k < cnt; ++k) p[k] -= lr * cfg.weight_decay * p[k];
        }
      }

      auto& ema = model.ema_params();
      const auto& raw = model.params();
      for (size_t k = 0; k < ema.size(); ++k)
        ema[k] = cfg.ema_decay * ema[k] + (1.0 - cfg.ema_decay) * raw[k];
    }
    const double train_loss = train_loss_sum / n;

    ema_view.params() = model.ema_params();
    double val_rmse = 0.0;
    const double val_loss = eval_loss(ema_view, val_x, val_y, cfg.loss, &val_rmse);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      fail_numeric("pretrain: diverged at epoch " + std::to_string(epoch));

    res.history.push_back({epoch, train_loss, val_loss, val_rmse, lr});
    res.epochs_run = epoch + 1;

    if (val_loss < res.best_val_loss) {
      res.best_val_loss = val_loss;
      res.best_epoch = epoch;
      best_raw = model.params();
      best_ema = model.ema_params();
      streak = 0;
    } else if (++streak > cfg.patience) {
      break;
    }
  }

  model.params() = std::move(best_raw);
  model.ema_params() = std::move(best_ema);
  model.trained_epochs += res.epochs_run;
  return res;
}

// ===== checkpoints =========================================================

void save_checkpoint(const SurrogateModel& model, const std::string& path) {
  io::BinaryWriter w;
  w.magic("STTCKPT1");
  w.u32(1);
  nlohmann::json meta{{"spec", model.spec().to_json()},
                      {"trained_epochs", model.trained_epochs}};
  w.string32(meta.dump());
  w.u64(model.n_params());
  w.bytes(model.params().data(), model.n_params() * sizeof(double));
  w.u8(model.has_ema() ? 1 : 0);
  if (model.has_ema())
    w.bytes(model.ema_params().data(), model.n_params() * sizeof(double));
  w.finish_to_file(path);
}

SurrogateModel load_checkpoint(const std::string& path) {
  io::BinaryReader r(path, "STTCKPT1");
  const uint32_t version = r.u32();
  if (version != 1)
    fail_format(path + ": unsupported checkpoint version " + std::to_string(version));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.string32());
  } catch (const nlohmann::json::exception& e) {
    fail_format(path + ": bad checkpoint metadata: " + e.what());
  }
  SurrogateModel model = SurrogateModel::build(SurrogateSpec::from_json(meta.at("spec")));
  model.trained_epochs = meta.value("trained_epochs", 0);

  const uint64_t n = r.u64();
  if (n != model.n_params())
    fail_format(path + ": parameter count disagrees with spec");
  model.params() = r.f64_block(n);
  if (r.u8() != 0) model.ema_ = r.f64_block(n);
  return model;
}

}  // namespace satts::surrogate
